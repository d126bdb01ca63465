#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ufa/rng.hpp"

namespace ufa {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;

  T* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

// Shared handle to a dense row-major array. Copies alias the same storage;
// use clone() for a deep copy.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);
  static Tensor scalar(T value) { return Tensor(Shape{}, std::vector<T>{value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  // Negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t size() const { return node_->value.size(); }

  std::span<T> data() { return node_->value; }
  std::span<const T> data() const { return node_->value; }
  T& operator[](std::size_t i) { return node_->value[i]; }
  T operator[](std::size_t i) const { return node_->value[i]; }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<T> grad() { return node_->grad; }
  std::span<const T> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Ordered record of the differentiable operations executed while the tape is
// active on the current thread. Entries are appended in execution order, so
// replaying them backwards visits every operation after all its consumers.
template <typename T>
class Tape {
 public:
  using Backward = std::function<void()>;

  void record(Backward fn) { entries_.push_back(std::move(fn)); }
  std::size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
  // Leaf gradients accumulate across calls until zero_grad().
  void backward(const Tensor<T>& loss);

  static Tape* active();

 private:
  template <typename>
  friend class TapeScope;
  std::vector<Backward> entries_;
};

// Makes `tape` the active tape of this thread for the scope's lifetime.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

// Differentiable primitives. Elementwise binary ops broadcast numpy-style.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
// a: (..., m, k); b: (k, n) or (..., k, n) with the same leading dims.
// With transpose_b, b is read as (..., n, k).
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);
// Rows of `table` selected by ids; result shape is ids_shape + table.shape[1:].
template <typename T> Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const int> ids, const Shape& ids_shape);
template <typename T> Tensor<T> softmax(const Tensor<T>& a, int axis = -1);
// x / sqrt(mean(x^2) + eps) along axis; no learned scale.
template <typename T> Tensor<T> rms_normalize(const Tensor<T>& a, int axis = -1, T eps = T(1e-6));
template <typename T> Tensor<T> relu(const Tensor<T>& a);
// Mean token cross entropy over positions whose target != ignore_id; zero when
// every position is ignored. logits: (..., V), one target per row.
template <typename T> Tensor<T> cross_entropy_with_ignore(const Tensor<T>& logits, std::span<const int> targets, int ignore_id);
// Inverted dropout; identity when rate == 0.
template <typename T> Tensor<T> dropout(const Tensor<T>& a, double rate, Rng& rng);
template <typename T> Tensor<T> scalar_mean(const Tensor<T>& a);
template <typename T> Tensor<T> sum(const Tensor<T>& a);

// Scaled dot-product attention over packed heads. q: (B, Lq, H*dk); k, v:
// (B, Lk, H*dk); bias: optional (H, Lq, Lk) added to the scores. Keys with
// key_valid[b*Lk + j] == 0 are masked, as are keys after the query when
// causal. Returns (B, Lq, H*dk).
template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const Tensor<T>* bias, std::span<const std::uint8_t> key_valid, bool causal);

// Row-major C = alpha * op(A) * op(B) + beta * C.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha,
          const T* a, std::size_t lda, const T* b, std::size_t ldb, T beta, T* c, std::size_t ldc);

}  // namespace ufa
