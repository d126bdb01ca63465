#include "ufa/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include "ufa/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace ufa {

namespace {

#if defined(__GLIBC__)
// Activation buffers are allocated and freed every step. Keeping them on the
// heap instead of fresh mmaps avoids a page fault per 4 KiB on every fill.
const bool kHeapTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 512 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
#endif

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  if (shape.size() == 1) os << ',';
  os << ')';
  return os.str();
}

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) : node_(std::make_shared<TensorNode<T>>()) {
  node_->value.assign(numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const int r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
T Tensor<T>::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  Tensor out(shape(), node_->value);
  out.node_->requires_grad = node_->requires_grad;
  return out;
}

namespace {

template <typename T>
thread_local Tape<T>* g_active_tape = nullptr;

}  // namespace

template <typename T>
Tape<T>* Tape<T>::active() {
  return g_active_tape<T>;
}

template <typename T>
TapeScope<T>::TapeScope(Tape<T>& tape) : previous_(g_active_tape<T>) {
  g_active_tape<T> = &tape;
}

template <typename T>
TapeScope<T>::~TapeScope() {
  g_active_tape<T> = previous_;
}

template <typename T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("<undefined>")));
  }
  if (!loss.requires_grad()) throw ContractError("backward: loss was not produced through the tape");
  loss.node()->grad_buffer()[0] += T(1);
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
}

template <>
void gemm<float>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                 float alpha, const float* a, std::size_t lda, const float* b, std::size_t ldb,
                 float beta, float* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

template <>
void gemm<double>(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                  double alpha, const double* a, std::size_t lda, const double* b, std::size_t ldb,
                  double beta, double* c, std::size_t ldc) {
  if (m == 0 || n == 0) return;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans, trans_b ? CblasTrans : CblasNoTrans,
              static_cast<int>(m), static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c, static_cast<int>(ldc));
}

namespace {

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (Tape<T>::active() == nullptr) return false;
  for (const auto* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> output(Shape shape, bool grad) {
  Tensor<T> out(std::move(shape));
  out.set_requires_grad(grad);
  return out;
}

template <typename T>
void record(std::function<void()> fn) {
  Tape<T>::active()->record(std::move(fn));
}

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// Splits a shape around `axis` into (outer, n, inner).
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Broadcast plan for a binary elementwise op.
struct Broadcast {
  Shape out;
  enum class Kind { same, suffix_b, suffix_a, general } kind = Kind::general;
  std::vector<std::size_t> stride_a, stride_b;  // zero on broadcast axes, in out-index space
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  Broadcast p;
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  auto at = [&](const Shape& s, std::size_t i) -> std::size_t {
    const std::size_t off = r - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = at(a, i), db = at(b, i);
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
    }
    p.out[i] = std::max(da, db);
  }
  if (a == b) {
    p.kind = Broadcast::Kind::same;
    return p;
  }
  auto is_suffix = [&](const Shape& small, const Shape& big) {
    if (big != p.out || small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
  };
  if (is_suffix(b, a)) {
    p.kind = Broadcast::Kind::suffix_b;
    return p;
  }
  if (is_suffix(a, b)) {
    p.kind = Broadcast::Kind::suffix_a;
    return p;
  }
  auto strides = [&](const Shape& s) {
    std::vector<std::size_t> st(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      const std::size_t d = at(s, i);
      st[i] = d == 1 ? 0 : acc;
      acc *= d;
    }
    return st;
  };
  p.stride_a = strides(a);
  p.stride_b = strides(b);
  return p;
}

// Calls f(i, ia, ib) for every output index i with the matching input offsets.
template <typename F>
void for_each_broadcast(const Broadcast& p, std::size_t size_a, std::size_t size_b, F&& f) {
  const std::size_t n = numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case Broadcast::Kind::suffix_b:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % size_b);
      return;
    case Broadcast::Kind::suffix_a:
      for (std::size_t i = 0; i < n; ++i) f(i, i % size_a, i);
      return;
    case Broadcast::Kind::general:
      break;
  }
  const std::size_t r = p.out.size();
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < n; ++i) {
    f(i, ia, ib);
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      ia += p.stride_a[d];
      ib += p.stride_b[d];
      if (idx[d] < p.out[d]) break;
      ia -= p.stride_a[d] * idx[d];
      ib -= p.stride_b[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = plan_broadcast(a.shape(), b.shape(), "add");
  const bool grad = recording<T>({&a, &b});
  auto out = output<T>(plan.out, grad);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  if (plan.kind == Broadcast::Kind::same) {
    for (std::size_t i = 0; i < out.size(); ++i) po[i] = pa[i] + pb[i];
  } else {
    for_each_broadcast(plan, a.size(), b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
      po[i] = pa[ia] + pb[ib];
    });
  }
  if (grad) {
    record<T>([a, b, out, plan] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      T* ga = a.requires_grad() ? a.node()->grad_buffer() : nullptr;
      T* gb = b.requires_grad() ? b.node()->grad_buffer() : nullptr;
      for_each_broadcast(plan, a.size(), b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += g[i];
        if (gb) gb[ib] += g[i];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> multiply(const Tensor<T>& a, const Tensor<T>& b) {
  const auto plan = plan_broadcast(a.shape(), b.shape(), "multiply");
  const bool grad = recording<T>({&a, &b});
  auto out = output<T>(plan.out, grad);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for_each_broadcast(plan, a.size(), b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
    po[i] = pa[ia] * pb[ib];
  });
  if (grad) {
    record<T>([a, b, out, plan] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      T* ga = a.requires_grad() ? a.node()->grad_buffer() : nullptr;
      T* gb = b.requires_grad() ? b.node()->grad_buffer() : nullptr;
      for_each_broadcast(plan, a.size(), b.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) {
        if (ga) ga[ia] += g[i] * pb[ib];
        if (gb) gb[ib] += g[i] * pa[ia];
      });
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  const bool grad = recording<T>({&a});
  auto out = output<T>(a.shape(), grad);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * factor;
  if (grad) {
    record<T>([a, out, factor] {
      auto on = out.node();
      if (on->grad.empty()) return;
      T* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul: operands need rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1);
  const std::size_t bk = transpose_b ? b.dim(-1) : b.dim(-2);
  const std::size_t n = transpose_b ? b.dim(-2) : b.dim(-1);
  if (k != bk) {
    throw ShapeError("matmul: inner dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + (transpose_b ? " (b transposed)" : ""));
  }
  const bool shared_b = b.rank() == 2;
  Shape lead(a.shape().begin(), a.shape().end() - 2);
  if (!shared_b && !std::equal(lead.begin(), lead.end(), b.shape().begin(), b.shape().end() - 2)) {
    throw ShapeError("matmul: batch dimensions differ for " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  if (!shared_b && a.rank() != b.rank()) {
    throw ShapeError("matmul: rank mismatch for " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  const bool grad = recording<T>({&a, &b});
  auto out = output<T>(out_shape, grad);
  const std::size_t batch = numel(lead);
  const std::size_t ldb = transpose_b ? k : n;
  if (shared_b) {
    gemm<T>(false, transpose_b, batch * m, n, k, T(1), a.data().data(), k, b.data().data(), ldb, T(0),
            out.data().data(), n);
  } else {
    for (std::size_t i = 0; i < batch; ++i) {
      gemm<T>(false, transpose_b, m, n, k, T(1), a.data().data() + i * m * k, k,
              b.data().data() + i * k * n, ldb, T(0), out.data().data() + i * m * n, n);
    }
  }
  if (grad) {
    record<T>([a, b, out, m, n, k, batch, shared_b, transpose_b, ldb] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const T* pa = a.data().data();
      const T* pb = b.data().data();
      if (a.requires_grad()) {
        T* ga = a.node()->grad_buffer();
        // dA = dC * op(B)^T
        if (shared_b) {
          gemm<T>(false, !transpose_b, batch * m, k, n, T(1), g, n, pb, ldb, T(1), ga, k);
        } else {
          for (std::size_t i = 0; i < batch; ++i) {
            gemm<T>(false, !transpose_b, m, k, n, T(1), g + i * m * n, n, pb + i * k * n, ldb, T(1),
                    ga + i * m * k, k);
          }
        }
      }
      if (b.requires_grad()) {
        T* gb = b.node()->grad_buffer();
        // dB = A^T * dC, or dC^T * A when B is stored transposed.
        if (shared_b) {
          if (transpose_b) {
            gemm<T>(true, false, n, k, batch * m, T(1), g, n, pa, k, T(1), gb, k);
          } else {
            gemm<T>(true, false, k, n, batch * m, T(1), pa, k, g, n, T(1), gb, n);
          }
        } else {
          for (std::size_t i = 0; i < batch; ++i) {
            if (transpose_b) {
              gemm<T>(true, false, n, k, m, T(1), g + i * m * n, n, pa + i * m * k, k, T(1),
                      gb + i * k * n, k);
            } else {
              gemm<T>(true, false, k, n, m, T(1), pa + i * m * k, k, g + i * m * n, n, T(1),
                      gb + i * k * n, n);
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw ShapeError("permute: expected " + std::to_string(r) + " axes for " + shape_str(a.shape()));
  std::vector<bool> seen(r, false);
  for (auto ax : axes) {
    if (ax >= r || seen[ax]) throw ShapeError("permute: invalid axis order for " + shape_str(a.shape()));
    seen[ax] = true;
  }
  Shape out_shape(r);
  std::vector<std::size_t> in_stride(r), src_stride(r);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    in_stride[i] = acc;
    acc *= a.shape()[i];
  }
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = a.shape()[axes[i]];
    src_stride[i] = in_stride[axes[i]];
  }
  // map[i] = source offset of output element i
  const std::size_t n = a.size();
  std::vector<std::size_t> map(n);
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      map[i] = off;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        off += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        off -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const bool grad = recording<T>({&a});
  auto out = output<T>(out_shape, grad);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < n; ++i) po[i] = pa[map[i]];
  if (grad) {
    record<T>([a, out, map = std::move(map)] {
      auto on = out.node();
      if (on->grad.empty()) return;
      T* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < map.size(); ++i) ga[map[i]] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose: rank >= 2 required, got " + shape_str(a.shape()));
  std::vector<std::size_t> axes(a.rank());
  std::iota(axes.begin(), axes.end(), std::size_t{0});
  std::swap(axes[a.rank() - 1], axes[a.rank() - 2]);
  return permute(a, axes);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  const bool grad = recording<T>({&a});
  Tensor<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  out.set_requires_grad(grad);
  if (grad) {
    record<T>([a, out] {
      auto on = out.node();
      if (on->grad.empty()) return;
      T* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch at " + shape_str(s));
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != ax && s[i] != parts[0].shape()[i]) {
        throw ShapeError("concat: shapes " + shape_str(parts[0].shape()) + " and " + shape_str(s) +
                         " differ off the concat axis");
      }
    }
    out_shape[ax] += s[ax];
  }
  bool grad = false;
  if (Tape<T>::active() != nullptr) {
    for (const auto& p : parts) grad = grad || p.requires_grad();
  }
  auto out = output<T>(out_shape, grad);
  const auto sp = split_at(out_shape, ax);
  std::size_t offset = 0;  // along axis
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const std::size_t len = p.shape()[ax];
    for (std::size_t o = 0; o < sp.outer; ++o) {
      std::copy_n(p.data().data() + o * len * sp.inner, len * sp.inner,
                  out.data().data() + (o * sp.n + offset) * sp.inner);
    }
    offset += len;
  }
  if (grad) {
    record<T>([parts, out, sp, ax, offsets] {
      auto on = out.node();
      if (on->grad.empty()) return;
      for (std::size_t j = 0; j < parts.size(); ++j) {
        if (!parts[j].requires_grad()) continue;
        T* gp = parts[j].node()->grad_buffer();
        const std::size_t len = parts[j].shape()[ax];
        for (std::size_t o = 0; o < sp.outer; ++o) {
          const T* src = on->grad.data() + (o * sp.n + offsets[j]) * sp.inner;
          T* dst = gp + o * len * sp.inner;
          for (std::size_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const int> ids, const Shape& ids_shape) {
  if (table.rank() < 1) throw ShapeError("embedding_gather: table must have rank >= 1");
  if (numel(ids_shape) != ids.size()) {
    throw ShapeError("embedding_gather: ids shape " + shape_str(ids_shape) + " does not hold " +
                     std::to_string(ids.size()) + " ids");
  }
  const std::size_t rows = table.shape()[0];
  const std::size_t width = table.size() / std::max<std::size_t>(rows, 1);
  Shape out_shape = ids_shape;
  out_shape.insert(out_shape.end(), table.shape().begin() + 1, table.shape().end());
  const bool grad = recording<T>({&table});
  auto out = output<T>(out_shape, grad);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= rows) {
      throw ShapeError("embedding_gather: id " + std::to_string(ids[i]) + " outside table " +
                       shape_str(table.shape()));
    }
    std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * width, width,
                out.data().data() + i * width);
  }
  if (grad) {
    std::vector<int> idv(ids.begin(), ids.end());
    record<T>([table, out, idv = std::move(idv), width] {
      auto on = out.node();
      if (on->grad.empty()) return;
      T* gt = table.node()->grad_buffer();
      for (std::size_t i = 0; i < idv.size(); ++i) {
        const T* src = on->grad.data() + i * width;
        T* dst = gt + static_cast<std::size_t>(idv[i]) * width;
        for (std::size_t j = 0; j < width; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "softmax");
  const auto sp = split_at(a.shape(), ax);
  const bool grad = recording<T>({&a});
  auto out = output<T>(a.shape(), grad);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T mx = pa[base];
      for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, pa[base + j * sp.inner]);
      T total = 0;
      for (std::size_t j = 0; j < sp.n; ++j) {
        const T e = std::exp(pa[base + j * sp.inner] - mx);
        po[base + j * sp.inner] = e;
        total += e;
      }
      const T inv = T(1) / total;
      for (std::size_t j = 0; j < sp.n; ++j) po[base + j * sp.inner] *= inv;
    }
  }
  if (grad) {
    record<T>([a, out, sp] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* y = on->value.data();
      const T* g = on->grad.data();
      T* ga = a.node()->grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.n * sp.inner + in;
          T dot = 0;
          for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t q = base + j * sp.inner;
            ga[q] += y[q] * (g[q] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> rms_normalize(const Tensor<T>& a, int axis, T eps) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "rms_normalize");
  const auto sp = split_at(a.shape(), ax);
  const bool grad = recording<T>({&a});
  auto out = output<T>(a.shape(), grad);
  std::vector<T> inv_rms(sp.outer * sp.inner);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t o = 0; o < sp.outer; ++o) {
    for (std::size_t in = 0; in < sp.inner; ++in) {
      const std::size_t base = o * sp.n * sp.inner + in;
      T ss = 0;
      for (std::size_t j = 0; j < sp.n; ++j) ss += pa[base + j * sp.inner] * pa[base + j * sp.inner];
      const T r = T(1) / std::sqrt(ss / static_cast<T>(sp.n) + eps);
      inv_rms[o * sp.inner + in] = r;
      for (std::size_t j = 0; j < sp.n; ++j) po[base + j * sp.inner] = pa[base + j * sp.inner] * r;
    }
  }
  if (grad) {
    record<T>([a, out, sp, inv_rms = std::move(inv_rms)] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* y = on->value.data();
      const T* g = on->grad.data();
      T* ga = a.node()->grad_buffer();
      for (std::size_t o = 0; o < sp.outer; ++o) {
        for (std::size_t in = 0; in < sp.inner; ++in) {
          const std::size_t base = o * sp.n * sp.inner + in;
          const T r = inv_rms[o * sp.inner + in];
          T dot = 0;
          for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
          dot /= static_cast<T>(sp.n);
          for (std::size_t j = 0; j < sp.n; ++j) {
            const std::size_t q = base + j * sp.inner;
            ga[q] += r * (g[q] - y[q] * dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const bool grad = recording<T>({&a});
  auto out = output<T>(a.shape(), grad);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] > T(0) ? pa[i] : T(0);
  if (grad) {
    record<T>([a, out] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* pa = a.data().data();
      const T* g = on->grad.data();
      T* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < on->grad.size(); ++i) ga[i] += pa[i] > T(0) ? g[i] : T(0);
    });
  }
  return out;
}

template <typename T>
Tensor<T> cross_entropy_with_ignore(const Tensor<T>& logits, std::span<const int> targets, int ignore_id) {
  if (logits.rank() < 1) throw ShapeError("cross_entropy_with_ignore: logits must have rank >= 1");
  const std::size_t v = logits.dim(-1);
  const std::size_t rows = logits.size() / std::max<std::size_t>(v, 1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_with_ignore: logits " + shape_str(logits.shape()) + " need " +
                     std::to_string(rows) + " targets, got " + std::to_string(targets.size()));
  }
  std::size_t count = 0;
  for (int t : targets) {
    if (t == ignore_id) continue;
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw ShapeError("cross_entropy_with_ignore: target " + std::to_string(t) + " outside vocabulary of " +
                       std::to_string(v));
    }
    ++count;
  }
  const bool grad = recording<T>({&logits});
  auto out = output<T>(Shape{}, grad);
  const T* pl = logits.data().data();
  std::vector<T> lse(rows, T(0));
  T total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == ignore_id) continue;
    const T* row = pl + r * v;
    const T mx = *std::max_element(row, row + v);
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    lse[r] = mx + std::log(s);
    total += lse[r] - row[targets[r]];
  }
  out[0] = count ? total / static_cast<T>(count) : T(0);
  if (grad && count) {
    std::vector<int> tv(targets.begin(), targets.end());
    record<T>([logits, out, tv = std::move(tv), lse = std::move(lse), v, rows, count, ignore_id] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T scale_g = on->grad[0] / static_cast<T>(count);
      const T* pl = logits.data().data();
      T* gl = logits.node()->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r) {
        if (tv[r] == ignore_id) continue;
        const T* row = pl + r * v;
        T* grow = gl + r * v;
        for (std::size_t j = 0; j < v; ++j) grow[j] += scale_g * std::exp(row[j] - lse[r]);
        grow[tv[r]] -= scale_g;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double rate, Rng& rng) {
  if (rate <= 0.0) return a;
  if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
  const bool grad = recording<T>({&a});
  auto out = output<T>(a.shape(), grad);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // Two 32-bit draws per engine call; the rate is resolved to 2^-32.
  const auto threshold = static_cast<std::uint64_t>(rate * 4294967296.0);
  std::vector<T> mask(a.size());
  for (std::size_t i = 0; i < mask.size(); i += 2) {
    const std::uint64_t bits = rng.next();
    mask[i] = (bits & 0xffffffffu) < threshold ? T(0) : keep_scale;
    if (i + 1 < mask.size()) mask[i + 1] = (bits >> 32) < threshold ? T(0) : keep_scale;
  }
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (std::size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * mask[i];
  if (grad) {
    record<T>([a, out, mask = std::move(mask)] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      T* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < mask.size(); ++i) ga[i] += g[i] * mask[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  const bool grad = recording<T>({&a});
  auto out = output<T>(Shape{}, grad);
  T total = 0;
  for (T x : a.data()) total += x;
  out[0] = total;
  if (grad) {
    record<T>([a, out] {
      auto on = out.node();
      if (on->grad.empty()) return;
      T* ga = a.node()->grad_buffer();
      for (std::size_t i = 0; i < a.size(); ++i) ga[i] += on->grad[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scalar_mean(const Tensor<T>& a) {
  if (a.size() == 0) throw ShapeError("scalar_mean: empty tensor");
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}


template <typename T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                    const Tensor<T>* bias, std::span<const std::uint8_t> key_valid, bool causal) {
  if (q.rank() != 3 || k.rank() != 3 || v.shape() != k.shape() || q.dim(0) != k.dim(0) ||
      q.dim(2) != k.dim(2)) {
    throw ShapeError("attention: incompatible q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) +
                     ", v " + shape_str(v.shape()));
  }
  const std::size_t batch = q.dim(0), lq = q.dim(1), lk = k.dim(1), width = q.dim(2);
  if (heads == 0 || width % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(width) + " not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t dk = width / heads;
  if (bias != nullptr && bias->shape() != Shape{heads, lq, lk}) {
    throw ShapeError("attention: bias " + shape_str(bias->shape()) + " does not match " +
                     shape_str(Shape{heads, lq, lk}));
  }
  if (!key_valid.empty() && key_valid.size() != batch * lk) {
    throw ShapeError("attention: key mask has " + std::to_string(key_valid.size()) + " entries, expected " +
                     std::to_string(batch * lk));
  }
  const T scale_qk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
  bool grad = recording<T>({&q, &k, &v});
  if (bias != nullptr) grad = grad || recording<T>({bias});
  auto out = output<T>(Shape{batch, lq, width}, grad);
  std::vector<T> probs(batch * heads * lq * lk);
  std::vector<std::uint8_t> valid(key_valid.begin(), key_valid.end());
  const T* pq = q.data().data();
  const T* pk = k.data().data();
  const T* pv = v.data().data();
  const T* pb = bias != nullptr ? bias->data().data() : nullptr;
  T* po = out.data().data();
  auto masked = [&valid, lk, causal](std::size_t b, std::size_t i, std::size_t j) {
    return (causal && j > i) || (!valid.empty() && valid[b * lk + j] == 0);
  };
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      T* s = probs.data() + (b * heads + h) * lq * lk;
      gemm<T>(false, true, lq, lk, dk, scale_qk, pq + b * lq * width + h * dk, width,
              pk + b * lk * width + h * dk, width, T(0), s, lk);
      for (std::size_t i = 0; i < lq; ++i) {
        T* row = s + i * lk;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t j = 0; j < lk; ++j) {
          if (pb != nullptr) row[j] += pb[(h * lq + i) * lk + j];
          if (masked(b, i, j)) row[j] = T(-1e30);
          mx = std::max(mx, row[j]);
        }
        T total = 0;
        for (std::size_t j = 0; j < lk; ++j) {
          row[j] = std::exp(row[j] - mx);
          total += row[j];
        }
        const T inv = T(1) / total;
        for (std::size_t j = 0; j < lk; ++j) row[j] *= inv;
      }
      gemm<T>(false, false, lq, dk, lk, T(1), s, lk, pv + b * lk * width + h * dk, width, T(0),
              po + b * lq * width + h * dk, width);
    }
  }
  if (grad) {
    Tensor<T> bias_t = bias != nullptr ? *bias : Tensor<T>();
    record<T>([q, k, v, bias_t, out, probs = std::move(probs), batch, heads, lq, lk, width, dk, scale_qk] {
      auto on = out.node();
      if (on->grad.empty()) return;
      const T* g = on->grad.data();
      const T* pq = q.data().data();
      const T* pk = k.data().data();
      const T* pv = v.data().data();
      T* gq = q.requires_grad() ? q.node()->grad_buffer() : nullptr;
      T* gk = k.requires_grad() ? k.node()->grad_buffer() : nullptr;
      T* gv = v.requires_grad() ? v.node()->grad_buffer() : nullptr;
      T* gb = bias_t.defined() && bias_t.requires_grad() ? bias_t.node()->grad_buffer() : nullptr;
      std::vector<T> ds(lq * lk);
      for (std::size_t b = 0; b < batch; ++b) {
        for (std::size_t h = 0; h < heads; ++h) {
          const T* p = probs.data() + (b * heads + h) * lq * lk;
          const std::size_t qo = b * lq * width + h * dk;
          const std::size_t ko = b * lk * width + h * dk;
          if (gv) gemm<T>(true, false, lk, dk, lq, T(1), p, lk, g + qo, width, T(1), gv + ko, width);
          if (!gq && !gk && !gb) continue;
          // dP = dO V^T, then dS = P * (dP - rowsum(dP * P))
          gemm<T>(false, true, lq, lk, dk, T(1), g + qo, width, pv + ko, width, T(0), ds.data(), lk);
          for (std::size_t i = 0; i < lq; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < lk; ++j) dot += ds[i * lk + j] * p[i * lk + j];
            for (std::size_t j = 0; j < lk; ++j) ds[i * lk + j] = p[i * lk + j] * (ds[i * lk + j] - dot);
          }
          if (gb) {
            T* dst = gb + h * lq * lk;
            for (std::size_t i = 0; i < lq * lk; ++i) dst[i] += ds[i];
          }
          if (gq) gemm<T>(false, false, lq, dk, lk, scale_qk, ds.data(), lk, pk + ko, width, T(1), gq + qo, width);
          if (gk) gemm<T>(true, false, lk, dk, lq, scale_qk, ds.data(), lk, pq + qo, width, T(1), gk + ko, width);
        }
      }
    });
  }
  return out;
}

#define UFA_INSTANTIATE(T)                                                                      \
  template class Tensor<T>;                                                                     \
  template class Tape<T>;                                                                       \
  template class TapeScope<T>;                                                                  \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> multiply(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool);                          \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                \
  template Tensor<T> embedding_gather(const Tensor<T>&, std::span<const int>, const Shape&);    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                            \
  template Tensor<T> rms_normalize(const Tensor<T>&, int, T);                                   \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> cross_entropy_with_ignore(const Tensor<T>&, std::span<const int>, int);    \
  template Tensor<T> dropout(const Tensor<T>&, double, Rng&);                                   \
  template Tensor<T> scalar_mean(const Tensor<T>&);                                             \
  template Tensor<T> sum(const Tensor<T>&);                                                     \
  template Tensor<T> attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                               const Tensor<T>*, std::span<const std::uint8_t>, bool);

UFA_INSTANTIATE(float)
UFA_INSTANTIATE(double)

#undef UFA_INSTANTIATE

}  // namespace ufa
