#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>

#include "ufa/error.hpp"
#include "ufa/gradcheck.hpp"
#include "ufa/rng.hpp"
#include "ufa/tensor.hpp"

using namespace ufa;
using TD = Tensor<double>;

namespace {

TD random_tensor(Shape shape, Rng& rng, double scale_by = 1.0) {
  TD t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal() * scale_by;
  return t;
}

// Weighted sum makes every output coordinate matter to the scalar.
TD probe(const TD& y, std::uint64_t seed = 11) {
  Rng rng(seed);
  TD w = random_tensor(y.shape(), rng);
  return sum(multiply(y, w));
}

constexpr double kTol = 1e-6;

// Direct loop attention used as the forward oracle.
std::vector<double> naive_attention(const TD& q, const TD& k, const TD& v, std::size_t heads, const TD* bias,
                                    const std::vector<std::uint8_t>& valid, bool causal) {
  const std::size_t B = q.dim(0), Lq = q.dim(1), Lk = k.dim(1), width = q.dim(2), dk = width / heads;
  std::vector<double> out(B * Lq * width, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      for (std::size_t i = 0; i < Lq; ++i) {
        std::vector<double> s(Lk, -std::numeric_limits<double>::infinity());
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < Lk; ++j) {
          if (!valid.empty() && !valid[b * Lk + j]) continue;
          if (causal && j > i) continue;
          double dot = 0;
          for (std::size_t d = 0; d < dk; ++d) {
            dot += q[(b * Lq + i) * width + h * dk + d] * k[(b * Lk + j) * width + h * dk + d];
          }
          s[j] = dot / std::sqrt(static_cast<double>(dk));
          if (bias) s[j] += (*bias)[(h * Lq + i) * Lk + j];
          mx = std::max(mx, s[j]);
        }
        double z = 0;
        for (auto& x : s) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < Lk; ++j) {
          for (std::size_t d = 0; d < dk; ++d) {
            out[(b * Lq + i) * width + h * dk + d] += s[j] / z * v[(b * Lk + j) * width + h * dk + d];
          }
        }
      }
    }
  }
  return out;
}

}  // namespace

TEST_CASE("shape helpers") {
  CHECK(numel({2, 3, 4}) == 24);
  CHECK(numel({}) == 1);
  TD t({2, 3});
  CHECK(t.dim(-1) == 3);
  CHECK(t.dim(0) == 2);
  CHECK_THROWS_AS(TD({2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(TD::scalar(1).dim(0), ShapeError);
  CHECK_THROWS_AS(TD({2}).item(), ShapeError);
  TD c = t.clone();
  c[0] = 5;
  CHECK(t[0] == 0);
}

TEST_CASE("forward values") {
  TD a({2, 2}, std::vector<double>{1, 2, 3, 4});
  TD b({2}, std::vector<double>{10, 20});
  CHECK(add(a, b).data()[3] == 24);
  CHECK(multiply(a, b).data()[2] == 30);
  auto m = matmul(a, a);
  CHECK(std::vector<double>(m.data().begin(), m.data().end()) == std::vector<double>{7, 10, 15, 22});
  auto mt = matmul(a, a, true);
  CHECK(std::vector<double>(mt.data().begin(), mt.data().end()) == std::vector<double>{5, 11, 11, 25});
  CHECK(transpose(a).data()[1] == 3);
  CHECK(sum(a).item() == 10);
  CHECK(scalar_mean(a).item() == 2.5);
  CHECK(relu(TD({2}, std::vector<double>{-1, 2})).data()[0] == 0);
  CHECK_THROWS_AS(add(a, TD({3})), ShapeError);
  CHECK_THROWS_AS(matmul(a, TD({3, 2})), ShapeError);
  CHECK_THROWS_AS(reshape(a, {3}), ShapeError);
}

TEST_CASE("softmax and rms properties") {
  Rng rng(2);
  TD x = random_tensor({3, 5}, rng, 10.0);
  auto s = softmax(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double z = 0;
    for (std::size_t c = 0; c < 5; ++c) {
      CHECK(s[r * 5 + c] >= 0);
      z += s[r * 5 + c];
    }
    CHECK(z == doctest::Approx(1.0).epsilon(1e-12));
  }
  TD huge({3}, std::vector<double>{1000, 1000, 1000});
  const auto sh = softmax(huge);
  for (double v : sh.data()) CHECK(v == doctest::Approx(1.0 / 3));
  auto n = rms_normalize(x);
  for (std::size_t r = 0; r < 3; ++r) {
    double ms = 0;
    for (std::size_t c = 0; c < 5; ++c) ms += n[r * 5 + c] * n[r * 5 + c];
    CHECK(ms / 5 == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("cross entropy") {
  TD logits({2, 4}, 0.0);
  std::vector<int> t{1, 3};
  CHECK(cross_entropy_with_ignore(logits, std::span<const int>(t), 0).item() == doctest::Approx(std::log(4.0)));
  std::vector<int> all_ignored{0, 0};
  CHECK(cross_entropy_with_ignore(logits, std::span<const int>(all_ignored), 0).item() == 0.0);
  std::vector<int> bad{1, 9};
  CHECK_THROWS(cross_entropy_with_ignore(logits, std::span<const int>(bad), 0));
}

TEST_CASE("dropout: rate zero is identity, otherwise inverted scaling") {
  Rng rng(3);
  TD x({10000}, 1.0);
  auto same = dropout(x, 0.0, rng);
  CHECK(same[5] == 1.0);
  auto d = dropout(x, 0.25, rng);
  std::size_t kept = 0;
  for (double v : d.data()) {
    if (v != 0) {
      CHECK(v == doctest::Approx(1.0 / 0.75));
      ++kept;
    }
  }
  CHECK(std::abs(static_cast<double>(kept) / 10000 - 0.75) < 0.02);
}

TEST_CASE("gradients of primitives match central differences") {
  Rng rng(42);
  const double eps = 1e-5;
  CHECK(finite_difference_check([](const TD& x) { return probe(add(x, x)); }, random_tensor({3, 4}, rng), eps) < kTol);
  TD bvec = random_tensor({4}, rng);
  CHECK(finite_difference_check([&](const TD& x) { return probe(add(x, bvec)); }, random_tensor({3, 4}, rng), eps) < kTol);
  CHECK(finite_difference_check([&](const TD& x) { return probe(multiply(bvec, x)); }, random_tensor({2, 3, 4}, rng), eps) < kTol);
  CHECK(finite_difference_check([&](const TD& x) { return probe(multiply(x, x)); }, random_tensor({5}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(scale(x, 3.5)); }, random_tensor({4}, rng), eps) < kTol);
  TD w = random_tensor({4, 3}, rng);
  CHECK(finite_difference_check([&](const TD& x) { return probe(matmul(x, w)); }, random_tensor({2, 5, 4}, rng), eps) < kTol);
  TD a = random_tensor({2, 5, 4}, rng);
  CHECK(finite_difference_check([&](const TD& x) { return probe(matmul(a, x)); }, random_tensor({4, 3}, rng), eps) < kTol);
  CHECK(finite_difference_check([&](const TD& x) { return probe(matmul(a, x, true)); }, random_tensor({2, 3, 4}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(transpose(x)); }, random_tensor({2, 3, 4}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(permute(x, {2, 0, 1})); }, random_tensor({2, 3, 4}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(reshape(x, {6, 2})); }, random_tensor({3, 4}, rng), eps) < kTol);
  TD other = random_tensor({2, 2}, rng);
  CHECK(finite_difference_check([&](const TD& x) { return probe(concat<double>({x, other, x}, 1)); }, random_tensor({2, 3}, rng), eps) < kTol);
  std::vector<int> ids{3, 0, 3, 1};
  CHECK(finite_difference_check([&](const TD& x) { return probe(embedding_gather(x, std::span<const int>(ids), Shape{2, 2})); },
                                random_tensor({5, 3}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(softmax(x)); }, random_tensor({3, 5}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(softmax(x, 0)); }, random_tensor({3, 5}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return probe(rms_normalize(x)); }, random_tensor({3, 6}, rng), eps) < kTol);
  // Keep relu inputs away from the kink.
  TD r = random_tensor({20}, rng);
  for (auto& v : r.data()) v += v > 0 ? 0.1 : -0.1;
  CHECK(finite_difference_check([](const TD& x) { return probe(relu(x)); }, r, eps) < kTol);
  std::vector<int> targets{2, 0, 4, 1};
  CHECK(finite_difference_check([&](const TD& x) { return cross_entropy_with_ignore(x, std::span<const int>(targets), 0); },
                                random_tensor({2, 2, 5}, rng), eps) < kTol);
  CHECK(finite_difference_check([](const TD& x) { return scalar_mean(multiply(x, x)); }, random_tensor({7}, rng), eps) < kTol);
  CHECK(finite_difference_check(
            [](const TD& x) {
              Rng drop(9);
              return probe(dropout(x, 0.3, drop));
            },
            random_tensor({30}, rng), eps) < kTol);
}

TEST_CASE("fused attention: forward matches loop oracle, gradients match differences") {
  Rng rng(8);
  const std::size_t B = 2, Lq = 3, Lk = 4, H = 2, dk = 3;
  TD q = random_tensor({B, Lq, H * dk}, rng);
  TD k = random_tensor({B, Lk, H * dk}, rng);
  TD v = random_tensor({B, Lk, H * dk}, rng);
  TD bias = random_tensor({H, Lq, Lk}, rng);
  std::vector<std::uint8_t> valid{1, 1, 0, 1, 1, 1, 1, 0};
  for (bool use_bias : {false, true}) {
    for (bool use_mask : {false, true}) {
      const std::vector<std::uint8_t> mask = use_mask ? valid : std::vector<std::uint8_t>{};
      const TD* bp = use_bias ? &bias : nullptr;
      auto out = attention<double>(q, k, v, H, bp, mask, false);
      const auto expected = naive_attention(q, k, v, H, bp, mask, false);
      for (std::size_t i = 0; i < expected.size(); ++i) CHECK(out[i] == doctest::Approx(expected[i]).epsilon(1e-12));
      auto f = [&] { return probe(attention<double>(q, k, v, H, bp, mask, false)); };
      std::vector<TD> leaves{q, k, v};
      if (use_bias) leaves.push_back(bias);
      CHECK(finite_difference_check(f, leaves, 1e-5) < kTol);
    }
  }
  TD qs = random_tensor({B, Lk, H * dk}, rng);
  auto causal = attention<double>(qs, k, v, H, nullptr, {}, true);
  const auto expected = naive_attention(qs, k, v, H, nullptr, {}, true);
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(causal[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  CHECK(finite_difference_check([&] { return probe(attention<double>(qs, k, v, H, nullptr, {}, true)); }, std::vector<TD>{qs, k, v}, 1e-5) < kTol);
  CHECK_THROWS_AS(attention<double>(q, k, v, 4, nullptr, {}, false), ShapeError);
}

TEST_CASE("gradients accumulate across backward calls and reset with zero_grad") {
  TD x({3}, std::vector<double>{1, 2, 3});
  x.set_requires_grad(true);
  Tape<double> tape;
  for (int pass = 0; pass < 2; ++pass) {
    tape.clear();
    TapeScope<double> scope(tape);
    auto loss = sum(multiply(x, x));
    tape.backward(loss);
  }
  CHECK(x.grad()[2] == doctest::Approx(12.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
  // Reused inputs sum their contributions.
  tape.clear();
  {
    TapeScope<double> scope(tape);
    auto loss = sum(add(multiply(x, x), scale(x, 2.0)));
    tape.backward(loss);
  }
  CHECK(x.grad()[0] == doctest::Approx(4.0));
}

TEST_CASE("no tape means no recording") {
  TD x({2}, 1.0);
  x.set_requires_grad(true);
  CHECK(Tape<double>::active() == nullptr);
  auto y = sum(x);
  CHECK(y.item() == 2.0);
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("gemm agrees with a naive product in all transpose modes") {
  Rng rng(1);
  const std::size_t m = 3, n = 4, k = 5;
  std::vector<float> a(m * k), b(k * n);
  for (auto& x : a) x = static_cast<float>(rng.normal());
  for (auto& x : b) x = static_cast<float>(rng.normal());
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      // Lay out the transposed copies so op(A) and op(B) are the same matrices.
      std::vector<float> A(a.size()), Bm(b.size());
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) (ta ? A[p * m + i] : A[i * k + p]) = a[i * k + p];
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) (tb ? Bm[j * k + p] : Bm[p * n + j]) = b[p * n + j];
      std::vector<float> c(m * n, 1.0f);
      gemm<float>(ta, tb, m, n, k, 2.0f, A.data(), ta ? m : k, Bm.data(), tb ? k : n, 0.5f, c.data(), n);
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double ref = 0;
          for (std::size_t p = 0; p < k; ++p) ref += a[i * k + p] * b[p * n + j];
          CHECK(c[i * n + j] == doctest::Approx(2 * ref + 0.5).epsilon(1e-5));
        }
      }
    }
  }
}
