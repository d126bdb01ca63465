#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>

#include "test_support.hpp"
#include "ufa/error.hpp"
#include "ufa/gradcheck.hpp"
#include "ufa/model.hpp"

using namespace ufa;

namespace {

ModelConfig tiny(std::size_t vocab = 50) {
  ModelConfig c;
  c.n_encoder_layers = 2;
  c.n_decoder_layers = 2;
  c.n_heads = 2;
  c.d_model = 16;
  c.head_dim = 0;
  c.vocab_size = vocab;
  c.relpos_buckets = 8;
  c.relpos_max_distance = 16;
  c.dropout_rate = 0.0;
  c.max_source_length = 32;
  c.max_target_length = 16;
  return c;
}

std::vector<float> row_logits(const Tensor<float>& logits, std::size_t b, std::size_t t) {
  const std::size_t T = logits.dim(1), V = logits.dim(2);
  auto d = logits.data();
  return {d.begin() + static_cast<std::ptrdiff_t>((b * T + t) * V),
          d.begin() + static_cast<std::ptrdiff_t>((b * T + t + 1) * V)};
}

void check_close(const std::vector<float>& a, const std::vector<float>& b, double tol = 1e-5) {
  REQUIRE(a.size() == b.size());
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - b[i]));
  CHECK(worst < tol);
}

}  // namespace

TEST_CASE("config validation names the field") {
  auto c = tiny();
  c.vocab_size = 0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("vocab_size"), ConfigError);
  c = tiny();
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c.head_dim = 4;
  CHECK_NOTHROW(c.validate());
  c = tiny();
  c.dropout_rate = 1.0;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("dropout_rate"), ConfigError);
}

TEST_CASE("parameter count has the closed form") {
  for (bool tied : {true, false}) {
    auto c = tiny(300);
    c.tie_embeddings = tied;
    c.head_dim = 6;
    const std::size_t d = c.d_model, a = c.n_heads * 6, f = 4 * d, V = 300;
    const std::size_t enc = 2 * d + 4 * d * a + 2 * d * f;
    const std::size_t dec = 3 * d + 8 * d * a + 2 * d * f;
    const std::size_t expected = V * d + 2 * c.relpos_buckets * c.n_heads + 2 * d + 2 * enc + 2 * dec + (tied ? 0 : V * d);
    CHECK(parameter_count(c) == expected);
    Transformer<float> m(c, 1);
    std::size_t actual = 0;
    for (const auto& [name, t] : m.parameters()) actual += t.size();
    CHECK(actual == expected);
  }
  ModelConfig full_size;
  full_size.vocab_size = 32000;
  CHECK(parameter_count(full_size) > 50'000'000);
}

TEST_CASE("relative position buckets") {
  CHECK(relative_position_bucket(0, true, 32, 128) == 0);
  CHECK(relative_position_bucket(-1, true, 32, 128) == 1);
  CHECK(relative_position_bucket(1, true, 32, 128) == 17);
  CHECK(relative_position_bucket(-8, true, 32, 128) == 8);
  CHECK(relative_position_bucket(-1000, true, 32, 128) == 15);
  CHECK(relative_position_bucket(1000, true, 32, 128) == 31);
  CHECK(relative_position_bucket(3, false, 32, 128) == 0);
  CHECK(relative_position_bucket(-20, false, 32, 128) == 17);
  CHECK(relative_position_bucket(-5000, false, 32, 128) == 31);
  int prev = 0;
  for (long r = 0; r > -400; --r) {
    const int b = relative_position_bucket(r, false, 32, 128);
    CHECK(b >= prev);
    prev = b;
  }
}

TEST_CASE("forward shapes and zero-parameter logits give ln V") {
  Transformer<float> m(tiny(), 3);
  auto input = pack({{5, 6, 7, 1}, {8, 1}});
  auto target = pack({{9, 10, 1}, {11, 1}});
  auto logits = m.forward(input, target);
  CHECK(logits.shape() == Shape{2, 3, 50});

  ParameterMap<float> zeros;
  for (const auto& [name, shape] : parameter_shapes(tiny())) {
    const bool norm = name.find("norm") != std::string::npos;
    zeros.emplace(name, Tensor<float>(shape, norm ? 1.0f : 0.0f));
  }
  Transformer<float> flat(tiny(), std::move(zeros));
  CHECK(flat.loss(input, target).item() == doctest::Approx(std::log(50.0)).epsilon(1e-6));
}

TEST_CASE("decoder is causal") {
  Transformer<float> m(tiny(), 4);
  auto input = pack({{5, 6, 7, 8, 1}});
  std::vector<int> tgt{9, 10, 11, 12, 1};
  auto base = m.forward(input, pack({tgt}));
  for (std::size_t j = 0; j < tgt.size(); ++j) {
    auto changed = tgt;
    changed[j] = 20 + static_cast<int>(j);
    auto out = m.forward(input, pack({changed}));
    // Logits at step t see targets before t only.
    for (std::size_t t = 0; t <= j; ++t) check_close(row_logits(base, 0, t), row_logits(out, 0, t), 0.0 + 1e-7);
    if (j + 1 < tgt.size()) {
      const auto a = row_logits(base, 0, j + 1), b = row_logits(out, 0, j + 1);
      CHECK(a != b);
    }
  }
}

TEST_CASE("padding and batch neighbours do not change a row") {
  Transformer<float> m(tiny(), 5);
  auto alone = m.forward(pack({{5, 6, 7, 1}}), pack({{9, 10, 1}}));
  auto padded = m.forward(pack({{5, 6, 7, 1, 0, 0, 0}}), pack({{9, 10, 1}}));
  auto batched = m.forward(pack({{5, 6, 7, 1}, {12, 13, 14, 15, 16, 17, 1}}), pack({{9, 10, 1, 0}, {3, 4, 5, 1}}));
  for (std::size_t t = 0; t < 3; ++t) {
    check_close(row_logits(alone, 0, t), row_logits(padded, 0, t));
    check_close(row_logits(alone, 0, t), row_logits(batched, 0, t));
  }
}

TEST_CASE("positions are relative only") {
  // Left padding shifts every real token by one absolute position; padded keys
  // are masked, so only relative distances reach the scores.
  Transformer<float> m(tiny(), 6);
  auto plain = m.forward(pack({{5, 6, 7, 1}}), pack({{9, 10, 1}}));
  auto shifted = m.forward(pack({{0, 0, 5, 6, 7, 1}}), pack({{9, 10, 1}}));
  for (std::size_t t = 0; t < 3; ++t) check_close(row_logits(plain, 0, t), row_logits(shifted, 0, t));
  auto enc = m.encode(pack({{5, 6, 1}, {5, 6, 7, 1}}));
  CHECK(enc.hidden.shape() == Shape{2, 4, 16});
  CHECK(enc.key_valid == std::vector<std::uint8_t>{1, 1, 1, 0, 1, 1, 1, 1});
}

TEST_CASE("contract errors") {
  auto c = tiny();
  Transformer<float> m(c, 7);
  CHECK_THROWS_AS(m.forward(pack({{5, 60}}), pack({{1}})), ContractError);
  CHECK_THROWS_AS(m.loss(pack({{5}}), pack({{0, 0}})), ContractError);
  std::vector<int> long_src(c.max_source_length + 1, 5);
  CHECK_THROWS_AS(m.forward(pack({long_src}), pack({{1}})), LengthError);
  std::vector<int> long_tgt(c.max_target_length + 1, 5);
  CHECK_THROWS_AS(m.forward(pack({{5}}), pack({long_tgt})), LengthError);
  CHECK_THROWS_AS(m.forward(pack({{5}, {6}}), pack({{1}})), ShapeError);
}

TEST_CASE("full tiny-model loss gradient matches central differences") {
  auto c = tiny();
  c.dropout_rate = 0.0;
  Transformer<double> m = Transformer<float>(c, 8).cast<double>();
  auto input = pack({{5, 6, 7, 1}, {8, 9, 1}});
  auto target = pack({{10, 11, 1}, {12, 1}});
  std::vector<Tensor<double>> leaves;
  for (auto& [name, t] : m.parameters()) leaves.push_back(t);
  const double err = finite_difference_check([&] { return m.loss(input, target); }, leaves, 1e-5);
  CHECK(err < 1e-4);
}

TEST_CASE("dropout only with an rng and is seeded") {
  auto c = tiny();
  c.dropout_rate = 0.3;
  Transformer<float> m(c, 9);
  auto input = pack({{5, 6, 7, 1}});
  auto target = pack({{9, 10, 1}});
  const float eval_a = m.loss(input, target).item(), eval_b = m.loss(input, target).item();
  CHECK(eval_a == eval_b);
  Rng r1(1), r2(1);
  const float train_a = m.loss(input, target, &r1).item(), train_b = m.loss(input, target, &r2).item();
  CHECK(train_a == train_b);
  CHECK(train_a != eval_a);
}

TEST_CASE("checkpoint round trip is bitwise and errors are typed") {
  testing::TempDir dir("ckpt");
  auto c = tiny();
  c.tie_embeddings = false;
  Transformer<float> m(c, 10);
  save_checkpoint(dir / "a.ckpt", m);
  auto back = load_checkpoint(dir / "a.ckpt");
  CHECK(back.config() == c);
  for (const auto& [name, t] : m.parameters()) {
    const auto& u = back.parameters().at(name);
    CHECK(u.shape() == t.shape());
    CHECK(std::equal(t.data().begin(), t.data().end(), u.data().begin()));
  }
  save_checkpoint(dir / "b.ckpt", back);
  CHECK(testing::read_file(dir / "a.ckpt") == testing::read_file(dir / "b.ckpt"));
  CHECK(testing::read_file(dir / "a.ckpt").rfind("UFACKPT1\n", 0) == 0);

  auto other = c;
  other.d_model = 32;
  CHECK_THROWS_WITH_AS(load_checkpoint(dir / "a.ckpt", other), doctest::Contains("expected"), CheckpointError);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing.ckpt"), IoError);
  const std::string bytes = testing::read_file(dir / "a.ckpt");
  testing::write_file(dir / "trunc.ckpt", bytes.substr(0, bytes.size() - 7));
  CHECK_THROWS_AS(load_checkpoint(dir / "trunc.ckpt"), FormatError);
  testing::write_file(dir / "magic.ckpt", "NOPE\n" + bytes);
  CHECK_THROWS_AS(load_checkpoint(dir / "magic.ckpt"), FormatError);

  ParameterMap<float> wrong = m.parameters();
  wrong.erase("lm_head");
  CHECK_THROWS_AS(Transformer<float>(c, std::move(wrong)), CheckpointError);
}

TEST_CASE("pack and shift_right") {
  auto b = pack({{1, 2, 3}, {4}});
  CHECK(b.cols == 3);
  CHECK(b.ids == std::vector<int>{1, 2, 3, 4, 0, 0});
  CHECK(shift_right(b).ids == std::vector<int>{0, 1, 2, 0, 4, 0});
}
