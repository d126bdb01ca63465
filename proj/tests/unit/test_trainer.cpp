#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_support.hpp"
#include "ufa/error.hpp"
#include "ufa/trainer.hpp"

using namespace ufa;

namespace {

ModelConfig tiny(std::size_t vocab = 30) {
  ModelConfig c;
  c.n_encoder_layers = 1;
  c.n_decoder_layers = 1;
  c.n_heads = 2;
  c.d_model = 16;
  c.head_dim = 0;
  c.vocab_size = vocab;
  c.relpos_buckets = 8;
  c.relpos_max_distance = 16;
  c.dropout_rate = 0.0;
  c.max_source_length = 16;
  c.max_target_length = 8;
  return c;
}

PromptedExample example(std::string task, std::vector<int> in, std::vector<int> out) {
  PromptedExample e;
  e.task_name = std::move(task);
  e.input_ids = std::move(in);
  e.target_ids = std::move(out);
  return e;
}

std::map<std::string, std::vector<PromptedExample>> toy_data() {
  std::map<std::string, std::vector<PromptedExample>> d;
  for (int i = 0; i < 6; ++i) {
    d["copy"].push_back(example("copy", {5 + i, 6 + i, 7 + i}, {5 + i, 1}));
  }
  for (int i = 0; i < 3; ++i) d["rev"].push_back(example("rev", {10 + i, 20 + i}, {20 + i, 10 + i, 1}));
  return d;
}

// Straightforward reference update for one (r, c) matrix or vector.
void reference_step(std::vector<double>& x, const std::vector<double>& g, std::vector<double>& vr,
                    std::vector<double>& vc, std::size_t rows, std::size_t cols, std::size_t t, double lr) {
  const double beta = 1.0 - std::pow(double(t), -0.8);
  std::vector<double> u(x.size());
  if (rows > 1) {
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0;
      for (std::size_t c = 0; c < cols; ++c) s += g[r * cols + c] * g[r * cols + c] + 1e-30;
      vr[r] = beta * vr[r] + (1 - beta) * s;
    }
    for (std::size_t c = 0; c < cols; ++c) {
      double s = 0;
      for (std::size_t r = 0; r < rows; ++r) s += g[r * cols + c] * g[r * cols + c] + 1e-30;
      vc[c] = beta * vc[c] + (1 - beta) * s;
    }
    double tot = 0;
    for (double v : vr) tot += v;
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) u[r * cols + c] = g[r * cols + c] / std::sqrt(vr[r] * vc[c] / tot);
  } else {
    for (std::size_t i = 0; i < x.size(); ++i) {
      vc[i] = beta * vc[i] + (1 - beta) * (g[i] * g[i] + 1e-30);
      u[i] = g[i] / std::sqrt(vc[i]);
    }
  }
  double ss = 0;
  for (double v : u) ss += v * v;
  const double denom = std::max(1.0, std::sqrt(ss / double(u.size())));
  for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr * u[i] / denom;
}

void set_grad(Tensor<float>& t, const std::vector<double>& g) {
  float* buf = t.node()->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) buf[i] = static_cast<float>(g[i]);
}

}  // namespace

TEST_CASE("adafactor: scalar first step moves by the learning rate") {
  for (double g : {0.5, -3.0, 1e-3}) {
    ParameterMap<float> p;
    p.emplace("w", Tensor<float>(Shape{1}, std::vector<float>{1.0f}));
    set_grad(p.at("w"), {g});
    AdafactorState state;
    adafactor_step(p, state);
    CHECK(p.at("w")[0] == doctest::Approx(g > 0 ? 1.0 - 1e-4 : 1.0 + 1e-4).epsilon(1e-7));
    CHECK(state.step() == 1);
  }
}

TEST_CASE("adafactor: zero or missing gradient leaves parameters unchanged") {
  ParameterMap<float> p;
  p.emplace("m", Tensor<float>(Shape{3, 4}, 0.7f));
  p.emplace("v", Tensor<float>(Shape{5}, -0.2f));
  set_grad(p.at("m"), std::vector<double>(12, 0.0));
  AdafactorState state;
  for (int i = 0; i < 3; ++i) adafactor_step(p, state);
  for (float x : p.at("m").data()) CHECK(x == 0.7f);
  for (float x : p.at("v").data()) CHECK(x == -0.2f);
}

TEST_CASE("adafactor: factored memory is rows plus columns") {
  ParameterMap<float> p;
  p.emplace("a", Tensor<float>(Shape{64, 32}, 1.0f));
  p.emplace("b", Tensor<float>(Shape{2, 3, 5}, 1.0f));
  p.emplace("c", Tensor<float>(Shape{7}, 1.0f));
  AdafactorState state;
  adafactor_step(p, state);
  CHECK(state.accumulator_floats("a") == 64 + 32);
  CHECK(state.accumulator_floats("b") == 6 + 5);
  CHECK(state.accumulator_floats("c") == 7);
  CHECK(state.total_accumulator_floats() == 96 + 11 + 7);
}

TEST_CASE("adafactor: several steps match a reference implementation") {
  Rng rng(3);
  const std::size_t rows = 4, cols = 3;
  ParameterMap<float> p;
  std::vector<double> xm(rows * cols), xv(5);
  for (auto& x : xm) x = rng.normal();
  for (auto& x : xv) x = rng.normal();
  p.emplace("m", Tensor<float>(Shape{rows, cols}, std::vector<float>(xm.begin(), xm.end())));
  p.emplace("v", Tensor<float>(Shape{5}, std::vector<float>(xv.begin(), xv.end())));
  for (std::size_t i = 0; i < xm.size(); ++i) xm[i] = p.at("m")[i];
  for (std::size_t i = 0; i < xv.size(); ++i) xv[i] = p.at("v")[i];
  AdafactorConfig cfg;
  cfg.learning_rate = 0.01;
  AdafactorState state(cfg);
  std::vector<double> vr(rows, 0), vc(cols, 0), vr1(1, 0), vfull(5, 0);
  for (std::size_t t = 1; t <= 5; ++t) {
    std::vector<double> gm(rows * cols), gv(5);
    for (auto& g : gm) g = rng.normal() * 0.1;
    for (auto& g : gv) g = rng.normal() * 0.1;
    p.at("m").zero_grad();
    p.at("v").zero_grad();
    set_grad(p.at("m"), gm);
    set_grad(p.at("v"), gv);
    for (auto& g : gm) g = static_cast<float>(g);
    for (auto& g : gv) g = static_cast<float>(g);
    adafactor_step(p, state);
    reference_step(xm, gm, vr, vc, rows, cols, t, 0.01);
    reference_step(xv, gv, vr1, vfull, 1, 5, t, 0.01);
    for (std::size_t i = 0; i < xm.size(); ++i) CHECK(p.at("m")[i] == doctest::Approx(xm[i]).epsilon(1e-5));
    for (std::size_t i = 0; i < xv.size(); ++i) CHECK(p.at("v")[i] == doctest::Approx(xv[i]).epsilon(1e-5));
  }
}

TEST_CASE("adafactor: non-finite gradient names parameter and step") {
  ParameterMap<float> p;
  p.emplace("enc.w", Tensor<float>(Shape{2}, 1.0f));
  set_grad(p.at("enc.w"), {1.0, std::nan("")});
  AdafactorState state;
  CHECK_THROWS_WITH_AS(adafactor_step(p, state), doctest::Contains("enc.w"), TrainingError);
  CHECK_THROWS_WITH_AS(adafactor_step(p, state), doctest::Contains("step 1"), TrainingError);
}

TEST_CASE("learning-rate schedules and config validation") {
  AdafactorConfig c;
  CHECK(c.rate_at(1) == 1e-4);
  CHECK(c.rate_at(5000) == 1e-4);
  c.schedule = LrSchedule::inverse_sqrt;
  c.learning_rate = 0.01;
  c.warmup_steps = 100;
  CHECK(c.rate_at(50) == doctest::Approx(0.01));
  CHECK(c.rate_at(400) == doctest::Approx(0.005));
  AdafactorConfig bad;
  bad.learning_rate = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("plan validation and total steps") {
  TrainPlan plan;
  CHECK_THROWS_AS(plan.validate(), ConfigError);
  plan.tasks = {{"copy", 1.0}, {"rev", 1.0}};
  plan.batch_size = 4;
  plan.epochs = 3;
  CHECK_NOTHROW(plan.validate());
  CHECK(plan.total_steps(toy_data()) == 3 * 3);
  plan.max_steps = 7;
  CHECK(plan.total_steps(toy_data()) == 7);
  plan.tasks[0].weight = 0;
  CHECK_THROWS_WITH_AS(plan.validate(), doctest::Contains("copy"), ConfigError);
  CHECK(parse_stage(to_string(Stage::ufa_pretrain)) == Stage::ufa_pretrain);
  CHECK(parse_mixing("proportional") == Mixing::proportional);
  CHECK_THROWS(parse_mixing("random"));
}

TEST_CASE("batchify keeps order and a partial tail") {
  const auto data = toy_data()["copy"];
  const auto batches = batchify(data, 4);
  REQUIRE(batches.size() == 2);
  CHECK(batches[0].input.rows == 4);
  CHECK(batches[1].input.rows == 2);
  CHECK(batches[0].input.at(1, 0) == 6);
  CHECK(batches[1].target.at(1, 0) == 10);
  CHECK(batches[0].task == "copy");
  CHECK_THROWS_AS(batchify(data, 0), ConfigError);
}

TEST_CASE("task scheduler: round robin cycles, proportional follows sizes") {
  TrainPlan plan;
  plan.tasks = {{"copy", 1.0}, {"rev", 1.0}};
  const auto data = toy_data();
  TaskScheduler rr(plan, data);
  std::vector<std::string> order;
  for (int i = 0; i < 5; ++i) order.push_back(rr.next());
  CHECK(order == std::vector<std::string>{"copy", "rev", "copy", "rev", "copy"});

  plan.mixing = Mixing::proportional;
  plan.seed = 4;
  TaskScheduler prop(plan, data), again(plan, data);
  std::size_t copies = 0;
  for (int i = 0; i < 9000; ++i) {
    const auto& t = prop.next();
    CHECK(t == again.next());
    copies += t == "copy";
  }
  CHECK(std::abs(copies / 9000.0 - 6.0 / 9.0) < 0.02);
}

TEST_CASE("training log and best checkpoint selection") {
  std::vector<LogEntry> log;
  log.push_back({10, "copy", 1.5, {}, ""});
  log.push_back({20, "", 0.0, {{"acc", 0.5}}, "step-20.ckpt"});
  log.push_back({30, "", 0.0, {{"acc", 0.7}}, "step-30.ckpt"});
  log.push_back({40, "", 0.0, {{"acc", 0.7}}, "step-40.ckpt"});
  CHECK(select_best(log, "acc") == "step-30.ckpt");
  CHECK_THROWS_AS(select_best(log, "bleu"), TrainingError);
  CHECK_THROWS_AS(select_best(std::span<const LogEntry>(log).first(1), "acc"), TrainingError);

  testing::TempDir dir("log");
  std::string text = "{\"stage\":\"finetune\"}\n";
  for (const auto& e : log) text += to_json_line(e) + "\n";
  testing::write_file(dir / "train_log.jsonl", text);
  const auto back = load_training_log(dir / "train_log.jsonl");
  REQUIRE(back.size() == 4);
  CHECK(back[0].task == "copy");
  CHECK(back[0].loss == 1.5);
  CHECK(back[2].dev.at("acc") == 0.7);
  CHECK(back[2].checkpoint == "step-30.ckpt");
  CHECK(to_json_line(log[0]) == R"({"step":10,"task":"copy","loss":1.5})");
}

TEST_CASE("run_stage learns a toy task and is deterministic") {
  const auto data = toy_data();
  TrainPlan plan;
  plan.tasks = {{"copy", 1.0}, {"rev", 1.0}};
  plan.batch_size = 3;
  plan.max_steps = 300;
  plan.log_every = 50;
  plan.eval_every = 100;
  plan.seed = 11;
  plan.optimizer.learning_rate = 0.01;
  plan.dropout = false;

  testing::TempDir a("stage"), b("stage");
  Transformer<float> m1(tiny(), 1), m2(tiny(), 1);
  Tensor<float> before = m1.loss(pack({{5, 6, 7}}), pack({{5, 1}}));
  int evals = 0;
  StageOptions opts{a.path(), [&](const Transformer<float>& m) {
                      ++evals;
                      return std::map<std::string, double>{{"neg_loss", -double(m.loss(pack({{5, 6, 7}}), pack({{5, 1}})).item())}};
                    }, "neg_loss", nullptr};
  const auto r1 = run_stage(plan, m1, data, opts);
  CHECK(r1.steps == 300);
  CHECK(evals == 3);
  CHECK(m1.loss(pack({{5, 6, 7}}), pack({{5, 1}})).item() < 0.2f * before.item());
  CHECK(std::filesystem::exists(a / "step-300.ckpt"));
  CHECK(std::filesystem::exists(a / "train_log.jsonl"));
  CHECK(r1.best_checkpoint.find("step-") != std::string::npos);
  const auto log = load_training_log(a / "train_log.jsonl");
  std::size_t loss_lines = 0;
  for (const auto& e : log) loss_lines += !e.is_eval();
  CHECK(loss_lines == 2 * 300 / 50);

  StageOptions opts2 = opts;
  opts2.out_dir = b.path();
  const auto r2 = run_stage(plan, m2, data, opts2);
  CHECK(testing::read_file(a / "step-300.ckpt") == testing::read_file(b / "step-300.ckpt"));
  CHECK(r1.log.size() == r2.log.size());

  auto empty = data;
  empty["rev"].clear();
  CHECK_THROWS_WITH_AS(run_stage(plan, m2, empty, opts2), doctest::Contains("plan error"), ContractError);
}

TEST_CASE("dataset hash identifies content") {
  const auto data = toy_data();
  CHECK(dataset_hash(data.at("copy")) == dataset_hash(data.at("copy")));
  CHECK(dataset_hash(data.at("copy")) != dataset_hash(data.at("rev")));
}
