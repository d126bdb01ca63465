#include "ufa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ufa/error.hpp"

namespace ufa {

using nlohmann::json;
using nlohmann::ordered_json;

void AdafactorConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
  if (!(decay_exponent > 0.0 && decay_exponent <= 1.0)) throw ConfigError("decay_exponent must lie in (0, 1]");
  if (!(clip_threshold > 0.0)) throw ConfigError("clip_threshold must be positive");
  if (!(eps1 > 0.0)) throw ConfigError("eps1 must be positive");
  if (schedule == LrSchedule::inverse_sqrt && warmup_steps == 0) throw ConfigError("warmup_steps must be positive");
}

double AdafactorConfig::rate_at(std::size_t step) const {
  if (schedule == LrSchedule::constant) return learning_rate;
  const double t = static_cast<double>(std::max(step, warmup_steps));
  return learning_rate * std::sqrt(static_cast<double>(warmup_steps) / t);
}

AdafactorState::AdafactorState(AdafactorConfig config) : config_(config) { config_.validate(); }

std::size_t AdafactorState::accumulator_floats(const std::string& name) const {
  const auto it = slots_.find(name);
  if (it == slots_.end()) return 0;
  return it->second.row.size() + it->second.col.size() + it->second.full.size();
}

std::size_t AdafactorState::total_accumulator_floats() const {
  std::size_t n = 0;
  for (const auto& [name, slot] : slots_) n += slot.row.size() + slot.col.size() + slot.full.size();
  return n;
}

void adafactor_step(ParameterMap<float>& params, AdafactorState& state) {
  const auto& cfg = state.config_;
  const std::size_t t = state.step_ + 1;
  const double beta = 1.0 - std::pow(static_cast<double>(t), -cfg.decay_exponent);
  const double lr = cfg.rate_at(t);

  for (auto& [name, param] : params) {
    const std::size_t n = param.size();
    std::vector<double> g(n, 0.0);
    if (param.has_grad()) {
      const auto grad = param.grad();
      for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(grad[i])) {
          throw TrainingError("non-finite gradient in '" + name + "' at step " + std::to_string(t));
        }
        g[i] = grad[i];
      }
    }
    auto& slot = state.slots_[name];
    const bool factored = param.rank() >= 2;
    const std::size_t cols = factored ? param.dim(-1) : n;
    const std::size_t rows = factored ? n / cols : 1;
    if (slot.shape.empty() && slot.full.empty() && slot.row.empty()) {
      slot.shape = param.shape();
      if (factored) {
        slot.row.assign(rows, 0.0f);
        slot.col.assign(cols, 0.0f);
      } else {
        slot.full.assign(n, 0.0f);
      }
    }

    std::vector<double> update(n);
    if (factored) {
      std::vector<double> row_sum(rows, 0.0), col_sum(cols, 0.0);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double sq = g[r * cols + c] * g[r * cols + c] + cfg.eps1;
          row_sum[r] += sq;
          col_sum[c] += sq;
        }
      }
      double row_total = 0.0;
      for (std::size_t r = 0; r < rows; ++r) {
        slot.row[r] = static_cast<float>(beta * slot.row[r] + (1.0 - beta) * row_sum[r]);
        row_total += slot.row[r];
      }
      for (std::size_t c = 0; c < cols; ++c) slot.col[c] = static_cast<float>(beta * slot.col[c] + (1.0 - beta) * col_sum[c]);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          const double v = static_cast<double>(slot.row[r]) * slot.col[c] / row_total;
          update[r * cols + c] = v > 0.0 ? g[r * cols + c] / std::sqrt(v) : 0.0;
        }
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        slot.full[i] = static_cast<float>(beta * slot.full[i] + (1.0 - beta) * (g[i] * g[i] + cfg.eps1));
        update[i] = slot.full[i] > 0.0f ? g[i] / std::sqrt(static_cast<double>(slot.full[i])) : 0.0;
      }
    }

    double sq = 0.0;
    for (double u : update) sq += u * u;
    const double rms = std::sqrt(sq / static_cast<double>(std::max<std::size_t>(n, 1)));
    const double denom = std::max(1.0, rms / cfg.clip_threshold);
    auto values = param.data();
    for (std::size_t i = 0; i < n; ++i) values[i] = static_cast<float>(values[i] - lr * update[i] / denom);
  }
  state.step_ = t;
}

namespace {

constexpr std::pair<Stage, std::string_view> kStages[] = {
    {Stage::denoise, "denoise"}, {Stage::ufa_pretrain, "ufa_pretrain"}, {Stage::finetune, "finetune"}};
constexpr std::pair<Mixing, std::string_view> kMixings[] = {{Mixing::round_robin, "round_robin"},
                                                            {Mixing::proportional, "proportional"}};

}  // namespace

std::string to_string(Stage stage) {
  for (const auto& [s, name] : kStages) {
    if (s == stage) return std::string(name);
  }
  return "?";
}

std::string to_string(Mixing mixing) {
  for (const auto& [m, name] : kMixings) {
    if (m == mixing) return std::string(name);
  }
  return "?";
}

Stage parse_stage(std::string_view text) {
  for (const auto& [s, name] : kStages) {
    if (name == text) return s;
  }
  throw ConfigError("unknown stage '" + std::string(text) + "'");
}

Mixing parse_mixing(std::string_view text) {
  for (const auto& [m, name] : kMixings) {
    if (name == text) return m;
  }
  throw ConfigError("unknown mixing strategy '" + std::string(text) + "'");
}

void TrainPlan::validate() const {
  if (tasks.empty()) throw ConfigError("train plan has no tasks");
  for (const auto& t : tasks) {
    if (!(t.weight > 0.0) || !std::isfinite(t.weight)) {
      throw ConfigError("mixing weight for task '" + t.task + "' must be positive and finite");
    }
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (max_steps == 0 && epochs == 0) throw ConfigError("either epochs or max_steps must be positive");
  if (log_every == 0) throw ConfigError("log_every must be positive");
  optimizer.validate();
}

std::size_t TrainPlan::total_steps(const std::map<std::string, std::vector<PromptedExample>>& datasets) const {
  if (max_steps > 0) return max_steps;
  std::size_t total = 0;
  for (const auto& t : tasks) {
    const auto it = datasets.find(t.task);
    if (it != datasets.end()) total += it->second.size();
  }
  return epochs * ((total + batch_size - 1) / batch_size);
}

std::vector<Batch> batchify(std::span<const PromptedExample> examples, std::size_t batch_size, int pad_id) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    std::vector<std::vector<int>> in, tg;
    for (std::size_t i = start; i < std::min(examples.size(), start + batch_size); ++i) {
      in.push_back(examples[i].input_ids);
      tg.push_back(examples[i].target_ids);
    }
    out.push_back({examples[start].task_name, pack(in, pad_id), pack(tg, pad_id)});
  }
  return out;
}

TaskScheduler::TaskScheduler(const TrainPlan& plan,
                             const std::map<std::string, std::vector<PromptedExample>>& datasets)
    : mixing_(plan.mixing), rng_(Rng::derive(plan.seed, 0x5c4ed)) {
  double total = 0.0;
  for (const auto& t : plan.tasks) {
    const auto it = datasets.find(t.task);
    const double size = it == datasets.end() ? 0.0 : static_cast<double>(it->second.size());
    names_.push_back(t.task);
    total += t.weight * size;
    cumulative_.push_back(total);
  }
}

const std::string& TaskScheduler::next() {
  if (mixing_ == Mixing::round_robin) {
    const std::string& name = names_[cursor_];
    cursor_ = (cursor_ + 1) % names_.size();
    return name;
  }
  const double u = rng_.uniform() * cumulative_.back();
  const auto it = std::upper_bound(cumulative_.begin(), cumulative_.end(), u);
  const auto idx = std::min<std::size_t>(static_cast<std::size_t>(it - cumulative_.begin()), names_.size() - 1);
  return names_[idx];
}

std::string to_json_line(const LogEntry& entry) {
  ordered_json j;
  j["step"] = entry.step;
  if (entry.is_eval()) {
    ordered_json dev = ordered_json::object();
    for (const auto& [k, v] : entry.dev) dev[k] = v;
    j["dev"] = dev;
    j["checkpoint"] = entry.checkpoint;
  } else {
    j["task"] = entry.task;
    j["loss"] = entry.loss;
  }
  return j.dump();
}

std::vector<LogEntry> load_training_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open training log " + path.string());
  std::vector<LogEntry> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError(n, "<line>", e.what());
    }
    if (!j.contains("step")) continue;  // dataset header lines
    if (!j["step"].is_number_unsigned()) throw ParseError(n, "step", "expected a step count");
    LogEntry e;
    e.step = j["step"].get<std::size_t>();
    if (j.contains("dev")) {
      if (!j["dev"].is_object()) throw ParseError(n, "dev", "expected an object");
      for (const auto& [k, v] : j["dev"].items()) {
        if (!v.is_number()) throw ParseError(n, "dev", "metric '" + k + "' is not a number");
        e.dev[k] = v.get<double>();
      }
      if (!j.contains("checkpoint") || !j["checkpoint"].is_string()) throw ParseError(n, "checkpoint", "missing");
      e.checkpoint = j["checkpoint"].get<std::string>();
    } else {
      if (!j.contains("task") || !j["task"].is_string()) throw ParseError(n, "task", "missing");
      if (!j.contains("loss") || !j["loss"].is_number()) throw ParseError(n, "loss", "missing");
      e.task = j["task"].get<std::string>();
      e.loss = j["loss"].get<double>();
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::string select_best(std::span<const LogEntry> log, const std::string& metric) {
  const LogEntry* best = nullptr;
  for (const auto& e : log) {
    if (!e.is_eval()) continue;
    const auto it = e.dev.find(metric);
    if (it == e.dev.end()) continue;
    if (best == nullptr || it->second > best->dev.at(metric)) best = &e;
  }
  if (best == nullptr) throw TrainingError("no dev evaluation of '" + metric + "' to select a checkpoint from");
  return best->checkpoint;
}

std::string dataset_hash(std::span<const PromptedExample> examples) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 1099511628211ull;
    }
  };
  for (const auto& ex : examples) {
    for (int id : ex.input_ids) mix(static_cast<std::uint32_t>(id));
    mix(0xffffffffull);
    for (int id : ex.target_ids) mix(static_cast<std::uint32_t>(id));
    mix(0xfffffffeull);
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

// Walks one task's examples in a fresh shuffled order per pass.
class ExampleQueue {
 public:
  ExampleQueue(const std::vector<PromptedExample>& examples, std::uint64_t seed)
      : examples_(&examples), rng_(seed), order_(examples.size()) {
    reshuffle();
  }

  Batch next(std::size_t batch_size, const std::string& task) {
    if (pos_ >= order_.size()) reshuffle();
    std::vector<std::vector<int>> in, tg;
    const std::size_t end = std::min(order_.size(), pos_ + batch_size);
    for (; pos_ < end; ++pos_) {
      in.push_back((*examples_)[order_[pos_]].input_ids);
      tg.push_back((*examples_)[order_[pos_]].target_ids);
    }
    return {task, pack(in, 0), pack(tg, 0)};
  }

 private:
  void reshuffle() {
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
    rng_.shuffle(order_);
    pos_ = 0;
  }

  const std::vector<PromptedExample>* examples_;
  Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace

StageResult run_stage(const TrainPlan& plan, Transformer<float>& model,
                      const std::map<std::string, std::vector<PromptedExample>>& datasets,
                      const StageOptions& options) {
  plan.validate();
  for (const auto& t : plan.tasks) {
    const auto it = datasets.find(t.task);
    if (it == datasets.end() || it->second.empty()) {
      throw ContractError("plan error: task '" + t.task + "' has an empty dataset");
    }
  }
  std::filesystem::create_directories(options.out_dir);
  const auto log_path = options.out_dir / "train_log.jsonl";
  std::ofstream log_file(log_path);
  if (!log_file) throw IoError("cannot write training log " + log_path.string());
  {
    ordered_json header;
    header["stage"] = to_string(plan.stage);
    header["mixing"] = to_string(plan.mixing);
    header["seed"] = plan.seed;
    header["learning_rate"] = plan.optimizer.learning_rate;
    header["batch_size"] = plan.batch_size;
    header["total_steps"] = plan.total_steps(datasets);
    ordered_json tasks = ordered_json::array();
    for (const auto& t : plan.tasks) {
      ordered_json jt;
      jt["task"] = t.task;
      jt["weight"] = t.weight;
      jt["examples"] = datasets.at(t.task).size();
      jt["input_hash"] = dataset_hash(datasets.at(t.task));
      tasks.push_back(jt);
    }
    header["tasks"] = tasks;
    log_file << header.dump() << '\n';
  }

  const std::size_t total = plan.total_steps(datasets);
  std::map<std::string, ExampleQueue> queues;
  for (std::size_t i = 0; i < plan.tasks.size(); ++i) {
    const auto& name = plan.tasks[i].task;
    queues.emplace(name, ExampleQueue(datasets.at(name), Rng::derive(plan.seed, 100 + i)));
  }
  TaskScheduler scheduler(plan, datasets);
  Rng dropout_rng(Rng::derive(plan.seed, 1));
  AdafactorState optimizer(plan.optimizer);
  StageResult result;

  std::map<std::string, std::pair<double, std::size_t>> group;
  auto flush_group = [&](std::size_t step) {
    for (const auto& t : plan.tasks) {
      const auto it = group.find(t.task);
      if (it == group.end()) continue;
      LogEntry e;
      e.step = step;
      e.task = t.task;
      e.loss = it->second.first / static_cast<double>(it->second.second);
      log_file << to_json_line(e) << '\n';
      result.log.push_back(std::move(e));
    }
    log_file.flush();
    group.clear();
  };
  auto checkpoint = [&](std::size_t step) {
    const auto path = options.out_dir / ("step-" + std::to_string(step) + ".ckpt");
    save_checkpoint(path, model);
    return path.string();
  };
  auto evaluate_now = [&](std::size_t step) {
    LogEntry e;
    e.step = step;
    e.checkpoint = checkpoint(step);
    e.dev = options.dev_eval(model);
    if (e.dev.empty()) e.dev["none"] = 0.0;
    log_file << to_json_line(e) << '\n';
    log_file.flush();
    if (options.progress != nullptr) {
      *options.progress << "  step " << step << " dev";
      for (const auto& [k, v] : e.dev) *options.progress << ' ' << k << '=' << v;
      *options.progress << std::endl;
    }
    result.log.push_back(std::move(e));
    return result.log.back().checkpoint;
  };

  const auto started = std::chrono::steady_clock::now();
  std::string last_checkpoint;
  for (std::size_t step = 1; step <= total; ++step) {
    const std::string& task = scheduler.next();
    const Batch batch = queues.at(task).next(plan.batch_size, task);
    Tape<float> tape;
    Tensor<float> loss;
    {
      TapeScope<float> scope(tape);
      loss = model.loss(batch.input, batch.target, plan.dropout ? &dropout_rng : nullptr);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("non-finite loss at step " + std::to_string(step));
    tape.backward(loss);
    adafactor_step(model.parameters(), optimizer);
    for (auto& [name, p] : model.parameters()) p.zero_grad();

    auto& g = group[task];
    g.first += value;
    g.second += 1;
    if (step % plan.log_every == 0 || step == total) {
      flush_group(step);
      if (options.progress != nullptr) {
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
        *options.progress << "  " << to_string(plan.stage) << " step " << step << "/" << total << " loss "
                          << result.log.back().loss << " (" << std::fixed << std::setprecision(1) << secs << "s)"
                          << std::defaultfloat << std::endl;
      }
    }
    if (options.dev_eval && ((plan.eval_every > 0 && step % plan.eval_every == 0) || step == total)) {
      last_checkpoint = evaluate_now(step);
    }
  }
  result.steps = total;
  if (last_checkpoint.empty() && total > 0) last_checkpoint = checkpoint(total);
  result.final_checkpoint = last_checkpoint;
  result.best_checkpoint = last_checkpoint;
  if (options.dev_eval && !options.select_metric.empty()) {
    result.best_checkpoint = select_best(result.log, options.select_metric);
  }
  return result;
}

}  // namespace ufa
