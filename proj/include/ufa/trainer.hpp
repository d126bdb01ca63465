#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ufa/model.hpp"
#include "ufa/promptkit.hpp"

namespace ufa {

enum class LrSchedule { constant, inverse_sqrt };

struct AdafactorConfig {
  double learning_rate = 1e-4;
  double decay_exponent = 0.8;
  double clip_threshold = 1.0;
  double eps1 = 1e-30;
  LrSchedule schedule = LrSchedule::constant;
  std::size_t warmup_steps = 1000;  // inverse_sqrt only

  void validate() const;  // throws ConfigError
  double rate_at(std::size_t step) const;  // step counts from 1
};

// Second-moment statistics per parameter: row and column sums for tensors
// of rank >= 2 (leading axes folded into rows), a full vector otherwise.
class AdafactorState {
 public:
  struct Slot {
    Shape shape;
    std::vector<float> row;
    std::vector<float> col;
    std::vector<float> full;
  };

  explicit AdafactorState(AdafactorConfig config = {});

  const AdafactorConfig& config() const { return config_; }
  std::size_t step() const { return step_; }
  const std::map<std::string, Slot>& slots() const { return slots_; }
  std::size_t accumulator_floats(const std::string& name) const;
  std::size_t total_accumulator_floats() const;

 private:
  friend void adafactor_step(ParameterMap<float>& params, AdafactorState& state);

  AdafactorConfig config_;
  std::size_t step_ = 0;
  std::map<std::string, Slot> slots_;
};

// One update from the gradients held by the parameters. A parameter with no
// gradient is treated as having a zero gradient. Throws TrainingError naming
// the parameter and step when a gradient is not finite.
void adafactor_step(ParameterMap<float>& params, AdafactorState& state);

enum class Stage { denoise, ufa_pretrain, finetune };
enum class Mixing { round_robin, proportional };

std::string to_string(Stage stage);
std::string to_string(Mixing mixing);
Stage parse_stage(std::string_view text);
Mixing parse_mixing(std::string_view text);

struct TaskWeight {
  std::string task;
  double weight = 1.0;
};

struct TrainPlan {
  Stage stage = Stage::finetune;
  std::vector<TaskWeight> tasks;
  std::size_t batch_size = 32;
  std::size_t epochs = 20;
  // When nonzero, overrides epochs. Otherwise the run lasts
  // epochs * ceil(total examples / batch_size) steps.
  std::size_t max_steps = 0;
  std::size_t eval_every = 0;  // 0: evaluate once at the end
  std::size_t log_every = 10;
  std::uint64_t seed = 0;
  Mixing mixing = Mixing::round_robin;
  AdafactorConfig optimizer;
  bool dropout = true;

  void validate() const;  // throws ConfigError
  std::size_t total_steps(const std::map<std::string, std::vector<PromptedExample>>& datasets) const;
};

struct Batch {
  std::string task;
  TokenBatch input;
  TokenBatch target;
};

// Consecutive groups in input order; the last group may be partial.
std::vector<Batch> batchify(std::span<const PromptedExample> examples, std::size_t batch_size, int pad_id = 0);

// Deterministic task order for a plan: round_robin cycles the task list,
// proportional draws with probability proportional to weight * size.
class TaskScheduler {
 public:
  TaskScheduler(const TrainPlan& plan, const std::map<std::string, std::vector<PromptedExample>>& datasets);
  const std::string& next();

 private:
  Mixing mixing_;
  std::vector<std::string> names_;
  std::vector<double> cumulative_;
  std::size_t cursor_ = 0;
  Rng rng_;
};

struct LogEntry {
  std::size_t step = 0;
  std::string task;
  double loss = 0.0;
  std::map<std::string, double> dev;  // nonempty for evaluation entries
  std::string checkpoint;

  bool is_eval() const { return !dev.empty(); }
};

std::string to_json_line(const LogEntry& entry);
std::vector<LogEntry> load_training_log(const std::filesystem::path& path);

// Checkpoint with the highest value of `metric`; ties go to the earliest.
// Throws TrainingError when the log holds no evaluation with that metric.
std::string select_best(std::span<const LogEntry> log, const std::string& metric);

using DevEvaluator = std::function<std::map<std::string, double>(const Transformer<float>&)>;

struct StageOptions {
  std::filesystem::path out_dir;  // checkpoints and train_log.jsonl go here
  DevEvaluator dev_eval;          // optional
  std::string select_metric;      // used with dev_eval
  std::ostream* progress = nullptr;
};

struct StageResult {
  std::vector<LogEntry> log;
  std::string final_checkpoint;
  std::string best_checkpoint;  // final_checkpoint when no dev evaluation ran
  std::size_t steps = 0;
};

// Trains `model` in place. Batches come from per-task queues reshuffled at
// every pass; dropout and shuffling draw from streams derived from the plan
// seed, so a run is a pure function of plan, data and initial parameters.
StageResult run_stage(const TrainPlan& plan, Transformer<float>& model,
                      const std::map<std::string, std::vector<PromptedExample>>& datasets,
                      const StageOptions& options);

// FNV-1a over every example's ids, for logging dataset identity.
std::string dataset_hash(std::span<const PromptedExample> examples);

}  // namespace ufa
