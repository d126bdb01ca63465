#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "ufa/corpus.hpp"
#include "ufa/decode_eval.hpp"
#include "ufa/model.hpp"
#include "ufa/promptkit.hpp"
#include "ufa/trainer.hpp"

namespace ufa {

enum class Experiment { main, fewshot, unseen, prompt_ablation, task_ablation };
enum class ModelVariant { ufa, ufa_ori };

std::string to_string(Experiment experiment);
std::string to_string(ModelVariant variant);
Experiment parse_experiment(std::string_view text);
ModelVariant parse_model_variant(std::string_view text);

// `key = value` lines; '#' starts a comment line, blank lines are skipped.
// Duplicate keys and lines without '=' raise ConfigError with the line number.
std::vector<std::pair<std::string, std::string>> parse_key_values(const std::filesystem::path& path);
std::vector<std::pair<std::string, std::string>> parse_key_values_text(const std::string& text);

struct ExperimentConfig {
  Experiment experiment = Experiment::main;
  ModelVariant model_variant = ModelVariant::ufa;
  PromptVariant prompt_variant = PromptVariant::full;
  std::string task = std::string(task_names::intent);  // single-run subcommands
  std::vector<std::string> tasks;                      // empty: the experiment's default list
  std::vector<std::size_t> fewshot_k = {5, 10, 20};
  std::vector<std::uint64_t> seeds = {13, 17, 23};
  std::uint64_t data_seed = 7;

  std::filesystem::path work_dir = "work";
  std::filesystem::path registry;    // optional JSONL overrides
  std::filesystem::path checkpoint;  // evaluate subcommand
  std::filesystem::path bundle;      // report subcommand

  // corpus
  std::size_t pretrain_dialogues = 20000;
  double label_noise = 0.2;
  std::size_t gold_dialogues = 2400;
  std::size_t gold_dev = 400;
  double gold_test_fraction = 0.25;
  std::size_t similarity_pairs = 2400;
  std::size_t similarity_dev = 400;
  double similarity_test_fraction = 0.25;
  std::size_t turns_min = 4;
  std::size_t turns_max = 8;

  // tokenizer and model
  std::size_t vocab_size = 8000;
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t d_model = 128;
  std::size_t head_dim = 0;
  std::size_t d_ff = 0;
  double dropout = 0.1;
  std::size_t max_source = 512;
  std::size_t max_target = 100;

  // stage 1: span denoising
  std::size_t denoise_steps = 1000;
  double denoise_rate = 0.15;
  double denoise_span = 3.0;

  // stage 2: knowledge-prompt multi-task pre-training
  std::size_t ufa_steps = 2000;
  std::vector<std::string> ufa_tasks;  // empty: the four dialogue tasks
  Mixing mixing = Mixing::round_robin;

  // optimization and evaluation
  std::size_t batch_size = 32;
  double pretrain_lr = 1e-4;
  double finetune_lr = 1e-4;
  std::size_t finetune_epochs = 20;
  std::size_t finetune_max_steps = 0;
  std::size_t evals_per_run = 5;
  std::size_t dev_limit = 0;   // 0: whole dev split
  std::size_t test_limit = 0;  // 0: whole test split

  // Applies one key; throws ConfigError for unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  void validate() const;

  static ExperimentConfig from_file(const std::filesystem::path& path);
  static ExperimentConfig from_text(const std::string& text);
  static std::vector<std::string> keys();

  ModelConfig model_config(std::size_t vocab) const;
  LengthLimits limits() const { return {max_source, max_target}; }
  std::vector<std::string> experiment_tasks() const;
  std::vector<std::string> stage2_tasks() const;
};

// k examples per class for classification tasks (uniformly without
// replacement), k examples overall otherwise. Output keeps dataset order.
// Throws SamplingError naming a class with fewer than k examples.
std::vector<PromptedExample> fewshot_sample(std::span<const PromptedExample> dataset, const TaskSpec& task,
                                            std::size_t k, std::uint64_t seed);

// Canonical artifact layout under work_dir.
class Workspace {
 public:
  explicit Workspace(ExperimentConfig config);

  const ExperimentConfig& config() const { return config_; }
  const TaskRegistry& registry() const { return registry_; }

  std::filesystem::path data_dir() const;
  std::filesystem::path tokenizer_path() const;
  std::filesystem::path seed_dir(std::uint64_t seed) const;

  // Data and tokenizer; build_* overwrite, require_* raise
  // OrchestrationError naming the subcommand to run first.
  void build_data(const std::filesystem::path& out_dir) const;
  void build_tokenizer(const std::filesystem::path& out_path) const;
  void require_data() const;
  void require_tokenizer() const;

  const Tokenizer& tokenizer() const;
  const std::vector<DialogueRecord>& pretrain_corpus() const;
  const Split<DialogueRecord>& gold() const;
  const Split<SentencePair>& pairs() const;

  // Cached stage runs; a stage is reused when its stage.json fingerprint
  // matches. Return the checkpoint path.
  std::filesystem::path denoise(std::uint64_t seed, std::ostream* progress = nullptr,
                                const std::filesystem::path& out_dir = {}) const;
  std::filesystem::path ufa_pretrain(std::uint64_t seed, const std::vector<std::string>& tasks,
                                     std::ostream* progress = nullptr, const std::filesystem::path& out_dir = {}) const;
  std::filesystem::path base_checkpoint(ModelVariant variant, std::uint64_t seed,
                                        const std::vector<std::string>& stage2_tasks, std::ostream* progress) const;

  struct FinetuneRun {
    std::string task;
    ModelVariant variant = ModelVariant::ufa;
    PromptVariant prompt = PromptVariant::full;
    std::optional<std::size_t> k;
    std::uint64_t seed = 0;
    std::filesystem::path init;  // starting checkpoint
    std::string group;           // report group and run directory name
  };
  // Fine-tunes, selects the best dev checkpoint and evaluates it on test.
  MetricReport finetune(const FinetuneRun& run, std::ostream* progress = nullptr,
                        const std::filesystem::path& out_dir = {}) const;
  MetricReport evaluate_checkpoint(const std::filesystem::path& checkpoint, const std::string& task,
                                   PromptVariant prompt, std::uint64_t seed) const;

  // (task, input hash) of every stage-2 training log below work_dir.
  std::vector<std::pair<std::string, std::string>> stage2_inputs() const;
  std::string dataset_hash_for(const std::string& task, PromptVariant prompt, const std::string& split) const;

 private:
  struct Cache;
  ExperimentConfig config_;
  TaskRegistry registry_;
  std::shared_ptr<Cache> cache_;

  std::vector<PromptedExample> examples(const std::string& task, PromptVariant prompt, const std::string& split) const;
};

// Runs the configured experiment over every seed; data and tokenizer must
// already exist. Every report carries experiment, group, variant, seed and
// checkpoint.
std::vector<MetricReport> run_experiment(const ExperimentConfig& config, std::ostream* progress = nullptr);

// Median of the values; mean of the middle pair for even counts.
double median(std::vector<double> values);
// Shortest decimal up to 4 places: 0.6 -> "0.6", 0.85432 -> "0.8543".
std::string format_score(double value);
// One aligned table per experiment: rows are groups (and k for few-shot),
// columns task metrics, cells "median (seed values...)", "-" when absent.
std::string render_report(const std::vector<MetricReport>& bundle);

}  // namespace ufa
