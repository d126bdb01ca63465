#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ufa/model.hpp"
#include "ufa/promptkit.hpp"
#include "ufa/tokenizer.hpp"

namespace ufa {

enum class DecodeStrategy { greedy, beam };

struct DecodeConfig {
  DecodeStrategy strategy = DecodeStrategy::greedy;
  std::size_t beam_width = 4;
  std::size_t max_target_length = 100;
  double length_penalty = 1.0;

  void validate() const;  // throws ConfigError
};

// Default strategy per task kind: greedy for label words, beam 4 otherwise.
DecodeConfig default_decode_config(const TaskSpec& task, std::size_t max_target_length = 100);

// Generated ids without the terminating <eos>; at most max_target_length ids.
std::vector<int> decode(const Transformer<float>& model, std::span<const int> input_ids, const DecodeConfig& config,
                        int eos_id);
// Greedy decoding of several inputs at once; same result as decoding each
// input on its own up to floating-point summation order.
std::vector<std::vector<int>> greedy_decode_batch(const Transformer<float>& model,
                                                  const std::vector<std::vector<int>>& inputs,
                                                  std::size_t max_target_length, int eos_id);

// Whitespace-separated tokens, with every CJK code point a token of its own.
std::vector<std::string> metric_tokens(std::string_view text);

double exact_match_accuracy(std::span<const std::string> predictions, std::span<const std::string> gold);

double bleu2(const std::vector<std::vector<std::string>>& predictions,
             const std::vector<std::vector<std::string>>& references);
double bleu2(std::span<const std::string> predictions, std::span<const std::string> references);

enum class RougeVariant { one, two, lcs };

struct PRF {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

PRF rouge(const std::vector<std::string>& prediction, const std::vector<std::string>& reference,
          RougeVariant variant);
PRF rouge(std::string_view prediction, std::string_view reference, RougeVariant variant);
// Mean per-example F1.
double corpus_rouge(std::span<const std::string> predictions, std::span<const std::string> references,
                    RougeVariant variant);

// Predictions outside label_set count as a synthetic "other" class that is
// never gold; macro averages run over label_set only.
PRF macro_prf(std::span<const std::string> predictions, std::span<const std::string> gold,
              std::span<const std::string> label_set);

struct MetricReport {
  std::string task_name;
  std::size_t n_examples = 0;
  std::optional<double> accuracy;
  std::optional<double> macro_precision;
  std::optional<double> macro_recall;
  std::optional<double> macro_f1;
  std::optional<double> bleu2;
  std::optional<double> rouge1;
  std::optional<double> rouge2;
  std::optional<double> rougeL;
  std::uint64_t seed = 0;
  std::string checkpoint;
  // Provenance for experiment bundles.
  std::string experiment;
  std::string group;
  std::string model_variant;
  std::string prompt_variant = "full";
  std::optional<std::size_t> fewshot_k;

  bool operator==(const MetricReport&) const = default;
};

std::string to_json_line(const MetricReport& report);
MetricReport report_from_json_line(const std::string& line, std::size_t line_number);
void save_reports(const std::filesystem::path& path, const std::vector<MetricReport>& reports);
std::vector<MetricReport> load_reports(const std::filesystem::path& path);

struct EvalOptions {
  bool macro = false;  // add macro P/R/F1 to classification reports
  std::size_t batch_size = 32;
};

// Decodes every example and scores it against decode(target_ids), i.e. the
// tokenizer-normalized reference. Classification -> accuracy, generation ->
// BLEU-2 and ROUGE-1, summarization -> ROUGE-1/2/L. Throws ContractError on
// an empty dataset or one built for another task.
MetricReport evaluate(const Transformer<float>& model, std::span<const PromptedExample> dataset, const TaskSpec& task,
                      const DecodeConfig& config, const Tokenizer& tokenizer, const EvalOptions& options = {},
                      std::vector<std::string>* predictions = nullptr);

// Table-1-like layout, one row per report, percent with two decimals.
std::string render_table(const std::vector<MetricReport>& reports);

}  // namespace ufa
