#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ufa/corpus.hpp"
#include "ufa/tokenizer.hpp"

namespace ufa {

enum class BuilderKind { first_two_customer, agent_segments, full_history_summary, sentence_pair };
enum class TargetField { domain, intent, response, summary, pair_label };
enum class PromptVariant { full, no_goal, no_task };

std::string to_string(BuilderKind kind);
std::string to_string(TargetField field);
std::string to_string(PromptVariant variant);
BuilderKind parse_builder_kind(std::string_view text);
TargetField parse_target_field(std::string_view text);
PromptVariant parse_prompt_variant(std::string_view text);

namespace task_names {
inline constexpr std::string_view domain = "domain classification";
inline constexpr std::string_view intent = "intent detection";
inline constexpr std::string_view generation = "dialogue generation";
inline constexpr std::string_view summary = "summarization";
inline constexpr std::string_view similarity = "sentence similarity";
}  // namespace task_names

struct TaskSpec {
  std::string name;
  std::string goal_description;
  BuilderKind builder = BuilderKind::first_two_customer;
  std::optional<std::vector<std::string>> label_set;
  TargetField target_field = TargetField::intent;

  bool is_classification() const { return label_set.has_value(); }
  // Normalized label set; empty for generation tasks.
  std::vector<std::string> normalized_labels() const;
  // Throws RegistryError.
  void validate() const;

  bool operator==(const TaskSpec&) const = default;
};

struct PromptedExample {
  std::string task_name;
  std::string input_text;
  std::string target_text;
  std::vector<int> input_ids;
  std::vector<int> target_ids;  // ends with <eos>
};

struct LengthLimits {
  std::size_t max_source = 512;
  std::size_t max_target = 100;
};

// Records skipped because a required field was missing or a label fell
// outside the task's label set.
struct BuildStats {
  std::size_t examples = 0;
  std::size_t skipped = 0;
};

std::string render_dialogue_history(std::span<const Utterance> utterances);
std::string build_prompt(const TaskSpec& task, std::string_view dialogue_text, PromptVariant variant);

std::vector<PromptedExample> build_examples(const DialogueRecord& record, const TaskSpec& task,
                                            PromptVariant variant, const Tokenizer& tokenizer,
                                            const LengthLimits& limits = {}, BuildStats* stats = nullptr);
std::vector<PromptedExample> build_examples(const SentencePair& pair, const TaskSpec& task,
                                            PromptVariant variant, const Tokenizer& tokenizer,
                                            const LengthLimits& limits = {}, BuildStats* stats = nullptr);

// Whole-dataset helpers; order follows the input records.
std::vector<PromptedExample> build_dataset(std::span<const DialogueRecord> records, const TaskSpec& task,
                                           PromptVariant variant, const Tokenizer& tokenizer,
                                           const LengthLimits& limits = {}, BuildStats* stats = nullptr);
std::vector<PromptedExample> build_dataset(std::span<const SentencePair> pairs, const TaskSpec& task,
                                           PromptVariant variant, const Tokenizer& tokenizer,
                                           const LengthLimits& limits = {}, BuildStats* stats = nullptr);

// Punctuation removed, whitespace collapsed and trimmed, case-folded.
std::string normalize_label(std::string_view text);

class TaskRegistry {
 public:
  // The five shipped tasks.
  static TaskRegistry builtin();

  // Throws RegistryError on a duplicate name or an invalid spec.
  TaskRegistry& register_task(TaskSpec spec);
  // Replaces a task of the same name, or registers a new one.
  TaskRegistry& override_task(TaskSpec spec);

  const TaskSpec& at(std::string_view name) const;  // throws RegistryError
  bool contains(std::string_view name) const;
  std::vector<std::string> names() const;  // registration order
  std::size_t size() const { return specs_.size(); }

 private:
  std::vector<TaskSpec> specs_;
};

std::string to_json_line(const TaskSpec& spec);
TaskSpec task_from_json_line(const std::string& line, std::size_t line_number);
// Applies every spec in a JSONL registry file on top of base.
TaskRegistry load_task_registry(const std::filesystem::path& path, TaskRegistry base = TaskRegistry::builtin());

std::string to_json_line(const PromptedExample& example);
PromptedExample example_from_json_line(const std::string& line, std::size_t line_number);

}  // namespace ufa
