#include "ufa/promptkit.hpp"

#include <algorithm>
#include <fstream>
#include <nlohmann/json.hpp>

#include "ufa/error.hpp"
#include "ufa/utf8.hpp"

namespace ufa {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

template <typename E, std::size_t N>
E parse_enum(std::string_view text, const std::pair<E, std::string_view> (&table)[N], const char* what) {
  for (const auto& [value, name] : table) {
    if (name == text) return value;
  }
  throw ConfigError(std::string("unknown ") + what + " '" + std::string(text) + "'");
}

template <typename E, std::size_t N>
std::string enum_name(E value, const std::pair<E, std::string_view> (&table)[N]) {
  for (const auto& [v, name] : table) {
    if (v == value) return std::string(name);
  }
  return "?";
}

constexpr std::pair<BuilderKind, std::string_view> kBuilders[] = {
    {BuilderKind::first_two_customer, "first_two_customer"},
    {BuilderKind::agent_segments, "agent_segments"},
    {BuilderKind::full_history_summary, "full_history_summary"},
    {BuilderKind::sentence_pair, "sentence_pair"},
};

constexpr std::pair<TargetField, std::string_view> kFields[] = {
    {TargetField::domain, "domain"},       {TargetField::intent, "intent"},
    {TargetField::response, "response"},   {TargetField::summary, "summary"},
    {TargetField::pair_label, "pair_label"},
};

constexpr std::pair<PromptVariant, std::string_view> kVariants[] = {
    {PromptVariant::full, "full"},
    {PromptVariant::no_goal, "no_goal"},
    {PromptVariant::no_task, "no_task"},
};

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    const std::size_t start = i;
    while (i < text.size() && text[i] != ' ') ++i;
    if (i > start) words.emplace_back(text.substr(start, i - start));
  }
  return words;
}

std::string join_words(const std::vector<std::string>& words, std::size_t from, std::size_t to) {
  std::string out;
  for (std::size_t i = from; i < to; ++i) {
    if (i > from) out += ' ';
    out += words[i];
  }
  return out;
}

void note_skip(BuildStats* stats) {
  if (stats != nullptr) ++stats->skipped;
}

// Assembles one example, dropping the oldest dialogue words until the prompt
// fits and the newest target words until the target fits.
std::optional<PromptedExample> assemble(const TaskSpec& task, std::string_view dialogue_text,
                                        std::string_view target_text, PromptVariant variant,
                                        const Tokenizer& tokenizer, const LengthLimits& limits) {
  PromptedExample ex;
  ex.task_name = task.name;

  const auto words = split_words(dialogue_text);
  std::size_t start = 0;
  while (true) {
    if (start >= words.size()) return std::nullopt;
    ex.input_text = build_prompt(task, join_words(words, start, words.size()), variant);
    ex.input_ids = tokenizer.encode(ex.input_text);
    if (ex.input_ids.size() <= limits.max_source) break;
    std::size_t excess = ex.input_ids.size() - limits.max_source;
    while (excess > 0 && start < words.size()) {
      const std::size_t n = tokenizer.encode(words[start]).size();
      excess -= std::min(excess, n);
      ++start;
    }
  }

  const auto target_words = split_words(target_text);
  std::size_t end = target_words.size();
  while (true) {
    if (end == 0) return std::nullopt;
    ex.target_text = join_words(target_words, 0, end);
    ex.target_ids = tokenizer.encode(ex.target_text);
    if (ex.target_ids.size() + 1 <= limits.max_target) break;
    std::size_t excess = ex.target_ids.size() + 1 - limits.max_target;
    while (excess > 0 && end > 0) {
      const std::size_t n = tokenizer.encode(target_words[end - 1]).size();
      excess -= std::min(excess, n);
      --end;
    }
  }
  if (ex.target_ids.empty()) return std::nullopt;
  ex.target_ids.push_back(tokenizer.eos_id());
  return ex;
}

std::optional<std::string> classification_target(const TaskSpec& task, const std::optional<std::string>& label) {
  if (!label) return std::nullopt;
  std::string target = normalize_label(*label);
  if (target.empty()) return std::nullopt;
  if (task.label_set) {
    const auto allowed = task.normalized_labels();
    if (std::find(allowed.begin(), allowed.end(), target) == allowed.end()) return std::nullopt;
  }
  return target;
}

bool has_forbidden_text(std::string_view text) {
  if (text.find('\n') != std::string_view::npos) return true;
  for (const auto& special : default_special_tokens()) {
    if (text.find(special) != std::string_view::npos) return true;
  }
  return false;
}

}  // namespace

std::string to_string(BuilderKind kind) { return enum_name(kind, kBuilders); }
std::string to_string(TargetField field) { return enum_name(field, kFields); }
std::string to_string(PromptVariant variant) { return enum_name(variant, kVariants); }
BuilderKind parse_builder_kind(std::string_view text) { return parse_enum(text, kBuilders, "builder kind"); }
TargetField parse_target_field(std::string_view text) { return parse_enum(text, kFields, "target field"); }
PromptVariant parse_prompt_variant(std::string_view text) { return parse_enum(text, kVariants, "prompt variant"); }

std::vector<std::string> TaskSpec::normalized_labels() const {
  std::vector<std::string> out;
  if (!label_set) return out;
  for (const auto& l : *label_set) out.push_back(normalize_label(l));
  return out;
}

void TaskSpec::validate() const {
  if (name.empty()) throw RegistryError("task name is empty");
  if (goal_description.empty()) throw RegistryError("task '" + name + "': goal description is empty");
  if (has_forbidden_text(name)) throw RegistryError("task '" + name + "': name holds a newline or special token");
  if (has_forbidden_text(goal_description)) {
    throw RegistryError("task '" + name + "': goal description holds a newline or special token");
  }
  if (label_set) {
    if (label_set->empty()) throw RegistryError("task '" + name + "': label set is empty");
    for (const auto& l : *label_set) {
      if (normalize_label(l).empty()) throw RegistryError("task '" + name + "': label '" + l + "' normalizes to empty");
    }
  }
  bool compatible = false;
  switch (builder) {
    case BuilderKind::first_two_customer:
      compatible = target_field == TargetField::domain || target_field == TargetField::intent;
      break;
    case BuilderKind::agent_segments:
      compatible = target_field == TargetField::response;
      break;
    case BuilderKind::full_history_summary:
      compatible = target_field == TargetField::summary;
      break;
    case BuilderKind::sentence_pair:
      compatible = target_field == TargetField::pair_label;
      break;
  }
  if (!compatible) {
    throw RegistryError("task '" + name + "': builder " + to_string(builder) + " cannot supply target " +
                        to_string(target_field));
  }
}

std::string render_dialogue_history(std::span<const Utterance> utterances) {
  if (utterances.empty()) throw ContractError("render_dialogue_history: empty utterance list");
  std::string out;
  for (const auto& u : utterances) {
    if (!out.empty()) out += ' ';
    out += u.role == Role::customer ? tokens::customer : tokens::agent;
    out += ' ';
    out += u.text;
  }
  return out;
}

std::string build_prompt(const TaskSpec& task, std::string_view dialogue_text, PromptVariant variant) {
  std::string out;
  if (variant != PromptVariant::no_task) {
    out += tokens::task;
    out += ' ';
    out += task.name;
    out += ' ';
  }
  out += tokens::dialogue;
  out += ' ';
  out += dialogue_text;
  if (variant != PromptVariant::no_goal) {
    out += ' ';
    out += tokens::goal;
    out += ' ';
    out += task.goal_description;
  }
  return out;
}

std::vector<PromptedExample> build_examples(const DialogueRecord& record, const TaskSpec& task,
                                            PromptVariant variant, const Tokenizer& tokenizer,
                                            const LengthLimits& limits, BuildStats* stats) {
  std::vector<PromptedExample> out;
  auto push = [&](std::optional<PromptedExample> ex) {
    if (ex) {
      out.push_back(std::move(*ex));
    } else {
      note_skip(stats);
    }
  };
  switch (task.builder) {
    case BuilderKind::first_two_customer: {
      std::vector<Utterance> firsts;
      for (const auto& u : record.utterances) {
        if (u.role == Role::customer && firsts.size() < 2) firsts.push_back(u);
      }
      const auto& label = task.target_field == TargetField::domain ? record.domain_label : record.intent_label;
      const auto target = classification_target(task, label);
      if (firsts.empty() || !target) {
        note_skip(stats);
        break;
      }
      push(assemble(task, render_dialogue_history(firsts), *target, variant, tokenizer, limits));
      break;
    }
    case BuilderKind::agent_segments: {
      for (std::size_t i = 0; i < record.utterances.size(); ++i) {
        if (record.utterances[i].role != Role::agent) continue;
        if (i == 0) {
          note_skip(stats);
          continue;
        }
        const auto context = std::span<const Utterance>(record.utterances).first(i);
        push(assemble(task, render_dialogue_history(context), record.utterances[i].text, variant, tokenizer,
                      limits));
      }
      break;
    }
    case BuilderKind::full_history_summary: {
      if (record.utterances.empty() || !record.summary || record.summary->empty()) {
        note_skip(stats);
        break;
      }
      push(assemble(task, render_dialogue_history(record.utterances), *record.summary, variant, tokenizer,
                    limits));
      break;
    }
    case BuilderKind::sentence_pair:
      throw ContractError("task '" + task.name + "' builds from sentence pairs, not dialogue records");
  }
  if (stats != nullptr) stats->examples += out.size();
  return out;
}

std::vector<PromptedExample> build_examples(const SentencePair& pair, const TaskSpec& task,
                                            PromptVariant variant, const Tokenizer& tokenizer,
                                            const LengthLimits& limits, BuildStats* stats) {
  if (task.builder != BuilderKind::sentence_pair) {
    throw ContractError("task '" + task.name + "' builds from dialogue records, not sentence pairs");
  }
  std::vector<PromptedExample> out;
  const auto target = classification_target(task, pair.label);
  if (!target || pair.first.empty() || pair.second.empty()) {
    note_skip(stats);
    return out;
  }
  const Utterance both[] = {{Role::customer, pair.first}, {Role::customer, pair.second}};
  auto ex = assemble(task, render_dialogue_history(both), *target, variant, tokenizer, limits);
  if (ex) {
    out.push_back(std::move(*ex));
    if (stats != nullptr) ++stats->examples;
  } else {
    note_skip(stats);
  }
  return out;
}

std::vector<PromptedExample> build_dataset(std::span<const DialogueRecord> records, const TaskSpec& task,
                                           PromptVariant variant, const Tokenizer& tokenizer,
                                           const LengthLimits& limits, BuildStats* stats) {
  std::vector<PromptedExample> out;
  for (const auto& r : records) {
    auto part = build_examples(r, task, variant, tokenizer, limits, stats);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::vector<PromptedExample> build_dataset(std::span<const SentencePair> pairs, const TaskSpec& task,
                                           PromptVariant variant, const Tokenizer& tokenizer,
                                           const LengthLimits& limits, BuildStats* stats) {
  std::vector<PromptedExample> out;
  for (const auto& p : pairs) {
    auto part = build_examples(p, task, variant, tokenizer, limits, stats);
    std::move(part.begin(), part.end(), std::back_inserter(out));
  }
  return out;
}

std::string normalize_label(std::string_view text) {
  std::u32string out;
  bool pending_space = false;
  for (char32_t c : utf8::decode(text)) {
    if (utf8::is_punctuation(c)) continue;
    if (utf8::is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) out += U' ';
    pending_space = false;
    if (c >= U'A' && c <= U'Z') c = c - U'A' + U'a';
    out += c;
  }
  return utf8::encode(out);
}

TaskRegistry TaskRegistry::builtin() {
  TaskRegistry r;
  r.register_task({std::string(task_names::domain), "the domain of the dialogue is", BuilderKind::first_two_customer,
                   domain_labels(max_domains()), TargetField::domain});
  r.register_task({std::string(task_names::intent), "the intent of the customer is", BuilderKind::first_two_customer,
                   intent_labels(max_intents()), TargetField::intent});
  r.register_task({std::string(task_names::generation), "the response of the agent is", BuilderKind::agent_segments,
                   std::nullopt, TargetField::response});
  r.register_task({std::string(task_names::summary), "the summary of the dialogue is",
                   BuilderKind::full_history_summary, std::nullopt, TargetField::summary});
  r.register_task({std::string(task_names::similarity), "the relationship of the input sentences is",
                   BuilderKind::sentence_pair, std::vector<std::string>{"positive", "negative"},
                   TargetField::pair_label});
  return r;
}

TaskRegistry& TaskRegistry::register_task(TaskSpec spec) {
  spec.validate();
  if (contains(spec.name)) throw RegistryError("task '" + spec.name + "' is already registered");
  specs_.push_back(std::move(spec));
  return *this;
}

TaskRegistry& TaskRegistry::override_task(TaskSpec spec) {
  spec.validate();
  for (auto& s : specs_) {
    if (s.name == spec.name) {
      s = std::move(spec);
      return *this;
    }
  }
  specs_.push_back(std::move(spec));
  return *this;
}

const TaskSpec& TaskRegistry::at(std::string_view name) const {
  for (const auto& s : specs_) {
    if (s.name == name) return s;
  }
  throw RegistryError("unknown task '" + std::string(name) + "'");
}

bool TaskRegistry::contains(std::string_view name) const {
  return std::any_of(specs_.begin(), specs_.end(), [&](const TaskSpec& s) { return s.name == name; });
}

std::vector<std::string> TaskRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& s : specs_) out.push_back(s.name);
  return out;
}

std::string to_json_line(const TaskSpec& spec) {
  ordered_json j;
  j["name"] = spec.name;
  j["goal_description"] = spec.goal_description;
  j["builder_kind"] = to_string(spec.builder);
  j["label_set"] = spec.label_set ? ordered_json(*spec.label_set) : ordered_json(nullptr);
  j["target_field"] = to_string(spec.target_field);
  return j.dump();
}

namespace {

json parse_line(const std::string& line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(line_number, "<line>", e.what());
  }
  if (!j.is_object()) throw ParseError(line_number, "<line>", "expected a JSON object");
  return j;
}

std::string string_field(const json& j, const char* field, std::size_t line_number) {
  if (!j.contains(field) || !j[field].is_string()) throw ParseError(line_number, field, "missing or not a string");
  return j[field].get<std::string>();
}

std::vector<int> ids_field(const json& j, const char* field, std::size_t line_number) {
  if (!j.contains(field) || !j[field].is_array()) throw ParseError(line_number, field, "missing or not an array");
  std::vector<int> out;
  for (const auto& v : j[field]) {
    if (!v.is_number_integer()) throw ParseError(line_number, field, "non-integer token id");
    out.push_back(v.get<int>());
  }
  return out;
}

}  // namespace

TaskSpec task_from_json_line(const std::string& line, std::size_t line_number) {
  const json j = parse_line(line, line_number);
  TaskSpec spec;
  spec.name = string_field(j, "name", line_number);
  spec.goal_description = string_field(j, "goal_description", line_number);
  try {
    spec.builder = parse_builder_kind(string_field(j, "builder_kind", line_number));
  } catch (const ConfigError& e) {
    throw ParseError(line_number, "builder_kind", e.what());
  }
  try {
    spec.target_field = parse_target_field(string_field(j, "target_field", line_number));
  } catch (const ConfigError& e) {
    throw ParseError(line_number, "target_field", e.what());
  }
  if (j.contains("label_set") && !j["label_set"].is_null()) {
    if (!j["label_set"].is_array()) throw ParseError(line_number, "label_set", "expected an array or null");
    std::vector<std::string> labels;
    for (const auto& v : j["label_set"]) {
      if (!v.is_string()) throw ParseError(line_number, "label_set", "non-string label");
      labels.push_back(v.get<std::string>());
    }
    spec.label_set = std::move(labels);
  }
  return spec;
}

TaskRegistry load_task_registry(const std::filesystem::path& path, TaskRegistry base) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open task registry " + path.string());
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    base.override_task(task_from_json_line(line, n));
  }
  return base;
}

std::string to_json_line(const PromptedExample& example) {
  ordered_json j;
  j["task"] = example.task_name;
  j["input_text"] = example.input_text;
  j["target_text"] = example.target_text;
  j["input_ids"] = example.input_ids;
  j["target_ids"] = example.target_ids;
  return j.dump();
}

PromptedExample example_from_json_line(const std::string& line, std::size_t line_number) {
  const json j = parse_line(line, line_number);
  PromptedExample ex;
  ex.task_name = string_field(j, "task", line_number);
  ex.input_text = string_field(j, "input_text", line_number);
  ex.target_text = string_field(j, "target_text", line_number);
  ex.input_ids = ids_field(j, "input_ids", line_number);
  ex.target_ids = ids_field(j, "target_ids", line_number);
  return ex;
}

}  // namespace ufa
