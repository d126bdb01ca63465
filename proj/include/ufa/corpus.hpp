#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace ufa {

enum class Role { customer, agent };
enum class Provenance { weak, gold };

std::string to_string(Role role);
std::string to_string(Provenance provenance);

struct Utterance {
  Role role = Role::customer;
  std::string text;

  bool operator==(const Utterance&) const = default;
};

struct DialogueRecord {
  std::string id;
  std::vector<Utterance> utterances;
  std::optional<std::string> domain_label;
  std::optional<std::string> intent_label;
  std::optional<std::string> summary;
  Provenance label_provenance = Provenance::weak;

  bool operator==(const DialogueRecord&) const = default;
};

// Two customer queries and whether they express the same need. Kept apart
// from DialogueRecord because a pair has no agent turn.
struct SentencePair {
  std::string id;
  std::string first;
  std::string second;
  std::string label;  // "positive" | "negative"

  bool operator==(const SentencePair&) const = default;
};

struct GeneratorConfig {
  std::size_t n_dialogues = 1000;
  std::size_t n_domains = 24;
  std::size_t n_intents = 20;
  std::pair<std::size_t, std::size_t> turns_range{4, 8};
  double label_noise_rate = 0.0;
  Provenance provenance = Provenance::weak;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

// Labels the generator actually used, before noise was applied.
struct TrueLabels {
  std::string domain;
  std::string intent;
};

struct GeneratedCorpus {
  std::vector<DialogueRecord> records;
  std::vector<TrueLabels> truth;
};

// Closed label vocabularies of the built-in templated taxonomy.
std::vector<std::string> domain_labels(std::size_t n_domains = 24);
std::vector<std::string> intent_labels(std::size_t n_intents = 20);
std::size_t max_domains();
std::size_t max_intents();

GeneratedCorpus generate_labeled_corpus(const GeneratorConfig& config);
std::vector<DialogueRecord> generate_corpus(const GeneratorConfig& config);

std::vector<SentencePair> generate_sentence_pairs(std::size_t n_pairs, std::size_t n_intents,
                                                  std::uint64_t seed);

// Structural checks of a record. When label sets are given and the record
// is gold, present labels must come from them.
void validate_record(const DialogueRecord& record,
                     const std::vector<std::string>* domain_set = nullptr,
                     const std::vector<std::string>* intent_set = nullptr);

std::string to_json_line(const DialogueRecord& record);
DialogueRecord record_from_json_line(const std::string& line, std::size_t line_number);
std::string to_json_line(const SentencePair& pair);
SentencePair pair_from_json_line(const std::string& line, std::size_t line_number);

// Single-consumer reader over a JSONL corpus file.
class CorpusReader {
 public:
  explicit CorpusReader(const std::filesystem::path& path);

  // Next record in file order, or nullopt at end. Blank lines are skipped.
  std::optional<DialogueRecord> next();
  std::size_t line_number() const { return line_; }

 private:
  std::ifstream in_;
  std::size_t line_ = 0;
};

std::vector<DialogueRecord> load_corpus(const std::filesystem::path& path);
void save_corpus(const std::filesystem::path& path, const std::vector<DialogueRecord>& records);
std::vector<SentencePair> load_sentence_pairs(const std::filesystem::path& path);
void save_sentence_pairs(const std::filesystem::path& path, const std::vector<SentencePair>& pairs);

template <typename Record>
struct Split {
  std::vector<Record> train;
  std::vector<Record> dev;
  std::vector<Record> test;
};

// Test takes round(test_fraction * n) records, dev takes dev_size, train the
// rest. Stratified by domain label when present; partitions keep input order.
Split<DialogueRecord> split_corpus(const std::vector<DialogueRecord>& records, std::size_t dev_size,
                                   double test_fraction, std::uint64_t seed);
Split<SentencePair> split_pairs(const std::vector<SentencePair>& pairs, std::size_t dev_size,
                                double test_fraction, std::uint64_t seed);

}  // namespace ufa
