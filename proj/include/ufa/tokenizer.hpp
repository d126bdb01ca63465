#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace ufa {

// Characters kept by normalize(): ASCII letters and digits, CJK ideographs
// when enabled, plus any extra punctuation listed here. Everything else
// becomes a space; space runs collapse and the result is trimmed.
struct NormalizerConfig {
  bool allow_cjk = true;
  std::u32string punctuation;
};

std::string normalize(std::string_view text, const NormalizerConfig& config = {});

namespace tokens {
inline constexpr std::string_view pad = "<pad>";
inline constexpr std::string_view eos = "<eos>";
inline constexpr std::string_view unk = "<unk>";
inline constexpr std::string_view task = "[TASK]";
inline constexpr std::string_view dialogue = "[DIALOGUE]";
inline constexpr std::string_view goal = "[GOAL]";
inline constexpr std::string_view customer = "[CUSTOMER]";
inline constexpr std::string_view agent = "[AGENT]";
}  // namespace tokens

std::vector<std::string> default_special_tokens();
std::string sentinel_token(std::size_t k);

// Greedy byte-pair-merge subword model over Unicode code points. Words carry
// a leading U+2581 boundary marker so whitespace round-trips. Id layout:
// special tokens (<pad> = 0), base characters, merge results, then the
// sentinels <X_0> = size-1, <X_1> = size-2, ... at the top.
class Tokenizer {
 public:
  static constexpr std::size_t kDefaultSentinels = 100;
  static constexpr char32_t kBoundary = U'▁';

  Tokenizer() = default;

  // Stops early if no mergeable pair is left, so the model may hold fewer
  // than vocab_size entries. Throws SizingError when vocab_size does not
  // exceed the reserved entries plus the base character set.
  static Tokenizer train(std::span<const std::string> corpus, std::size_t vocab_size,
                         std::vector<std::string> special_tokens = default_special_tokens(),
                         std::size_t n_sentinels = kDefaultSentinels,
                         NormalizerConfig normalizer = {});

  std::vector<int> encode(std::string_view text) const;
  // Throws DecodeError on an out-of-range id.
  std::string decode(std::span<const int> ids) const;

  std::size_t size() const { return vocab_.size(); }
  int id(std::string_view token) const;  // throws ContractError when absent
  bool contains(std::string_view token) const;
  const std::string& token(int id) const;
  int pad_id() const { return 0; }
  int eos_id() const { return eos_; }
  int unk_id() const { return unk_; }
  std::size_t n_sentinels() const { return n_sentinels_; }
  int sentinel_id(std::size_t k) const;
  bool is_sentinel(int id) const;
  bool is_special(int id) const;

  const std::vector<std::string>& vocab() const { return vocab_; }
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
  const NormalizerConfig& normalizer() const { return normalizer_; }

  void save(const std::filesystem::path& path) const;
  static Tokenizer load(const std::filesystem::path& path);

  bool operator==(const Tokenizer& other) const {
    return vocab_ == other.vocab_ && merges_ == other.merges_;
  }

 private:
  void index();
  void encode_word(const std::u32string& word, std::vector<int>& out) const;

  std::vector<std::string> vocab_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::vector<std::string> specials_;  // longest first, for greedy matching
  std::unordered_map<std::string, int> ids_;
  std::map<std::pair<std::string, std::string>, int> merge_rank_;
  std::vector<bool> special_flag_;
  NormalizerConfig normalizer_;
  std::size_t n_sentinels_ = 0;
  int eos_ = 1;
  int unk_ = 2;
};

}  // namespace ufa
