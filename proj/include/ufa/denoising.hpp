#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ufa/corpus.hpp"
#include "ufa/promptkit.hpp"
#include "ufa/rng.hpp"
#include "ufa/tokenizer.hpp"

namespace ufa {

inline constexpr std::string_view kDenoiseTask = "denoise";

struct CorruptionConfig {
  double corruption_rate = 0.15;
  double mean_span_length = 3.0;
  std::size_t max_sentinels = Tokenizer::kDefaultSentinels;
  std::uint64_t seed = 0;

  void validate() const;  // throws ConfigError
};

struct CorruptedPair {
  std::vector<int> input;
  std::vector<int> target;  // <X_0> span0 <X_1> span1 ... <eos>
};

// Removes round(rate * n) tokens (at least 1, at most n - 1) as
// round(budget / mean_span_length) non-touching spans of near-equal length.
// Throws CorruptionError for sequences shorter than 2 tokens and
// ContractError when the input already holds a sentinel.
CorruptedPair corrupt(std::span<const int> token_ids, const CorruptionConfig& config,
                      const Tokenizer& tokenizer, Rng& rng);

// Longest window whose corrupted input and target both fit the limits.
std::size_t denoise_window(const CorruptionConfig& config, const LengthLimits& limits);

struct DenoiseStats {
  std::size_t records = 0;
  std::size_t examples = 0;
  std::size_t skipped = 0;  // windows that could not be corrupted
};

// Role-rendered dialogues, tokenized, cut into consecutive windows and
// corrupted. Record i draws from Rng::derive(config.seed, i), so shards can
// be built independently. Texts are decoded ids, kept for inspection.
std::vector<PromptedExample> build_denoise_dataset(std::span<const DialogueRecord> records,
                                                   const Tokenizer& tokenizer, const CorruptionConfig& config,
                                                   const LengthLimits& limits = {},
                                                   DenoiseStats* stats = nullptr);

}  // namespace ufa
