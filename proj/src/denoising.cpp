#include "ufa/denoising.hpp"

#include <algorithm>
#include <cmath>

#include "ufa/error.hpp"

namespace ufa {

void CorruptionConfig::validate() const {
  if (!(corruption_rate > 0.0 && corruption_rate < 1.0)) {
    throw ConfigError("corruption_rate must lie in (0, 1), got " + std::to_string(corruption_rate));
  }
  if (!(mean_span_length >= 1.0)) {
    throw ConfigError("mean_span_length must be >= 1, got " + std::to_string(mean_span_length));
  }
  if (max_sentinels == 0) throw ConfigError("max_sentinels must be positive");
}

namespace {

struct Plan {
  std::size_t budget;
  std::size_t spans;
};

Plan plan_for(std::size_t n, const CorruptionConfig& config) {
  auto budget = static_cast<std::size_t>(std::llround(config.corruption_rate * static_cast<double>(n)));
  budget = std::clamp<std::size_t>(budget, 1, n - 1);
  auto spans = static_cast<std::size_t>(std::llround(static_cast<double>(budget) / config.mean_span_length));
  spans = std::max<std::size_t>(spans, 1);
  // Non-touching spans need a kept token between neighbours.
  spans = std::min({spans, budget, n - budget + 1, config.max_sentinels});
  return {budget, spans};
}

}  // namespace

CorruptedPair corrupt(std::span<const int> token_ids, const CorruptionConfig& config, const Tokenizer& tokenizer,
                      Rng& rng) {
  const std::size_t n = token_ids.size();
  if (n < 2) throw CorruptionError("cannot corrupt a sequence of " + std::to_string(n) + " tokens");
  if (config.max_sentinels > tokenizer.n_sentinels()) {
    throw ConfigError("max_sentinels " + std::to_string(config.max_sentinels) + " exceeds the tokenizer's " +
                      std::to_string(tokenizer.n_sentinels()) + " sentinels");
  }
  for (int id : token_ids) {
    if (tokenizer.is_sentinel(id)) throw ContractError("corrupt: input already contains sentinel id " + std::to_string(id));
  }
  const auto [budget, spans] = plan_for(n, config);

  std::vector<std::size_t> lengths(spans, budget / spans);
  for (std::size_t i = 0; i < budget % spans; ++i) lengths[i] += 1;
  rng.shuffle(lengths);

  // Kept tokens fall into spans + 1 gaps; inner gaps hold at least one.
  const std::size_t kept = n - budget;
  const std::size_t spare = kept - (spans - 1);
  std::vector<std::size_t> slots(spare + spans);
  for (std::size_t i = 0; i < slots.size(); ++i) slots[i] = i;
  for (std::size_t i = 0; i < spans; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(slots.size() - i));
    std::swap(slots[i], slots[j]);
  }
  std::vector<std::size_t> bars(slots.begin(), slots.begin() + static_cast<std::ptrdiff_t>(spans));
  std::sort(bars.begin(), bars.end());
  std::vector<std::size_t> gaps(spans + 1);
  std::size_t prev = 0;
  for (std::size_t i = 0; i < spans; ++i) {
    gaps[i] = bars[i] - prev;  // stars before this bar
    prev = bars[i] + 1;
  }
  gaps[spans] = slots.size() - prev;
  for (std::size_t i = 1; i < spans; ++i) gaps[i] += 1;

  CorruptedPair out;
  out.input.reserve(kept + spans);
  out.target.reserve(budget + spans + 1);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < spans; ++s) {
    out.input.insert(out.input.end(), token_ids.begin() + static_cast<std::ptrdiff_t>(pos),
                     token_ids.begin() + static_cast<std::ptrdiff_t>(pos + gaps[s]));
    pos += gaps[s];
    const int sentinel = tokenizer.sentinel_id(s);
    out.input.push_back(sentinel);
    out.target.push_back(sentinel);
    out.target.insert(out.target.end(), token_ids.begin() + static_cast<std::ptrdiff_t>(pos),
                      token_ids.begin() + static_cast<std::ptrdiff_t>(pos + lengths[s]));
    pos += lengths[s];
  }
  out.input.insert(out.input.end(), token_ids.begin() + static_cast<std::ptrdiff_t>(pos), token_ids.end());
  out.target.push_back(tokenizer.eos_id());
  return out;
}

std::size_t denoise_window(const CorruptionConfig& config, const LengthLimits& limits) {
  std::size_t best = 0;
  for (std::size_t w = 2; w <= limits.max_source; ++w) {
    const auto [budget, spans] = plan_for(w, config);
    if (w - budget + spans <= limits.max_source && budget + spans + 1 <= limits.max_target) best = w;
  }
  if (best == 0) throw ConfigError("length limits leave no room for a corrupted window");
  return best;
}

std::vector<PromptedExample> build_denoise_dataset(std::span<const DialogueRecord> records,
                                                   const Tokenizer& tokenizer, const CorruptionConfig& config,
                                                   const LengthLimits& limits, DenoiseStats* stats) {
  config.validate();
  const std::size_t window = denoise_window(config, limits);
  std::vector<PromptedExample> out;
  for (std::size_t r = 0; r < records.size(); ++r) {
    if (stats != nullptr) ++stats->records;
    if (records[r].utterances.empty()) {
      if (stats != nullptr) ++stats->skipped;
      continue;
    }
    Rng rng(Rng::derive(config.seed, r));
    const auto ids = tokenizer.encode(render_dialogue_history(records[r].utterances));
    for (std::size_t start = 0; start < ids.size(); start += window) {
      const auto piece = std::span<const int>(ids).subspan(start, std::min(window, ids.size() - start));
      try {
        auto pair = corrupt(piece, config, tokenizer, rng);
        PromptedExample ex;
        ex.task_name = std::string(kDenoiseTask);
        ex.input_text = tokenizer.decode(pair.input);
        ex.target_text = tokenizer.decode(pair.target);
        ex.input_ids = std::move(pair.input);
        ex.target_ids = std::move(pair.target);
        out.push_back(std::move(ex));
        if (stats != nullptr) ++stats->examples;
      } catch (const CorruptionError&) {
        if (stats != nullptr) ++stats->skipped;
      }
    }
  }
  return out;
}

}  // namespace ufa
