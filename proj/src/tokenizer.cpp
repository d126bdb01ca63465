#include "ufa/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include "ufa/error.hpp"
#include "ufa/utf8.hpp"

namespace ufa {

namespace {

bool allowed(char32_t c, const NormalizerConfig& config) {
  if (utf8::is_ascii_alnum(c)) return true;
  if (config.allow_cjk && utf8::is_cjk(c)) return true;
  return c != ' ' && c != Tokenizer::kBoundary &&
         config.punctuation.find(c) != std::u32string::npos;
}

std::vector<std::u32string> split_words(const std::string& normalized) {
  std::vector<std::u32string> words;
  std::u32string cur;
  for (char32_t c : utf8::decode(normalized)) {
    if (c == ' ') {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

bool is_sentinel_string(std::string_view s) {
  if (s.size() < 5 || s.substr(0, 3) != "<X_" || s.back() != '>') return false;
  const auto digits = s.substr(3, s.size() - 4);
  return !digits.empty() && std::all_of(digits.begin(), digits.end(),
                                        [](char c) { return c >= '0' && c <= '9'; });
}

}  // namespace

std::string normalize(std::string_view text, const NormalizerConfig& config) {
  std::u32string out;
  bool pending_space = false;
  for (char32_t c : utf8::decode(text)) {
    if (allowed(c, config)) {
      if (pending_space && !out.empty()) out.push_back(' ');
      pending_space = false;
      out.push_back(c);
    } else {
      pending_space = true;
    }
  }
  return utf8::encode(out);
}

std::vector<std::string> default_special_tokens() {
  return {std::string(tokens::pad),      std::string(tokens::eos),
          std::string(tokens::unk),      std::string(tokens::task),
          std::string(tokens::dialogue), std::string(tokens::goal),
          std::string(tokens::customer), std::string(tokens::agent)};
}

std::string sentinel_token(std::size_t k) { return "<X_" + std::to_string(k) + ">"; }

Tokenizer Tokenizer::train(std::span<const std::string> corpus, std::size_t vocab_size,
                           std::vector<std::string> special_tokens, std::size_t n_sentinels,
                           NormalizerConfig normalizer) {
  // <pad>, <eos>, <unk> lead the id space in that order.
  std::vector<std::string> specials = {std::string(tokens::pad), std::string(tokens::eos),
                                       std::string(tokens::unk)};
  for (auto& s : special_tokens) {
    if (std::find(specials.begin(), specials.end(), s) == specials.end()) specials.push_back(s);
  }

  std::map<std::u32string, std::size_t> word_counts;
  std::set<char32_t> chars;
  for (const auto& line : corpus) {
    for (auto& w : split_words(normalize(line, normalizer))) {
      chars.insert(w.begin(), w.end());
      ++word_counts[w];
    }
  }
  if (!word_counts.empty()) chars.insert(kBoundary);

  const std::size_t reserved = specials.size() + n_sentinels + chars.size();
  if (vocab_size <= reserved) {
    throw SizingError("vocab_size " + std::to_string(vocab_size) +
                      " must exceed reserved entries (" + std::to_string(specials.size()) +
                      " special + " + std::to_string(n_sentinels) + " sentinel + " +
                      std::to_string(chars.size()) + " base characters)");
  }

  Tokenizer tok;
  tok.normalizer_ = normalizer;
  tok.n_sentinels_ = n_sentinels;
  tok.vocab_ = specials;
  for (char32_t c : chars) tok.vocab_.push_back(utf8::encode(c));

  std::set<std::string> forbidden(specials.begin(), specials.end());
  for (std::size_t k = 0; k < n_sentinels; ++k) forbidden.insert(sentinel_token(k));
  std::set<std::string> known(tok.vocab_.begin(), tok.vocab_.end());

  // Each distinct word as a symbol sequence with its frequency.
  std::vector<std::pair<std::vector<std::string>, std::size_t>> words;
  for (const auto& [w, count] : word_counts) {
    std::vector<std::string> symbols{utf8::encode(kBoundary)};
    for (char32_t c : w) symbols.push_back(utf8::encode(c));
    words.emplace_back(std::move(symbols), count);
  }

  const std::size_t budget = vocab_size - n_sentinels;
  while (tok.vocab_.size() < budget) {
    std::map<std::pair<std::string, std::string>, std::size_t> pair_counts;
    for (const auto& [symbols, count] : words) {
      for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
        pair_counts[{symbols[i], symbols[i + 1]}] += count;
      }
    }
    // Highest count wins; std::map iteration order breaks ties lexicographically.
    const std::pair<std::string, std::string>* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [pair, count] : pair_counts) {
      if (count > best_count && !forbidden.count(pair.first + pair.second)) {
        best = &pair;
        best_count = count;
      }
    }
    if (best == nullptr) break;
    const auto merged_pair = *best;
    const std::string merged = merged_pair.first + merged_pair.second;
    tok.merges_.push_back(merged_pair);
    if (known.insert(merged).second) tok.vocab_.push_back(merged);
    for (auto& [symbols, count] : words) {
      std::vector<std::string> next;
      next.reserve(symbols.size());
      for (std::size_t i = 0; i < symbols.size(); ++i) {
        if (i + 1 < symbols.size() && symbols[i] == merged_pair.first &&
            symbols[i + 1] == merged_pair.second) {
          next.push_back(merged);
          ++i;
        } else {
          next.push_back(symbols[i]);
        }
      }
      symbols = std::move(next);
    }
  }
  for (std::size_t k = n_sentinels; k-- > 0;) tok.vocab_.push_back(sentinel_token(k));
  tok.index();
  return tok;
}

void Tokenizer::index() {
  ids_.clear();
  merge_rank_.clear();
  specials_.clear();
  special_flag_.assign(vocab_.size(), false);
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    if (!ids_.emplace(vocab_[i], static_cast<int>(i)).second) {
      throw FormatError("duplicate token '" + vocab_[i] + "'");
    }
  }
  std::set<std::string> merged;
  for (std::size_t r = 0; r < merges_.size(); ++r) {
    merge_rank_.emplace(merges_[r], static_cast<int>(r));
    merged.insert(merges_[r].first + merges_[r].second);
  }
  n_sentinels_ = 0;
  for (std::size_t i = 0; i < vocab_.size(); ++i) {
    const auto& t = vocab_[i];
    if (merged.count(t) || utf8::decode(t).size() == 1) continue;
    special_flag_[i] = true;
    specials_.push_back(t);
    if (is_sentinel_string(t)) ++n_sentinels_;
  }
  std::stable_sort(specials_.begin(), specials_.end(),
                   [](const std::string& a, const std::string& b) { return a.size() > b.size(); });
  if (vocab_.empty() || vocab_[0] != tokens::pad) throw FormatError("<pad> must have id 0");
  eos_ = id(tokens::eos);
  unk_ = id(tokens::unk);
  for (std::size_t k = 0; k < n_sentinels_; ++k) {
    if (!contains(sentinel_token(k)) ||
        id(sentinel_token(k)) != static_cast<int>(vocab_.size() - 1 - k)) {
      throw FormatError("sentinel " + sentinel_token(k) + " is not at the top of the id space");
    }
  }
}

int Tokenizer::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) throw ContractError("unknown token '" + std::string(token) + "'");
  return it->second;
}

bool Tokenizer::contains(std::string_view token) const {
  return ids_.count(std::string(token)) > 0;
}

const std::string& Tokenizer::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw DecodeError(0, "id " + std::to_string(id) + " out of range");
  }
  return vocab_[static_cast<std::size_t>(id)];
}

int Tokenizer::sentinel_id(std::size_t k) const {
  if (k >= n_sentinels_) throw ContractError("sentinel index " + std::to_string(k) + " out of range");
  return static_cast<int>(vocab_.size() - 1 - k);
}

bool Tokenizer::is_sentinel(int id) const {
  return id >= 0 && static_cast<std::size_t>(id) < vocab_.size() &&
         static_cast<std::size_t>(id) >= vocab_.size() - n_sentinels_;
}

bool Tokenizer::is_special(int id) const {
  return id >= 0 && static_cast<std::size_t>(id) < vocab_.size() &&
         special_flag_[static_cast<std::size_t>(id)];
}

void Tokenizer::encode_word(const std::u32string& word, std::vector<int>& out) const {
  std::vector<std::string> symbols{utf8::encode(kBoundary)};
  for (char32_t c : word) symbols.push_back(utf8::encode(c));
  while (symbols.size() > 1) {
    int best_rank = -1;
    std::size_t best_pos = 0;
    for (std::size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find({symbols[i], symbols[i + 1]});
      if (it != merge_rank_.end() && (best_rank < 0 || it->second < best_rank)) {
        best_rank = it->second;
        best_pos = i;
      }
    }
    if (best_rank < 0) break;
    symbols[best_pos] += symbols[best_pos + 1];
    symbols.erase(symbols.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
  }
  for (const auto& s : symbols) {
    auto it = ids_.find(s);
    out.push_back(it == ids_.end() ? unk_ : it->second);
  }
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> out;
  auto emit_plain = [&](std::string_view segment) {
    for (const auto& w : split_words(normalize(segment, normalizer_))) encode_word(w, out);
  };
  std::size_t start = 0;
  std::size_t i = 0;
  while (i < text.size()) {
    if (text[i] == '[' || text[i] == '<') {
      const std::string* match = nullptr;
      for (const auto& s : specials_) {
        if (text.compare(i, s.size(), s) == 0) {
          match = &s;
          break;
        }
      }
      if (match != nullptr) {
        emit_plain(text.substr(start, i - start));
        out.push_back(ids_.at(*match));
        i += match->size();
        start = i;
        continue;
      }
    }
    ++i;
  }
  emit_plain(text.substr(start));
  return out;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  static const std::string kMarker = utf8::encode(kBoundary);
  std::string out;
  for (std::size_t pos = 0; pos < ids.size(); ++pos) {
    const int id = ids[pos];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
      throw DecodeError(pos, "id " + std::to_string(id) + " outside vocabulary of size " +
                                 std::to_string(vocab_.size()));
    }
    if (id == pad_id() || id == eos_) continue;
    const std::string& t = vocab_[static_cast<std::size_t>(id)];
    if (id != unk_ && special_flag_[static_cast<std::size_t>(id)]) {
      if (!out.empty() && out.back() != ' ') out.push_back(' ');
      out += t;
      out.push_back(' ');
      continue;
    }
    if (t.compare(0, kMarker.size(), kMarker) == 0) {
      if (!out.empty() && out.back() != ' ') out.push_back(' ');
      out.append(t, kMarker.size());
    } else {
      out += t;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

void Tokenizer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write tokenizer file " + path.string());
  out << "UFATOK1\n";
  for (std::size_t i = 0; i < vocab_.size(); ++i) out << vocab_[i] << '\t' << i << '\n';
  out << "#MERGES\n";
  for (const auto& [l, r] : merges_) out << l << '\t' << r << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

Tokenizer Tokenizer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open tokenizer file " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "UFATOK1") throw FormatError("bad tokenizer magic");
  Tokenizer tok;
  bool in_merges = false;
  std::size_t n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (!in_merges && line == "#MERGES") {
      in_merges = true;
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw FormatError("tokenizer line " + std::to_string(n) + ": missing tab");
    }
    if (in_merges) {
      tok.merges_.emplace_back(line.substr(0, tab), line.substr(tab + 1));
    } else {
      std::size_t id = 0;
      try {
        id = std::stoul(line.substr(tab + 1));
      } catch (const std::exception&) {
        throw FormatError("tokenizer line " + std::to_string(n) + ": bad id");
      }
      if (id != tok.vocab_.size()) {
        throw FormatError("tokenizer line " + std::to_string(n) + ": ids must be dense and ordered");
      }
      tok.vocab_.push_back(line.substr(0, tab));
    }
  }
  if (!in_merges) throw FormatError("tokenizer file has no #MERGES section");
  tok.index();
  // Single-character entries other than the boundary marker and alphanumerics
  // were admitted as configured punctuation at training time.
  bool cjk = false;
  for (std::size_t i = 0; i < tok.vocab_.size(); ++i) {
    const auto cps = utf8::decode(tok.vocab_[i]);
    if (cps.size() != 1 || tok.special_flag_[i]) continue;
    const char32_t c = cps[0];
    if (utf8::is_cjk(c)) cjk = true;
    if (c != kBoundary && !utf8::is_ascii_alnum(c) && !utf8::is_cjk(c)) {
      tok.normalizer_.punctuation.push_back(c);
    }
  }
  tok.normalizer_.allow_cjk = cjk || tok.normalizer_.allow_cjk;
  return tok;
}

}  // namespace ufa
