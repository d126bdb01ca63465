#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "test_support.hpp"
#include "ufa/corpus.hpp"
#include "ufa/error.hpp"
#include "ufa/rng.hpp"
#include "ufa/tokenizer.hpp"
#include "ufa/utf8.hpp"

using namespace ufa;

namespace {

// Independent pair-counting BPE trainer: whole-corpus recount per merge,
// ties to the lexicographically smallest pair.
std::vector<std::pair<std::string, std::string>> oracle_merges(const std::vector<std::string>& lines,
                                                               std::size_t n_merges) {
  std::map<std::vector<std::string>, std::size_t> words;
  for (const auto& line : lines) {
    std::string w;
    auto flush = [&] {
      if (w.empty()) return;
      std::vector<std::string> sym{"\xE2\x96\x81"};
      for (char c : w) sym.emplace_back(1, c);
      ++words[sym];
      w.clear();
    };
    for (char c : line) {
      if (c == ' ') {
        flush();
      } else {
        w += c;
      }
    }
    flush();
  }
  std::vector<std::pair<std::string, std::string>> merges;
  while (merges.size() < n_merges) {
    std::map<std::pair<std::string, std::string>, std::size_t> counts;
    for (const auto& [sym, n] : words) {
      for (std::size_t i = 0; i + 1 < sym.size(); ++i) counts[{sym[i], sym[i + 1]}] += n;
    }
    if (counts.empty()) break;
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    const auto pair = best->first;
    merges.push_back(pair);
    std::map<std::vector<std::string>, std::size_t> next;
    for (const auto& [sym, n] : words) {
      std::vector<std::string> out;
      for (std::size_t i = 0; i < sym.size(); ++i) {
        if (i + 1 < sym.size() && sym[i] == pair.first && sym[i + 1] == pair.second) {
          out.push_back(pair.first + pair.second);
          ++i;
        } else {
          out.push_back(sym[i]);
        }
      }
      next[out] += n;
    }
    words = std::move(next);
  }
  return merges;
}

std::vector<std::string> generator_lines(std::size_t n, std::uint64_t seed) {
  GeneratorConfig cfg;
  cfg.n_dialogues = n;
  cfg.seed = seed;
  std::vector<std::string> lines;
  for (const auto& r : generate_corpus(cfg)) {
    for (const auto& u : r.utterances) lines.push_back(u.text);
    lines.push_back(*r.summary);
  }
  return lines;
}

std::string random_text(Rng& rng, std::size_t words) {
  static const std::string alphabet = "abcdeorst";
  std::string out;
  for (std::size_t w = 0; w < words; ++w) {
    if (w) out += rng.bernoulli(0.2) ? "  " : " ";
    const std::size_t len = 1 + rng.below(6);
    for (std::size_t i = 0; i < len; ++i) out += alphabet[rng.below(alphabet.size())];
    if (rng.bernoulli(0.1)) out += "!";
  }
  return out;
}

}  // namespace

TEST_CASE("normalize: allowlist, collapse and trim") {
  CHECK(normalize("hi!!™ there") == "hi there");
  CHECK(normalize("") == "");
  CHECK(normalize("退款 refund") == "退款 refund");
  CHECK(normalize("  a \t\n b  ") == "a b");
  NormalizerConfig with_bang;
  with_bang.punctuation = U"!";
  CHECK(normalize("hi!!™ there", with_bang) == "hi!! there");
  NormalizerConfig no_cjk;
  no_cjk.allow_cjk = false;
  CHECK(normalize("退款 refund", no_cjk) == "refund");
}

TEST_CASE("train: first merge on a toy corpus is (a, a)") {
  const std::vector<std::string> corpus = {"aaaa aaaa"};
  const auto tok = Tokenizer::train(corpus, 200, default_special_tokens(), 10);
  REQUIRE(!tok.merges().empty());
  CHECK(tok.merges()[0] == std::pair<std::string, std::string>{"a", "a"});
}

TEST_CASE("train: merges equal a brute-force pair-counting oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 5; ++trial) {
    std::vector<std::string> lines;
    for (int i = 0; i < 30; ++i) {
      std::string s;
      const std::size_t words = 1 + rng.below(6);
      for (std::size_t w = 0; w < words; ++w) {
        if (w) s += ' ';
        const std::size_t len = 1 + rng.below(5);
        for (std::size_t c = 0; c < len; ++c) s += "abcd"[rng.below(4)];
      }
      lines.push_back(s);
    }
    const auto tok = Tokenizer::train(lines, 8 + 5 + 10 + 60, default_special_tokens(), 10);
    const auto expected = oracle_merges(lines, tok.merges().size() + 1);
    REQUIRE(expected.size() >= tok.merges().size());
    for (std::size_t i = 0; i < tok.merges().size(); ++i) CHECK(tok.merges()[i] == expected[i]);
  }
  const auto lines = generator_lines(40, 2);
  const auto tok = Tokenizer::train(lines, 400, default_special_tokens(), 20);
  const auto expected = oracle_merges(lines, tok.merges().size());
  CHECK(tok.merges() == expected);
}

TEST_CASE("train: vocab size, reserved ids and sizing errors") {
  const auto lines = generator_lines(200, 1);
  const auto tok = Tokenizer::train(lines, 600);
  CHECK(tok.size() == 600);
  CHECK(tok.pad_id() == 0);
  CHECK(tok.token(0) == "<pad>");
  CHECK(tok.eos_id() == 1);
  CHECK(tok.unk_id() == 2);
  CHECK(tok.n_sentinels() == 100);
  for (std::size_t k = 0; k < 100; ++k) {
    CHECK(tok.sentinel_id(k) == static_cast<int>(tok.size() - 1 - k));
    CHECK(tok.token(tok.sentinel_id(k)) == sentinel_token(k));
    CHECK(tok.is_sentinel(tok.sentinel_id(k)));
  }
  CHECK_FALSE(tok.is_sentinel(5));
  std::set<std::string> unique(tok.vocab().begin(), tok.vocab().end());
  CHECK(unique.size() == tok.size());

  std::set<char32_t> chars;
  for (const auto& l : lines) {
    for (char32_t c : utf8::decode(normalize(l))) {
      if (c != U' ') chars.insert(c);
    }
  }
  const std::size_t reserved = default_special_tokens().size() + 100 + chars.size() + 1;
  CHECK_THROWS_AS(Tokenizer::train(lines, reserved), SizingError);
  CHECK_NOTHROW(Tokenizer::train(lines, reserved + 1));
}

TEST_CASE("train: small corpus stops once no pair is left") {
  const std::vector<std::string> corpus = {"ab ab"};
  const auto tok = Tokenizer::train(corpus, 1000, default_special_tokens(), 4);
  CHECK(tok.size() < 1000);
  CHECK(tok.encode("ab").size() == 1);
}

TEST_CASE("train: deterministic") {
  const auto lines = generator_lines(100, 9);
  CHECK(Tokenizer::train(lines, 500) == Tokenizer::train(lines, 500));
}

TEST_CASE("encode: specials are atomic and longest-first") {
  const auto tok = Tokenizer::train(generator_lines(100, 3), 500);
  for (const auto& s : default_special_tokens()) {
    const auto ids = tok.encode(s);
    REQUIRE(ids.size() == 1);
    CHECK(tok.token(ids[0]) == s);
    CHECK(tok.is_special(ids[0]));
  }
  for (std::size_t k = 0; k < tok.n_sentinels(); ++k) CHECK(tok.encode(sentinel_token(k)).size() == 1);
  const auto ids = tok.encode("[CUSTOMER] hi");
  REQUIRE(ids.size() >= 2);
  CHECK(ids[0] == tok.id("[CUSTOMER]"));
  CHECK(std::vector<int>(ids.begin() + 1, ids.end()) == tok.encode("hi"));
  CHECK(tok.encode("").empty());
  // A sentinel glued to text is still one token.
  const auto glued = tok.encode("abc<X_12>def");
  CHECK(std::count(glued.begin(), glued.end(), tok.sentinel_id(12)) == 1);
  // Unmatched brackets are ordinary text.
  CHECK(tok.encode("[TASKS]") == tok.encode("TASKS"));
}

TEST_CASE("encode: unknown characters map to <unk>") {
  const std::vector<std::string> corpus = {"abc abc"};
  const auto tok = Tokenizer::train(corpus, 200, default_special_tokens(), 4);
  const auto ids = tok.encode("abz");
  CHECK(std::find(ids.begin(), ids.end(), tok.unk_id()) != ids.end());
}

TEST_CASE("decode: drop rules, errors and round trip") {
  const auto lines = generator_lines(200, 4);
  const auto tok = Tokenizer::train(lines, 700);
  CHECK(tok.decode(std::vector<int>{}) == "");
  CHECK(tok.decode(std::vector<int>{tok.pad_id(), tok.eos_id()}) == "");
  try {
    tok.decode(std::vector<int>{3, 4, static_cast<int>(tok.size())});
    FAIL("expected a decode error");
  } catch (const DecodeError& e) {
    CHECK(e.position() == 2);
  }
  CHECK_THROWS_AS(tok.decode(std::vector<int>{-1}), DecodeError);

  for (const auto& l : lines) CHECK(tok.decode(tok.encode(l)) == normalize(l));
  Rng rng(77);
  std::size_t checked = 0;
  for (int i = 0; i < 1000; ++i) {
    const std::string s = random_text(rng, 1 + rng.below(8));
    const auto ids = tok.encode(s);
    if (std::find(ids.begin(), ids.end(), tok.unk_id()) != ids.end()) continue;
    CHECK(tok.decode(ids) == normalize(s));
    ++checked;
  }
  CHECK(checked > 500);
  const std::string sentinel_text = "a " + sentinel_token(0) + " b";
  CHECK(tok.decode(tok.encode(sentinel_text)) == sentinel_text);
}

TEST_CASE("save/load: ids and merges are preserved exactly") {
  testing::TempDir dir("tok");
  const auto tok = Tokenizer::train(generator_lines(150, 8), 600);
  tok.save(dir / "t.tok");
  const auto back = Tokenizer::load(dir / "t.tok");
  CHECK(back == tok);
  CHECK(back.size() == tok.size());
  CHECK(back.n_sentinels() == tok.n_sentinels());
  for (std::size_t i = 0; i < tok.size(); ++i) {
    CHECK(back.token(static_cast<int>(i)) == tok.token(static_cast<int>(i)));
    CHECK(back.id(tok.token(static_cast<int>(i))) == static_cast<int>(i));
    CHECK(back.is_special(static_cast<int>(i)) == tok.is_special(static_cast<int>(i)));
  }
  for (const auto& l : generator_lines(20, 99)) CHECK(back.encode(l) == tok.encode(l));
  back.save(dir / "t2.tok");
  CHECK(testing::read_file(dir / "t.tok") == testing::read_file(dir / "t2.tok"));
  CHECK(testing::read_file(dir / "t.tok").rfind("UFATOK1\n<pad>\t0\n", 0) == 0);
}

TEST_CASE("load: malformed files") {
  testing::TempDir dir("tok");
  CHECK_THROWS_AS(Tokenizer::load(dir / "missing.tok"), IoError);
  testing::write_file(dir / "bad.tok", "NOTATOK\n");
  CHECK_THROWS_AS(Tokenizer::load(dir / "bad.tok"), FormatError);
  testing::write_file(dir / "gap.tok", "UFATOK1\n<pad>\t0\n<eos>\t2\n#MERGES\n");
  CHECK_THROWS_AS(Tokenizer::load(dir / "gap.tok"), FormatError);
  testing::write_file(dir / "nomerge.tok", "UFATOK1\n<pad>\t0\n");
  CHECK_THROWS_AS(Tokenizer::load(dir / "nomerge.tok"), FormatError);
}
