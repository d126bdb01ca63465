#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "test_support.hpp"
#include "ufa/corpus.hpp"
#include "ufa/error.hpp"
#include "taxonomy.hpp"

using namespace ufa;

namespace {

GeneratorConfig small_config(std::size_t n, std::uint64_t seed = 3) {
  GeneratorConfig c;
  c.n_dialogues = n;
  c.seed = seed;
  return c;
}

std::multiset<std::string> ids_of(const std::vector<DialogueRecord>& rs) {
  std::multiset<std::string> out;
  for (const auto& r : rs) out.insert(r.id);
  return out;
}

}  // namespace

TEST_CASE("generate_corpus: empty request gives an empty list") {
  CHECK(generate_corpus(small_config(0)).empty());
}

TEST_CASE("generate_corpus: same seed gives byte-identical output") {
  const auto a = generate_corpus(small_config(50, 11));
  const auto b = generate_corpus(small_config(50, 11));
  REQUIRE(a.size() == 50);
  std::string ja, jb;
  for (const auto& r : a) ja += to_json_line(r) + "\n";
  for (const auto& r : b) jb += to_json_line(r) + "\n";
  CHECK(ja == jb);
  const auto c = generate_corpus(small_config(50, 12));
  CHECK(a != c);
}

TEST_CASE("generate_corpus: records are structurally valid and labels come from the taxonomy") {
  auto cfg = small_config(300);
  cfg.turns_range = {2, 9};
  const auto domains = domain_labels();
  const auto intents = intent_labels();
  std::set<std::string> ids;
  for (const auto& r : generate_corpus(cfg)) {
    CHECK_NOTHROW(validate_record(r, &domains, &intents));
    CHECK(r.utterances.size() >= 2);
    CHECK(r.utterances.size() <= 9);
    CHECK(r.utterances.front().role == Role::customer);
    REQUIRE(r.domain_label);
    REQUIRE(r.intent_label);
    CHECK(std::count(domains.begin(), domains.end(), *r.domain_label) == 1);
    CHECK(std::count(intents.begin(), intents.end(), *r.intent_label) == 1);
    CHECK(r.summary);
    ids.insert(r.id);
  }
  CHECK(ids.size() == 300);
}

TEST_CASE("generate_corpus: weak-label noise is calibrated") {
  GeneratorConfig cfg = small_config(10000, 7);
  cfg.label_noise_rate = 0.2;
  const auto g = generate_labeled_corpus(cfg);
  std::size_t domain_flips = 0, intent_flips = 0;
  for (std::size_t i = 0; i < g.records.size(); ++i) {
    domain_flips += *g.records[i].domain_label != g.truth[i].domain;
    intent_flips += *g.records[i].intent_label != g.truth[i].intent;
  }
  const double n = 10000.0;
  const double tol = 3 * std::sqrt(0.2 * 0.8 / n);
  CHECK(std::abs(domain_flips / n - 0.2) <= tol);
  CHECK(std::abs(intent_flips / n - 0.2) <= tol);
  CHECK(std::abs(domain_flips / n - 0.2) <= 0.02);
}

TEST_CASE("generate_corpus: zero noise keeps true labels") {
  const auto g = generate_labeled_corpus(small_config(200));
  for (std::size_t i = 0; i < g.records.size(); ++i) {
    CHECK(*g.records[i].domain_label == g.truth[i].domain);
    CHECK(*g.records[i].intent_label == g.truth[i].intent);
  }
}

TEST_CASE("GeneratorConfig: invalid fields are named") {
  auto c = small_config(1);
  c.n_domains = 1;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_domains"), ConfigError);
  c = small_config(1);
  c.n_intents = 99;
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("n_intents"), ConfigError);
  c = small_config(1);
  c.label_noise_rate = 1.5;
  CHECK_THROWS_WITH_AS(generate_corpus(c), doctest::Contains("label_noise_rate"), ConfigError);
}

TEST_CASE("generate_corpus: restricted taxonomy uses only the first classes") {
  auto c = small_config(400);
  c.n_domains = 3;
  c.n_intents = 4;
  const auto d = domain_labels(3);
  const auto k = intent_labels(4);
  for (const auto& r : generate_corpus(c)) {
    CHECK(std::find(d.begin(), d.end(), *r.domain_label) != d.end());
    CHECK(std::find(k.begin(), k.end(), *r.intent_label) != k.end());
  }
}

TEST_CASE("JSONL round trip preserves records") {
  testing::TempDir dir("corpus");
  auto records = generate_corpus(small_config(20));
  records[3].summary.reset();
  records[4].label_provenance = Provenance::gold;
  records[5].utterances[0].text = "退款 please — \"quoted\"";
  save_corpus(dir / "c.jsonl", records);
  CHECK(load_corpus(dir / "c.jsonl") == records);
}

TEST_CASE("load_corpus: empty file, blank lines and order") {
  testing::TempDir dir("corpus");
  testing::write_file(dir / "empty.jsonl", "");
  CHECK(load_corpus(dir / "empty.jsonl").empty());

  const auto records = generate_corpus(small_config(3));
  std::string text;
  for (const auto& r : records) text += to_json_line(r) + "\n\n";
  testing::write_file(dir / "three.jsonl", text);
  const auto loaded = load_corpus(dir / "three.jsonl");
  REQUIRE(loaded.size() == 3);
  for (std::size_t i = 0; i < 3; ++i) CHECK(loaded[i].id == records[i].id);
}

TEST_CASE("load_corpus: missing file is an I/O error") {
  CHECK_THROWS_AS(load_corpus("/nonexistent/dir/corpus.jsonl"), IoError);
}

TEST_CASE("load_corpus: schema violations name line and field") {
  testing::TempDir dir("corpus");
  const auto records = generate_corpus(small_config(2));
  const std::string bad = R"({"id":"x","labels":{},"provenance":"weak"})";
  testing::write_file(dir / "bad.jsonl", to_json_line(records[0]) + "\n" + bad + "\n");
  try {
    load_corpus(dir / "bad.jsonl");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
    CHECK(e.field() == "utterances");
  }

  CHECK_THROWS_AS(record_from_json_line(R"({"id":"x","utterances":[{"role":"bot","text":"hi"}],"provenance":"weak"})", 1),
                  ParseError);
  CHECK_THROWS_AS(record_from_json_line("not json", 1), ParseError);
  try {
    record_from_json_line(
        R"({"id":"x","utterances":[{"role":"customer","text":"a"},{"role":"agent","text":"b"}],"provenance":"maybe"})", 4);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.field() == "provenance");
    CHECK(e.line() == 4);
  }
}

TEST_CASE("validate_record: contract checks") {
  DialogueRecord r;
  r.id = "a";
  r.utterances = {{Role::customer, "hi"}, {Role::customer, "hello"}};
  CHECK_THROWS_AS(validate_record(r), ContractError);
  r.utterances[1].role = Role::agent;
  CHECK_NOTHROW(validate_record(r));
  r.utterances[1].text = "two\nlines";
  CHECK_THROWS_AS(validate_record(r), ContractError);
  r.utterances[1].text = "fine";
  r.label_provenance = Provenance::gold;
  r.intent_label = "made up intent";
  const auto intents = intent_labels();
  CHECK_THROWS_AS(validate_record(r, nullptr, &intents), ContractError);
  r.label_provenance = Provenance::weak;
  CHECK_NOTHROW(validate_record(r, nullptr, &intents));
}

TEST_CASE("split_corpus: exact sizes, disjoint, conservation, determinism") {
  const auto records = generate_corpus(small_config(100));
  const auto s = split_corpus(records, 10, 0.2, 5);
  CHECK(s.train.size() == 70);
  CHECK(s.dev.size() == 10);
  CHECK(s.test.size() == 20);
  std::vector<DialogueRecord> all = s.train;
  all.insert(all.end(), s.dev.begin(), s.dev.end());
  all.insert(all.end(), s.test.begin(), s.test.end());
  const auto all_ids = ids_of(all);
  CHECK(all_ids == ids_of(records));
  CHECK(std::set<std::string>(all_ids.begin(), all_ids.end()).size() == 100);

  const auto again = split_corpus(records, 10, 0.2, 5);
  CHECK(again.train == s.train);
  CHECK(again.dev == s.dev);
  CHECK(again.test == s.test);
  const auto other = split_corpus(records, 10, 0.2, 6);
  CHECK(other.test != s.test);
}

TEST_CASE("split_corpus: oversize dev is a sizing error") {
  const auto records = generate_corpus(small_config(100));
  CHECK_THROWS_AS(split_corpus(records, 80, 0.2, 1), SizingError);
  CHECK_NOTHROW(split_corpus(records, 79, 0.2, 1));
}

TEST_CASE("split_corpus: stratified by domain within one item") {
  auto cfg = small_config(1000, 21);
  cfg.n_domains = 10;
  const auto records = generate_corpus(cfg);
  const auto s = split_corpus(records, 100, 0.2, 9);
  std::map<std::string, std::size_t> global, train;
  for (const auto& r : records) ++global[*r.domain_label];
  for (const auto& r : s.train) ++train[*r.domain_label];
  for (const auto& [label, n] : global) {
    const double expected = static_cast<double>(n) * static_cast<double>(s.train.size()) / 1000.0;
    CHECK(std::abs(static_cast<double>(train[label]) - expected) <= 1.0);
  }
}

TEST_CASE("split_corpus: partitions keep input order") {
  const auto records = generate_corpus(small_config(60));
  const auto s = split_corpus(records, 6, 0.25, 2);
  auto position = [&](const std::string& id) {
    return std::find_if(records.begin(), records.end(), [&](const auto& r) { return r.id == id; }) - records.begin();
  };
  for (const auto* part : {&s.train, &s.dev, &s.test}) {
    for (std::size_t i = 1; i < part->size(); ++i) CHECK(position((*part)[i - 1].id) < position((*part)[i].id));
  }
}

TEST_CASE("sentence pairs: balanced labels, valid round trip") {
  testing::TempDir dir("pairs");
  const auto pairs = generate_sentence_pairs(2000, 20, 4);
  REQUIRE(pairs.size() == 2000);
  const auto pos = std::count_if(pairs.begin(), pairs.end(), [](const auto& p) { return p.label == "positive"; });
  CHECK(std::abs(static_cast<double>(pos) / 2000.0 - 0.5) < 0.05);
  save_sentence_pairs(dir / "p.jsonl", pairs);
  CHECK(load_sentence_pairs(dir / "p.jsonl") == pairs);
  CHECK(generate_sentence_pairs(2000, 20, 4) == pairs);
  CHECK_THROWS_AS(pair_from_json_line(R"({"id":"a","first":"x","second":"y","label":"maybe"})", 1), ParseError);

  const auto s = split_pairs(pairs, 100, 0.25, 3);
  CHECK(s.test.size() == 500);
  CHECK(s.dev.size() == 100);
  CHECK(s.train.size() == 1400);
}

TEST_CASE("request cues: one list per intent, disjoint, all reachable") {
  const auto& cues = detail::intent_cues();
  REQUIRE(cues.size() == max_intents());
  std::set<std::string> all;
  for (const auto& list : cues) {
    CHECK(list.size() == 10);
    for (const auto& c : list) CHECK(all.insert(c).second);
  }
  for (const auto& f : detail::cue_frames()) {
    CHECK(f.find("{cue}") != std::string::npos);
    CHECK(f.find("{item}") != std::string::npos);
  }

  GeneratorConfig config;
  config.n_dialogues = 20000;
  config.label_noise_rate = 0.0;
  config.seed = 5;
  const auto labels = intent_labels(max_intents());
  std::map<std::string, std::size_t> seen;
  std::size_t cue_requests = 0;
  for (const auto& r : generate_corpus(config)) {
    const auto k = static_cast<std::size_t>(
        std::find(labels.begin(), labels.end(), *r.intent_label) - labels.begin());
    bool any = false;
    for (const auto& u : r.utterances) {
      if (u.role != Role::customer) continue;
      for (const auto& c : cues[k]) {
        if (u.text.find(c) != std::string::npos) {
          seen[c]++;
          any = true;
        }
      }
    }
    cue_requests += any;
  }
  // Every cue, including the rarest, occurs with its own intent.
  CHECK(seen.size() == all.size());
  CHECK(std::abs(static_cast<double>(cue_requests) / 20000.0 - 0.5) < 0.03);
}
