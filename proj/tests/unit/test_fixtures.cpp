#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "test_support.hpp"
#include "ufa/error.hpp"
#include "ufa/fixtures.hpp"

using namespace ufa;

TEST_CASE("shipped fixtures all pass") {
  const auto fixtures = load_fixtures(UFA_FIXTURE_DIR);
  CHECK(fixtures.size() >= 36);
  std::size_t prompts = 0, metrics = 0;
  for (const auto& f : fixtures) {
    prompts += f.kind == "prompt";
    metrics += f.kind == "metric";
  }
  CHECK(prompts == 15);
  CHECK(metrics >= 20);
  const auto report = verify_fixtures(fixtures);
  INFO(report.describe_failures());
  CHECK(report.passed());
  CHECK(report.outcomes.size() == fixtures.size());
}

TEST_CASE("empty fixture set passes trivially") {
  const auto report = verify_fixtures({});
  CHECK(report.passed());
  CHECK(report.outcomes.empty());
}

TEST_CASE("mismatches are reported with name, expected and actual") {
  auto f = fixture_from_json_line(
      R"({"name":"metric/bad","kind":"metric","provenance":"DERIVED","input":{"predictions":["the cat"],"references":["the dog"]},"expected":{"bleu2":0.25}})",
      1);
  auto g = fixture_from_json_line(
      R"({"name":"prompt/bad","kind":"prompt","provenance":"PAPER","input":{"task":"intent detection","variant":"full","utterances":[{"role":"customer","text":"hi"}]},"expected":"[TASK] intent detection [DIALOGUE] [CUSTOMER] hi"})",
      2);
  const auto report = verify_fixtures({f, g});
  CHECK(report.failures() == 2);
  const auto text = report.describe_failures();
  CHECK(text.find("metric/bad") != std::string::npos);
  CHECK(text.find("0.25") != std::string::npos);
  CHECK(text.find("[GOAL] the intent of the customer is") != std::string::npos);
}

TEST_CASE("provenance tags are enforced") {
  CHECK_THROWS_WITH_AS(fixture_from_json_line(R"({"name":"x","kind":"metric","input":{},"expected":{}})", 4),
                       doctest::Contains("provenance"), FormatError);
  CHECK_THROWS_WITH_AS(
      fixture_from_json_line(R"({"name":"x","kind":"metric","provenance":"GUESS","input":{},"expected":{}})", 4),
      doctest::Contains("line 4"), FormatError);
  ufa::testing::TempDir dir("fixtures");
  ufa::testing::write_file(dir / "a.jsonl", R"({"name":"x","kind":"metric","provenance":"PAPER","input":{},"expected":{}})"
                                            "\n{\"name\":\"y\"}\n");
  CHECK_THROWS_WITH_AS(load_fixtures(dir.path()), doctest::Contains("a.jsonl"), FormatError);
  CHECK_THROWS_AS(load_fixtures(dir / "missing"), IoError);
}
