#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace ufa {

enum class FixtureProvenance { paper, trivial, derived };

// One JSONL line: name, kind (prompt | metric | exact_match), provenance
// (PAPER | TRIVIAL | DERIVED), input and expected payloads kept as JSON text.
struct GoldenFixture {
  std::string name;
  std::string kind;
  FixtureProvenance provenance = FixtureProvenance::derived;
  std::string input_json;
  std::string expected_json;
};

// Every *.jsonl file of the directory in name order. A line without exactly
// one valid provenance tag is a FormatError with file and line.
std::vector<GoldenFixture> load_fixtures(const std::filesystem::path& dir);
GoldenFixture fixture_from_json_line(const std::string& line, std::size_t line_number);

struct FixtureOutcome {
  std::string name;
  bool passed = false;
  std::string expected;
  std::string actual;
};

struct FixtureReport {
  std::vector<FixtureOutcome> outcomes;

  bool passed() const;
  std::size_t failures() const;
  // One line per failure: name, expected, actual.
  std::string describe_failures() const;
};

// Prompts compare byte-exactly, metrics within `tolerance`.
FixtureReport verify_fixtures(const std::vector<GoldenFixture>& fixtures, double tolerance = 1e-9);

}  // namespace ufa
