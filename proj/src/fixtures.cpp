#include "ufa/fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ufa/decode_eval.hpp"
#include "ufa/error.hpp"
#include "ufa/promptkit.hpp"

namespace ufa {

namespace fs = std::filesystem;
using nlohmann::json;

GoldenFixture fixture_from_json_line(const std::string& line, std::size_t line_number) {
  const auto where = "fixture line " + std::to_string(line_number);
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(where + ": " + e.what());
  }
  for (const char* field : {"name", "kind", "provenance", "input", "expected"}) {
    if (!j.contains(field)) throw FormatError(where + ": missing '" + field + "'");
  }
  GoldenFixture f;
  if (!j["name"].is_string() || !j["kind"].is_string() || !j["provenance"].is_string()) {
    throw FormatError(where + ": name, kind and provenance must be strings");
  }
  f.name = j["name"];
  f.kind = j["kind"];
  const std::string tag = j["provenance"];
  if (tag == "PAPER") f.provenance = FixtureProvenance::paper;
  else if (tag == "TRIVIAL") f.provenance = FixtureProvenance::trivial;
  else if (tag == "DERIVED") f.provenance = FixtureProvenance::derived;
  else throw FormatError(where + ": provenance must be one of PAPER, TRIVIAL, DERIVED, got '" + tag + "'");
  f.input_json = j["input"].dump();
  f.expected_json = j["expected"].dump();
  return f;
}

std::vector<GoldenFixture> load_fixtures(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("fixture directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".jsonl") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<GoldenFixture> out;
  for (const auto& path : files) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      try {
        out.push_back(fixture_from_json_line(line, n));
      } catch (const FormatError& e) {
        throw FormatError(path.filename().string() + ": " + e.what());
      }
    }
  }
  return out;
}

bool FixtureReport::passed() const { return failures() == 0; }

std::size_t FixtureReport::failures() const {
  return static_cast<std::size_t>(
      std::count_if(outcomes.begin(), outcomes.end(), [](const FixtureOutcome& o) { return !o.passed; }));
}

std::string FixtureReport::describe_failures() const {
  std::ostringstream os;
  for (const auto& o : outcomes) {
    if (!o.passed) os << o.name << ": expected " << o.expected << ", actual " << o.actual << "\n";
  }
  return os.str();
}

namespace {

FixtureOutcome replay(const GoldenFixture& f, double tolerance) {
  FixtureOutcome o{f.name, false, f.expected_json, ""};
  const auto in = json::parse(f.input_json);
  const auto expected = json::parse(f.expected_json);
  if (f.kind == "prompt") {
    std::vector<Utterance> utts;
    for (const auto& u : in.at("utterances")) {
      const std::string role = u.at("role");
      if (role != "customer" && role != "agent") throw FormatError(f.name + ": bad role '" + role + "'");
      utts.push_back({role == "customer" ? Role::customer : Role::agent, u.at("text").get<std::string>()});
    }
    const auto registry = TaskRegistry::builtin();
    const auto text = build_prompt(registry.at(in.at("task").get<std::string>()), render_dialogue_history(utts),
                                   parse_prompt_variant(in.at("variant").get<std::string>()));
    o.actual = json(text).dump();
    o.passed = text == expected.get<std::string>();
  } else if (f.kind == "metric") {
    const auto preds = in.at("predictions").get<std::vector<std::string>>();
    const auto refs = in.at("references").get<std::vector<std::string>>();
    json actual;
    actual["bleu2"] = bleu2(preds, refs);
    actual["rouge1"] = corpus_rouge(preds, refs, RougeVariant::one);
    actual["rouge2"] = corpus_rouge(preds, refs, RougeVariant::two);
    actual["rougeL"] = corpus_rouge(preds, refs, RougeVariant::lcs);
    o.actual = actual.dump();
    o.passed = true;
    for (const auto& [key, value] : expected.items()) {
      if (!actual.contains(key)) throw FormatError(f.name + ": unknown metric '" + key + "'");
      o.passed = o.passed && std::abs(actual[key].get<double>() - value.get<double>()) <= tolerance;
    }
  } else if (f.kind == "exact_match") {
    const std::vector<std::string> p{in.at("prediction").get<std::string>()};
    const std::vector<std::string> g{in.at("gold").get<std::string>()};
    const bool match = exact_match_accuracy(p, g) == 1.0;
    o.actual = match ? "true" : "false";
    o.passed = match == expected.get<bool>();
  } else {
    throw FormatError(f.name + ": unknown fixture kind '" + f.kind + "'");
  }
  return o;
}

}  // namespace

FixtureReport verify_fixtures(const std::vector<GoldenFixture>& fixtures, double tolerance) {
  FixtureReport report;
  for (const auto& f : fixtures) {
    try {
      report.outcomes.push_back(replay(f, tolerance));
    } catch (const json::exception& e) {
      report.outcomes.push_back({f.name, false, f.expected_json, std::string("malformed payload: ") + e.what()});
    }
  }
  return report;
}

}  // namespace ufa
