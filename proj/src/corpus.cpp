#include "ufa/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>

#include "taxonomy.hpp"
#include "ufa/error.hpp"
#include "ufa/rng.hpp"

namespace ufa {

using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Role role) { return role == Role::customer ? "customer" : "agent"; }

std::string to_string(Provenance provenance) {
  return provenance == Provenance::weak ? "weak" : "gold";
}

std::size_t max_domains() { return detail::domain_templates().size(); }
std::size_t max_intents() { return detail::intent_templates().size(); }

std::vector<std::string> domain_labels(std::size_t n_domains) {
  const auto& all = detail::domain_templates();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n_domains, all.size()); ++i) out.push_back(all[i].label);
  return out;
}

std::vector<std::string> intent_labels(std::size_t n_intents) {
  const auto& all = detail::intent_templates();
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::min(n_intents, all.size()); ++i) out.push_back(all[i].label);
  return out;
}

void GeneratorConfig::validate() const {
  if (n_domains < 2 || n_domains > max_domains()) {
    throw ConfigError("n_domains must be in [2, " + std::to_string(max_domains()) + "]");
  }
  if (n_intents < 2 || n_intents > max_intents()) {
    throw ConfigError("n_intents must be in [2, " + std::to_string(max_intents()) + "]");
  }
  if (!(label_noise_rate >= 0.0 && label_noise_rate <= 1.0)) {
    throw ConfigError("label_noise_rate must be in [0, 1]");
  }
  if (turns_range.first < 2 || turns_range.second < turns_range.first) {
    throw ConfigError("turns_range must satisfy 2 <= min <= max");
  }
}

namespace {

const std::vector<std::string> kGreetings = {
    "hello", "hi there", "good morning", "hey", "hello i need some help",
    "hi i have a question", "good evening", "hello is anyone there"};
const std::vector<std::string> kAgentGreetings = {
    "hello how can i help you", "hi what can i do for you today",
    "good day how may i help", "hello i am here to help"};
const std::vector<std::string> kPrefixes = {"", "", "", "excuse me ", "sorry ", "um ", "so "};
const std::vector<std::string> kSuffixes = {"", "", "", " please", " thanks", " right now",
                                            " today"};
const std::vector<std::string> kClosings = {"thank you", "thanks a lot", "ok great thanks",
                                            "that is all thank you"};
const std::vector<std::string> kAgentClosings = {"you are welcome have a nice day",
                                                 "glad to help goodbye",
                                                 "thank you for contacting us"};

std::string fill(const std::string& tmpl, const std::string& item) {
  std::string out = tmpl;
  const std::string slot = "{item}";
  for (auto pos = out.find(slot); pos != std::string::npos; pos = out.find(slot)) {
    out.replace(pos, slot.size(), item);
  }
  return out;
}

// Uniformly picks a label index different from `truth`.
std::size_t flip(Rng& rng, std::size_t truth, std::size_t n) {
  std::size_t other = rng.below(n - 1);
  return other >= truth ? other + 1 : other;
}

// Half of all requests use a cue phrase in a shared frame; cue r of an
// intent is drawn with weight 1/(r+1), so rare cues show up mostly in
// large corpora.
constexpr double kCueRate = 0.5;

const std::string& zipf_pick(Rng& rng, const std::vector<std::string>& v) {
  double total = 0.0;
  for (std::size_t r = 0; r < v.size(); ++r) total += 1.0 / static_cast<double>(r + 1);
  double u = rng.uniform() * total;
  for (std::size_t r = 0; r < v.size(); ++r) {
    u -= 1.0 / static_cast<double>(r + 1);
    if (u < 0.0) return v[r];
  }
  return v.back();
}

std::string customer_request(Rng& rng, std::size_t intent, const std::string& item) {
  std::string body;
  if (rng.bernoulli(kCueRate)) {
    body = fill(rng.pick(detail::cue_frames()), item);
    const std::string slot = "{cue}";
    body.replace(body.find(slot), slot.size(), zipf_pick(rng, detail::intent_cues()[intent]));
  } else {
    body = fill(rng.pick(detail::intent_templates()[intent].requests), item);
  }
  return rng.pick(kPrefixes) + body + rng.pick(kSuffixes);
}

}  // namespace

GeneratedCorpus generate_labeled_corpus(const GeneratorConfig& config) {
  config.validate();
  const auto& domains = detail::domain_templates();
  const auto& intents = detail::intent_templates();
  Rng rng(config.seed);
  GeneratedCorpus out;
  out.records.reserve(config.n_dialogues);
  out.truth.reserve(config.n_dialogues);

  for (std::size_t n = 0; n < config.n_dialogues; ++n) {
    const std::size_t d = rng.below(config.n_domains);
    const std::size_t k = rng.below(config.n_intents);
    const auto& domain = domains[d];
    const auto& intent = intents[k];
    const std::string& item = rng.pick(domain.items);
    const std::size_t span = config.turns_range.second - config.turns_range.first + 1;
    const std::size_t n_utt = config.turns_range.first + rng.below(span);
    const std::size_t n_pairs = (n_utt + 1) / 2;

    // greeting -> problem statement -> follow-ups -> closing
    std::vector<std::pair<std::string, std::string>> pairs;
    const bool with_greeting = n_pairs >= 2;
    const bool with_closing = n_pairs >= 3;
    if (with_greeting) pairs.emplace_back(rng.pick(kGreetings), rng.pick(kAgentGreetings));
    pairs.emplace_back(customer_request(rng, k, item), fill(rng.pick(intent.resolutions), item));
    const std::size_t n_follow = n_pairs - pairs.size() - (with_closing ? 1 : 0);
    for (std::size_t f = 0; f < n_follow; ++f) {
      const std::size_t q = rng.below(intent.followups.size());
      pairs.emplace_back(intent.followups[q], intent.answers[q]);
    }
    if (with_closing) pairs.emplace_back(rng.pick(kClosings), rng.pick(kAgentClosings));

    DialogueRecord rec;
    rec.id = "d" + std::to_string(config.seed) + "-" + std::to_string(n);
    for (const auto& [c, a] : pairs) {
      rec.utterances.push_back({Role::customer, c});
      if (rec.utterances.size() < n_utt) rec.utterances.push_back({Role::agent, a});
    }
    if (rec.utterances.back().role == Role::customer && rec.utterances.size() > n_utt) {
      rec.utterances.pop_back();
    }

    const bool noisy = config.label_noise_rate > 0.0;
    std::size_t weak_d = d;
    std::size_t weak_k = k;
    if (noisy && rng.bernoulli(config.label_noise_rate)) weak_d = flip(rng, d, config.n_domains);
    if (noisy && rng.bernoulli(config.label_noise_rate)) weak_k = flip(rng, k, config.n_intents);
    rec.domain_label = domains[weak_d].label;
    rec.intent_label = intents[weak_k].label;
    rec.summary = "the customer " + intent.asked + " for the " + item + " and the agent " +
                  intent.resolved;
    rec.label_provenance = config.provenance;
    out.records.push_back(std::move(rec));
    out.truth.push_back({domain.label, intent.label});
  }
  return out;
}

std::vector<DialogueRecord> generate_corpus(const GeneratorConfig& config) {
  return generate_labeled_corpus(config).records;
}

std::vector<SentencePair> generate_sentence_pairs(std::size_t n_pairs, std::size_t n_intents,
                                                  std::uint64_t seed) {
  if (n_intents < 2 || n_intents > max_intents()) {
    throw ConfigError("n_intents must be in [2, " + std::to_string(max_intents()) + "]");
  }
  const auto& domains = detail::domain_templates();
  Rng rng(seed);
  std::vector<SentencePair> out;
  out.reserve(n_pairs);
  for (std::size_t n = 0; n < n_pairs; ++n) {
    const std::size_t k = rng.below(n_intents);
    const bool positive = rng.bernoulli(0.5);
    const std::size_t k2 = positive ? k : flip(rng, k, n_intents);
    const std::string& item1 = rng.pick(rng.pick(domains).items);
    // Negatives often share the item so the decision has to rest on the request.
    const std::string& item2 =
        (!positive && rng.bernoulli(0.5)) ? item1 : rng.pick(rng.pick(domains).items);
    SentencePair p;
    p.id = "s" + std::to_string(seed) + "-" + std::to_string(n);
    p.first = customer_request(rng, k, item1);
    p.second = customer_request(rng, k2, item2);
    p.label = positive ? "positive" : "negative";
    out.push_back(std::move(p));
  }
  return out;
}

void validate_record(const DialogueRecord& record, const std::vector<std::string>* domain_set,
                     const std::vector<std::string>* intent_set) {
  if (record.id.empty()) throw ContractError("record id is empty");
  if (record.utterances.size() < 2) {
    throw ContractError("record " + record.id + " has fewer than 2 utterances");
  }
  bool has_customer = false;
  bool has_agent = false;
  for (const auto& u : record.utterances) {
    if (u.text.empty()) throw ContractError("record " + record.id + " has an empty utterance");
    if (u.text.find('\n') != std::string::npos || u.text.find('\r') != std::string::npos) {
      throw ContractError("record " + record.id + " has a newline inside an utterance");
    }
    (u.role == Role::customer ? has_customer : has_agent) = true;
  }
  if (!has_customer || !has_agent) {
    throw ContractError("record " + record.id + " needs both a customer and an agent utterance");
  }
  if (record.label_provenance == Provenance::gold) {
    auto check = [&](const std::optional<std::string>& label,
                     const std::vector<std::string>* set, const char* name) {
      if (!label || !set) return;
      if (std::find(set->begin(), set->end(), *label) == set->end()) {
        throw ContractError("record " + record.id + ": gold " + name + " label '" + *label +
                            "' is outside the closed label set");
      }
    };
    check(record.domain_label, domain_set, "domain");
    check(record.intent_label, intent_set, "intent");
  }
}

std::string to_json_line(const DialogueRecord& record) {
  ordered_json j;
  j["id"] = record.id;
  j["utterances"] = ordered_json::array();
  for (const auto& u : record.utterances) {
    ordered_json ju;
    ju["role"] = to_string(u.role);
    ju["text"] = u.text;
    j["utterances"].push_back(std::move(ju));
  }
  ordered_json labels = ordered_json::object();
  if (record.domain_label) labels["domain"] = *record.domain_label;
  if (record.intent_label) labels["intent"] = *record.intent_label;
  if (record.summary) labels["summary"] = *record.summary;
  j["labels"] = std::move(labels);
  j["provenance"] = to_string(record.label_provenance);
  return j.dump();
}

namespace {

json parse_object(const std::string& line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(line_number, "<record>", std::string("invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ParseError(line_number, "<record>", "expected a JSON object");
  return j;
}

std::string require_string(const json& j, const char* field, std::size_t line_number) {
  auto it = j.find(field);
  if (it == j.end()) throw ParseError(line_number, field, "missing");
  if (!it->is_string()) throw ParseError(line_number, field, "expected a string");
  return it->get<std::string>();
}

}  // namespace

DialogueRecord record_from_json_line(const std::string& line, std::size_t line_number) {
  const json j = parse_object(line, line_number);
  DialogueRecord rec;
  rec.id = require_string(j, "id", line_number);
  if (rec.id.empty()) throw ParseError(line_number, "id", "empty");

  auto ut = j.find("utterances");
  if (ut == j.end()) throw ParseError(line_number, "utterances", "missing");
  if (!ut->is_array()) throw ParseError(line_number, "utterances", "expected an array");
  for (const auto& ju : *ut) {
    if (!ju.is_object()) throw ParseError(line_number, "utterances", "expected objects");
    const std::string role = require_string(ju, "role", line_number);
    Utterance u;
    if (role == "customer") {
      u.role = Role::customer;
    } else if (role == "agent") {
      u.role = Role::agent;
    } else {
      throw ParseError(line_number, "role", "must be \"customer\" or \"agent\"");
    }
    u.text = require_string(ju, "text", line_number);
    rec.utterances.push_back(std::move(u));
  }

  auto lb = j.find("labels");
  if (lb != j.end()) {
    if (!lb->is_object()) throw ParseError(line_number, "labels", "expected an object");
    auto opt = [&](const char* key, std::optional<std::string>& dst) {
      auto it = lb->find(key);
      if (it == lb->end() || it->is_null()) return;
      if (!it->is_string()) throw ParseError(line_number, key, "expected a string");
      dst = it->get<std::string>();
    };
    opt("domain", rec.domain_label);
    opt("intent", rec.intent_label);
    opt("summary", rec.summary);
  }

  const std::string prov = require_string(j, "provenance", line_number);
  if (prov == "weak") {
    rec.label_provenance = Provenance::weak;
  } else if (prov == "gold") {
    rec.label_provenance = Provenance::gold;
  } else {
    throw ParseError(line_number, "provenance", "must be \"weak\" or \"gold\"");
  }

  try {
    validate_record(rec);
  } catch (const ContractError& e) {
    throw ParseError(line_number, "utterances", e.what());
  }
  return rec;
}

std::string to_json_line(const SentencePair& pair) {
  ordered_json j;
  j["id"] = pair.id;
  j["first"] = pair.first;
  j["second"] = pair.second;
  j["label"] = pair.label;
  return j.dump();
}

SentencePair pair_from_json_line(const std::string& line, std::size_t line_number) {
  const json j = parse_object(line, line_number);
  SentencePair p;
  p.id = require_string(j, "id", line_number);
  p.first = require_string(j, "first", line_number);
  p.second = require_string(j, "second", line_number);
  p.label = require_string(j, "label", line_number);
  if (p.label != "positive" && p.label != "negative") {
    throw ParseError(line_number, "label", "must be \"positive\" or \"negative\"");
  }
  return p;
}

CorpusReader::CorpusReader(const std::filesystem::path& path) : in_(path) {
  if (!in_) throw IoError("cannot open corpus file " + path.string());
}

std::optional<DialogueRecord> CorpusReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    return record_from_json_line(line, line_);
  }
  return std::nullopt;
}

std::vector<DialogueRecord> load_corpus(const std::filesystem::path& path) {
  CorpusReader reader(path);
  std::vector<DialogueRecord> out;
  while (auto rec = reader.next()) out.push_back(std::move(*rec));
  return out;
}

namespace {

template <typename Record>
void write_lines(const std::filesystem::path& path, const std::vector<Record>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& r : records) out << to_json_line(r) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void save_corpus(const std::filesystem::path& path, const std::vector<DialogueRecord>& records) {
  write_lines(path, records);
}

void save_sentence_pairs(const std::filesystem::path& path,
                         const std::vector<SentencePair>& pairs) {
  write_lines(path, pairs);
}

std::vector<SentencePair> load_sentence_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sentence-pair file " + path.string());
  std::vector<SentencePair> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(pair_from_json_line(line, n));
  }
  return out;
}

namespace {

// Largest-remainder apportionment of `total` across classes of the given sizes.
std::vector<std::size_t> apportion(const std::vector<std::size_t>& sizes, std::size_t total) {
  const std::size_t n = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  std::vector<std::size_t> quota(sizes.size(), 0);
  if (n == 0) return quota;
  std::vector<std::pair<double, std::size_t>> rema;
  std::size_t given = 0;
  for (std::size_t c = 0; c < sizes.size(); ++c) {
    const double exact = static_cast<double>(sizes[c]) * static_cast<double>(total) / n;
    quota[c] = static_cast<std::size_t>(std::floor(exact));
    given += quota[c];
    rema.emplace_back(exact - quota[c], c);
  }
  std::stable_sort(rema.begin(), rema.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t i = 0; given < total; ++i) {
    const std::size_t c = rema[i % rema.size()].second;
    if (quota[c] < sizes[c]) {
      ++quota[c];
      ++given;
    }
  }
  return quota;
}

template <typename Record, typename KeyFn>
Split<Record> stratified_split(const std::vector<Record>& records, std::size_t dev_size,
                               double test_fraction, std::uint64_t seed, KeyFn key) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test_fraction must be in [0, 1)");
  }
  const std::size_t n = records.size();
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * n));
  if (dev_size >= n - std::min(n, n_test) && !(n == 0 && dev_size == 0)) {
    throw SizingError("dev_size " + std::to_string(dev_size) + " leaves no training records (" +
                      std::to_string(n) + " records, " + std::to_string(n_test) + " for test)");
  }
  const std::size_t n_train = n - n_test - dev_size;

  std::map<std::string, std::vector<std::size_t>> classes;
  for (std::size_t i = 0; i < n; ++i) classes[key(records[i])].push_back(i);

  Rng rng(seed);
  std::vector<std::vector<std::size_t>> members;
  std::vector<std::size_t> sizes;
  for (auto& [name, idx] : classes) {
    rng.shuffle(idx);
    sizes.push_back(idx.size());
    members.push_back(idx);
  }
  const auto train_q = apportion(sizes, n_train);
  std::vector<std::size_t> rest(sizes.size());
  for (std::size_t c = 0; c < sizes.size(); ++c) rest[c] = sizes[c] - train_q[c];
  const auto dev_q = apportion(rest, dev_size);

  std::vector<int> where(n, 2);
  for (std::size_t c = 0; c < members.size(); ++c) {
    for (std::size_t i = 0; i < members[c].size(); ++i) {
      where[members[c][i]] = i < train_q[c] ? 0 : (i < train_q[c] + dev_q[c] ? 1 : 2);
    }
  }
  Split<Record> out;
  for (std::size_t i = 0; i < n; ++i) {
    (where[i] == 0 ? out.train : where[i] == 1 ? out.dev : out.test).push_back(records[i]);
  }
  return out;
}

}  // namespace

Split<DialogueRecord> split_corpus(const std::vector<DialogueRecord>& records, std::size_t dev_size,
                                   double test_fraction, std::uint64_t seed) {
  return stratified_split(records, dev_size, test_fraction, seed,
                          [](const DialogueRecord& r) { return r.domain_label.value_or(""); });
}

Split<SentencePair> split_pairs(const std::vector<SentencePair>& pairs, std::size_t dev_size,
                                double test_fraction, std::uint64_t seed) {
  return stratified_split(pairs, dev_size, test_fraction, seed,
                          [](const SentencePair& p) { return p.label; });
}

}  // namespace ufa
