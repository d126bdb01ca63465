#include "ufa/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <nlohmann/json.hpp>
#include <set>
#include <sstream>

#include "ufa/denoising.hpp"
#include "ufa/error.hpp"
#include "ufa/rng.hpp"
#include "ufa/utf8.hpp"

namespace ufa {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string to_string(Experiment e) {
  switch (e) {
    case Experiment::main: return "main";
    case Experiment::fewshot: return "fewshot";
    case Experiment::unseen: return "unseen";
    case Experiment::prompt_ablation: return "prompt_ablation";
    case Experiment::task_ablation: return "task_ablation";
  }
  return "main";
}

std::string to_string(ModelVariant v) { return v == ModelVariant::ufa ? "ufa" : "ufa_ori"; }

Experiment parse_experiment(std::string_view text) {
  for (auto e : {Experiment::main, Experiment::fewshot, Experiment::unseen, Experiment::prompt_ablation,
                 Experiment::task_ablation}) {
    if (text == to_string(e)) return e;
  }
  throw ConfigError("unknown experiment '" + std::string(text) + "'");
}

ModelVariant parse_model_variant(std::string_view text) {
  if (text == "ufa") return ModelVariant::ufa;
  if (text == "ufa_ori") return ModelVariant::ufa_ori;
  throw ConfigError("unknown model variant '" + std::string(text) + "'");
}

// ---- key = value files ----

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string fnv_hex(std::string_view text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream ss(value);
  while (std::getline(ss, cur, ',')) {
    auto t = trim(cur);
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& value) {
  if (value.empty() || value.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError("config key '" + key + "' expects a non-negative integer, got '" + value + "'");
  }
  try {
    return std::stoull(value);
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is out of range: '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(value, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != value.size() || value.empty() || !std::isfinite(v)) {
    throw ConfigError("config key '" + key + "' expects a number, got '" + value + "'");
  }
  return v;
}

std::string slug(const std::string& s) {
  std::string out;
  for (char c : s) out += (c == ' ' || c == '/') ? '_' : c;
  return out;
}

const std::vector<std::string>& dialogue_tasks() {
  static const std::vector<std::string> k = {std::string(task_names::domain), std::string(task_names::intent),
                                             std::string(task_names::generation), std::string(task_names::summary)};
  return k;
}

}  // namespace

std::vector<std::pair<std::string, std::string>> parse_key_values_text(const std::string& text) {
  std::vector<std::pair<std::string, std::string>> out;
  std::set<std::string> seen;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(n) + ": expected 'key = value'");
    }
    auto key = trim(std::string_view(t).substr(0, eq));
    auto value = trim(std::string_view(t).substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
    if (!seen.insert(key).second) {
      throw ConfigError("config line " + std::to_string(n) + ": duplicate key '" + key + "'");
    }
    out.emplace_back(std::move(key), std::move(value));
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> parse_key_values(const fs::path& path) {
  return parse_key_values_text(read_text(path));
}

// ---- ExperimentConfig ----

std::vector<std::string> ExperimentConfig::keys() {
  return {"experiment", "model_variant", "prompt_variant", "task", "tasks", "fewshot_k", "seeds", "data_seed",
          "work_dir", "registry", "checkpoint", "bundle", "pretrain_dialogues", "label_noise", "gold_dialogues",
          "gold_dev", "gold_test_fraction", "similarity_pairs", "similarity_dev", "similarity_test_fraction",
          "turns_min", "turns_max", "vocab_size", "layers", "heads", "d_model", "head_dim", "d_ff", "dropout",
          "max_source", "max_target", "denoise_steps", "denoise_rate", "denoise_span", "ufa_steps", "ufa_tasks",
          "mixing", "batch_size", "pretrain_lr", "finetune_lr", "finetune_epochs", "finetune_max_steps",
          "evals_per_run", "dev_limit", "test_limit"};
}

void ExperimentConfig::set(const std::string& key, const std::string& value) {
  auto size = [&](std::size_t& field) { field = static_cast<std::size_t>(parse_u64(key, value)); };
  auto real = [&](double& field) { field = parse_double(key, value); };
  if (key == "experiment") experiment = parse_experiment(value);
  else if (key == "model_variant") model_variant = parse_model_variant(value);
  else if (key == "prompt_variant") {
    try {
      prompt_variant = parse_prompt_variant(value);
    } catch (const Error&) {
      throw ConfigError("unknown prompt variant '" + value + "'");
    }
  } else if (key == "task") task = value;
  else if (key == "tasks") tasks = split_list(value);
  else if (key == "fewshot_k") {
    fewshot_k.clear();
    for (const auto& v : split_list(value)) fewshot_k.push_back(static_cast<std::size_t>(parse_u64(key, v)));
  } else if (key == "seeds") {
    seeds.clear();
    for (const auto& v : split_list(value)) seeds.push_back(parse_u64(key, v));
  } else if (key == "data_seed") data_seed = parse_u64(key, value);
  else if (key == "work_dir") work_dir = value;
  else if (key == "registry") registry = value;
  else if (key == "checkpoint") checkpoint = value;
  else if (key == "bundle") bundle = value;
  else if (key == "pretrain_dialogues") size(pretrain_dialogues);
  else if (key == "label_noise") real(label_noise);
  else if (key == "gold_dialogues") size(gold_dialogues);
  else if (key == "gold_dev") size(gold_dev);
  else if (key == "gold_test_fraction") real(gold_test_fraction);
  else if (key == "similarity_pairs") size(similarity_pairs);
  else if (key == "similarity_dev") size(similarity_dev);
  else if (key == "similarity_test_fraction") real(similarity_test_fraction);
  else if (key == "turns_min") size(turns_min);
  else if (key == "turns_max") size(turns_max);
  else if (key == "vocab_size") size(vocab_size);
  else if (key == "layers") size(layers);
  else if (key == "heads") size(heads);
  else if (key == "d_model") size(d_model);
  else if (key == "head_dim") size(head_dim);
  else if (key == "d_ff") size(d_ff);
  else if (key == "dropout") real(dropout);
  else if (key == "max_source") size(max_source);
  else if (key == "max_target") size(max_target);
  else if (key == "denoise_steps") size(denoise_steps);
  else if (key == "denoise_rate") real(denoise_rate);
  else if (key == "denoise_span") real(denoise_span);
  else if (key == "ufa_steps") size(ufa_steps);
  else if (key == "ufa_tasks") ufa_tasks = split_list(value);
  else if (key == "mixing") mixing = parse_mixing(value);
  else if (key == "batch_size") size(batch_size);
  else if (key == "pretrain_lr") real(pretrain_lr);
  else if (key == "finetune_lr") real(finetune_lr);
  else if (key == "finetune_epochs") size(finetune_epochs);
  else if (key == "finetune_max_steps") size(finetune_max_steps);
  else if (key == "evals_per_run") size(evals_per_run);
  else if (key == "dev_limit") size(dev_limit);
  else if (key == "test_limit") size(test_limit);
  else throw ConfigError("unknown config key '" + key + "'");
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  for (auto k : fewshot_k) {
    if (k < 1) throw ConfigError("fewshot_k values must be >= 1");
  }
  if (!(label_noise >= 0.0 && label_noise <= 1.0)) throw ConfigError("label_noise must be in [0, 1]");
  if (!(gold_test_fraction > 0.0 && gold_test_fraction < 1.0)) {
    throw ConfigError("gold_test_fraction must be in (0, 1)");
  }
  if (!(similarity_test_fraction > 0.0 && similarity_test_fraction < 1.0)) {
    throw ConfigError("similarity_test_fraction must be in (0, 1)");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(pretrain_lr > 0.0)) throw ConfigError("pretrain_lr must be positive");
  if (!(finetune_lr > 0.0)) throw ConfigError("finetune_lr must be positive");
  if (finetune_epochs == 0 && finetune_max_steps == 0) {
    throw ConfigError("finetune_epochs or finetune_max_steps must be positive");
  }
  if (evals_per_run == 0) throw ConfigError("evals_per_run must be positive");
  for (const auto& t : stage2_tasks()) {
    if (t == task_names::similarity) {
      throw ConfigError("ufa_tasks must not include the unseen task '" + std::string(task_names::similarity) + "'");
    }
  }
  model_config(vocab_size).validate();
  CorruptionConfig{denoise_rate, denoise_span, Tokenizer::kDefaultSentinels, 0}.validate();
}

ExperimentConfig ExperimentConfig::from_text(const std::string& text) {
  ExperimentConfig c;
  for (const auto& [k, v] : parse_key_values_text(text)) c.set(k, v);
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const fs::path& path) {
  ExperimentConfig c;
  for (const auto& [k, v] : parse_key_values(path)) {
    try {
      c.set(k, v);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ": " + e.what());
    }
  }
  c.validate();
  return c;
}

ModelConfig ExperimentConfig::model_config(std::size_t vocab) const {
  ModelConfig m;
  m.n_encoder_layers = layers;
  m.n_decoder_layers = layers;
  m.n_heads = heads;
  m.d_model = d_model;
  m.head_dim = head_dim;
  m.d_ff = d_ff;
  m.vocab_size = vocab;
  m.dropout_rate = dropout;
  m.max_source_length = max_source;
  m.max_target_length = max_target;
  return m;
}

std::vector<std::string> ExperimentConfig::experiment_tasks() const {
  if (!tasks.empty()) return tasks;
  switch (experiment) {
    case Experiment::main: return dialogue_tasks();
    case Experiment::fewshot: return {std::string(task_names::intent)};
    case Experiment::unseen: return {std::string(task_names::similarity)};
    case Experiment::prompt_ablation:
    case Experiment::task_ablation: return {std::string(task_names::intent), std::string(task_names::generation)};
  }
  return {};
}

std::vector<std::string> ExperimentConfig::stage2_tasks() const { return ufa_tasks.empty() ? dialogue_tasks() : ufa_tasks; }

// ---- few-shot sampling ----

std::vector<PromptedExample> fewshot_sample(std::span<const PromptedExample> dataset, const TaskSpec& task,
                                            std::size_t k, std::uint64_t seed) {
  if (k == 0) throw SamplingError("k must be positive");
  Rng rng(seed);
  std::vector<std::size_t> chosen;
  auto take = [&](std::vector<std::size_t> pool) {
    // Partial Fisher-Yates: the first k slots are a uniform k-subset.
    for (std::size_t i = 0; i < k; ++i) std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    chosen.insert(chosen.end(), pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(k));
  };
  if (task.is_classification()) {
    for (const auto& label : task.normalized_labels()) {
      std::vector<std::size_t> pool;
      for (std::size_t i = 0; i < dataset.size(); ++i) {
        if (dataset[i].target_text == label) pool.push_back(i);
      }
      if (pool.size() < k) {
        throw SamplingError("class '" + label + "' has " + std::to_string(pool.size()) + " examples, fewer than k = " +
                            std::to_string(k));
      }
      take(std::move(pool));
    }
  } else {
    if (dataset.size() < k) {
      throw SamplingError("dataset has " + std::to_string(dataset.size()) + " examples, fewer than k = " +
                          std::to_string(k));
    }
    std::vector<std::size_t> pool(dataset.size());
    for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
    take(std::move(pool));
  }
  std::sort(chosen.begin(), chosen.end());
  std::vector<PromptedExample> out;
  out.reserve(chosen.size());
  for (auto i : chosen) out.push_back(dataset[i]);
  return out;
}

// ---- Workspace ----

struct Workspace::Cache {
  std::optional<Tokenizer> tokenizer;
  std::optional<std::vector<DialogueRecord>> pretrain;
  std::optional<Split<DialogueRecord>> gold;
  std::optional<Split<SentencePair>> pairs;
  std::map<std::string, std::vector<PromptedExample>> examples;
};

namespace {

const char* kDataFiles[] = {"pretrain.jsonl",  "gold_train.jsonl",  "gold_dev.jsonl", "gold_test.jsonl",
                            "pairs_train.jsonl", "pairs_dev.jsonl", "pairs_test.jsonl"};

std::string data_description(const ExperimentConfig& c) {
  ordered_json j;
  j["data_seed"] = c.data_seed;
  j["pretrain_dialogues"] = c.pretrain_dialogues;
  j["label_noise"] = c.label_noise;
  j["gold_dialogues"] = c.gold_dialogues;
  j["gold_dev"] = c.gold_dev;
  j["gold_test_fraction"] = c.gold_test_fraction;
  j["similarity_pairs"] = c.similarity_pairs;
  j["similarity_dev"] = c.similarity_dev;
  j["similarity_test_fraction"] = c.similarity_test_fraction;
  j["turns"] = {c.turns_min, c.turns_max};
  return j.dump();
}

struct StageStamp {
  std::string fingerprint;
  std::string checkpoint;  // relative to the stage directory
  ordered_json extra;
};

std::optional<StageStamp> read_stamp(const fs::path& dir) {
  const auto path = dir / "stage.json";
  if (!fs::exists(path)) return std::nullopt;
  try {
    const auto j = json::parse(read_text(path));
    StageStamp s{j.at("fingerprint").get<std::string>(), j.at("checkpoint").get<std::string>(), ordered_json()};
    if (j.contains("extra")) s.extra = ordered_json::parse(j.at("extra").dump());
    if (!fs::exists(dir / s.checkpoint)) return std::nullopt;
    return s;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

void write_stamp(const fs::path& dir, const StageStamp& s) {
  ordered_json j;
  j["fingerprint"] = s.fingerprint;
  j["checkpoint"] = s.checkpoint;
  if (!s.extra.is_null()) j["extra"] = s.extra;
  write_text(dir / "stage.json", j.dump(2) + "\n");
}

std::string model_description(const ExperimentConfig& c) {
  ordered_json j;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["d_model"] = c.d_model;
  j["head_dim"] = c.head_dim;
  j["d_ff"] = c.d_ff;
  j["dropout"] = c.dropout;
  j["max_source"] = c.max_source;
  j["max_target"] = c.max_target;
  j["batch_size"] = c.batch_size;
  return j.dump();
}

void keep_only(const fs::path& dir, const std::string& keep) {
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (entry.path().extension() == ".ckpt" && name != keep) fs::remove(entry.path());
  }
}

std::string relative_to(const fs::path& path, const fs::path& base) {
  std::error_code ec;
  const auto rel = fs::relative(path, base, ec);
  return ec || rel.empty() ? path.string() : rel.generic_string();
}

}  // namespace

Workspace::Workspace(ExperimentConfig config)
    : config_(std::move(config)),
      registry_(config_.registry.empty() ? TaskRegistry::builtin() : load_task_registry(config_.registry)),
      cache_(std::make_shared<Cache>()) {}

fs::path Workspace::data_dir() const { return config_.work_dir / "data"; }
fs::path Workspace::tokenizer_path() const { return config_.work_dir / "tokenizer.tok"; }
fs::path Workspace::seed_dir(std::uint64_t seed) const { return config_.work_dir / ("seed-" + std::to_string(seed)); }

void Workspace::build_data(const fs::path& out_dir) const {
  const auto& c = config_;
  GeneratorConfig pre;
  pre.n_dialogues = c.pretrain_dialogues;
  pre.label_noise_rate = c.label_noise;
  pre.provenance = Provenance::weak;
  pre.turns_range = {c.turns_min, c.turns_max};
  pre.seed = c.data_seed;
  GeneratorConfig gold_cfg = pre;
  gold_cfg.n_dialogues = c.gold_dialogues;
  gold_cfg.label_noise_rate = 0.0;
  gold_cfg.provenance = Provenance::gold;
  gold_cfg.seed = Rng::derive(c.data_seed, 1);

  fs::create_directories(out_dir);
  save_corpus(out_dir / "pretrain.jsonl", generate_corpus(pre));
  const auto gold = split_corpus(generate_corpus(gold_cfg), c.gold_dev, c.gold_test_fraction, Rng::derive(c.data_seed, 2));
  save_corpus(out_dir / "gold_train.jsonl", gold.train);
  save_corpus(out_dir / "gold_dev.jsonl", gold.dev);
  save_corpus(out_dir / "gold_test.jsonl", gold.test);
  const auto pairs = split_pairs(generate_sentence_pairs(c.similarity_pairs, max_intents(), Rng::derive(c.data_seed, 3)),
                                 c.similarity_dev, c.similarity_test_fraction, Rng::derive(c.data_seed, 4));
  save_sentence_pairs(out_dir / "pairs_train.jsonl", pairs.train);
  save_sentence_pairs(out_dir / "pairs_dev.jsonl", pairs.dev);
  save_sentence_pairs(out_dir / "pairs_test.jsonl", pairs.test);
  write_text(out_dir / "data.json", data_description(c) + "\n");
}

void Workspace::require_data() const {
  std::vector<std::string> missing;
  for (const char* f : kDataFiles) {
    if (!fs::exists(data_dir() / f)) missing.push_back((data_dir() / f).string());
  }
  if (!missing.empty()) {
    std::string msg = "missing corpus artifacts (run gen-corpus first):";
    for (const auto& m : missing) msg += " " + m;
    throw OrchestrationError(msg);
  }
  const auto stamp = fs::exists(data_dir() / "data.json") ? trim(read_text(data_dir() / "data.json")) : "";
  if (stamp != data_description(config_)) {
    throw OrchestrationError("corpus in " + data_dir().string() +
                             " was generated with different settings (rerun gen-corpus)");
  }
}

void Workspace::build_tokenizer(const fs::path& out_path) const {
  require_data();
  std::vector<std::string> lines;
  for (const auto& r : pretrain_corpus()) {
    for (const auto& u : r.utterances) lines.push_back(u.text);
    if (r.summary) lines.push_back(*r.summary);
    if (r.domain_label) lines.push_back(*r.domain_label);
    if (r.intent_label) lines.push_back(*r.intent_label);
  }
  // Prompt strings and label words of every registered task.
  for (const auto& name : registry_.names()) {
    const auto& spec = registry_.at(name);
    lines.push_back(spec.name);
    lines.push_back(spec.goal_description);
    for (const auto& l : spec.normalized_labels()) lines.push_back(l);
  }
  const auto tok = Tokenizer::train(lines, config_.vocab_size);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  tok.save(out_path);
}

void Workspace::require_tokenizer() const {
  if (!fs::exists(tokenizer_path())) {
    throw OrchestrationError("missing tokenizer " + tokenizer_path().string() + " (run train-tokenizer first)");
  }
}

const Tokenizer& Workspace::tokenizer() const {
  if (!cache_->tokenizer) {
    require_tokenizer();
    cache_->tokenizer = Tokenizer::load(tokenizer_path());
  }
  return *cache_->tokenizer;
}

const std::vector<DialogueRecord>& Workspace::pretrain_corpus() const {
  if (!cache_->pretrain) {
    require_data();
    cache_->pretrain = load_corpus(data_dir() / "pretrain.jsonl");
  }
  return *cache_->pretrain;
}

const Split<DialogueRecord>& Workspace::gold() const {
  if (!cache_->gold) {
    require_data();
    cache_->gold = Split<DialogueRecord>{load_corpus(data_dir() / "gold_train.jsonl"),
                                         load_corpus(data_dir() / "gold_dev.jsonl"),
                                         load_corpus(data_dir() / "gold_test.jsonl")};
  }
  return *cache_->gold;
}

const Split<SentencePair>& Workspace::pairs() const {
  if (!cache_->pairs) {
    require_data();
    cache_->pairs = Split<SentencePair>{load_sentence_pairs(data_dir() / "pairs_train.jsonl"),
                                        load_sentence_pairs(data_dir() / "pairs_dev.jsonl"),
                                        load_sentence_pairs(data_dir() / "pairs_test.jsonl")};
  }
  return *cache_->pairs;
}

std::vector<PromptedExample> Workspace::examples(const std::string& task, PromptVariant prompt,
                                                 const std::string& split) const {
  const std::string key = task + "|" + to_string(prompt) + "|" + split;
  auto it = cache_->examples.find(key);
  if (it != cache_->examples.end()) return it->second;
  const auto& spec = registry_.at(task);
  const auto& tok = tokenizer();
  std::vector<PromptedExample> out;
  if (spec.builder == BuilderKind::sentence_pair) {
    const auto& p = pairs();
    const auto& part = split == "train" ? p.train : split == "dev" ? p.dev : p.test;
    out = build_dataset(part, spec, prompt, tok, config_.limits());
  } else if (split == "pretrain") {
    out = build_dataset(pretrain_corpus(), spec, prompt, tok, config_.limits());
  } else {
    const auto& g = gold();
    const auto& part = split == "train" ? g.train : split == "dev" ? g.dev : g.test;
    out = build_dataset(part, spec, prompt, tok, config_.limits());
  }
  cache_->examples.emplace(key, out);
  return out;
}

std::string Workspace::dataset_hash_for(const std::string& task, PromptVariant prompt, const std::string& split) const {
  return dataset_hash(examples(task, prompt, split));
}

namespace {

std::string tokenizer_fingerprint(const fs::path& path) { return fnv_hex(read_text(path)); }

}  // namespace

fs::path Workspace::denoise(std::uint64_t seed, std::ostream* progress, const fs::path& out_dir) const {
  const auto dir = out_dir.empty() ? seed_dir(seed) / "denoise" : out_dir;
  const auto& c = config_;
  const std::string fp = fnv_hex("denoise|" + tokenizer_fingerprint(tokenizer_path()) + "|" + data_description(c) + "|" +
                                 model_description(c) + "|" + std::to_string(seed) + "|" +
                                 std::to_string(c.denoise_steps) + "|" + std::to_string(c.denoise_rate) + "|" +
                                 std::to_string(c.denoise_span) + "|" + std::to_string(c.pretrain_lr));
  if (auto s = read_stamp(dir); s && s->fingerprint == fp) return dir / s->checkpoint;

  const auto& tok = tokenizer();
  CorruptionConfig corruption{c.denoise_rate, c.denoise_span, tok.n_sentinels(), Rng::derive(seed, 77)};
  DenoiseStats stats;
  std::map<std::string, std::vector<PromptedExample>> data;
  data[std::string(kDenoiseTask)] = build_denoise_dataset(pretrain_corpus(), tok, corruption, c.limits(), &stats);
  if (progress) *progress << "stage 1 (span denoising), seed " << seed << ": " << stats.examples << " examples\n";

  Transformer<float> model(c.model_config(tok.size()), Rng::derive(seed, 0));
  TrainPlan plan;
  plan.stage = Stage::denoise;
  plan.tasks = {{std::string(kDenoiseTask), 1.0}};
  plan.batch_size = c.batch_size;
  plan.max_steps = c.denoise_steps;
  plan.log_every = 50;
  plan.seed = seed;
  plan.optimizer.learning_rate = c.pretrain_lr;
  plan.dropout = c.dropout > 0.0;
  if (fs::exists(dir)) fs::remove_all(dir);
  const auto started = std::chrono::steady_clock::now();
  const auto result = run_stage(plan, model, data, {dir, {}, "", progress});
  StageStamp stamp{fp, fs::path(result.final_checkpoint).filename().string(), ordered_json::object()};
  stamp.extra["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  stamp.extra["examples"] = stats.examples;
  write_stamp(dir, stamp);
  return dir / stamp.checkpoint;
}

namespace {

std::string stage2_dir_name(const std::vector<std::string>& tasks, const std::vector<std::string>& defaults) {
  if (tasks == defaults) return "ufa";
  std::string name = "ufa";
  for (const auto& t : tasks) name += "+" + slug(t);
  return name;
}

}  // namespace

fs::path Workspace::ufa_pretrain(std::uint64_t seed, const std::vector<std::string>& tasks, std::ostream* progress,
                                 const fs::path& out_dir) const {
  if (tasks.empty()) throw ConfigError("stage-2 task list is empty");
  for (const auto& t : tasks) {
    if (t == task_names::similarity) {
      throw OrchestrationError("the unseen task '" + t + "' must never enter stage-2 pre-training");
    }
    registry_.at(t);
  }
  const auto base = denoise(seed, progress);
  const auto dir = out_dir.empty() ? seed_dir(seed) / stage2_dir_name(tasks, dialogue_tasks()) : out_dir;
  const auto& c = config_;
  std::string task_list;
  for (const auto& t : tasks) task_list += t + ",";
  const std::string fp =
      fnv_hex("ufa|" + read_stamp(base.parent_path())->fingerprint + "|" + task_list + "|" + std::to_string(c.ufa_steps) +
              "|" + to_string(c.mixing) + "|" + std::to_string(c.pretrain_lr));
  if (auto s = read_stamp(dir); s && s->fingerprint == fp) return dir / s->checkpoint;

  std::map<std::string, std::vector<PromptedExample>> data;
  TrainPlan plan;
  for (const auto& t : tasks) {
    data[t] = examples(t, PromptVariant::full, "pretrain");
    plan.tasks.push_back({t, 1.0});
    if (progress) *progress << "stage 2, seed " << seed << ": " << t << " " << data[t].size() << " weak examples\n";
  }
  auto model = load_checkpoint(base);
  plan.stage = Stage::ufa_pretrain;
  plan.batch_size = c.batch_size;
  plan.max_steps = c.ufa_steps;
  plan.log_every = 50;
  plan.seed = Rng::derive(seed, 2);
  plan.mixing = c.mixing;
  plan.optimizer.learning_rate = c.pretrain_lr;
  plan.dropout = c.dropout > 0.0;
  if (fs::exists(dir)) fs::remove_all(dir);
  const auto started = std::chrono::steady_clock::now();
  const auto result = run_stage(plan, model, data, {dir, {}, "", progress});
  StageStamp stamp{fp, fs::path(result.final_checkpoint).filename().string(), ordered_json::object()};
  stamp.extra["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  stamp.extra["init"] = relative_to(base, c.work_dir);
  write_stamp(dir, stamp);
  return dir / stamp.checkpoint;
}

fs::path Workspace::base_checkpoint(ModelVariant variant, std::uint64_t seed,
                                    const std::vector<std::string>& stage2_tasks, std::ostream* progress) const {
  return variant == ModelVariant::ufa_ori ? denoise(seed, progress) : ufa_pretrain(seed, stage2_tasks, progress);
}

MetricReport Workspace::evaluate_checkpoint(const fs::path& checkpoint, const std::string& task, PromptVariant prompt,
                                            std::uint64_t seed) const {
  const auto& spec = registry_.at(task);
  const auto model = load_checkpoint(checkpoint);
  auto test = examples(task, prompt, "test");
  if (config_.test_limit > 0 && test.size() > config_.test_limit) test.resize(config_.test_limit);
  EvalOptions opts;
  opts.macro = spec.builder == BuilderKind::sentence_pair;
  auto report = evaluate(model, test, spec, default_decode_config(spec, config_.max_target), tokenizer(), opts);
  report.seed = seed;
  report.checkpoint = relative_to(checkpoint, config_.work_dir);
  report.prompt_variant = to_string(prompt);
  return report;
}

MetricReport Workspace::finetune(const FinetuneRun& run, std::ostream* progress, const fs::path& out_dir) const {
  const auto& c = config_;
  const auto& spec = registry_.at(run.task);
  const auto dir = out_dir.empty() ? seed_dir(run.seed) / "finetune" / slug(run.group) / slug(run.task) /
                                         to_string(run.prompt) / (run.k ? "k" + std::to_string(*run.k) : "full")
                                   : out_dir;
  const auto init_stamp = read_stamp(run.init.parent_path());
  const std::string init_fp = init_stamp ? init_stamp->fingerprint : fnv_hex(read_text(run.init));
  const std::string fp = fnv_hex("finetune|" + init_fp + "|" + data_description(c) + "|" + run.task + "|" +
                                 to_json_line(spec) + "|" + to_string(run.prompt) + "|" +
                                 (run.k ? std::to_string(*run.k) : "full") + "|" + std::to_string(run.seed) + "|" +
                                 std::to_string(c.finetune_lr) + "|" + std::to_string(c.finetune_epochs) + "|" +
                                 std::to_string(c.finetune_max_steps) + "|" + std::to_string(c.evals_per_run) + "|" +
                                 std::to_string(c.dev_limit) + "|" + std::to_string(c.test_limit));
  if (auto s = read_stamp(dir); s && s->fingerprint == fp && s->extra.contains("report")) {
    return report_from_json_line(s->extra.at("report").get<std::string>(), 1);
  }

  auto train = examples(run.task, run.prompt, "train");
  if (run.k) train = fewshot_sample(train, spec, *run.k, Rng::derive(run.seed, 1000 + *run.k));
  auto dev = examples(run.task, run.prompt, "dev");
  if (c.dev_limit > 0 && dev.size() > c.dev_limit) dev.resize(c.dev_limit);
  if (progress) {
    *progress << "fine-tune " << run.group << " / " << run.task << " / " << to_string(run.prompt)
              << (run.k ? " / k=" + std::to_string(*run.k) : std::string()) << ", seed " << run.seed << ": "
              << train.size() << " train, " << dev.size() << " dev\n";
  }

  auto model = load_checkpoint(run.init);
  TrainPlan plan;
  plan.stage = Stage::finetune;
  plan.tasks = {{run.task, 1.0}};
  plan.batch_size = c.batch_size;
  std::size_t steps = c.finetune_epochs * ((train.size() + c.batch_size - 1) / c.batch_size);
  if (c.finetune_max_steps > 0 && (steps == 0 || steps > c.finetune_max_steps)) steps = c.finetune_max_steps;
  plan.max_steps = std::max<std::size_t>(steps, 1);
  plan.eval_every = std::max<std::size_t>(1, plan.max_steps / c.evals_per_run);
  plan.log_every = std::max<std::size_t>(1, std::min<std::size_t>(50, plan.max_steps));
  plan.seed = Rng::derive(run.seed, 3);
  plan.optimizer.learning_rate = c.finetune_lr;
  plan.dropout = c.dropout > 0.0;

  const std::string metric = spec.is_classification() ? "accuracy" : "rouge1";
  DecodeConfig greedy;
  greedy.max_target_length = c.max_target;
  const auto& tok = tokenizer();
  StageOptions opts;
  opts.out_dir = dir;
  opts.select_metric = metric;
  opts.progress = progress;
  opts.dev_eval = [&](const Transformer<float>& m) {
    const auto r = evaluate(m, dev, spec, greedy, tok);
    return std::map<std::string, double>{{metric, spec.is_classification() ? *r.accuracy : *r.rouge1}};
  };
  std::map<std::string, std::vector<PromptedExample>> data{{run.task, std::move(train)}};
  if (fs::exists(dir)) fs::remove_all(dir);
  const auto started = std::chrono::steady_clock::now();
  const auto result = run_stage(plan, model, data, opts);
  const auto best = fs::path(result.best_checkpoint);
  keep_only(dir, best.filename().string());

  auto report = evaluate_checkpoint(best, run.task, run.prompt, run.seed);
  report.group = run.group;
  report.model_variant = to_string(run.variant);
  report.fewshot_k = run.k;
  StageStamp stamp{fp, best.filename().string(), ordered_json::object()};
  stamp.extra["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  stamp.extra["steps"] = result.steps;
  stamp.extra["init"] = relative_to(run.init, c.work_dir);
  stamp.extra["report"] = to_json_line(report);
  write_stamp(dir, stamp);
  if (progress) *progress << "  test: " << to_json_line(report) << "\n";
  return report;
}

std::vector<std::pair<std::string, std::string>> Workspace::stage2_inputs() const {
  std::vector<std::pair<std::string, std::string>> out;
  if (!fs::exists(config_.work_dir)) return out;
  for (const auto& entry : fs::recursive_directory_iterator(config_.work_dir)) {
    if (entry.path().filename() != "train_log.jsonl") continue;
    std::ifstream in(entry.path());
    std::string header;
    if (!std::getline(in, header)) continue;
    const auto j = json::parse(header, nullptr, false);
    if (j.is_discarded() || !j.contains("stage") || j.at("stage") != to_string(Stage::ufa_pretrain)) continue;
    for (const auto& t : j.at("tasks")) {
      out.emplace_back(t.at("task").get<std::string>(), t.at("input_hash").get<std::string>());
    }
  }
  return out;
}

// ---- experiments ----

namespace {

std::string ablation_group(const std::string& task) {
  if (task == task_names::domain) return "+domain";
  if (task == task_names::intent) return "+intent";
  if (task == task_names::summary) return "+summary";
  if (task == task_names::generation) return "+dialogue";
  return "+" + task;
}

}  // namespace

std::vector<MetricReport> run_experiment(const ExperimentConfig& config, std::ostream* progress) {
  config.validate();
  Workspace ws(config);
  ws.require_data();
  ws.require_tokenizer();
  const auto tasks = config.experiment_tasks();
  for (const auto& t : tasks) ws.registry().at(t);
  const auto stage2 = config.stage2_tasks();
  const std::string exp = to_string(config.experiment);
  std::vector<MetricReport> bundle;

  auto run = [&](const std::string& group, ModelVariant variant, const fs::path& init, const std::string& task,
                 PromptVariant prompt, std::optional<std::size_t> k, std::uint64_t seed) {
    Workspace::FinetuneRun r{task, variant, prompt, k, seed, init, group};
    auto report = ws.finetune(r, progress);
    report.experiment = exp;
    bundle.push_back(std::move(report));
  };

  for (const auto seed : config.seeds) {
    switch (config.experiment) {
      case Experiment::main:
        for (auto v : {ModelVariant::ufa, ModelVariant::ufa_ori}) {
          const auto init = ws.base_checkpoint(v, seed, stage2, progress);
          for (const auto& t : tasks) run(to_string(v), v, init, t, PromptVariant::full, std::nullopt, seed);
        }
        break;
      case Experiment::fewshot:
        for (auto v : {ModelVariant::ufa, ModelVariant::ufa_ori}) {
          const auto init = ws.base_checkpoint(v, seed, stage2, progress);
          for (const auto& t : tasks) {
            for (auto k : config.fewshot_k) run(to_string(v), v, init, t, PromptVariant::full, k, seed);
          }
        }
        break;
      case Experiment::unseen: {
        for (auto v : {ModelVariant::ufa, ModelVariant::ufa_ori}) {
          const auto init = ws.base_checkpoint(v, seed, stage2, progress);
          for (const auto& t : tasks) run(to_string(v), v, init, t, PromptVariant::full, std::nullopt, seed);
        }
        // Isolation: no fine-tuning set of the unseen tasks was a stage-2 input.
        const auto seen = ws.stage2_inputs();
        for (const auto& t : tasks) {
          for (const auto& [name, hash] : seen) {
            if (name == t) throw OrchestrationError("unseen task '" + t + "' appears in a stage-2 task list");
            for (const auto& split : {"train", "dev", "test"}) {
              if (hash == ws.dataset_hash_for(t, PromptVariant::full, split)) {
                throw OrchestrationError("unseen task '" + t + "' " + split + " data appears among stage-2 inputs");
              }
            }
          }
        }
        break;
      }
      case Experiment::prompt_ablation: {
        const auto init = ws.base_checkpoint(ModelVariant::ufa, seed, stage2, progress);
        for (auto p : {PromptVariant::full, PromptVariant::no_goal, PromptVariant::no_task}) {
          const std::string group = p == PromptVariant::full ? "ufa" : "ufa " + to_string(p);
          for (const auto& t : tasks) run(group, ModelVariant::ufa, init, t, p, std::nullopt, seed);
        }
        break;
      }
      case Experiment::task_ablation: {
        const auto ori = ws.base_checkpoint(ModelVariant::ufa_ori, seed, stage2, progress);
        for (const auto& t : tasks) run("ufa_ori", ModelVariant::ufa_ori, ori, t, PromptVariant::full, std::nullopt, seed);
        for (const auto& single : dialogue_tasks()) {
          const auto init = ws.ufa_pretrain(seed, {single}, progress);
          for (const auto& t : tasks) run(ablation_group(single), ModelVariant::ufa, init, t, PromptVariant::full, std::nullopt, seed);
        }
        const auto full = ws.base_checkpoint(ModelVariant::ufa, seed, dialogue_tasks(), progress);
        for (const auto& t : tasks) run("ufa", ModelVariant::ufa, full, t, PromptVariant::full, std::nullopt, seed);
        break;
      }
    }
  }
  return bundle;
}

// ---- report rendering ----

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median of an empty list");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

std::string format_score(double value) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << value;
  std::string s = os.str();
  while (!s.empty() && s.back() == '0') s.pop_back();
  if (!s.empty() && s.back() == '.') s.pop_back();
  if (s == "-0") s = "0";
  return s;
}

namespace {

struct Column {
  std::string task;
  std::string metric;
};

std::optional<double> metric_of(const MetricReport& r, const std::string& metric) {
  if (metric == "Acc") return r.accuracy;
  if (metric == "P") return r.macro_precision;
  if (metric == "R") return r.macro_recall;
  if (metric == "F1") return r.macro_f1;
  if (metric == "Bleu-2") return r.bleu2;
  if (metric == "Rouge-1") return r.rouge1;
  if (metric == "Rouge-2") return r.rouge2;
  if (metric == "Rouge-L") return r.rougeL;
  return std::nullopt;
}

const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> k = {"Acc", "P", "R", "F1", "Bleu-2", "Rouge-1", "Rouge-2", "Rouge-L"};
  return k;
}

std::string pad(const std::string& s, std::size_t width) {
  const std::size_t n = utf8::decode(s).size();
  return s + std::string(width > n ? width - n : 0, ' ');
}

}  // namespace

std::string render_report(const std::vector<MetricReport>& bundle) {
  std::vector<std::string> experiments;
  for (const auto& r : bundle) {
    const auto name = r.experiment.empty() ? std::string("report") : r.experiment;
    if (std::find(experiments.begin(), experiments.end(), name) == experiments.end()) experiments.push_back(name);
  }
  std::ostringstream out;
  for (const auto& exp : experiments) {
    std::vector<const MetricReport*> rows_in;
    for (const auto& r : bundle) {
      if ((r.experiment.empty() ? std::string("report") : r.experiment) == exp) rows_in.push_back(&r);
    }
    // Columns: tasks in order of appearance, each with the metrics it reports.
    std::vector<Column> columns;
    for (const auto* r : rows_in) {
      for (const auto& m : metric_names()) {
        if (!metric_of(*r, m)) continue;
        const bool have = std::any_of(columns.begin(), columns.end(),
                                      [&](const Column& c) { return c.task == r->task_name && c.metric == m; });
        if (!have) columns.push_back({r->task_name, m});
      }
    }
    std::stable_sort(columns.begin(), columns.end(), [&](const Column& a, const Column& b) {
      auto task_pos = [&](const std::string& t) {
        for (std::size_t i = 0; i < rows_in.size(); ++i) {
          if (rows_in[i]->task_name == t) return i;
        }
        return rows_in.size();
      };
      const auto pa = task_pos(a.task), pb = task_pos(b.task);
      if (pa != pb) return pa < pb;
      const auto& names = metric_names();
      return std::find(names.begin(), names.end(), a.metric) < std::find(names.begin(), names.end(), b.metric);
    });
    // Rows: group, prompt variant and k.
    std::vector<std::string> row_keys;
    std::map<std::string, std::vector<const MetricReport*>> by_row;
    for (const auto* r : rows_in) {
      std::string key = r->group.empty() ? (r->model_variant.empty() ? "-" : r->model_variant) : r->group;
      if (r->prompt_variant != "full" && key.find(r->prompt_variant) == std::string::npos) key += " " + r->prompt_variant;
      if (r->fewshot_k) key += " k=" + std::to_string(*r->fewshot_k);
      if (!by_row.count(key)) row_keys.push_back(key);
      by_row[key].push_back(r);
    }
    std::vector<std::vector<std::string>> table;
    std::vector<std::string> header{"group"};
    for (const auto& c : columns) header.push_back(c.task + " " + c.metric);
    table.push_back(header);
    for (const auto& key : row_keys) {
      std::vector<std::string> row{key};
      for (const auto& c : columns) {
        std::vector<double> values;
        for (const auto* r : by_row[key]) {
          if (r->task_name != c.task) continue;
          if (auto v = metric_of(*r, c.metric)) values.push_back(*v);
        }
        if (values.empty()) {
          row.push_back("-");
          continue;
        }
        std::string cell = format_score(median(values));
        if (values.size() > 1) {
          cell += " (";
          for (std::size_t i = 0; i < values.size(); ++i) cell += (i ? ", " : "") + format_score(values[i]);
          cell += ")";
        }
        row.push_back(cell);
      }
      table.push_back(row);
    }
    std::vector<std::size_t> width(header.size(), 0);
    for (const auto& row : table) {
      for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], utf8::decode(row[i]).size());
    }
    out << "== " << exp << " ==\n";
    for (const auto& row : table) {
      std::string line;
      for (std::size_t i = 0; i < row.size(); ++i) {
        line += (i ? "  " : "") + (i + 1 < row.size() ? pad(row[i], width[i]) : row[i]);
      }
      out << line << "\n";
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace ufa
