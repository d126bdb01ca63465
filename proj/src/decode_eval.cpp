#include "ufa/decode_eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>

#include "ufa/error.hpp"
#include "ufa/utf8.hpp"

namespace ufa {

using nlohmann::json;
using nlohmann::ordered_json;

void DecodeConfig::validate() const {
  if (beam_width < 1) throw ConfigError("beam_width must be >= 1");
  if (max_target_length < 1) throw ConfigError("max_target_length must be >= 1");
  if (!std::isfinite(length_penalty)) throw ConfigError("length_penalty must be finite");
}

DecodeConfig default_decode_config(const TaskSpec& task, std::size_t max_target_length) {
  DecodeConfig c;
  c.max_target_length = max_target_length;
  if (!task.is_classification()) c.strategy = DecodeStrategy::beam;
  return c;
}

namespace {

// Rows `rows` of an encoder output, in that order (rows may repeat).
EncoderOutput<float> select_rows(const EncoderOutput<float>& enc, const std::vector<std::size_t>& rows) {
  const std::size_t len = enc.hidden.dim(1), d = enc.hidden.dim(2);
  EncoderOutput<float> out{Tensor<float>(Shape{rows.size(), len, d}), std::vector<std::uint8_t>(rows.size() * len)};
  const float* src = enc.hidden.data().data();
  float* dst = out.hidden.data().data();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(src + rows[i] * len * d, len * d, dst + i * len * d);
    std::copy_n(enc.key_valid.begin() + static_cast<std::ptrdiff_t>(rows[i] * len), len,
                out.key_valid.begin() + static_cast<std::ptrdiff_t>(i * len));
  }
  return out;
}

TokenBatch decoder_batch(const std::vector<std::vector<int>>& prefixes) {
  TokenBatch b;
  b.rows = prefixes.size();
  b.cols = prefixes.empty() ? 0 : prefixes[0].size() + 1;
  b.ids.reserve(b.rows * b.cols);
  for (const auto& p : prefixes) {
    b.ids.push_back(0);
    b.ids.insert(b.ids.end(), p.begin(), p.end());
  }
  return b;
}

// Log-probabilities at the last decoder position of each row.
std::vector<std::vector<double>> last_log_probs(const Tensor<float>& logits) {
  const std::size_t rows = logits.dim(0), t = logits.dim(1), v = logits.dim(2);
  std::vector<std::vector<double>> out(rows, std::vector<double>(v));
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = logits.data().data() + (r * t + t - 1) * v;
    const double mx = *std::max_element(row, row + v);
    double total = 0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(total);
    for (std::size_t j = 0; j < v; ++j) out[r][j] = static_cast<double>(row[j]) - lse;
  }
  return out;
}

int argmax_lowest(const float* row, std::size_t v) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < v; ++j) {
    if (row[j] > row[best]) best = j;
  }
  return static_cast<int>(best);
}

std::vector<int> beam_decode(const Transformer<float>& model, std::span<const int> input_ids,
                             const DecodeConfig& config, int eos_id) {
  const TokenBatch src = pack({std::vector<int>(input_ids.begin(), input_ids.end())});
  const auto encoded = model.encode(src);
  const std::size_t k = config.beam_width;

  struct Hyp {
    std::vector<int> tokens;
    double score;
  };
  std::vector<Hyp> live{{{}, 0.0}};
  std::vector<std::pair<double, std::vector<int>>> finished;
  auto normalized = [&](double score, std::size_t length) {
    return score / std::pow(static_cast<double>(std::max<std::size_t>(length, 1)), config.length_penalty);
  };

  for (std::size_t step = 0; step < config.max_target_length && !live.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : live) prefixes.push_back(h.tokens);
    const auto enc = select_rows(encoded, std::vector<std::size_t>(live.size(), 0));
    const auto lp = last_log_probs(model.decode(enc, decoder_batch(prefixes)));

    struct Cand {
      double score;
      std::size_t beam;
      int token;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      for (std::size_t j = 0; j < lp[b].size(); ++j) cands.push_back({live[b].score + lp[b][j], b, static_cast<int>(j)});
    }
    const std::size_t keep = std::min(cands.size(), 2 * k);
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Cand& a, const Cand& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        return a.token < b.token;
                      });
    std::vector<Hyp> next;
    for (std::size_t rank = 0; rank < keep && next.size() < k; ++rank) {
      const auto& c = cands[rank];
      if (c.token == eos_id) {
        if (rank < k) finished.emplace_back(normalized(c.score, live[c.beam].tokens.size() + 1), live[c.beam].tokens);
        continue;
      }
      Hyp h{live[c.beam].tokens, c.score};
      h.tokens.push_back(c.token);
      next.push_back(std::move(h));
    }
    live = std::move(next);
    if (finished.size() >= k) break;
  }
  if (finished.size() < k) {
    for (const auto& h : live) finished.emplace_back(normalized(h.score, h.tokens.size()), h.tokens);
  }
  // Stable: among equal scores the earliest finished hypothesis wins.
  const auto best = std::max_element(finished.begin(), finished.end(),
                                     [](const auto& a, const auto& b) { return a.first < b.first; });
  return best == finished.end() ? std::vector<int>{} : best->second;
}

}  // namespace

std::vector<std::vector<int>> greedy_decode_batch(const Transformer<float>& model,
                                                  const std::vector<std::vector<int>>& inputs,
                                                  std::size_t max_target_length, int eos_id) {
  std::vector<std::vector<int>> out(inputs.size());
  if (inputs.empty()) return out;
  const auto encoded = model.encode(pack(inputs));
  std::vector<std::size_t> active(inputs.size());
  for (std::size_t i = 0; i < active.size(); ++i) active[i] = i;
  auto enc = encoded;
  for (std::size_t step = 0; step < max_target_length && !active.empty(); ++step) {
    std::vector<std::vector<int>> prefixes;
    for (std::size_t r : active) prefixes.push_back(out[r]);
    const auto logits = model.decode(enc, decoder_batch(prefixes));
    const std::size_t t = logits.dim(1), v = logits.dim(2);
    std::vector<std::size_t> still;
    std::vector<std::size_t> keep_rows;
    for (std::size_t i = 0; i < active.size(); ++i) {
      const int tok = argmax_lowest(logits.data().data() + (i * t + t - 1) * v, v);
      if (tok == eos_id) continue;
      out[active[i]].push_back(tok);
      still.push_back(active[i]);
      keep_rows.push_back(i);
    }
    if (still.size() != active.size() && !still.empty()) enc = select_rows(enc, keep_rows);
    active = std::move(still);
  }
  return out;
}

std::vector<int> decode(const Transformer<float>& model, std::span<const int> input_ids, const DecodeConfig& config,
                        int eos_id) {
  config.validate();
  if (input_ids.empty()) throw ContractError("decode: empty input");
  if (config.strategy == DecodeStrategy::greedy) {
    return greedy_decode_batch(model, {std::vector<int>(input_ids.begin(), input_ids.end())},
                               config.max_target_length, eos_id)[0];
  }
  return beam_decode(model, input_ids, config, eos_id);
}

std::vector<std::string> metric_tokens(std::string_view text) {
  std::vector<std::string> out;
  std::u32string current;
  auto flush = [&] {
    if (!current.empty()) out.push_back(utf8::encode(current));
    current.clear();
  };
  for (char32_t c : utf8::decode(text)) {
    if (utf8::is_space(c)) {
      flush();
    } else if (utf8::is_cjk(c)) {
      flush();
      out.push_back(utf8::encode(c));
    } else {
      current += c;
    }
  }
  flush();
  return out;
}

double exact_match_accuracy(std::span<const std::string> predictions, std::span<const std::string> gold) {
  if (predictions.size() != gold.size()) {
    throw ContractError("exact_match_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(gold.size()) + " labels");
  }
  if (gold.empty()) throw ContractError("exact_match_accuracy: empty inputs");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hits += normalize_label(predictions[i]) == normalize_label(gold[i]);
  return static_cast<double>(hits) / static_cast<double>(gold.size());
}

namespace {

using NgramCounts = std::map<std::vector<std::string>, std::size_t>;

NgramCounts ngrams(const std::vector<std::string>& toks, std::size_t n) {
  NgramCounts c;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) {
    ++c[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                 toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
  }
  return c;
}

std::size_t clipped_overlap(const NgramCounts& pred, const NgramCounts& ref) {
  std::size_t total = 0;
  for (const auto& [g, n] : pred) {
    const auto it = ref.find(g);
    if (it != ref.end()) total += std::min(n, it->second);
  }
  return total;
}

std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double ratio(double num, double den) { return den > 0 ? num / den : 0.0; }

}  // namespace

double bleu2(const std::vector<std::vector<std::string>>& predictions,
             const std::vector<std::vector<std::string>>& references) {
  if (predictions.size() != references.size()) throw ContractError("bleu2: prediction and reference counts differ");
  if (predictions.empty()) throw ContractError("bleu2: empty corpus");
  double matched[2] = {0, 0}, total[2] = {0, 0};
  double pred_len = 0, ref_len = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    pred_len += static_cast<double>(predictions[i].size());
    ref_len += static_cast<double>(references[i].size());
    for (std::size_t n = 1; n <= 2; ++n) {
      const auto p = ngrams(predictions[i], n);
      matched[n - 1] += static_cast<double>(clipped_overlap(p, ngrams(references[i], n)));
      for (const auto& [g, c] : p) total[n - 1] += static_cast<double>(c);
    }
  }
  if (matched[0] == 0 || matched[1] == 0) return 0.0;
  const double log_p = 0.5 * std::log(matched[0] / total[0]) + 0.5 * std::log(matched[1] / total[1]);
  const double bp = pred_len < ref_len ? std::exp(1.0 - ref_len / pred_len) : 1.0;
  return bp * std::exp(log_p);
}

double bleu2(std::span<const std::string> predictions, std::span<const std::string> references) {
  std::vector<std::vector<std::string>> p, r;
  for (const auto& s : predictions) p.push_back(metric_tokens(s));
  for (const auto& s : references) r.push_back(metric_tokens(s));
  return bleu2(p, r);
}

PRF rouge(const std::vector<std::string>& prediction, const std::vector<std::string>& reference,
          RougeVariant variant) {
  if (reference.empty()) throw ContractError("rouge: empty reference");
  double overlap = 0, pred_size = 0, ref_size = 0;
  if (variant == RougeVariant::lcs) {
    overlap = static_cast<double>(lcs_length(prediction, reference));
    pred_size = static_cast<double>(prediction.size());
    ref_size = static_cast<double>(reference.size());
  } else {
    const std::size_t n = variant == RougeVariant::one ? 1 : 2;
    const auto p = ngrams(prediction, n), r = ngrams(reference, n);
    overlap = static_cast<double>(clipped_overlap(p, r));
    pred_size = static_cast<double>(prediction.size() >= n ? prediction.size() - n + 1 : 0);
    ref_size = static_cast<double>(reference.size() >= n ? reference.size() - n + 1 : 0);
  }
  PRF out;
  out.precision = ratio(overlap, pred_size);
  out.recall = ratio(overlap, ref_size);
  out.f1 = ratio(2 * out.precision * out.recall, out.precision + out.recall);
  return out;
}

PRF rouge(std::string_view prediction, std::string_view reference, RougeVariant variant) {
  return rouge(metric_tokens(prediction), metric_tokens(reference), variant);
}

double corpus_rouge(std::span<const std::string> predictions, std::span<const std::string> references,
                    RougeVariant variant) {
  if (predictions.size() != references.size()) throw ContractError("rouge: prediction and reference counts differ");
  if (predictions.empty()) throw ContractError("rouge: empty corpus");
  double total = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) total += rouge(predictions[i], references[i], variant).f1;
  return total / static_cast<double>(predictions.size());
}

PRF macro_prf(std::span<const std::string> predictions, std::span<const std::string> gold,
              std::span<const std::string> label_set) {
  if (predictions.size() != gold.size()) throw ContractError("macro_prf: prediction and label counts differ");
  if (gold.empty() || label_set.empty()) throw ContractError("macro_prf: empty inputs");
  std::vector<std::string> labels;
  for (const auto& l : label_set) labels.push_back(normalize_label(l));
  const std::size_t n = labels.size();
  auto index = [&](const std::string& s) {
    const auto it = std::find(labels.begin(), labels.end(), normalize_label(s));
    return it == labels.end() ? n : static_cast<std::size_t>(it - labels.begin());
  };
  std::vector<double> tp(n + 1, 0), pred_count(n + 1, 0), gold_count(n + 1, 0);
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::size_t g = index(gold[i]);
    if (g == n) throw ContractError("macro_prf: gold label '" + gold[i] + "' outside the label set");
    const std::size_t p = index(predictions[i]);
    ++gold_count[g];
    ++pred_count[p];
    if (p == g) ++tp[g];
  }
  PRF out;
  for (std::size_t c = 0; c < n; ++c) {
    const double p = ratio(tp[c], pred_count[c]);
    const double r = ratio(tp[c], gold_count[c]);
    out.precision += p;
    out.recall += r;
    out.f1 += ratio(2 * p * r, p + r);
  }
  out.precision /= static_cast<double>(n);
  out.recall /= static_cast<double>(n);
  out.f1 /= static_cast<double>(n);
  return out;
}

namespace {

void put_optional(ordered_json& j, const char* key, const std::optional<double>& v) {
  j[key] = v ? ordered_json(*v) : ordered_json(nullptr);
}

std::optional<double> get_optional(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  if (!j[key].is_number()) throw ParseError(line, key, "expected a number or null");
  const double v = j[key].get<double>();
  if (!(v >= 0.0 && v <= 1.0)) throw ParseError(line, key, "score outside [0, 1]");
  return v;
}

std::string get_string(const json& j, const char* key, std::size_t line) {
  if (!j.contains(key)) return {};
  if (!j[key].is_string()) throw ParseError(line, key, "expected a string");
  return j[key].get<std::string>();
}

}  // namespace

std::string to_json_line(const MetricReport& r) {
  ordered_json j;
  j["task_name"] = r.task_name;
  j["n_examples"] = r.n_examples;
  put_optional(j, "accuracy", r.accuracy);
  put_optional(j, "macro_precision", r.macro_precision);
  put_optional(j, "macro_recall", r.macro_recall);
  put_optional(j, "macro_f1", r.macro_f1);
  put_optional(j, "bleu2", r.bleu2);
  put_optional(j, "rouge1", r.rouge1);
  put_optional(j, "rouge2", r.rouge2);
  put_optional(j, "rougeL", r.rougeL);
  j["rouge_mode"] = "f1";
  j["seed"] = r.seed;
  j["checkpoint"] = r.checkpoint;
  j["experiment"] = r.experiment;
  j["group"] = r.group;
  j["model_variant"] = r.model_variant;
  j["prompt_variant"] = r.prompt_variant;
  j["fewshot_k"] = r.fewshot_k ? ordered_json(*r.fewshot_k) : ordered_json(nullptr);
  return j.dump();
}

MetricReport report_from_json_line(const std::string& line, std::size_t line_number) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(line_number, "<line>", e.what());
  }
  if (!j.is_object()) throw ParseError(line_number, "<line>", "expected a JSON object");
  MetricReport r;
  r.task_name = get_string(j, "task_name", line_number);
  if (r.task_name.empty()) throw ParseError(line_number, "task_name", "missing");
  if (!j.contains("n_examples") || !j["n_examples"].is_number_unsigned()) {
    throw ParseError(line_number, "n_examples", "missing or not a count");
  }
  r.n_examples = j["n_examples"].get<std::size_t>();
  r.accuracy = get_optional(j, "accuracy", line_number);
  r.macro_precision = get_optional(j, "macro_precision", line_number);
  r.macro_recall = get_optional(j, "macro_recall", line_number);
  r.macro_f1 = get_optional(j, "macro_f1", line_number);
  r.bleu2 = get_optional(j, "bleu2", line_number);
  r.rouge1 = get_optional(j, "rouge1", line_number);
  r.rouge2 = get_optional(j, "rouge2", line_number);
  r.rougeL = get_optional(j, "rougeL", line_number);
  if (j.contains("seed")) {
    if (!j["seed"].is_number_unsigned()) throw ParseError(line_number, "seed", "expected an unsigned integer");
    r.seed = j["seed"].get<std::uint64_t>();
  }
  r.checkpoint = get_string(j, "checkpoint", line_number);
  r.experiment = get_string(j, "experiment", line_number);
  r.group = get_string(j, "group", line_number);
  r.model_variant = get_string(j, "model_variant", line_number);
  r.prompt_variant = get_string(j, "prompt_variant", line_number);
  if (r.prompt_variant.empty()) r.prompt_variant = "full";
  if (j.contains("fewshot_k") && !j["fewshot_k"].is_null()) {
    if (!j["fewshot_k"].is_number_unsigned()) throw ParseError(line_number, "fewshot_k", "expected a count");
    r.fewshot_k = j["fewshot_k"].get<std::size_t>();
  }
  return r;
}

void save_reports(const std::filesystem::path& path, const std::vector<MetricReport>& reports) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write reports to " + path.string());
  for (const auto& r : reports) out << to_json_line(r) << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

std::vector<MetricReport> load_reports(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open reports " + path.string());
  std::vector<MetricReport> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(report_from_json_line(line, n));
  }
  return out;
}

MetricReport evaluate(const Transformer<float>& model, std::span<const PromptedExample> dataset, const TaskSpec& task,
                      const DecodeConfig& config, const Tokenizer& tokenizer, const EvalOptions& options,
                      std::vector<std::string>* predictions) {
  config.validate();
  if (dataset.empty()) throw ContractError("evaluate: empty dataset for task '" + task.name + "'");
  for (const auto& ex : dataset) {
    if (ex.task_name != task.name) {
      throw ContractError("evaluate: example built for task '" + ex.task_name + "', evaluating '" + task.name + "'");
    }
  }
  std::vector<std::vector<int>> outputs;
  if (config.strategy == DecodeStrategy::greedy) {
    const std::size_t bs = std::max<std::size_t>(options.batch_size, 1);
    for (std::size_t start = 0; start < dataset.size(); start += bs) {
      std::vector<std::vector<int>> inputs;
      for (std::size_t i = start; i < std::min(dataset.size(), start + bs); ++i) inputs.push_back(dataset[i].input_ids);
      auto part = greedy_decode_batch(model, inputs, config.max_target_length, tokenizer.eos_id());
      std::move(part.begin(), part.end(), std::back_inserter(outputs));
    }
  } else {
    for (const auto& ex : dataset) outputs.push_back(decode(model, ex.input_ids, config, tokenizer.eos_id()));
  }
  std::vector<std::string> preds, refs;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    preds.push_back(tokenizer.decode(outputs[i]));
    refs.push_back(tokenizer.decode(dataset[i].target_ids));
  }

  MetricReport report;
  report.task_name = task.name;
  report.n_examples = dataset.size();
  if (task.is_classification()) {
    report.accuracy = exact_match_accuracy(preds, refs);
    if (options.macro) {
      const auto m = macro_prf(preds, refs, *task.label_set);
      report.macro_precision = m.precision;
      report.macro_recall = m.recall;
      report.macro_f1 = m.f1;
    }
  } else if (task.builder == BuilderKind::agent_segments) {
    report.bleu2 = bleu2(preds, refs);
    report.rouge1 = corpus_rouge(preds, refs, RougeVariant::one);
  } else {
    report.rouge1 = corpus_rouge(preds, refs, RougeVariant::one);
    report.rouge2 = corpus_rouge(preds, refs, RougeVariant::two);
    report.rougeL = corpus_rouge(preds, refs, RougeVariant::lcs);
  }
  if (predictions != nullptr) *predictions = std::move(preds);
  return report;
}

namespace {

std::string percent(const std::optional<double>& v) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << *v * 100.0;
  return os.str();
}

}  // namespace

std::string render_table(const std::vector<MetricReport>& reports) {
  const std::vector<std::string> header = {"task", "variant", "seed", "n", "Acc", "P", "R", "F1",
                                           "Bleu-2", "Rouge-1", "Rouge-2", "Rouge-L"};
  std::vector<std::vector<std::string>> rows{header};
  for (const auto& r : reports) {
    rows.push_back({r.task_name, r.model_variant.empty() ? "-" : r.model_variant, std::to_string(r.seed),
                    std::to_string(r.n_examples), percent(r.accuracy), percent(r.macro_precision),
                    percent(r.macro_recall), percent(r.macro_f1), percent(r.bleu2), percent(r.rouge1),
                    percent(r.rouge2), percent(r.rougeL)});
  }
  std::vector<std::size_t> width(header.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], utf8::decode(row[c]).size());
  }
  std::ostringstream os;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      os << (c ? "  " : "") << row[c];
      if (c + 1 < row.size()) os << std::string(width[c] - utf8::decode(row[c]).size(), ' ');
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace ufa
