#include "ufa/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "ufa/error.hpp"

namespace ufa {

TokenBatch pack(const std::vector<std::vector<int>>& rows, int pad_id) {
  TokenBatch b;
  b.rows = rows.size();
  for (const auto& r : rows) b.cols = std::max(b.cols, r.size());
  b.ids.assign(b.rows * b.cols, pad_id);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i].begin(), rows[i].end(), b.ids.begin() + static_cast<std::ptrdiff_t>(i * b.cols));
  }
  return b;
}

TokenBatch shift_right(const TokenBatch& target, int start_id) {
  TokenBatch out = target;
  for (std::size_t r = 0; r < target.rows; ++r) {
    out.ids[r * target.cols] = start_id;
    for (std::size_t c = 1; c < target.cols; ++c) out.ids[r * target.cols + c] = target.at(r, c - 1);
  }
  return out;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* name) {
    if (v == 0) throw ConfigError(std::string(name) + " must be positive");
  };
  positive(n_encoder_layers, "n_encoder_layers");
  positive(n_decoder_layers, "n_decoder_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(vocab_size, "vocab_size");
  positive(relpos_buckets, "relpos_buckets");
  positive(max_source_length, "max_source_length");
  positive(max_target_length, "max_target_length");
  if (head_dim == 0 && d_model % n_heads != 0) {
    throw ConfigError("d_model must be divisible by n_heads (or set head_dim)");
  }
  if (relpos_max_distance < relpos_buckets) {
    throw ConfigError("relpos_max_distance must be >= relpos_buckets");
  }
  if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0, 1)");
}

std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  const std::size_t d = c.d_model, a = c.n_heads * c.kv_width(), f = c.ff_width();
  std::map<std::string, Shape> s;
  s["shared.embedding"] = {c.vocab_size, d};
  s["encoder.relpos"] = {c.relpos_buckets, c.n_heads};
  s["decoder.relpos"] = {c.relpos_buckets, c.n_heads};
  s["encoder.final_norm"] = {d};
  s["decoder.final_norm"] = {d};
  auto attn = [&](const std::string& p) {
    s[p + ".q"] = {d, a};
    s[p + ".k"] = {d, a};
    s[p + ".v"] = {d, a};
    s[p + ".o"] = {a, d};
  };
  auto ff = [&](const std::string& p) {
    s[p + ".in"] = {d, f};
    s[p + ".out"] = {f, d};
  };
  for (std::size_t i = 0; i < c.n_encoder_layers; ++i) {
    const std::string p = "encoder.layer." + std::to_string(i);
    s[p + ".attn_norm"] = {d};
    attn(p + ".attn");
    s[p + ".ff_norm"] = {d};
    ff(p + ".ff");
  }
  for (std::size_t i = 0; i < c.n_decoder_layers; ++i) {
    const std::string p = "decoder.layer." + std::to_string(i);
    s[p + ".self_norm"] = {d};
    attn(p + ".self");
    s[p + ".cross_norm"] = {d};
    attn(p + ".cross");
    s[p + ".ff_norm"] = {d};
    ff(p + ".ff");
  }
  if (!c.tie_embeddings) s["lm_head"] = {c.vocab_size, d};
  return s;
}

std::size_t parameter_count(const ModelConfig& c) {
  std::size_t total = 0;
  for (const auto& [name, shape] : parameter_shapes(c)) total += numel(shape);
  return total;
}

int relative_position_bucket(long relative_position, bool bidirectional, std::size_t num_buckets,
                             std::size_t max_distance) {
  long ret = 0;
  long n = -relative_position;
  long buckets = static_cast<long>(num_buckets);
  if (bidirectional) {
    buckets /= 2;
    if (n < 0) ret += buckets;
    n = std::abs(n);
  } else {
    n = std::max(n, 0L);
  }
  const long max_exact = buckets / 2;
  if (n < max_exact) return static_cast<int>(ret + n);
  const double ratio = std::log(static_cast<double>(n) / max_exact) /
                       std::log(static_cast<double>(max_distance) / max_exact);
  long large = max_exact + static_cast<long>(ratio * static_cast<double>(buckets - max_exact));
  large = std::min(large, buckets - 1);
  return static_cast<int>(ret + large);
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  Rng rng(seed);
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(config_.d_model));
  for (const auto& [name, shape] : parameter_shapes(config_)) {
    Tensor<T> t(shape);
    const bool is_norm = name.size() >= 5 && name.compare(name.size() - 5, 5, "_norm") == 0;
    const bool is_embedding = name == "shared.embedding" || name == "lm_head";
    for (auto& v : t.data()) {
      v = is_norm ? T(1) : static_cast<T>(rng.truncated_normal(is_embedding ? 1.0 : proj_std));
    }
    t.set_requires_grad(true);
    params_.emplace(name, std::move(t));
  }
}

template <typename T>
Transformer<T>::Transformer(const ModelConfig& config, ParameterMap<T> parameters)
    : config_(config), params_(std::move(parameters)) {
  config_.validate();
  const auto shapes = parameter_shapes(config_);
  for (const auto& [name, shape] : shapes) {
    auto it = params_.find(name);
    if (it == params_.end()) throw CheckpointError("missing tensor " + name);
    if (it->second.shape() != shape) {
      throw CheckpointError("tensor " + name + " has shape " + shape_str(it->second.shape()) +
                            ", expected " + shape_str(shape));
    }
  }
  if (params_.size() != shapes.size()) throw CheckpointError("unexpected extra tensors in parameter map");
}

template <typename T>
const Tensor<T>& Transformer<T>::p(const std::string& name) const {
  return params_.at(name);
}

template <typename T>
Tensor<T> Transformer<T>::norm(const std::string& name, const Tensor<T>& x) const {
  return multiply(rms_normalize(x, -1, T(1e-6)), p(name));
}

template <typename T>
Tensor<T> Transformer<T>::position_bias(const std::string& table, std::size_t q_len, std::size_t k_len,
                                        bool bidirectional) const {
  std::vector<int> buckets(q_len * k_len);
  for (std::size_t q = 0; q < q_len; ++q) {
    for (std::size_t k = 0; k < k_len; ++k) {
      buckets[q * k_len + k] = relative_position_bucket(static_cast<long>(k) - static_cast<long>(q), bidirectional,
                                                        config_.relpos_buckets, config_.relpos_max_distance);
    }
  }
  auto gathered = embedding_gather(p(table), std::span<const int>(buckets), Shape{q_len, k_len});
  return permute(gathered, {2, 0, 1});  // (H, Lq, Lk)
}

template <typename T>
Tensor<T> Transformer<T>::attention(const std::string& prefix, const Tensor<T>& query_in,
                                    const Tensor<T>& kv_in, const Tensor<T>* bias,
                                    std::span<const std::uint8_t> key_valid, bool causal) const {
  auto q = matmul(query_in, p(prefix + ".q"));
  auto k = matmul(kv_in, p(prefix + ".k"));
  auto v = matmul(kv_in, p(prefix + ".v"));
  auto ctx = ufa::attention(q, k, v, config_.n_heads, bias, key_valid, causal);
  return matmul(ctx, p(prefix + ".o"));
}

template <typename T>
Tensor<T> Transformer<T>::feed_forward(const std::string& prefix, const Tensor<T>& x, Rng* rng) const {
  auto hidden = relu(matmul(x, p(prefix + ".in")));
  if (rng != nullptr) hidden = dropout(hidden, config_.dropout_rate, *rng);
  return matmul(hidden, p(prefix + ".out"));
}

namespace {

void check_ids(const TokenBatch& b, std::size_t vocab, const char* what) {
  if (b.ids.size() != b.rows * b.cols) throw ShapeError(std::string(what) + ": ragged token batch");
  for (int id : b.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw ContractError(std::string(what) + ": token id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
  }
}

}  // namespace

template <typename T>
EncoderOutput<T> Transformer<T>::encode(const TokenBatch& input, Rng* rng) const {
  check_ids(input, config_.vocab_size, "encoder input");
  if (input.cols > config_.max_source_length) {
    throw LengthError("source length " + std::to_string(input.cols) + " exceeds maximum " +
                      std::to_string(config_.max_source_length));
  }
  const std::size_t batch = input.rows, len = input.cols;
  std::vector<std::uint8_t> valid(batch * len);
  for (std::size_t i = 0; i < batch * len; ++i) valid[i] = input.ids[i] != 0;

  auto x = embedding_gather(p("shared.embedding"), std::span<const int>(input.ids), Shape{batch, len});
  if (rng != nullptr) x = dropout(x, config_.dropout_rate, *rng);
  const auto bias = position_bias("encoder.relpos", len, len, true);
  for (std::size_t l = 0; l < config_.n_encoder_layers; ++l) {
    const std::string pre = "encoder.layer." + std::to_string(l);
    auto xn = norm(pre + ".attn_norm", x);
    auto a = attention(pre + ".attn", xn, xn, &bias, valid, false);
    if (rng != nullptr) a = dropout(a, config_.dropout_rate, *rng);
    x = add(x, a);
    auto f = feed_forward(pre + ".ff", norm(pre + ".ff_norm", x), rng);
    if (rng != nullptr) f = dropout(f, config_.dropout_rate, *rng);
    x = add(x, f);
  }
  x = norm("encoder.final_norm", x);
  if (rng != nullptr) x = dropout(x, config_.dropout_rate, *rng);
  return {x, std::move(valid)};
}

template <typename T>
Tensor<T> Transformer<T>::decode(const EncoderOutput<T>& encoded, const TokenBatch& decoder_input,
                                 Rng* rng) const {
  check_ids(decoder_input, config_.vocab_size, "decoder input");
  if (decoder_input.cols > config_.max_target_length) {
    throw LengthError("target length " + std::to_string(decoder_input.cols) + " exceeds maximum " +
                      std::to_string(config_.max_target_length));
  }
  const std::size_t batch = decoder_input.rows, len = decoder_input.cols;
  if (encoded.hidden.dim(0) != batch) throw ShapeError("decoder batch does not match encoder batch");
  auto y = embedding_gather(p("shared.embedding"), std::span<const int>(decoder_input.ids), Shape{batch, len});
  if (rng != nullptr) y = dropout(y, config_.dropout_rate, *rng);
  const auto bias = position_bias("decoder.relpos", len, len, false);
  for (std::size_t l = 0; l < config_.n_decoder_layers; ++l) {
    const std::string pre = "decoder.layer." + std::to_string(l);
    auto sn = norm(pre + ".self_norm", y);
    auto a = attention(pre + ".self", sn, sn, &bias, {}, true);
    if (rng != nullptr) a = dropout(a, config_.dropout_rate, *rng);
    y = add(y, a);
    auto c = attention(pre + ".cross", norm(pre + ".cross_norm", y), encoded.hidden, nullptr,
                       encoded.key_valid, false);
    if (rng != nullptr) c = dropout(c, config_.dropout_rate, *rng);
    y = add(y, c);
    auto f = feed_forward(pre + ".ff", norm(pre + ".ff_norm", y), rng);
    if (rng != nullptr) f = dropout(f, config_.dropout_rate, *rng);
    y = add(y, f);
  }
  y = norm("decoder.final_norm", y);
  if (rng != nullptr) y = dropout(y, config_.dropout_rate, *rng);
  if (config_.tie_embeddings) {
    const T s = static_cast<T>(1.0 / std::sqrt(static_cast<double>(config_.d_model)));
    return matmul(scale(y, s), p("shared.embedding"), true);
  }
  return matmul(y, p("lm_head"), true);
}

template <typename T>
Tensor<T> Transformer<T>::forward(const TokenBatch& input, const TokenBatch& target, Rng* rng) const {
  if (input.rows != target.rows) throw ShapeError("input and target batches differ in rows");
  const auto encoded = encode(input, rng);
  return decode(encoded, shift_right(target, 0), rng);
}

template <typename T>
Tensor<T> Transformer<T>::loss(const TokenBatch& input, const TokenBatch& target, Rng* rng) const {
  const bool any = std::any_of(target.ids.begin(), target.ids.end(), [](int id) { return id != 0; });
  if (!any) throw ContractError("degenerate batch: every target position is <pad>");
  auto logits = forward(input, target, rng);
  return cross_entropy_with_ignore(logits, std::span<const int>(target.ids), 0);
}

template <typename T>
template <typename U>
Transformer<U> Transformer<T>::cast() const {
  ParameterMap<U> out;
  for (const auto& [name, t] : params_) {
    std::vector<U> values(t.data().begin(), t.data().end());
    Tensor<U> u(t.shape(), std::move(values));
    u.set_requires_grad(t.requires_grad());
    out.emplace(name, std::move(u));
  }
  return Transformer<U>(config_, std::move(out));
}

template class Transformer<float>;
template class Transformer<double>;
template Transformer<double> Transformer<float>::cast<double>() const;
template Transformer<float> Transformer<double>::cast<float>() const;
template Transformer<float> Transformer<float>::cast<float>() const;

// ---- checkpoint persistence ----

static_assert(std::endian::native == std::endian::little, "checkpoint payloads are little-endian");

namespace {

std::string config_manifest(const ModelConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "config n_encoder_layers " << c.n_encoder_layers << '\n'
     << "config n_decoder_layers " << c.n_decoder_layers << '\n'
     << "config n_heads " << c.n_heads << '\n'
     << "config d_model " << c.d_model << '\n'
     << "config head_dim " << c.head_dim << '\n'
     << "config d_ff " << c.d_ff << '\n'
     << "config vocab_size " << c.vocab_size << '\n'
     << "config relpos_buckets " << c.relpos_buckets << '\n'
     << "config relpos_max_distance " << c.relpos_max_distance << '\n'
     << "config dropout_rate " << c.dropout_rate << '\n'
     << "config tie_embeddings " << (c.tie_embeddings ? 1 : 0) << '\n'
     << "config max_source_length " << c.max_source_length << '\n'
     << "config max_target_length " << c.max_target_length << '\n';
  return os.str();
}

void set_config_field(ModelConfig& c, const std::string& key, const std::string& value) {
  auto size = [&] { return static_cast<std::size_t>(std::stoull(value)); };
  if (key == "n_encoder_layers") c.n_encoder_layers = size();
  else if (key == "n_decoder_layers") c.n_decoder_layers = size();
  else if (key == "n_heads") c.n_heads = size();
  else if (key == "d_model") c.d_model = size();
  else if (key == "head_dim") c.head_dim = size();
  else if (key == "d_ff") c.d_ff = size();
  else if (key == "vocab_size") c.vocab_size = size();
  else if (key == "relpos_buckets") c.relpos_buckets = size();
  else if (key == "relpos_max_distance") c.relpos_max_distance = size();
  else if (key == "dropout_rate") c.dropout_rate = std::stod(value);
  else if (key == "tie_embeddings") c.tie_embeddings = value == "1";
  else if (key == "max_source_length") c.max_source_length = size();
  else if (key == "max_target_length") c.max_target_length = size();
  else throw FormatError("unknown config field '" + key + "' in checkpoint manifest");
}

Shape parse_shape(const std::string& s) {
  Shape out;
  if (s == "scalar") return out;
  std::size_t start = 0;
  while (start <= s.size()) {
    const auto x = s.find('x', start);
    out.push_back(static_cast<std::size_t>(std::stoull(s.substr(start, x - start))));
    if (x == std::string::npos) break;
    start = x + 1;
  }
  return out;
}

std::string format_shape(const Shape& s) {
  if (s.empty()) return "scalar";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Transformer<float>& model) {
  std::string manifest = config_manifest(model.config());
  std::size_t offset = 0;
  for (const auto& [name, t] : model.parameters()) {
    manifest += "tensor " + name + " " + format_shape(t.shape()) + " f32 " + std::to_string(offset) + "\n";
    offset += t.size() * sizeof(float);
  }
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    out << "UFACKPT1\n" << manifest.size() << '\n' << manifest;
    for (const auto& [name, t] : model.parameters()) {
      out.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.size() * sizeof(float)));
    }
    if (!out) throw IoError("write failed for checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

namespace {

Transformer<float> read_checkpoint(const std::filesystem::path& path, const ModelConfig* expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string magic = "UFACKPT1\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw FormatError("bad checkpoint magic in " + path.string());
  const auto nl = bytes.find('\n', magic.size());
  if (nl == std::string::npos) throw FormatError("truncated checkpoint header");
  std::size_t manifest_len = 0;
  try {
    manifest_len = std::stoull(bytes.substr(magic.size(), nl - magic.size()));
  } catch (const std::exception&) {
    throw FormatError("bad manifest length in checkpoint");
  }
  const std::size_t manifest_start = nl + 1;
  if (manifest_start + manifest_len > bytes.size()) throw FormatError("truncated checkpoint manifest");
  const std::size_t payload_start = manifest_start + manifest_len;
  const std::size_t payload_size = bytes.size() - payload_start;

  std::istringstream manifest(bytes.substr(manifest_start, manifest_len));
  ModelConfig config;
  ParameterMap<float> params;
  std::string line;
  std::size_t payload_end = 0;
  while (std::getline(manifest, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "config") {
      std::string key, value;
      ls >> key >> value;
      set_config_field(config, key, value);
    } else if (kind == "tensor") {
      std::string name, shape_s, dtype;
      std::size_t offset = 0;
      if (!(ls >> name >> shape_s >> dtype >> offset)) throw FormatError("malformed tensor line: " + line);
      if (dtype != "f32") throw FormatError("unsupported dtype " + dtype + " for " + name);
      Shape shape = parse_shape(shape_s);
      const std::size_t n = numel(shape);
      if (offset + n * sizeof(float) > payload_size) {
        throw FormatError("truncated checkpoint: payload for " + name + " is incomplete");
      }
      std::vector<float> values(n);
      std::memcpy(values.data(), bytes.data() + payload_start + offset, n * sizeof(float));
      payload_end = std::max(payload_end, offset + n * sizeof(float));
      Tensor<float> t(std::move(shape), std::move(values));
      t.set_requires_grad(true);
      params.emplace(name, std::move(t));
    } else if (!kind.empty()) {
      throw FormatError("unknown manifest entry: " + line);
    }
  }
  if (payload_end != payload_size) throw FormatError("checkpoint payload size does not match manifest");

  if (expected != nullptr) {
    for (const auto& [name, shape] : parameter_shapes(*expected)) {
      auto it = params.find(name);
      if (it == params.end()) throw CheckpointError("checkpoint lacks tensor " + name);
      if (it->second.shape() != shape) {
        throw CheckpointError("tensor " + name + " has shape " + shape_str(it->second.shape()) +
                              ", expected " + shape_str(shape));
      }
    }
  }
  return Transformer<float>(config, std::move(params));
}

}  // namespace

Transformer<float> load_checkpoint(const std::filesystem::path& path) { return read_checkpoint(path, nullptr); }

Transformer<float> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  return read_checkpoint(path, &expected);
}

}  // namespace ufa
