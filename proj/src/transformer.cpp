#include "memlab/transformer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include "memlab/errors.hpp"
#include "memlab/tokenizer.hpp"

namespace memlab {

namespace {

constexpr char kMagic[8] = {'M', 'E', 'M', 'L', 'A', 'B', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr double kInitStd = 0.02;

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return add_row(matmul(x, w), b); }

Tensor normal_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, kInitStd);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return Tensor(std::move(shape), v, true);
}

Tensor filled(Shape shape, double value) {
  return Tensor(shape, std::vector<double>(shape_numel(shape), value), true);
}

void check_tokens(const TransformerModel& model, std::span<const TokenId> tokens, std::size_t seq_len) {
  if (seq_len == 0) throw ValueError("model_forward: empty sequence");
  if (seq_len > model.config.max_seq_len) {
    throw ValueError("model_forward: sequence of " + std::to_string(seq_len) + " tokens exceeds the context of " +
                     std::to_string(model.config.max_seq_len));
  }
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= model.config.vocab_size) {
      throw ValueError("model_forward: token " + std::to_string(tokens[i]) + " at position " + std::to_string(i) +
                       " outside vocabulary of " + std::to_string(model.config.vocab_size));
    }
  }
}

TokenId argmax_row(const Tensor& logits, std::size_t row) {
  const std::size_t v = logits.cols();
  const double* r = logits.values().data() + row * v;
  std::size_t best = 0;
  for (std::size_t j = 1; j < v; ++j) {
    if (r[j] > r[best]) best = j;
  }
  return static_cast<TokenId>(best);
}

std::size_t get_size(const nlohmann::json& doc, const char* key, std::size_t fallback) {
  const auto it = doc.find(key);
  if (it == doc.end()) return fallback;
  if (!it->is_number_unsigned()) throw ConfigError(std::string("model config '") + key + "' must be a non-negative integer");
  return it->get<std::size_t>();
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::string_view bytes, std::size_t offset, int width) {
  std::uint64_t v = 0;
  for (int i = width - 1; i >= 0; --i) {
    v = (v << 8) | static_cast<unsigned char>(bytes[offset + static_cast<std::size_t>(i)]);
  }
  return v;
}

}  // namespace

void TransformerConfig::validate() const {
  if (vocab_size <= static_cast<std::size_t>(kReservedCount)) {
    throw ConfigError("model vocab_size must exceed the " + std::to_string(kReservedCount) + " reserved ids");
  }
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw ConfigError("model d_model (" + std::to_string(d_model) + ") must be a positive multiple of heads (" +
                      std::to_string(heads) + ")");
  }
  if (max_seq_len < 2) throw ConfigError("model max_seq_len must be at least 2");
}

nlohmann::json TransformerConfig::to_json() const {
  return {{"vocab_size", vocab_size}, {"d_model", d_model},         {"layers", layers},
          {"heads", heads},           {"ffn_width", ffn()},         {"max_seq_len", max_seq_len},
          {"positional", "learned"},  {"seed", seed}};
}

TransformerConfig TransformerConfig::from_json(const nlohmann::json& doc) {
  if (!doc.is_object()) throw ConfigError("model config must be a JSON object");
  static const std::set<std::string> known{"vocab_size", "d_model", "layers",     "heads",
                                           "ffn_width",  "max_seq_len", "positional", "seed"};
  for (const auto& [key, value] : doc.items()) {
    if (!known.contains(key)) throw ConfigError("unknown model config field '" + key + "'");
  }
  if (doc.contains("positional") && doc.at("positional") != "learned") {
    throw ConfigError("only learned positional embeddings are supported");
  }
  TransformerConfig c;
  if (!doc.contains("vocab_size")) throw ConfigError("model config needs vocab_size");
  c.vocab_size = get_size(doc, "vocab_size", 0);
  c.d_model = get_size(doc, "d_model", c.d_model);
  c.layers = get_size(doc, "layers", c.layers);
  c.heads = get_size(doc, "heads", c.heads);
  c.ffn_width = get_size(doc, "ffn_width", c.ffn_width);
  c.max_seq_len = get_size(doc, "max_seq_len", c.max_seq_len);
  c.seed = get_size(doc, "seed", 0);
  c.validate();
  return c;
}

TransformerModel TransformerModel::init(const TransformerConfig& config) {
  config.validate();
  const std::size_t d = config.d_model, f = config.ffn();
  std::mt19937_64 rng(config.seed);
  TransformerModel m;
  m.config = config;
  m.config.ffn_width = f;
  m.token_embedding = normal_tensor({config.vocab_size, d}, rng);
  m.position_embedding = normal_tensor({config.max_seq_len, d}, rng);
  for (std::size_t l = 0; l < config.layers; ++l) {
    BlockParams b;
    b.ln1_gain = filled({d}, 1.0);
    b.ln1_bias = filled({d}, 0.0);
    b.wq = normal_tensor({d, d}, rng);
    b.bq = filled({d}, 0.0);
    b.wk = normal_tensor({d, d}, rng);
    b.bk = filled({d}, 0.0);
    b.wv = normal_tensor({d, d}, rng);
    b.bv = filled({d}, 0.0);
    b.wo = normal_tensor({d, d}, rng);
    b.bo = filled({d}, 0.0);
    b.ln2_gain = filled({d}, 1.0);
    b.ln2_bias = filled({d}, 0.0);
    b.w1 = normal_tensor({d, f}, rng);
    b.b1 = filled({f}, 0.0);
    b.w2 = normal_tensor({f, d}, rng);
    b.b2 = filled({d}, 0.0);
    m.blocks.push_back(std::move(b));
  }
  m.final_gain = filled({d}, 1.0);
  m.final_bias = filled({d}, 0.0);
  return m;
}

std::vector<NamedTensor> TransformerModel::named_parameters() const {
  std::vector<NamedTensor> out{{"token_embedding", token_embedding}, {"position_embedding", position_embedding}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const BlockParams& b = blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    for (const auto& [name, t] : std::initializer_list<std::pair<const char*, const Tensor*>>{
             {"ln1.gain", &b.ln1_gain}, {"ln1.bias", &b.ln1_bias}, {"attn.wq", &b.wq}, {"attn.bq", &b.bq},
             {"attn.wk", &b.wk},        {"attn.bk", &b.bk},        {"attn.wv", &b.wv}, {"attn.bv", &b.bv},
             {"attn.wo", &b.wo},        {"attn.bo", &b.bo},        {"ln2.gain", &b.ln2_gain},
             {"ln2.bias", &b.ln2_bias}, {"ffn.w1", &b.w1},         {"ffn.b1", &b.b1}, {"ffn.w2", &b.w2},
             {"ffn.b2", &b.b2}}) {
      out.push_back({p + name, *t});
    }
  }
  out.push_back({"final_norm.gain", final_gain});
  out.push_back({"final_norm.bias", final_bias});
  return out;
}

std::vector<Tensor> TransformerModel::parameters() const {
  std::vector<Tensor> out;
  for (auto& p : named_parameters()) out.push_back(p.tensor);
  return out;
}

std::size_t TransformerModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

TransformerModel TransformerModel::clone() const {
  const auto copy = [](const Tensor& t) {
    return Tensor::from_buffer(t.shape(), Buffer(t.values().begin(), t.values().end()), t.requires_grad());
  };
  TransformerModel m;
  m.config = config;
  m.token_embedding = copy(token_embedding);
  m.position_embedding = copy(position_embedding);
  for (const auto& b : blocks) {
    m.blocks.push_back({copy(b.ln1_gain), copy(b.ln1_bias), copy(b.wq), copy(b.bq), copy(b.wk), copy(b.bk),
                        copy(b.wv), copy(b.bv), copy(b.wo), copy(b.bo), copy(b.ln2_gain), copy(b.ln2_bias),
                        copy(b.w1), copy(b.b1), copy(b.w2), copy(b.b2)});
  }
  m.final_gain = copy(final_gain);
  m.final_bias = copy(final_bias);
  return m;
}

TokenBatch TokenBatch::single(std::span<const TokenId> tokens) {
  return {std::vector<TokenId>(tokens.begin(), tokens.end()), 1, tokens.size(), {tokens.size()}};
}

TokenBatch TokenBatch::pack(const std::vector<std::vector<TokenId>>& sequences) {
  TokenBatch b;
  b.batch = sequences.size();
  for (const auto& s : sequences) b.seq_len = std::max(b.seq_len, s.size());
  b.tokens.assign(b.batch * b.seq_len, kPad);
  for (std::size_t i = 0; i < b.batch; ++i) {
    if (sequences[i].empty()) throw ValueError("TokenBatch::pack: sequence " + std::to_string(i) + " is empty");
    std::copy(sequences[i].begin(), sequences[i].end(), b.tokens.begin() + static_cast<std::ptrdiff_t>(i * b.seq_len));
    b.lengths.push_back(sequences[i].size());
  }
  return b;
}

TokenBatch TokenBatch::concat(const std::vector<std::vector<TokenId>>& sequences) {
  TokenBatch b;
  b.batch = sequences.size();
  b.packed = true;
  for (std::size_t i = 0; i < b.batch; ++i) {
    if (sequences[i].empty()) throw ValueError("TokenBatch::concat: sequence " + std::to_string(i) + " is empty");
    b.seq_len = std::max(b.seq_len, sequences[i].size());
    b.tokens.insert(b.tokens.end(), sequences[i].begin(), sequences[i].end());
    b.lengths.push_back(sequences[i].size());
  }
  return b;
}

std::size_t TokenBatch::row_offset(std::size_t b) const {
  if (!packed) return b * seq_len;
  std::size_t row = 0;
  for (std::size_t i = 0; i < b; ++i) row += lengths[i];
  return row;
}

Tensor model_forward(const TransformerModel& model, const TokenBatch& batch, ForwardCapture* capture) {
  const std::size_t rows = batch.packed ? std::accumulate(batch.lengths.begin(), batch.lengths.end(), std::size_t{0})
                                        : batch.batch * batch.seq_len;
  if (batch.batch == 0 || batch.lengths.size() != batch.batch || batch.tokens.size() != rows) {
    throw ShapeError("model_forward: malformed token batch");
  }
  check_tokens(model, batch.tokens, batch.seq_len);
  const TransformerConfig& cfg = model.config;

  std::vector<TokenId> positions(batch.tokens.size());
  if (batch.packed) {
    std::size_t row = 0;
    for (const std::size_t len : batch.lengths) {
      for (std::size_t t = 0; t < len; ++t) positions[row++] = static_cast<TokenId>(t);
    }
  } else {
    for (std::size_t i = 0; i < positions.size(); ++i) positions[i] = static_cast<TokenId>(i % batch.seq_len);
  }
  Tensor x = add(embedding(model.token_embedding, batch.tokens), embedding(model.position_embedding, positions));
  if (capture) {
    *capture = ForwardCapture{};
    capture->base = x;
  }

  const AttentionLayout layout{batch.batch, batch.seq_len, cfg.heads, batch.lengths, batch.packed};
  for (const BlockParams& b : model.blocks) {
    const Tensor a = layer_norm(x, b.ln1_gain, b.ln1_bias);
    std::vector<RowMatrix> maps;
    const Tensor mixed = causal_attention(linear(a, b.wq, b.bq), linear(a, b.wk, b.bk), linear(a, b.wv, b.bv),
                                          layout, capture ? &maps : nullptr);
    const Tensor attn_out = linear(mixed, b.wo, b.bo);
    x = add(x, attn_out);

    const Tensor f = layer_norm(x, b.ln2_gain, b.ln2_bias);
    const Tensor ffn_out = linear(activation(linear(f, b.w1, b.b1), Activation::gelu), b.w2, b.b2);
    x = add(x, ffn_out);

    if (capture) {
      capture->increments.push_back(attn_out);
      capture->increments.push_back(ffn_out);
      capture->attention.push_back(std::move(maps));
    }
  }
  if (capture) capture->hidden = x;
  const Tensor h = layer_norm(x, model.final_gain, model.final_bias);
  return matmul(h, transpose(model.token_embedding));
}

Tensor model_forward(const TransformerModel& model, std::span<const TokenId> tokens) {
  return model_forward(model, TokenBatch::single(tokens));
}

nlohmann::json DecompositionReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& c : contributions) {
    rows.push_back({{"layer", c.layer}, {"kind", c.kind}, {"norm", c.norm}});
  }
  return {{"positions", base.rows()},
          {"base_norm", base.norm()},
          {"hidden_norm", hidden.norm()},
          {"contributions", rows},
          {"relative_residual", relative_residual}};
}

void randomize_parameters(TransformerModel& model, std::uint64_t seed, double scale) {
  if (!(scale > 0.0)) throw ValueError("randomize_parameters: scale must be positive");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-scale, scale);
  for (auto& p : model.parameters()) {
    for (auto& v : Tensor(p).mutable_values()) v = u(rng);
  }
}

GradCheckResult check_model_gradients(const TransformerModel& model, std::span<const TokenId> tokens, double eps) {
  if (tokens.size() < 2) throw ValueError("gradient check needs at least two tokens");
  const std::vector<TokenId> input(tokens.begin(), tokens.end() - 1);
  const std::vector<TokenId> target(tokens.begin() + 1, tokens.end());
  const std::vector<std::uint8_t> mask(target.size(), 1);
  auto params = model.parameters();
  return grad_check_params([&] { return cross_entropy(model_forward(model, input), target, mask); }, params, eps);
}

DecompositionReport decompose_residual(const TransformerModel& model, std::span<const TokenId> tokens) {
  NoGradGuard no_grad;
  ForwardCapture cap;
  model_forward(model, TokenBatch::single(tokens), &cap);
  DecompositionReport r;
  r.base = cap.base.matrix();
  r.hidden = cap.hidden.matrix();
  RowMatrix sum = r.base;
  for (std::size_t i = 0; i < cap.increments.size(); ++i) {
    SublayerContribution c;
    c.layer = i / 2;
    c.kind = i % 2 == 0 ? "attention" : "ffn";
    c.value = cap.increments[i].matrix();
    c.norm = c.value.norm();
    sum += c.value;
    r.contributions.push_back(std::move(c));
  }
  const double denom = r.hidden.norm();
  r.relative_residual = (sum - r.hidden).norm() / (denom > 0.0 ? denom : 1.0);
  return r;
}

std::vector<std::vector<RowMatrix>> attention_maps(const TransformerModel& model, std::span<const TokenId> tokens) {
  NoGradGuard no_grad;
  ForwardCapture cap;
  model_forward(model, TokenBatch::single(tokens), &cap);
  return cap.attention;
}

std::vector<TokenId> greedy_decode(const TransformerModel& model, std::span<const TokenId> prompt,
                                   std::size_t max_new, TokenId stop) {
  if (prompt.empty()) throw ValueError("greedy_decode: empty prompt");
  if (prompt.size() + max_new > model.config.max_seq_len) {
    throw ValueError("greedy_decode: context overflow, prompt of " + std::to_string(prompt.size()) + " plus " +
                     std::to_string(max_new) + " new tokens exceeds " + std::to_string(model.config.max_seq_len));
  }
  NoGradGuard no_grad;
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  for (std::size_t step = 0; step < max_new; ++step) {
    const Tensor logits = model_forward(model, seq);
    const TokenId next = argmax_row(logits, seq.size() - 1);
    seq.push_back(next);
    if (next == stop) break;
  }
  return seq;
}

std::vector<TokenId> greedy_decode_guided(const TransformerModel& model, std::span<const TokenId> prompt,
                                          std::span<const TokenId> expected, std::size_t max_new,
                                          TokenId stop) {
  if (prompt.empty()) throw ValueError("greedy_decode: empty prompt");
  if (prompt.size() + max_new > model.config.max_seq_len) {
    return greedy_decode(model, prompt, max_new, stop);  // raises the overflow error
  }
  if (max_new == 0) return {prompt.begin(), prompt.end()};
  NoGradGuard no_grad;
  // teacher-forced pass over prompt + expected; its rows equal the rows a
  // step-by-step decode would compute while the two agree
  const std::size_t scored = std::min(expected.size(), max_new - 1);
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), expected.begin(), expected.begin() + static_cast<std::ptrdiff_t>(scored));
  const Tensor logits = model_forward(model, seq);
  seq.resize(prompt.size());
  for (std::size_t i = 0; i <= scored; ++i) {
    const TokenId next = argmax_row(logits, prompt.size() - 1 + i);
    seq.push_back(next);
    if (next == stop) return seq;
    if (i < scored && next != expected[i]) break;
  }
  const std::size_t added = seq.size() - prompt.size();
  if (added == max_new) return seq;
  const auto rest = greedy_decode(model, seq, max_new - added, stop);
  return rest;
}

std::string checkpoint_bytes(const TransformerModel& model, const nlohmann::json& metadata) {
  nlohmann::json manifest = nlohmann::json::array();
  std::size_t offset = 0;
  const auto params = model.named_parameters();
  for (const auto& p : params) {
    manifest.push_back({{"name", p.name}, {"shape", p.tensor.shape()}, {"offset", offset}});
    offset += p.tensor.numel() * sizeof(double);
  }
  const nlohmann::json header{{"config", model.config.to_json()}, {"metadata", metadata}, {"tensors", manifest}};
  const std::string text = header.dump();

  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, text.size());
  out += text;
  out.reserve(out.size() + offset);
  for (const auto& p : params) {
    for (double v : p.tensor.values()) put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

void save_checkpoint(const std::string& path, const TransformerModel& model, const nlohmann::json& metadata) {
  const std::string bytes = checkpoint_bytes(model, metadata);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path);
}

Checkpoint parse_checkpoint(std::string_view bytes, const std::string& source) {
  const auto fail = [&](const std::string& why) { throw IoError("checkpoint " + source + ": " + why); };
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) fail("bad magic");
  const auto version = get_le(bytes, 8, 4);
  if (version != kCheckpointVersion) fail("unsupported version " + std::to_string(version));
  const auto header_len = get_le(bytes, 12, 8);
  if (header_len > bytes.size() - 20) fail("truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(20, header_len));
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("header is not JSON: ") + e.what());
  }
  const std::string_view data = bytes.substr(20 + header_len);

  Checkpoint ck;
  try {
    ck.model = TransformerModel::init(TransformerConfig::from_json(header.at("config")));
    ck.metadata = header.value("metadata", nlohmann::json::object());
    const auto params = ck.model.named_parameters();
    const auto& manifest = header.at("tensors");
    if (manifest.size() != params.size()) fail("manifest lists " + std::to_string(manifest.size()) + " tensors");
    std::size_t expected_offset = 0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& entry = manifest[i];
      const Tensor& t = params[i].tensor;
      if (entry.at("name") != params[i].name || entry.at("shape").get<Shape>() != t.shape()) {
        fail("tensor " + std::to_string(i) + " does not match the configured model");
      }
      const auto off = entry.at("offset").get<std::size_t>();
      if (off != expected_offset || off + t.numel() * 8 > data.size()) fail("bad offset for " + params[i].name);
      auto values = Tensor(params[i].tensor).mutable_values();
      for (std::size_t j = 0; j < values.size(); ++j) {
        values[j] = std::bit_cast<double>(get_le(data, off + 8 * j, 8));
      }
      detail::check_finite(values, "checkpoint");
      expected_offset = off + t.numel() * 8;
    }
    if (expected_offset != data.size()) fail("trailing bytes after the last tensor");
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("malformed header: ") + e.what());
  } catch (const NonFiniteError&) {
    fail("non-finite parameter value");
  }
  return ck;
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_checkpoint(ss.str(), path);
}

}  // namespace memlab
