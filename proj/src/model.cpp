#include "gbtl/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "gbtl/rng.hpp"

namespace gbtl {

void ModelConfig::validate() const {
  require(vocab_size > 0, "model config: vocab_size must be positive");
  require(max_seq_len > 0, "model config: max_seq_len must be positive");
  require(embed_dim > 0, "model config: embed_dim must be positive");
  require(n_layers > 0, "model config: n_layers must be positive");
  require(n_heads > 0, "model config: n_heads must be positive");
  require(mlp_hidden_dim > 0, "model config: mlp_hidden_dim must be positive");
  require(embed_dim % n_heads == 0,
          "model config: embed_dim must be divisible by n_heads");
}

std::size_t ModelConfig::param_count() const {
  const std::size_t v = vocab_size, s = max_seq_len, d = embed_dim, h = mlp_hidden_dim;
  const std::size_t per_layer = 4 * d * d + 2 * d * h + h + 5 * d;
  return v * d + s * d + n_layers * per_layer + 2 * d + d * v;
}

namespace {

Tensor normal_leaf(Shape shape, Rng& rng, Scalar stddev) {
  std::vector<Scalar> v(shape_size(shape));
  for (auto& x : v) x = rng.next_normal(0.0, stddev);
  return Tensor::leaf(std::move(shape), std::move(v), true);
}

Tensor const_leaf(Shape shape, Scalar value) {
  return Tensor::full(std::move(shape), value, true);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config) {
  config.validate();
  const int v = config.vocab_size, s = config.max_seq_len, d = config.embed_dim;
  const int h = config.mlp_hidden_dim;
  Rng rng(config.seed);
  const Scalar std = 0.02;

  ModelParams p;
  p.config = config;
  p.tok_embed = normal_leaf({v, d}, rng, std);
  p.pos_embed = normal_leaf({s, d}, rng, std);
  p.layers.resize(config.n_layers);
  for (auto& l : p.layers) {
    l.ln1_gain = const_leaf({d}, 1.0);
    l.ln1_bias = const_leaf({d}, 0.0);
    l.wq = normal_leaf({d, d}, rng, std);
    l.wk = normal_leaf({d, d}, rng, std);
    l.wv = normal_leaf({d, d}, rng, std);
    l.wo = normal_leaf({d, d}, rng, std);
    l.ln2_gain = const_leaf({d}, 1.0);
    l.ln2_bias = const_leaf({d}, 0.0);
    l.w1 = normal_leaf({d, h}, rng, std);
    l.b1 = const_leaf({h}, 0.0);
    l.w2 = normal_leaf({h, d}, rng, std);
    l.b2 = const_leaf({d}, 0.0);
  }
  p.lnf_gain = const_leaf({d}, 1.0);
  p.lnf_bias = const_leaf({d}, 0.0);
  p.lm_head = normal_leaf({d, v}, rng, std);
  return p;
}

ModelParams ModelParams::clone() const {
  ModelParams p;
  p.config = config;
  p.tok_embed = tok_embed.clone();
  p.pos_embed = pos_embed.clone();
  p.layers.resize(layers.size());
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const Layer& a = layers[i];
    Layer& b = p.layers[i];
    b.ln1_gain = a.ln1_gain.clone();
    b.ln1_bias = a.ln1_bias.clone();
    b.wq = a.wq.clone();
    b.wk = a.wk.clone();
    b.wv = a.wv.clone();
    b.wo = a.wo.clone();
    b.ln2_gain = a.ln2_gain.clone();
    b.ln2_bias = a.ln2_bias.clone();
    b.w1 = a.w1.clone();
    b.b1 = a.b1.clone();
    b.w2 = a.w2.clone();
    b.b2 = a.b2.clone();
  }
  p.lnf_gain = lnf_gain.clone();
  p.lnf_bias = lnf_bias.clone();
  p.lm_head = lm_head.clone();
  return p;
}

std::vector<std::pair<std::string, Tensor>> ModelParams::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("tok_embed", tok_embed);
  out.emplace_back("pos_embed", pos_embed);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    const Layer& l = layers[i];
    out.emplace_back(prefix + "ln1_gain", l.ln1_gain);
    out.emplace_back(prefix + "ln1_bias", l.ln1_bias);
    out.emplace_back(prefix + "wq", l.wq);
    out.emplace_back(prefix + "wk", l.wk);
    out.emplace_back(prefix + "wv", l.wv);
    out.emplace_back(prefix + "wo", l.wo);
    out.emplace_back(prefix + "ln2_gain", l.ln2_gain);
    out.emplace_back(prefix + "ln2_bias", l.ln2_bias);
    out.emplace_back(prefix + "w1", l.w1);
    out.emplace_back(prefix + "b1", l.b1);
    out.emplace_back(prefix + "w2", l.w2);
    out.emplace_back(prefix + "b2", l.b2);
  }
  out.emplace_back("lnf_gain", lnf_gain);
  out.emplace_back("lnf_bias", lnf_bias);
  out.emplace_back("lm_head", lm_head);
  return out;
}

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_tensors()) out.push_back(t);
  return out;
}

void ModelParams::zero_grad() const {
  for (Tensor t : tensors()) t.zero_grad();
}

std::size_t ModelParams::param_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors()) n += t.size();
  return n;
}

// ---- Forward pass ------------------------------------------------------------

namespace {

Tensor causal_mask(int t) {
  std::vector<Scalar> m(static_cast<std::size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m[static_cast<std::size_t>(i) * t + j] = -1e30;
  return Tensor::leaf({t, t}, std::move(m));
}

void check_ids(const ModelConfig& cfg, std::span<const int> ids) {
  require(!ids.empty(), "forward: empty token sequence");
  require(static_cast<int>(ids.size()) <= cfg.max_seq_len,
          "forward: sequence of " + std::to_string(ids.size()) +
              " tokens exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  for (int id : ids)
    require(0 <= id && id < cfg.vocab_size,
            "forward: token id " + std::to_string(id) + " outside vocabulary");
}

}  // namespace

namespace {

// Trunk shared by hidden_states and the traced variant. When tok_embed_out is
// non-null it receives the token-embedding gather tensor.
Tensor trunk(const ModelParams& params, std::span<const int> token_ids, Tensor* tok_embed_out) {
  const ModelConfig& cfg = params.config;
  check_ids(cfg, token_ids);
  const int t = static_cast<int>(token_ids.size());
  const int n_heads = cfg.n_heads;
  const int head_dim = cfg.embed_dim / n_heads;
  const Scalar inv_sqrt = 1.0 / std::sqrt(static_cast<Scalar>(head_dim));

  std::vector<int> positions(t);
  std::iota(positions.begin(), positions.end(), 0);

  Tensor tok = embedding_gather(params.tok_embed, token_ids);
  if (tok_embed_out != nullptr) *tok_embed_out = tok;
  Tensor x = add(tok, embedding_gather(params.pos_embed, positions));
  Tensor mask = causal_mask(t);

  for (const ModelParams::Layer& l : params.layers) {
    Tensor h = layernorm(x, l.ln1_gain, l.ln1_bias);
    Tensor q = matmul(h, l.wq);
    Tensor k = matmul(h, l.wk);
    Tensor v = matmul(h, l.wv);
    std::vector<Tensor> heads;
    heads.reserve(n_heads);
    for (int i = 0; i < n_heads; ++i) {
      const int c0 = i * head_dim, c1 = (i + 1) * head_dim;
      Tensor qh = slice_cols(q, c0, c1);
      Tensor kh = slice_cols(k, c0, c1);
      Tensor vh = slice_cols(v, c0, c1);
      Tensor scores = add(scale(matmul(qh, transpose(kh)), inv_sqrt), mask);
      heads.push_back(matmul(softmax(scores, 1), vh));
    }
    x = add(x, matmul(concat_cols(heads), l.wo));

    Tensor h2 = layernorm(x, l.ln2_gain, l.ln2_bias);
    Tensor inner = relu(add(matmul(h2, l.w1), l.b1));
    x = add(x, add(matmul(inner, l.w2), l.b2));
  }
  return layernorm(x, params.lnf_gain, params.lnf_bias);
}

}  // namespace

Tensor hidden_states(const ModelParams& params, std::span<const int> token_ids) {
  return trunk(params, token_ids, nullptr);
}

Tensor forward(const ModelParams& params, std::span<const int> token_ids) {
  return matmul(hidden_states(params, token_ids), params.lm_head);
}

Tensor answer_logits(const ModelParams& params, std::span<const int> prompt_ids) {
  Tensor logits = forward(params, prompt_ids);
  return take_row(logits, logits.dim(0) - 1);
}

Tensor answer_logits_fast(const ModelParams& params, std::span<const int> prompt_ids) {
  Tensor h = hidden_states(params, prompt_ids);
  return matmul(take_row(h, h.dim(0) - 1), params.lm_head);
}

TracedAnswer answer_logits_traced(const ModelParams& params, std::span<const int> prompt_ids) {
  Tensor tok;
  Tensor h = trunk(params, prompt_ids, &tok);
  Tensor logits = matmul(take_row(h, h.dim(0) - 1), params.lm_head);
  return TracedAnswer{logits, tok};
}

int restricted_argmax(std::span<const Scalar> logits, std::span<const int> label_token_ids) {
  require(!label_token_ids.empty(), "classify: empty label set");
  std::vector<int> labels(label_token_ids.begin(), label_token_ids.end());
  std::sort(labels.begin(), labels.end());
  int best = -1;
  Scalar best_val = 0.0;
  for (int id : labels) {
    require(0 <= id && id < static_cast<int>(logits.size()),
            "classify: label token id outside vocabulary");
    if (best < 0 || logits[id] > best_val) {
      best = id;
      best_val = logits[id];
    }
  }
  return best;
}

int classify(const ModelParams& params, std::span<const int> prompt_ids,
             std::span<const int> label_token_ids) {
  Tensor row = answer_logits_fast(params, prompt_ids);
  return restricted_argmax(row.values(), label_token_ids);
}

// ---- Checkpoint I/O ----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'G', 'B', 'T', 'L', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

void put_u32(std::string& buf, std::uint32_t x) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_u64(std::string& buf, std::uint64_t x) {
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_i32(std::string& buf, std::int32_t x) { put_u32(buf, static_cast<std::uint32_t>(x)); }

void put_f64(std::string& buf, double d) { put_u64(buf, std::bit_cast<std::uint64_t>(d)); }

struct Reader {
  std::ifstream in;
  explicit Reader(const std::string& path) : in(path, std::ios::binary) {
    if (!in) fail_runtime("cannot open checkpoint " + path);
  }
  void bytes(void* dst, std::size_t n) {
    in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) fail_runtime("truncated checkpoint");
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(b, 4);
    std::uint32_t x = 0;
    for (int i = 0; i < 4; ++i) x |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return x;
  }
  std::uint64_t u64() {
    unsigned char b[8];
    bytes(b, 8);
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    return x;
  }
  std::int32_t i32() { return static_cast<std::int32_t>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
};

// All-zero parameter set matching `config`; used as the load target so the
// file contents can be validated name-by-name against the expected layout.
ModelParams zero_params(const ModelConfig& config) {
  ModelConfig c = config;
  ModelParams p = ModelParams::init(c);
  for (Tensor t : p.tensors()) {
    auto v = t.mutable_values();
    std::fill(v.begin(), v.end(), 0.0);
  }
  return p;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  params.config.validate();
  std::string buf;
  buf.reserve(params.param_count() * 8 + 1024);
  buf.append(kMagic, sizeof(kMagic));
  put_u32(buf, kCheckpointVersion);
  const ModelConfig& c = params.config;
  put_i32(buf, c.vocab_size);
  put_i32(buf, c.max_seq_len);
  put_i32(buf, c.embed_dim);
  put_i32(buf, c.n_layers);
  put_i32(buf, c.n_heads);
  put_i32(buf, c.mlp_hidden_dim);
  put_u64(buf, c.seed);

  auto named = params.named_tensors();
  put_u32(buf, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    const Shape& s = t.shape();
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    for (int d : s) put_i32(buf, d);
    put_u64(buf, t.size());
    for (Scalar x : t.values()) put_f64(buf, x);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail_runtime("cannot open checkpoint " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) fail_runtime("failed writing checkpoint " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  Reader r(path);
  char magic[8];
  r.bytes(magic, sizeof(magic));
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    fail_runtime("not a checkpoint file (bad magic): " + path);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    fail_runtime("unsupported checkpoint version " + std::to_string(version));

  ModelConfig c;
  c.vocab_size = r.i32();
  c.max_seq_len = r.i32();
  c.embed_dim = r.i32();
  c.n_layers = r.i32();
  c.n_heads = r.i32();
  c.mlp_hidden_dim = r.i32();
  c.seed = r.u64();
  c.validate();

  ModelParams p = zero_params(c);
  auto named = p.named_tensors();
  const std::uint32_t n = r.u32();
  if (n != named.size())
    fail_runtime("checkpoint holds " + std::to_string(n) + " tensors, expected " +
                 std::to_string(named.size()));
  for (auto& [name, t] : named) {
    const std::uint32_t len = r.u32();
    std::string got(len, '\0');
    r.bytes(got.data(), len);
    if (got != name) fail_runtime("checkpoint tensor '" + got + "' where '" + name + "' expected");
    const std::uint32_t nd = r.u32();
    Shape s(nd);
    for (auto& d : s) d = r.i32();
    if (s != t.shape())
      fail_runtime("checkpoint tensor '" + name + "' has shape " + shape_str(s) +
                   ", expected " + shape_str(t.shape()));
    const std::uint64_t count = r.u64();
    if (count != t.size()) fail_runtime("checkpoint tensor '" + name + "' has bad element count");
    auto dst = t.mutable_values();
    for (auto& x : dst) {
      x = r.f64();
      if (!std::isfinite(x)) fail_runtime("non-finite value in checkpoint tensor '" + name + "'");
    }
  }
  return p;
}

}  // namespace gbtl
