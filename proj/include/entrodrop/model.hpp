#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "entrodrop/checksum.hpp"
#include "entrodrop/error.hpp"
#include "entrodrop/numerics.hpp"
#include "entrodrop/rng.hpp"
#include "entrodrop/trace.hpp"

namespace entrodrop {

using Token = std::uint32_t;

inline constexpr double kLayerNormEps = 1e-5;
// Extra factor on the unembedding init so an untrained model predicts a
// near-uniform next-token distribution.
inline constexpr double kUnembeddingInitScale = 0.1;

struct ToyModelConfig {
  std::size_t layers = 8;
  std::size_t hidden_dim = 64;
  std::size_t heads = 4;
  std::size_t ffn_dim = 256;
  std::size_t vocab = 256;
  std::size_t max_seq = 128;
  std::uint64_t seed = 42;

  friend bool operator==(const ToyModelConfig&, const ToyModelConfig&) = default;

  std::size_t head_dim() const { return hidden_dim / heads; }

  void validate() const {
    require(layers >= 1 && hidden_dim >= 1 && heads >= 1 && ffn_dim >= 1 && vocab >= 1 && max_seq >= 1,
            "model config: all counts must be >= 1");
    require(hidden_dim % heads == 0, "model config: hidden_dim " + std::to_string(hidden_dim) +
                                         " is not divisible by heads " + std::to_string(heads));
  }
};

/// Per-layer switches. A skipped block adds nothing to the residual stream.
struct BlockMask {
  std::vector<bool> skip_attention;
  std::vector<bool> skip_mlp;

  static BlockMask none(std::size_t layers) { return {std::vector<bool>(layers, false), std::vector<bool>(layers, false)}; }
  static BlockMask all(std::size_t layers) { return {std::vector<bool>(layers, true), std::vector<bool>(layers, true)}; }

  std::size_t skipped() const {
    return static_cast<std::size_t>(std::count(skip_attention.begin(), skip_attention.end(), true) +
                                    std::count(skip_mlp.begin(), skip_mlp.end(), true));
  }
  friend bool operator==(const BlockMask&, const BlockMask&) = default;
};

template <typename T>
struct LayerParams {
  BasicMatrix<T> ln1_gain, ln1_bias;     // 1 x d
  BasicMatrix<T> w_q, w_k, w_v, w_o;     // d x d
  BasicMatrix<T> ln2_gain, ln2_bias;     // 1 x d
  BasicMatrix<T> w_1, b_1;               // d x f, 1 x f
  BasicMatrix<T> w_2, b_2;               // f x d, 1 x d
};

template <typename T>
struct ModelParams {
  BasicMatrix<T> token_embedding;     // V x d
  BasicMatrix<T> position_embedding;  // max_seq x d
  std::vector<LayerParams<T>> layers;
  BasicMatrix<T> final_gain, final_bias;  // 1 x d
  BasicMatrix<T> unembedding;             // d x V

  static ModelParams zeros_like(const ToyModelConfig& c) {
    const std::size_t d = c.hidden_dim, f = c.ffn_dim;
    ModelParams p;
    p.token_embedding = BasicMatrix<T>(c.vocab, d);
    p.position_embedding = BasicMatrix<T>(c.max_seq, d);
    p.layers.resize(c.layers);
    for (auto& l : p.layers) {
      l.ln1_gain = l.ln1_bias = l.ln2_gain = l.ln2_bias = BasicMatrix<T>(1, d);
      l.w_q = l.w_k = l.w_v = l.w_o = BasicMatrix<T>(d, d);
      l.w_1 = BasicMatrix<T>(d, f);
      l.b_1 = BasicMatrix<T>(1, f);
      l.w_2 = BasicMatrix<T>(f, d);
      l.b_2 = BasicMatrix<T>(1, d);
    }
    p.final_gain = p.final_bias = BasicMatrix<T>(1, d);
    p.unembedding = BasicMatrix<T>(d, c.vocab);
    return p;
  }
};

/// Named references to every tensor, in the canonical order used for
/// initialization, checksums, checkpoints and optimizer updates.
template <typename P>
auto named_tensors(P& p) {
  using M = std::conditional_t<std::is_const_v<P>, const decltype(p.token_embedding), decltype(p.token_embedding)>;
  std::vector<std::pair<std::string, M*>> out;
  out.emplace_back("token_embedding", &p.token_embedding);
  out.emplace_back("position_embedding", &p.position_embedding);
  for (std::size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    const std::string pre = "layers." + std::to_string(i) + ".";
    out.emplace_back(pre + "ln1_gain", &l.ln1_gain);
    out.emplace_back(pre + "ln1_bias", &l.ln1_bias);
    out.emplace_back(pre + "w_q", &l.w_q);
    out.emplace_back(pre + "w_k", &l.w_k);
    out.emplace_back(pre + "w_v", &l.w_v);
    out.emplace_back(pre + "w_o", &l.w_o);
    out.emplace_back(pre + "ln2_gain", &l.ln2_gain);
    out.emplace_back(pre + "ln2_bias", &l.ln2_bias);
    out.emplace_back(pre + "w_1", &l.w_1);
    out.emplace_back(pre + "b_1", &l.b_1);
    out.emplace_back(pre + "w_2", &l.w_2);
    out.emplace_back(pre + "b_2", &l.b_2);
  }
  out.emplace_back("final_gain", &p.final_gain);
  out.emplace_back("final_bias", &p.final_bias);
  out.emplace_back("unembedding", &p.unembedding);
  return out;
}

template <typename T>
struct BasicToyModel {
  ToyModelConfig config;
  ModelParams<T> params;

  template <typename U>
  BasicToyModel<U> cast() const {
    BasicToyModel<U> out{config, ModelParams<U>::zeros_like(config)};
    auto src = named_tensors(params);
    auto dst = named_tensors(out.params);
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = BasicMatrix<U>::from(*src[i].second);
    return out;
  }
};

using ToyModel = BasicToyModel<float>;

/// Seeded initialization. Every tensor draws from its own stream forked from
/// the seed, so the values of one tensor never depend on the shapes of
/// others (position embedding rows are stable when max_seq grows).
/// Matrices are uniform in ±1/sqrt(fan_in); embeddings use fan_in = 1;
/// layer-norm gains are 1 and biases 0.
template <typename T = float>
BasicToyModel<T> init_model(const ToyModelConfig& config) {
  config.validate();
  BasicToyModel<T> model{config, ModelParams<T>::zeros_like(config)};
  const Rng root(config.seed);
  auto tensors = named_tensors(model.params);
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const std::string& name = tensors[i].first;
    BasicMatrix<T>& m = *tensors[i].second;
    if (name.ends_with("_gain")) {
      std::fill(m.data().begin(), m.data().end(), T{1});
      continue;
    }
    if (name.ends_with("ln1_bias") || name.ends_with("ln2_bias") || name == "final_bias") continue;
    double fan_in = 1.0;
    if (name.ends_with("w_q") || name.ends_with("w_k") || name.ends_with("w_v") || name.ends_with("w_o") ||
        name.ends_with("w_1") || name.ends_with("b_1") || name == "unembedding")
      fan_in = static_cast<double>(config.hidden_dim);
    else if (name.ends_with("w_2") || name.ends_with("b_2"))
      fan_in = static_cast<double>(config.ffn_dim);
    double bound = 1.0 / std::sqrt(fan_in);
    if (name == "unembedding") bound *= kUnembeddingInitScale;
    Rng rng = root.fork(i);
    for (auto& v : m.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
  return model;
}

/// CRC-32 over the little-endian bytes of every tensor in canonical order.
template <typename T>
std::uint32_t weight_checksum(const BasicToyModel<T>& model) {
  std::uint32_t crc = 0;
  std::vector<std::byte> buf;
  for (const auto& [name, m] : named_tensors(model.params)) {
    buf.clear();
    for (T v : m->data()) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
      for (int b = 0; b < 4; ++b) buf.push_back(static_cast<std::byte>((bits >> (8 * b)) & 0xFF));
    }
    crc = crc32(buf, crc);
  }
  return crc;
}

/// Multiplies layer `layer`'s (0-based) attention output projection by `factor`.
template <typename T>
void scale_attention_output(BasicToyModel<T>& model, std::size_t layer, double factor) {
  require(layer < model.config.layers, "scale_attention_output: layer out of range");
  for (auto& v : model.params.layers[layer].w_o.data()) v = static_cast<T>(v * factor);
}

inline void check_tokens(std::span<const Token> tokens, const ToyModelConfig& c, std::size_t past) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= c.vocab)
      throw InputError("token " + std::to_string(tokens[i]) + " at position " + std::to_string(past + i) +
                       " is outside the vocabulary of " + std::to_string(c.vocab));
  }
  if (past + tokens.size() > c.max_seq)
    throw InputError("sequence length " + std::to_string(past + tokens.size()) + " exceeds max_seq " +
                     std::to_string(c.max_seq));
}

/// Incremental decoder with a key/value cache. `step` appends tokens and
/// returns their logits; a fresh session stepped once over a full sequence is
/// the ordinary causal forward pass.
template <typename T>
class DecoderSession {
 public:
  DecoderSession(const BasicToyModel<T>& model, BlockMask mask) : model_(&model), mask_(std::move(mask)) {
    const auto& c = model.config;
    require(mask_.skip_attention.size() == c.layers && mask_.skip_mlp.size() == c.layers,
            "block mask length does not match layer count");
    keys_.assign(c.layers, {});
    values_.assign(c.layers, {});
  }

  std::size_t length() const { return length_; }

  /// Logits (n x vocab) for the appended tokens. When `capture` is set, the
  /// residual stream of the appended positions is recorded at every block
  /// boundary (2L+1 snapshots).
  BasicMatrix<T> step(std::span<const Token> tokens, std::vector<Snapshot>* capture = nullptr) {
    const auto& c = model_->config;
    const auto& p = model_->params;
    check_tokens(tokens, c, length_);
    const std::size_t n = tokens.size();
    const std::size_t d = c.hidden_dim;
    const std::size_t past = length_;

    BasicMatrix<T> x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const auto te = p.token_embedding.row(tokens[i]);
      const auto pe = p.position_embedding.row(past + i);
      auto xr = x.row(i);
      for (std::size_t j = 0; j < d; ++j) xr[j] = te[j] + pe[j];
    }
    record(capture, {0, Position::PreAttention}, x);

    BasicMatrix<T> h(n, d);
    for (std::size_t l = 0; l < c.layers; ++l) {
      const auto& lp = p.layers[l];
      if (!mask_.skip_attention[l]) {
        for (std::size_t i = 0; i < n; ++i) layer_norm_row<T>(x.row(i), lp.ln1_gain.data(), lp.ln1_bias.data(), kLayerNormEps, h.row(i));
        const auto q = matmul(h, lp.w_q);
        const auto k = matmul(h, lp.w_k);
        const auto v = matmul(h, lp.w_v);
        auto& kc = keys_[l];
        auto& vc = values_[l];
        kc.insert(kc.end(), k.data().begin(), k.data().end());
        vc.insert(vc.end(), v.data().begin(), v.data().end());
        const auto attn = attend(q, kc, vc, past);
        add_inplace(x, matmul(attn, lp.w_o));
      }
      record(capture, {static_cast<std::uint32_t>(l), Position::PostAttention}, x);
      if (!mask_.skip_mlp[l]) {
        for (std::size_t i = 0; i < n; ++i) layer_norm_row<T>(x.row(i), lp.ln2_gain.data(), lp.ln2_bias.data(), kLayerNormEps, h.row(i));
        auto u = matmul(h, lp.w_1);
        for (std::size_t i = 0; i < n; ++i) {
          auto ur = u.row(i);
          for (std::size_t j = 0; j < ur.size(); ++j) ur[j] = std::max(T{0}, static_cast<T>(ur[j] + lp.b_1.data()[j]));
        }
        auto m = matmul(u, lp.w_2);
        for (std::size_t i = 0; i < n; ++i) {
          auto mr = m.row(i);
          for (std::size_t j = 0; j < d; ++j) mr[j] += lp.b_2.data()[j];
        }
        add_inplace(x, m);
      }
      record(capture, {static_cast<std::uint32_t>(l), Position::PostMLP}, x);
    }
    for (std::size_t i = 0; i < n; ++i) layer_norm_row<T>(x.row(i), p.final_gain.data(), p.final_bias.data(), kLayerNormEps, h.row(i));
    length_ += n;
    return matmul(h, p.unembedding);
  }

 private:
  static void record(std::vector<Snapshot>* capture, SnapshotLabel label, const BasicMatrix<T>& x) {
    if (capture) capture->push_back({label, Matrix::from(x)});
  }

  // Causal multi-head attention of the new queries over every cached key.
  BasicMatrix<T> attend(const BasicMatrix<T>& q, const std::vector<T>& kc, const std::vector<T>& vc,
                        std::size_t past) const {
    const auto& c = model_->config;
    const std::size_t d = c.hidden_dim, dk = c.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    BasicMatrix<T> out(q.rows(), d);
    std::vector<double> scores;
    std::vector<double> acc(dk);
    for (std::size_t i = 0; i < q.rows(); ++i) {
      const std::size_t visible = past + i + 1;
      scores.resize(visible);
      for (std::size_t head = 0; head < c.heads; ++head) {
        const T* qi = q.row(i).data() + head * dk;
        double peak = -INFINITY;
        for (std::size_t j = 0; j < visible; ++j) {
          const T* kj = kc.data() + j * d + head * dk;
          double s = 0.0;
          for (std::size_t t = 0; t < dk; ++t) s += static_cast<double>(qi[t]) * kj[t];
          scores[j] = s * scale;
          peak = std::max(peak, scores[j]);
        }
        double total = 0.0;
        for (auto& s : scores) total += (s = std::exp(s - peak));
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t j = 0; j < visible; ++j) {
          const double w = scores[j] / total;
          const T* vj = vc.data() + j * d + head * dk;
          for (std::size_t t = 0; t < dk; ++t) acc[t] += w * vj[t];
        }
        T* oi = out.row(i).data() + head * dk;
        for (std::size_t t = 0; t < dk; ++t) oi[t] = static_cast<T>(acc[t]);
      }
    }
    return out;
  }

  const BasicToyModel<T>* model_;
  BlockMask mask_;
  std::vector<std::vector<T>> keys_;    // per layer, position-major rows of d
  std::vector<std::vector<T>> values_;
  std::size_t length_ = 0;
};

template <typename T>
struct ForwardResult {
  BasicMatrix<T> logits;
  std::optional<ActivationTrace> trace;
};

/// Causal forward pass over one sequence.
template <typename T>
ForwardResult<T> forward(const BasicToyModel<T>& model, std::span<const Token> tokens, const BlockMask& mask,
                         bool capture) {
  DecoderSession<T> session(model, mask);
  ForwardResult<T> result;
  if (!capture) {
    result.logits = session.step(tokens);
    return result;
  }
  ActivationTrace trace;
  trace.hidden_dim = model.config.hidden_dim;
  trace.token_count = tokens.size();
  trace.seed = model.config.seed;
  result.logits = session.step(tokens, &trace.snapshots);
  result.trace = std::move(trace);
  return result;
}

/// Greedy generation: `prompt` is prefilled in one step, then `count` tokens
/// are decoded one at a time against the cache.
template <typename T>
std::vector<Token> generate(const BasicToyModel<T>& model, std::span<const Token> prompt, std::size_t count,
                            const BlockMask& mask) {
  require(!prompt.empty(), "generate: empty prompt");
  DecoderSession<T> session(model, mask);
  auto logits = session.step(prompt);
  std::vector<Token> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto last = logits.row(logits.rows() - 1);
    const auto next = static_cast<Token>(std::max_element(last.begin(), last.end()) - last.begin());
    out.push_back(next);
    if (i + 1 < count) logits = session.step(std::span<const Token>(&out.back(), 1));
  }
  return out;
}

}  // namespace entrodrop
