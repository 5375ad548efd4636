#pragma once

#include <cmath>
#include <numeric>
#include <vector>

#include "entrodrop/corpus.hpp"
#include "entrodrop/error.hpp"
#include "entrodrop/model.hpp"
#include "entrodrop/numerics.hpp"
#include "entrodrop/parallel.hpp"
#include "entrodrop/rng.hpp"

namespace entrodrop {

namespace detail {

template <typename T>
struct NormTape {
  BasicMatrix<T> xhat;
  std::vector<double> inv_std;
};

template <typename T>
BasicMatrix<T> norm_forward(const BasicMatrix<T>& x, const BasicMatrix<T>& gain, const BasicMatrix<T>& bias,
                            NormTape<T>& tape) {
  const std::size_t n = x.rows(), d = x.cols();
  BasicMatrix<T> y(n, d);
  tape.xhat = BasicMatrix<T>(n, d);
  tape.inv_std.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto xr = x.row(i);
    double mean = 0.0;
    for (T v : xr) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (T v : xr) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    tape.inv_std[i] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const double xh = (static_cast<double>(xr[j]) - mean) * inv;
      tape.xhat(i, j) = static_cast<T>(xh);
      y(i, j) = static_cast<T>(xh * gain.data()[j] + bias.data()[j]);
    }
  }
  return y;
}

template <typename T>
BasicMatrix<T> norm_backward(const BasicMatrix<T>& dy, const NormTape<T>& tape, const BasicMatrix<T>& gain,
                             BasicMatrix<T>& dgain, BasicMatrix<T>& dbias) {
  const std::size_t n = dy.rows(), d = dy.cols();
  BasicMatrix<T> dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double m1 = 0.0, m2 = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = dy(i, j);
      dxhat[j] = g * gain.data()[j];
      dgain.data()[j] += static_cast<T>(g * tape.xhat(i, j));
      dbias.data()[j] += static_cast<T>(g);
      m1 += dxhat[j];
      m2 += dxhat[j] * tape.xhat(i, j);
    }
    m1 /= static_cast<double>(d);
    m2 /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j)
      dx(i, j) = static_cast<T>(tape.inv_std[i] * (dxhat[j] - m1 - tape.xhat(i, j) * m2));
  }
  return dx;
}

template <typename T>
void add_row_bias(BasicMatrix<T>& m, const BasicMatrix<T>& bias) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += bias.data()[j];
  }
}

template <typename T>
void accumulate_column_sums(const BasicMatrix<T>& m, BasicMatrix<T>& out) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const auto r = m.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) out.data()[j] += r[j];
  }
}

template <typename T>
struct LayerTape {
  NormTape<T> ln1, ln2;
  BasicMatrix<T> h1, q, k, v, attn;
  std::vector<BasicMatrix<double>> probs;  // per head, n x n (lower triangle used)
  BasicMatrix<T> h2, pre_act, act;
};

template <typename T>
struct Tape {
  std::vector<LayerTape<T>> layers;
  NormTape<T> final_norm;
  BasicMatrix<T> hf;
  BasicMatrix<T> logits;
};

/// Full-sequence forward pass that keeps every intermediate needed by backward().
template <typename T>
Tape<T> forward_tape(const BasicToyModel<T>& model, std::span<const Token> tokens, const BlockMask& mask) {
  const auto& c = model.config;
  const auto& p = model.params;
  check_tokens(tokens, c, 0);
  const std::size_t n = tokens.size(), d = c.hidden_dim, dk = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
  Tape<T> tape;
  tape.layers.resize(c.layers);

  BasicMatrix<T> x(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = p.token_embedding(tokens[i], j) + p.position_embedding(i, j);

  for (std::size_t l = 0; l < c.layers; ++l) {
    const auto& lp = p.layers[l];
    auto& lt = tape.layers[l];
    if (!mask.skip_attention[l]) {
      lt.h1 = norm_forward(x, lp.ln1_gain, lp.ln1_bias, lt.ln1);
      lt.q = matmul(lt.h1, lp.w_q);
      lt.k = matmul(lt.h1, lp.w_k);
      lt.v = matmul(lt.h1, lp.w_v);
      lt.attn = BasicMatrix<T>(n, d);
      lt.probs.assign(c.heads, BasicMatrix<double>(n, n));
      for (std::size_t head = 0; head < c.heads; ++head) {
        auto& P = lt.probs[head];
        const std::size_t off = head * dk;
        for (std::size_t i = 0; i < n; ++i) {
          double peak = -INFINITY;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < dk; ++t) s += static_cast<double>(lt.q(i, off + t)) * lt.k(j, off + t);
            P(i, j) = s * scale;
            peak = std::max(peak, P(i, j));
          }
          double total = 0.0;
          for (std::size_t j = 0; j <= i; ++j) total += (P(i, j) = std::exp(P(i, j) - peak));
          for (std::size_t j = 0; j <= i; ++j) P(i, j) /= total;
          for (std::size_t t = 0; t < dk; ++t) {
            double acc = 0.0;
            for (std::size_t j = 0; j <= i; ++j) acc += P(i, j) * lt.v(j, off + t);
            lt.attn(i, off + t) = static_cast<T>(acc);
          }
        }
      }
      add_inplace(x, matmul(lt.attn, lp.w_o));
    }
    if (!mask.skip_mlp[l]) {
      lt.h2 = norm_forward(x, lp.ln2_gain, lp.ln2_bias, lt.ln2);
      lt.pre_act = matmul(lt.h2, lp.w_1);
      add_row_bias(lt.pre_act, lp.b_1);
      lt.act = lt.pre_act;
      for (auto& v : lt.act.data()) v = std::max(T{0}, v);
      auto m = matmul(lt.act, lp.w_2);
      add_row_bias(m, lp.b_2);
      add_inplace(x, m);
    }
  }
  tape.hf = norm_forward(x, p.final_gain, p.final_bias, tape.final_norm);
  tape.logits = matmul(tape.hf, p.unembedding);
  return tape;
}

/// Sum over positions t < n-1 of -log softmax(logits_t)[tokens[t+1]].
template <typename T>
double cross_entropy_sum(const BasicMatrix<T>& logits, std::span<const Token> tokens) {
  double total = 0.0;
  for (std::size_t t = 0; t + 1 < tokens.size(); ++t) {
    const auto row = logits.row(t);
    const double peak = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (T v : row) z += std::exp(static_cast<double>(v) - peak);
    total += peak + std::log(z) - static_cast<double>(row[tokens[t + 1]]);
  }
  return total;
}

/// Accumulates d(weight * loss_sum)/dparams into `grads`.
template <typename T>
void backward(const BasicToyModel<T>& model, std::span<const Token> tokens, const BlockMask& mask,
              const Tape<T>& tape, double weight, ModelParams<T>& grads) {
  const auto& c = model.config;
  const auto& p = model.params;
  const std::size_t n = tokens.size(), d = c.hidden_dim, dk = c.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(dk));

  BasicMatrix<T> dlogits(n, c.vocab);
  for (std::size_t t = 0; t + 1 < n; ++t) {
    const auto row = tape.logits.row(t);
    const double peak = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (T v : row) z += std::exp(static_cast<double>(v) - peak);
    for (std::size_t j = 0; j < c.vocab; ++j)
      dlogits(t, j) = static_cast<T>(weight * std::exp(static_cast<double>(row[j]) - peak) / z);
    dlogits(t, tokens[t + 1]) -= static_cast<T>(weight);
  }
  accumulate_tn(tape.hf, dlogits, grads.unembedding);
  BasicMatrix<T> dx =
      norm_backward(matmul_nt(dlogits, p.unembedding), tape.final_norm, p.final_gain, grads.final_gain, grads.final_bias);

  for (std::size_t l = c.layers; l-- > 0;) {
    const auto& lp = p.layers[l];
    const auto& lt = tape.layers[l];
    auto& lg = grads.layers[l];
    if (!mask.skip_mlp[l]) {
      accumulate_column_sums(dx, lg.b_2);
      accumulate_tn(lt.act, dx, lg.w_2);
      BasicMatrix<T> dpre = matmul_nt(dx, lp.w_2);
      for (std::size_t i = 0; i < dpre.size(); ++i)
        if (!(lt.pre_act.data()[i] > T{0})) dpre.data()[i] = T{0};
      accumulate_column_sums(dpre, lg.b_1);
      accumulate_tn(lt.h2, dpre, lg.w_1);
      add_inplace(dx, norm_backward(matmul_nt(dpre, lp.w_1), lt.ln2, lp.ln2_gain, lg.ln2_gain, lg.ln2_bias));
    }
    if (!mask.skip_attention[l]) {
      accumulate_tn(lt.attn, dx, lg.w_o);
      const BasicMatrix<T> dattn = matmul_nt(dx, lp.w_o);
      BasicMatrix<T> dq(n, d), dk_(n, d), dv(n, d);
      std::vector<double> dp(n);
      for (std::size_t head = 0; head < c.heads; ++head) {
        const auto& P = lt.probs[head];
        const std::size_t off = head * dk;
        for (std::size_t i = 0; i < n; ++i) {
          double weighted = 0.0;
          for (std::size_t j = 0; j <= i; ++j) {
            double s = 0.0;
            for (std::size_t t = 0; t < dk; ++t) s += static_cast<double>(dattn(i, off + t)) * lt.v(j, off + t);
            dp[j] = s;
            weighted += P(i, j) * s;
          }
          for (std::size_t j = 0; j <= i; ++j) {
            const double pij = P(i, j);
            for (std::size_t t = 0; t < dk; ++t) dv(j, off + t) += static_cast<T>(pij * dattn(i, off + t));
            const double ds = pij * (dp[j] - weighted) * scale;
            if (ds == 0.0) continue;
            for (std::size_t t = 0; t < dk; ++t) {
              dq(i, off + t) += static_cast<T>(ds * lt.k(j, off + t));
              dk_(j, off + t) += static_cast<T>(ds * lt.q(i, off + t));
            }
          }
        }
      }
      accumulate_tn(lt.h1, dq, lg.w_q);
      accumulate_tn(lt.h1, dk_, lg.w_k);
      accumulate_tn(lt.h1, dv, lg.w_v);
      BasicMatrix<T> dh1 = matmul_nt(dq, lp.w_q);
      add_inplace(dh1, matmul_nt(dk_, lp.w_k));
      add_inplace(dh1, matmul_nt(dv, lp.w_v));
      add_inplace(dx, norm_backward(dh1, lt.ln1, lp.ln1_gain, lg.ln1_gain, lg.ln1_bias));
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto te = grads.token_embedding.row(tokens[i]);
    auto pe = grads.position_embedding.row(i);
    const auto g = dx.row(i);
    for (std::size_t j = 0; j < d; ++j) {
      te[j] += g[j];
      pe[j] += g[j];
    }
  }
}

template <typename T>
void add_params(ModelParams<T>& target, const ModelParams<T>& delta) {
  auto t = named_tensors(target);
  auto s = named_tensors(delta);
  for (std::size_t i = 0; i < t.size(); ++i) add_inplace(*t[i].second, *s[i].second);
}

inline std::size_t predicted_positions(const std::vector<std::vector<Token>>& batch) {
  std::size_t n = 0;
  for (const auto& s : batch) n += s.size() > 0 ? s.size() - 1 : 0;
  return n;
}

}  // namespace detail

/// Mean next-token cross-entropy over `batch` and its gradient. Per-sequence
/// gradients are computed concurrently and summed in sequence order, so the
/// result does not depend on the thread count.
template <typename T>
double loss_and_gradient(const BasicToyModel<T>& model, const std::vector<std::vector<Token>>& batch,
                         const BlockMask& mask, ModelParams<T>& grads, std::size_t threads = 1) {
  const std::size_t count = detail::predicted_positions(batch);
  require(count > 0, "loss needs at least one sequence with two or more tokens");
  const double weight = 1.0 / static_cast<double>(count);
  grads = ModelParams<T>::zeros_like(model.config);
  std::vector<ModelParams<T>> partial(batch.size());
  std::vector<double> losses(batch.size(), 0.0);
  parallel_for(batch.size(), threads, [&](std::size_t i) {
    const auto tape = detail::forward_tape(model, batch[i], mask);
    losses[i] = detail::cross_entropy_sum(tape.logits, std::span<const Token>(batch[i]));
    partial[i] = ModelParams<T>::zeros_like(model.config);
    detail::backward(model, batch[i], mask, tape, weight, partial[i]);
  });
  double total = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::add_params(grads, partial[i]);
    total += losses[i];
  }
  return total * weight;
}

template <typename T>
double batch_loss(const BasicToyModel<T>& model, const std::vector<std::vector<Token>>& batch, const BlockMask& mask) {
  const std::size_t count = detail::predicted_positions(batch);
  require(count > 0, "loss needs at least one sequence with two or more tokens");
  double total = 0.0;
  for (const auto& seq : batch) total += detail::cross_entropy_sum(detail::forward_tape(model, seq, mask).logits, std::span<const Token>(seq));
  return total / static_cast<double>(count);
}

/// exp(mean next-token cross-entropy) over every position of the corpus.
template <typename T>
double perplexity(const BasicToyModel<T>& model, const SyntheticCorpus& corpus, const BlockMask& mask,
                  std::size_t threads = default_thread_count()) {
  const std::size_t count = detail::predicted_positions(corpus.sequences);
  require(count > 0, "perplexity of an empty corpus");
  std::vector<double> sums(corpus.sequences.size(), 0.0);
  parallel_for(corpus.sequences.size(), threads, [&](std::size_t i) {
    const auto& seq = corpus.sequences[i];
    sums[i] = detail::cross_entropy_sum(forward(model, seq, mask, false).logits, std::span<const Token>(seq));
  });
  const double total = std::accumulate(sums.begin(), sums.end(), 0.0);
  return std::exp(total / static_cast<double>(count));
}

struct TrainOptions {
  std::size_t steps = 100;
  double lr = 1e-2;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  std::size_t threads = default_thread_count();
};

struct TrainReport {
  std::vector<double> losses;  // mean batch loss before each update
};

/// Plain gradient descent on next-token cross-entropy. Batches walk a seeded
/// shuffle of the corpus, reshuffled every epoch.
template <typename T>
TrainReport train_briefly(BasicToyModel<T>& model, const SyntheticCorpus& corpus, const TrainOptions& options) {
  require(options.steps >= 1, "train_briefly: steps must be >= 1");
  require(options.batch_size >= 1, "train_briefly: batch_size must be >= 1");
  require(!corpus.sequences.empty(), "train_briefly: empty corpus");
  const BlockMask mask = BlockMask::none(model.config.layers);
  const Rng root(options.seed);
  std::vector<std::size_t> order(corpus.sequences.size());
  std::size_t cursor = order.size();
  std::size_t epoch = 0;
  TrainReport report;
  ModelParams<T> grads;
  for (std::size_t step = 0; step < options.steps; ++step) {
    std::vector<std::vector<Token>> batch;
    while (batch.size() < std::min(options.batch_size, order.size())) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng = root.fork(epoch++);
        rng.shuffle(std::span(order));
        cursor = 0;
      }
      batch.push_back(corpus.sequences[order[cursor++]]);
    }
    const double loss = loss_and_gradient(model, batch, mask, grads, options.threads);
    if (!std::isfinite(loss)) throw TrainingError("training diverged: non-finite loss at step " + std::to_string(step), step);
    report.losses.push_back(loss);
    if (options.lr == 0.0) continue;
    auto params = named_tensors(model.params);
    auto g = named_tensors(grads);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].second->data();
      auto dw = g[i].second->data();
      for (std::size_t j = 0; j < w.size(); ++j) w[j] = static_cast<T>(w[j] - options.lr * dw[j]);
    }
  }
  return report;
}

}  // namespace entrodrop
