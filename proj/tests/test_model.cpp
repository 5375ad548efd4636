#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "entrodrop/checkpoint.hpp"
#include "entrodrop/corpus.hpp"
#include "entrodrop/model.hpp"
#include "entrodrop/training.hpp"

using namespace entrodrop;

namespace {

ToyModelConfig small_config() {
  ToyModelConfig c;
  c.layers = 2;
  c.hidden_dim = 32;
  c.heads = 4;
  c.ffn_dim = 64;
  c.vocab = 50;
  c.max_seq = 16;
  c.seed = 42;
  return c;
}

std::vector<Token> fixed_tokens(std::size_t n, std::size_t vocab) {
  std::vector<Token> t(n);
  for (std::size_t i = 0; i < n; ++i) t[i] = static_cast<Token>((7 * i + 3) % vocab);
  return t;
}

std::vector<double> norm(const std::vector<double>& x, const Matrix& gain, const Matrix& bias) {
  double mean = 0.0, var = 0.0;
  for (double v : x) mean += v;
  mean /= x.size();
  for (double v : x) var += (v - mean) * (v - mean);
  var /= x.size();
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j)
    out[j] = (x[j] - mean) / std::sqrt(var + 1e-5) * gain.data()[j] + bias.data()[j];
  return out;
}

std::vector<double> times(const std::vector<double>& x, const Matrix& w) {
  std::vector<double> out(w.cols(), 0.0);
  for (std::size_t i = 0; i < w.rows(); ++i)
    for (std::size_t j = 0; j < w.cols(); ++j) out[j] += x[i] * static_cast<double>(w(i, j));
  return out;
}

// Plain per-position evaluation of the pre-LN transformer in double precision.
std::vector<std::vector<double>> reference_logits(const ToyModel& model, const std::vector<Token>& tokens) {
  const auto& c = model.config;
  const auto& p = model.params;
  const std::size_t n = tokens.size(), d = c.hidden_dim, dk = d / c.heads;
  std::vector<std::vector<double>> x(n, std::vector<double>(d));
  for (std::size_t t = 0; t < n; ++t)
    for (std::size_t j = 0; j < d; ++j)
      x[t][j] = double(p.token_embedding(tokens[t], j)) + double(p.position_embedding(t, j));
  for (const auto& lp : p.layers) {
    std::vector<std::vector<double>> q(n), k(n), v(n);
    for (std::size_t t = 0; t < n; ++t) {
      const auto h = norm(x[t], lp.ln1_gain, lp.ln1_bias);
      q[t] = times(h, lp.w_q);
      k[t] = times(h, lp.w_k);
      v[t] = times(h, lp.w_v);
    }
    std::vector<std::vector<double>> attn(n, std::vector<double>(d, 0.0));
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t head = 0; head < c.heads; ++head) {
        std::vector<double> w(t + 1);
        double total = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t e = head * dk; e < (head + 1) * dk; ++e) dot += q[t][e] * k[s][e];
          w[s] = std::exp(dot / std::sqrt(double(dk)));
          total += w[s];
        }
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t e = head * dk; e < (head + 1) * dk; ++e) attn[t][e] += w[s] / total * v[s][e];
      }
    }
    for (std::size_t t = 0; t < n; ++t) {
      const auto o = times(attn[t], lp.w_o);
      for (std::size_t j = 0; j < d; ++j) x[t][j] += o[j];
      auto u = times(norm(x[t], lp.ln2_gain, lp.ln2_bias), lp.w_1);
      for (std::size_t j = 0; j < u.size(); ++j) u[j] = std::max(0.0, u[j] + double(lp.b_1.data()[j]));
      const auto m = times(u, lp.w_2);
      for (std::size_t j = 0; j < d; ++j) x[t][j] += m[j] + double(lp.b_2.data()[j]);
    }
  }
  std::vector<std::vector<double>> logits(n);
  for (std::size_t t = 0; t < n; ++t) logits[t] = times(norm(x[t], p.final_gain, p.final_bias), p.unembedding);
  return logits;
}

}  // namespace

TEST(Init, SameSeedSameWeights) {
  const auto a = init_model(small_config());
  const auto b = init_model(small_config());
  EXPECT_EQ(weight_checksum(a), weight_checksum(b));
  auto other = small_config();
  other.seed = 43;
  EXPECT_NE(weight_checksum(init_model(other)), weight_checksum(a));
}

TEST(Init, GoldenChecksums) {
  EXPECT_EQ(weight_checksum(init_model(small_config())), 0x38c5c2bbu);
  EXPECT_EQ(weight_checksum(init_model(ToyModelConfig{})), 0xfb1fde8au);
}

TEST(Init, BoundsFollowFanIn) {
  const auto m = init_model(small_config());
  const auto& l = m.params.layers[0];
  for (float v : l.w_q.data()) EXPECT_LE(std::fabs(v), 1.0 / std::sqrt(32.0));
  for (float v : l.w_2.data()) EXPECT_LE(std::fabs(v), 1.0 / std::sqrt(64.0));
  for (float v : m.params.unembedding.data()) EXPECT_LE(std::fabs(v), 0.1 / std::sqrt(32.0));
  for (float v : l.ln1_gain.data()) EXPECT_EQ(v, 1.0f);
  for (float v : l.ln2_bias.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Init, LongerContextKeepsExistingWeights) {
  auto longer = small_config();
  longer.max_seq = 64;
  const auto a = init_model(small_config());
  const auto b = init_model(longer);
  EXPECT_EQ(a.params.layers[1].w_o, b.params.layers[1].w_o);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 32; ++c) EXPECT_EQ(a.params.position_embedding(r, c), b.params.position_embedding(r, c));
}

TEST(Init, InvalidConfigsAreRejected) {
  auto c = small_config();
  c.hidden_dim = 7;
  c.heads = 2;
  EXPECT_THROW(init_model(c), ContractViolation);
  auto z = small_config();
  z.layers = 0;
  EXPECT_THROW(init_model(z), ContractViolation);
}

TEST(Forward, MatchesStraightLineReference) {
  const auto model = init_model(small_config());
  const auto tokens = fixed_tokens(16, 50);
  const auto got = forward(model, tokens, BlockMask::none(2), false).logits;
  const auto want = reference_logits(model, tokens);
  for (std::size_t t = 0; t < 16; ++t)
    for (std::size_t v = 0; v < 50; ++v) EXPECT_NEAR(got(t, v), want[t][v], 1e-4);
}

TEST(Forward, DoubleModelAgreesWithFloat) {
  const auto model = init_model(small_config());
  const auto tokens = fixed_tokens(12, 50);
  const auto f = forward(model, tokens, BlockMask::none(2), false).logits;
  const auto d = forward(model.cast<double>(), tokens, BlockMask::none(2), false).logits;
  for (std::size_t i = 0; i < f.size(); ++i) EXPECT_NEAR(f.data()[i], d.data()[i], 1e-4);
}

TEST(Forward, CaptureProducesCompleteTrace) {
  const auto model = init_model(small_config());
  const auto r = forward(model, fixed_tokens(10, 50), BlockMask::none(2), true);
  ASSERT_TRUE(r.trace.has_value());
  EXPECT_EQ(r.trace->snapshots.size(), 5u);
  EXPECT_EQ(r.trace->token_count, 10u);
  EXPECT_NO_THROW(r.trace->validate());
  EXPECT_EQ(r.trace->snapshots[3].label, (SnapshotLabel{1, Position::PostAttention}));
  EXPECT_FALSE(forward(model, fixed_tokens(3, 50), BlockMask::none(2), false).trace.has_value());
}

TEST(Forward, SkippedBlockSnapshotEqualsItsInput) {
  const auto model = init_model(small_config());
  auto mask = BlockMask::none(2);
  mask.skip_attention[1] = true;
  mask.skip_mlp[0] = true;
  const auto r = forward(model, fixed_tokens(10, 50), mask, true);
  EXPECT_EQ(r.trace->snapshots[3].values, r.trace->snapshots[2].values);
  EXPECT_EQ(r.trace->snapshots[2].values, r.trace->snapshots[1].values);
  EXPECT_NE(r.trace->snapshots[1].values, r.trace->snapshots[0].values);
}

TEST(Forward, SkipEqualsZeroContribution) {
  auto model = init_model(small_config());
  const auto tokens = fixed_tokens(14, 50);
  auto mask = BlockMask::none(2);
  mask.skip_attention[0] = true;
  mask.skip_mlp[1] = true;
  const auto skipped = forward(model, tokens, mask, false).logits;
  auto zeroed = model;
  for (auto& v : zeroed.params.layers[0].w_o.data()) v = 0.0f;
  for (auto& v : zeroed.params.layers[1].w_2.data()) v = 0.0f;
  for (auto& v : zeroed.params.layers[1].b_2.data()) v = 0.0f;
  EXPECT_EQ(forward(zeroed, tokens, BlockMask::none(2), false).logits, skipped);
}

TEST(Forward, AllSkippedIsEmbeddingThroughFinalNorm) {
  const auto model = init_model(small_config());
  const auto tokens = fixed_tokens(5, 50);
  const auto got = forward(model, tokens, BlockMask::all(2), false).logits;
  const auto& p = model.params;
  Matrix x(5, 32);
  for (std::size_t t = 0; t < 5; ++t)
    for (std::size_t j = 0; j < 32; ++j) x(t, j) = p.token_embedding(tokens[t], j) + p.position_embedding(t, j);
  const auto want = matmul(layer_norm<float>(x, p.final_gain.data(), p.final_bias.data(), kLayerNormEps), p.unembedding);
  EXPECT_EQ(got, want);
}

TEST(Forward, CausalPrefixIsUnaffectedByLaterTokens) {
  const auto model = init_model(small_config());
  auto tokens = fixed_tokens(12, 50);
  const auto a = forward(model, tokens, BlockMask::none(2), false).logits;
  tokens[9] = 1;
  tokens[11] = 2;
  const auto b = forward(model, tokens, BlockMask::none(2), false).logits;
  for (std::size_t t = 0; t < 9; ++t)
    for (std::size_t v = 0; v < 50; ++v) EXPECT_EQ(a(t, v), b(t, v));
}

TEST(Forward, IncrementalDecodingMatchesFullPass) {
  const auto model = init_model(small_config());
  const auto tokens = fixed_tokens(12, 50);
  auto mask = BlockMask::none(2);
  mask.skip_mlp[0] = true;
  const auto full = forward(model, tokens, mask, false).logits;
  DecoderSession<float> session(model, mask);
  session.step(std::span<const Token>(tokens).subspan(0, 5));
  for (std::size_t t = 5; t < 12; ++t) {
    const auto row = session.step(std::span<const Token>(tokens).subspan(t, 1));
    for (std::size_t v = 0; v < 50; ++v) EXPECT_NEAR(row(0, v), full(t, v), 1e-5);
  }
  EXPECT_EQ(session.length(), 12u);
}

TEST(Forward, InvalidInputs) {
  const auto model = init_model(small_config());
  std::vector<Token> bad{1, 2, 50};
  EXPECT_THROW(forward(model, bad, BlockMask::none(2), false), InputError);
  EXPECT_THROW(forward(model, fixed_tokens(17, 50), BlockMask::none(2), false), InputError);
  EXPECT_THROW(forward(model, fixed_tokens(4, 50), BlockMask::none(3), false), ContractViolation);
}

TEST(Generate, ProducesRequestedTokensDeterministically) {
  const auto model = init_model(small_config());
  const auto prompt = fixed_tokens(4, 50);
  const auto a = generate(model, prompt, 8, BlockMask::none(2));
  EXPECT_EQ(a.size(), 8u);
  EXPECT_EQ(a, generate(model, prompt, 8, BlockMask::none(2)));
  for (Token t : a) EXPECT_LT(t, 50u);
}

TEST(Perplexity, UntrainedModelIsNearVocabSize) {
  ToyModelConfig c;
  c.layers = 2;
  c.max_seq = 64;
  const auto model = init_model(c);
  const auto corpus = make_corpus(MarkovSource{0, 4, 5}, c.vocab, 8, 64);
  const double ppl = perplexity(model, corpus, BlockMask::none(2));
  EXPECT_NEAR(ppl / 256.0, 1.0, 0.02);
  EXPECT_EQ(ppl, perplexity(model, corpus, BlockMask::none(2)));
}

TEST(Checkpoint, RoundTripPreservesEverything) {
  const auto model = init_model(small_config());
  const auto back = decode_checkpoint(encode_checkpoint(model));
  EXPECT_EQ(back.config, model.config);
  EXPECT_EQ(weight_checksum(back), weight_checksum(model));

  const auto path = (std::filesystem::temp_directory_path() / "entrodrop_ckpt_test.bin").string();
  save_checkpoint(model, path);
  EXPECT_EQ(weight_checksum(load_checkpoint(path)), weight_checksum(model));
  std::filesystem::remove(path);
}

TEST(Checkpoint, CorruptBytesAreRejected) {
  auto bytes = encode_checkpoint(init_model(small_config()));
  auto flipped = bytes;
  flipped[bytes.size() / 2] ^= std::byte{0x10};
  EXPECT_THROW(decode_checkpoint(flipped), FormatError);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), FormatError);
}
