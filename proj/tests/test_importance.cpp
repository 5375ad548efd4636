#include <gtest/gtest.h>

#include <cmath>

#include "entrodrop/evaluation.hpp"
#include "entrodrop/importance.hpp"

using namespace entrodrop;

namespace {

ActivationTrace make_trace(std::vector<Matrix> snapshots) {
  ActivationTrace t;
  t.token_count = snapshots.front().rows();
  t.hidden_dim = snapshots.front().cols();
  for (std::size_t i = 0; i < snapshots.size(); ++i) t.snapshots.push_back({expected_label(i), std::move(snapshots[i])});
  return t;
}

Matrix noise(std::size_t rows, std::size_t cols, double scale, Rng& rng) {
  Matrix m(rows, cols);
  for (auto& v : m.data()) v = static_cast<float>(scale * rng.normal());
  return m;
}

ActivationTrace random_trace(std::size_t layers, std::size_t tokens, std::size_t hidden, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Matrix> snaps;
  for (std::size_t i = 0; i < 2 * layers + 1; ++i) snaps.push_back(noise(tokens, hidden, 0.5 + rng.uniform(), rng));
  return make_trace(std::move(snaps));
}

ActivationTrace toy_trace(std::size_t layers, std::uint64_t seed) {
  ToyModelConfig cfg;
  cfg.layers = layers;
  cfg.hidden_dim = 16;
  cfg.heads = 2;
  cfg.ffn_dim = 32;
  cfg.vocab = 40;
  cfg.max_seq = 32;
  cfg.seed = seed;
  const auto model = init_model(cfg);
  const auto corpus = make_corpus(MarkovSource{1, 4, seed}, cfg.vocab, 6, 32);
  return calibration_trace(model, corpus, BlockMask::none(layers), "toy", 1);
}

std::vector<ImportanceScore> scores_of(const std::vector<double>& values) {
  std::vector<ImportanceScore> out;
  for (std::size_t i = 0; i < values.size(); ++i) out.push_back({i + 1, values[i], Criterion::EntropyIncrease});
  return out;
}

EntropyProfile profile_from(std::vector<double> h, Granularity g = Granularity::FullLayer) {
  EntropyProfile p;
  p.estimator = EstimatorConfig::bucket(40);
  p.block_count = (h.size() - 1) / 2;
  p.h_values = std::move(h);
  p.delta_h.assign(p.block_count, 0.0);
  return with_granularity(std::move(p), g);
}

double spearman_oracle(const std::vector<double>& a, const std::vector<double>& b) {
  auto ranks = [](const std::vector<double>& x) {
    std::vector<std::size_t> idx(x.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t i, std::size_t j) { return x[i] < x[j]; });
    std::vector<double> r(x.size());
    for (std::size_t pos = 0; pos < idx.size(); ++pos) r[idx[pos]] = static_cast<double>(pos);
    return r;
  };
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n - 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  return sab / std::sqrt(saa * sbb);
}

}  // namespace

TEST(BlockIndexing, SnapshotPairsPerGranularity) {
  EXPECT_EQ(block_input(Granularity::FullLayer, 3), 4u);
  EXPECT_EQ(block_output(Granularity::FullLayer, 3), 6u);
  EXPECT_EQ(block_input(Granularity::AttentionBlock, 3), 4u);
  EXPECT_EQ(block_output(Granularity::AttentionBlock, 3), 5u);
  EXPECT_EQ(block_input(Granularity::MlpBlock, 3), 5u);
  EXPECT_EQ(block_output(Granularity::MlpBlock, 3), 6u);
  EXPECT_EQ(expected_label(4), (SnapshotLabel{1, Position::PostMLP}));
}

TEST(StageStart, MinimumOfCurvePlusOne) {
  EXPECT_EQ(detect_stage_start(std::vector<double>{5, 3, 4, 6}), 2u);
  EXPECT_EQ(detect_stage_start(std::vector<double>{1, 2, 3, 4}), 1u);
  EXPECT_EQ(detect_stage_start(std::vector<double>{4, 2, 2, 5}), 2u);
  EXPECT_THROW(detect_stage_start(std::vector<double>{}), ContractViolation);
}

TEST(StageStart, ProfileUsesLayerBoundaries) {
  const auto p = profile_from({5, 0.1, 3, 9, 4, 0.2, 6});
  EXPECT_EQ(p.stage_curve(), (std::vector<double>{5, 3, 4, 6}));
  EXPECT_EQ(detect_stage_start(p), 2u);
}

TEST(MakePlan, PrunesSmallestIncrease) {
  const auto plan = make_plan(scores_of({0.10, 0.50, 0.05}), Granularity::FullLayer, 1, 1);
  EXPECT_EQ(plan.prune_set, (std::vector<std::size_t>{3}));
  EXPECT_EQ(plan.ranked, (std::vector<std::size_t>{3, 1, 2}));
}

TEST(MakePlan, ZeroKReturnsFullRanking) {
  const auto plan = make_plan(scores_of({0.3, 0.1, 0.2}), Granularity::FullLayer, 0, 1);
  EXPECT_TRUE(plan.prune_set.empty());
  EXPECT_EQ(plan.ranked.size(), 3u);
}

TEST(MakePlan, TiesPruneLowerBlockFirst) {
  const auto plan = make_plan(scores_of({0.4, 0.2, 0.9, 0.2}), Granularity::FullLayer, 1, 1);
  EXPECT_EQ(plan.prune_set, (std::vector<std::size_t>{2}));
  EXPECT_EQ(plan.ranked, (std::vector<std::size_t>{2, 4, 1, 3}));
}

TEST(MakePlan, StageOneBlocksAreProtected) {
  const auto plan = make_plan(scores_of({-1.0, 0.3, 0.1, 0.2}), Granularity::FullLayer, 2, 2);
  EXPECT_EQ(plan.prune_set, (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(plan.s_start, 2u);
}

TEST(MakePlan, TooManyBlocksReportsEligibleCount) {
  try {
    make_plan(scores_of({0.1, 0.2, 0.3, 0.4}), Granularity::FullLayer, 3, 3);
    FAIL() << "expected CapacityError";
  } catch (const CapacityError& e) {
    EXPECT_EQ(e.eligible(), 2u);
    EXPECT_NE(std::string(e.what()).find("only 2"), std::string::npos);
  }
}

TEST(MakePlan, NonFiniteScoreIsRejected) {
  EXPECT_THROW(make_plan(scores_of({0.1, NAN}), Granularity::FullLayer, 0, 1), ContractViolation);
}

TEST(MakePlan, ArgsortInvariantUnderPositiveAffineMaps) {
  Rng rng(31);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> values(n);
    for (auto& v : values) v = rng.uniform() < 0.2 ? 0.5 : rng.normal();
    const double a = 0.01 + 10.0 * rng.uniform();
    const double b = 5.0 * rng.normal();
    std::vector<double> mapped(n);
    for (std::size_t i = 0; i < n; ++i) mapped[i] = a * values[i] + b;
    const std::size_t s = 1 + rng.below(n);
    const std::size_t k = rng.below(n - s + 2);
    const auto p1 = make_plan(scores_of(values), Granularity::AttentionBlock, k, s);
    const auto p2 = make_plan(scores_of(mapped), Granularity::AttentionBlock, k, s);
    EXPECT_EQ(p1.prune_set, p2.prune_set);
    EXPECT_EQ(p1.ranked, p2.ranked);
  }
}

TEST(MakePlan, RandomProfilesNeverPruneStageOne) {
  Rng rng(1000);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t layers = 1 + rng.below(12);
    std::vector<double> h(2 * layers + 1);
    for (auto& v : h) v = rng.uniform() < 0.1 ? 1.0 : rng.uniform(0.0, 5.0);
    const auto g = static_cast<Granularity>(rng.below(3));
    const auto profile = profile_from(h, g);
    const std::size_t s = detect_stage_start(profile);
    const auto curve = profile.stage_curve();
    EXPECT_EQ(curve[s - 1], *std::min_element(curve.begin(), curve.end()));
    for (std::size_t i = 0; i + 1 < s; ++i) EXPECT_GT(curve[i], curve[s - 1]);
    const std::size_t eligible = layers + 1 - std::min(s, layers + 1);
    const auto plan = make_plan(profile, rng.below(eligible + 1));
    for (std::size_t b : plan.prune_set) EXPECT_GE(b, s);
    EXPECT_EQ(plan.ranked.size(), eligible);
    EXPECT_TRUE(std::is_sorted(plan.ranked_scores.begin(), plan.ranked_scores.end()));
  }
}

TEST(Profile, IdenticalSnapshotsGiveZeroIncrease) {
  Rng rng(2);
  const Matrix m = noise(40, 4, 1.0, rng);
  const auto trace = make_trace(std::vector<Matrix>(7, m));
  for (auto config : {EstimatorConfig::bucket(40), EstimatorConfig::knn(5), EstimatorConfig::renyi(2.0, 40)}) {
    const auto p = build_profile(trace, config, Granularity::AttentionBlock);
    for (double d : p.delta_h) EXPECT_EQ(d, 0.0);
  }
}

TEST(Profile, MatchesRecomputedDifferences) {
  const auto trace = toy_trace(2, 42);
  const auto p = build_profile(trace, EstimatorConfig::bucket(40), Granularity::FullLayer);
  ASSERT_EQ(p.delta_h.size(), 2u);
  const double h0 = bucket_entropy(trace.snapshots[0].values, 40).nats;
  const double h2 = bucket_entropy(trace.snapshots[2].values, 40).nats;
  const double h4 = bucket_entropy(trace.snapshots[4].values, 40).nats;
  EXPECT_EQ(p.delta_h[0], h2 - h0);
  EXPECT_EQ(p.delta_h[1], h4 - h2);
  EXPECT_EQ(p.sample_size, trace.token_count);
}

TEST(Profile, LayerIncreaseTelescopesIntoBlocks) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto trace = toy_trace(3, seed);
    for (auto config : {EstimatorConfig::bucket(40), EstimatorConfig::knn(10), EstimatorConfig::renyi(0.5, 20)}) {
      const auto full = build_profile(trace, config, Granularity::FullLayer);
      const auto attn = with_granularity(full, Granularity::AttentionBlock);
      const auto mlp = build_profile(trace, config, Granularity::MlpBlock);
      for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(attn.delta_h[l] + mlp.delta_h[l], full.delta_h[l], 1e-9);
    }
  }
}

TEST(Profile, MissingSnapshotIsStructuralError) {
  auto trace = random_trace(3, 20, 3, 4);
  trace.snapshots.erase(trace.snapshots.begin() + 3);
  try {
    build_profile(trace, EstimatorConfig::bucket(20), Granularity::FullLayer);
    FAIL() << "expected StructuralError";
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1 post_attention"), std::string::npos) << e.what();
  }
  auto truncated = random_trace(2, 20, 3, 4);
  truncated.snapshots.pop_back();
  EXPECT_THROW(layer_count(truncated), StructuralError);
}

TEST(Profile, EstimatorFailureNamesSnapshot) {
  const auto trace = random_trace(1, 5, 2, 1);
  try {
    build_profile(trace, EstimatorConfig::knn(25), Granularity::FullLayer);
    FAIL() << "expected ContractViolation";
  } catch (const ContractViolation& e) {
    EXPECT_NE(std::string(e.what()).find("snapshot 0"), std::string::npos);
  }
}

TEST(Cosine, IdentityBlockScoresZero) {
  Rng rng(6);
  const Matrix a = noise(10, 4, 1.0, rng);
  const Matrix b = noise(10, 4, 1.0, rng);
  const auto report = cosine_importance(make_trace({a, a, b}), Granularity::AttentionBlock);
  EXPECT_NEAR(report.scores[0].score, 0.0, 1e-12);
  EXPECT_EQ(report.scores[0].criterion, Criterion::CosineDistance);
}

TEST(Cosine, OrthogonalTokensScoreOne) {
  Matrix x(3, 2, std::vector<float>{1, 0, 0, 2, 3, 0});
  Matrix y(3, 2, std::vector<float>{0, 5, -1, 0, 0, -1});
  const auto report = cosine_importance(make_trace({x, y, y}), Granularity::AttentionBlock);
  EXPECT_NEAR(report.scores[0].score, 1.0, 1e-12);
}

TEST(Cosine, MatchesNaiveLoop) {
  const auto trace = random_trace(2, 64, 8, 12);
  const auto report = cosine_importance(trace, Granularity::FullLayer);
  for (std::size_t l = 1; l <= 2; ++l) {
    const auto& x = trace.snapshots[2 * (l - 1)].values;
    const auto& y = trace.snapshots[2 * l].values;
    double total = 0.0;
    for (std::size_t t = 0; t < 64; ++t) {
      double dot = 0.0, nx = 0.0, ny = 0.0;
      for (std::size_t c = 0; c < 8; ++c) {
        dot += double(x(t, c)) * y(t, c);
        nx += double(x(t, c)) * x(t, c);
        ny += double(y(t, c)) * y(t, c);
      }
      total += 1.0 - dot / std::sqrt(nx * ny);
    }
    EXPECT_NEAR(report.scores[l - 1].score, total / 64.0, 1e-6);
  }
}

TEST(Cosine, ZeroNormTokensAreExcludedAndCounted) {
  Matrix x(3, 2, std::vector<float>{1, 0, 0, 0, 1, 1});
  Matrix y(3, 2, std::vector<float>{1, 0, 5, 5, 1, 1});
  const auto report = cosine_importance(make_trace({x, y, y}), Granularity::AttentionBlock);
  EXPECT_EQ(report.excluded_tokens[0], 1u);
  EXPECT_NEAR(report.scores[0].score, 0.0, 1e-12);
  EXPECT_THROW(cosine_importance(make_trace({Matrix(3, 2), y, y}), Granularity::AttentionBlock), DegenerateInputError);
}

TEST(CosinePlan, DefaultsToEveryBlockEligible) {
  const auto report = cosine_importance(random_trace(4, 30, 3, 8), Granularity::FullLayer);
  const auto plan = make_plan(report, 4);
  EXPECT_EQ(plan.s_start, 1u);
  EXPECT_EQ(plan.criterion, Criterion::CosineDistance);
  EXPECT_EQ(plan.prune_set.size(), 4u);
}

TEST(RankCorrelation, IdentityAndReversal) {
  const auto a = make_plan(scores_of({0.1, 0.4, 0.2, 0.3, 0.5}), Granularity::FullLayer, 0, 1);
  const auto b = make_plan(scores_of({0.5, 0.2, 0.4, 0.3, 0.1}), Granularity::FullLayer, 0, 1);
  EXPECT_DOUBLE_EQ(rank_correlation(a, a), 1.0);
  EXPECT_DOUBLE_EQ(rank_correlation(a, b), -1.0);
}

TEST(RankCorrelation, MatchesPearsonOfRanksOnToyTrace) {
  const auto trace = toy_trace(6, 5);
  const auto p20 = build_profile(trace, EstimatorConfig::bucket(20), Granularity::FullLayer);
  const auto p160 = build_profile(trace, EstimatorConfig::bucket(160), Granularity::FullLayer);
  const auto a = make_plan(p20, 0, 1);
  const auto b = make_plan(p160, 0, 1);
  EXPECT_NEAR(rank_correlation(a, b), spearman_oracle(p20.delta_h, p160.delta_h), 1e-9);
}

TEST(RankCorrelation, MismatchedPlansAreRejected) {
  const auto a = make_plan(scores_of({0.1, 0.2, 0.3}), Granularity::FullLayer, 0, 1);
  const auto b = make_plan(scores_of({0.1, 0.2, 0.3, 0.4}), Granularity::FullLayer, 0, 1);
  const auto c = make_plan(scores_of({0.1, 0.2, 0.3}), Granularity::MlpBlock, 0, 1);
  EXPECT_THROW(rank_correlation(a, b), ContractViolation);
  EXPECT_THROW(rank_correlation(a, c), ContractViolation);
}

TEST(Sweep, SingleEntryHasUnitMatrix) {
  const auto trace = random_trace(3, 50, 3, 1);
  const auto result = sweep(trace, {EstimatorConfig::bucket(40)}, Granularity::FullLayer, 0, 1);
  ASSERT_EQ(result.entries.size(), 1u);
  EXPECT_EQ(result.correlation, (std::vector<std::vector<double>>{{1.0}}));
}

TEST(Sweep, BinGridIsSymmetricWithUnitDiagonal) {
  const auto trace = toy_trace(4, 9);
  std::vector<EstimatorConfig> grid;
  for (std::size_t bins : {20, 40, 80, 160}) grid.push_back(EstimatorConfig::bucket(bins));
  const auto result = sweep(trace, grid, Granularity::AttentionBlock, 0, 1);
  ASSERT_EQ(result.correlation.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(result.correlation[i][i], 1.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_EQ(result.correlation[i][j], result.correlation[j][i]);
  }
}

TEST(Sweep, DuplicatesMatchAndFailuresAreRecorded) {
  const auto trace = random_trace(2, 10, 2, 3);
  const auto result =
      sweep(trace, {EstimatorConfig::bucket(40), EstimatorConfig::bucket(40), EstimatorConfig::knn(25)},
            Granularity::FullLayer, 0, 1);
  EXPECT_EQ(result.entries[0].profile->h_values, result.entries[1].profile->h_values);
  EXPECT_EQ(result.entries[0].plan->ranked, result.entries[1].plan->ranked);
  EXPECT_FALSE(result.entries[2].error.empty());
  EXPECT_TRUE(std::isnan(result.correlation[0][2]));
}
