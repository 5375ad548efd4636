#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "entrodrop/error.hpp"
#include "entrodrop/estimators.hpp"
#include "entrodrop/parallel.hpp"
#include "entrodrop/trace.hpp"

namespace entrodrop {

// Block numbering: blocks are numbered 1..L. Block l is layer l (its
// attention sub-block, MLP sub-block, or the whole layer depending on the
// granularity); it reads snapshot `block_input(g, l)` and writes
// `block_output(g, l)`. Snapshot 0 is the embedding output; snapshot 2l-1 is
// PostAttention of layer l and snapshot 2l is PostMLP of layer l.

enum class Granularity { FullLayer, AttentionBlock, MlpBlock };
enum class Criterion { EntropyIncrease, CosineDistance };

inline const char* to_string(Granularity g) {
  switch (g) {
    case Granularity::FullLayer: return "layer";
    case Granularity::AttentionBlock: return "attention";
    case Granularity::MlpBlock: return "mlp";
  }
  return "?";
}

inline const char* to_string(Criterion c) {
  return c == Criterion::EntropyIncrease ? "entropy" : "cosine";
}

inline Granularity parse_granularity(const std::string& s) {
  if (s == "layer") return Granularity::FullLayer;
  if (s == "attention") return Granularity::AttentionBlock;
  if (s == "mlp") return Granularity::MlpBlock;
  throw ContractViolation("unknown granularity '" + s + "' (expected layer|attention|mlp)");
}

inline Criterion parse_criterion(const std::string& s) {
  if (s == "entropy") return Criterion::EntropyIncrease;
  if (s == "cosine") return Criterion::CosineDistance;
  throw ContractViolation("unknown criterion '" + s + "' (expected entropy|cosine)");
}

inline std::size_t block_input(Granularity g, std::size_t block) {
  return g == Granularity::MlpBlock ? 2 * block - 1 : 2 * (block - 1);
}

inline std::size_t block_output(Granularity g, std::size_t block) {
  return g == Granularity::AttentionBlock ? 2 * block - 1 : 2 * block;
}

inline SnapshotLabel expected_label(std::size_t snapshot) {
  if (snapshot == 0) return {0, Position::PreAttention};
  const auto layer = static_cast<std::uint32_t>((snapshot - 1) / 2);
  return {layer, snapshot % 2 == 1 ? Position::PostAttention : Position::PostMLP};
}

/// Number of layers L in a complete 2L+1 snapshot trace. Throws
/// StructuralError naming the first missing or unexpected snapshot.
inline std::size_t layer_count(const ActivationTrace& trace) {
  const auto& snaps = trace.snapshots;
  for (std::size_t i = 0; i < snaps.size(); ++i) {
    const auto want = expected_label(i);
    if (snaps[i].label != want) {
      throw StructuralError("trace snapshot sequence has a gap: expected " + to_string(want) + " at position " +
                            std::to_string(i) + ", found " + to_string(snaps[i].label));
    }
  }
  if (snaps.size() < 3 || snaps.size() % 2 == 0) {
    throw StructuralError("trace snapshot sequence is incomplete: missing " +
                          to_string(expected_label(snaps.size())) + " (have " + std::to_string(snaps.size()) +
                          " snapshots, a complete trace has 2L+1)");
  }
  return (snaps.size() - 1) / 2;
}

struct EntropyProfile {
  EstimatorConfig estimator;
  Granularity granularity = Granularity::FullLayer;
  std::vector<double> h_values;  // one per snapshot (2L+1)
  std::vector<double> delta_h;   // one per block (L)
  std::size_t block_count = 0;
  std::size_t sample_size = 0;

  double h_in(std::size_t block) const { return h_values[block_input(granularity, block)]; }
  double h_out(std::size_t block) const { return h_values[block_output(granularity, block)]; }

  /// Entropy at layer boundaries: embedding output then each layer's PostMLP.
  std::vector<double> stage_curve() const {
    std::vector<double> curve;
    for (std::size_t i = 0; i < h_values.size(); i += 2) curve.push_back(h_values[i]);
    return curve;
  }
};

/// Re-derives per-block increases for another granularity from the same snapshot entropies.
inline EntropyProfile with_granularity(EntropyProfile profile, Granularity g) {
  profile.granularity = g;
  for (std::size_t l = 1; l <= profile.block_count; ++l)
    profile.delta_h[l - 1] = profile.h_values[block_output(g, l)] - profile.h_values[block_input(g, l)];
  return profile;
}

/// Estimates the entropy of every snapshot once (on a row subsample shared by
/// all snapshots) and differences each block's output against its input.
inline EntropyProfile build_profile(const ActivationTrace& trace, const EstimatorConfig& config,
                                    Granularity granularity, std::size_t threads = default_thread_count()) {
  const std::size_t layers = layer_count(trace);
  validate(config);
  const ActivationTrace sampled = subsample(trace, config.sample_policy);

  EntropyProfile profile;
  profile.estimator = config;
  profile.granularity = granularity;
  profile.block_count = layers;
  profile.sample_size = sampled.token_count;
  profile.h_values.assign(sampled.snapshots.size(), 0.0);
  parallel_for(sampled.snapshots.size(), threads, [&](std::size_t i) {
    try {
      profile.h_values[i] = estimate(sampled.snapshots[i].values, config).nats;
    } catch (const ContractViolation& e) {
      throw ContractViolation("snapshot " + std::to_string(i) + " (" + to_string(sampled.snapshots[i].label) +
                              "): " + e.what());
    }
  });
  profile.delta_h.assign(layers, 0.0);
  return with_granularity(std::move(profile), granularity);
}

/// First block after the global minimum of `curve` (earliest minimum on ties).
/// curve[0] is the input of block 1, curve[l] the output of block l.
inline std::size_t detect_stage_start(std::span<const double> curve) {
  require(!curve.empty(), "detect_stage_start: empty entropy curve");
  const auto it = std::min_element(curve.begin(), curve.end());
  return static_cast<std::size_t>(it - curve.begin()) + 1;
}

inline std::size_t detect_stage_start(const EntropyProfile& profile) {
  const auto curve = profile.stage_curve();
  return detect_stage_start(curve);
}

struct ImportanceScore {
  std::size_t block = 0;
  double score = 0.0;
  Criterion criterion = Criterion::EntropyIncrease;
};

inline std::vector<ImportanceScore> entropy_scores(const EntropyProfile& profile) {
  std::vector<ImportanceScore> out;
  for (std::size_t l = 1; l <= profile.block_count; ++l)
    out.push_back({l, profile.delta_h[l - 1], Criterion::EntropyIncrease});
  return out;
}

struct CosineReport {
  Granularity granularity = Granularity::FullLayer;
  std::vector<ImportanceScore> scores;
  std::vector<std::size_t> excluded_tokens;  // zero-norm tokens skipped, per block
};

/// Mean over tokens of 1 - cos(input_t, output_t) for every block.
inline CosineReport cosine_importance(const ActivationTrace& trace, Granularity granularity) {
  const std::size_t layers = layer_count(trace);
  for (std::size_t i = 0; i < trace.snapshots.size(); ++i) {
    const auto data = trace.snapshots[i].values.data();
    if (std::all_of(data.begin(), data.end(), [](float v) { return v == 0.0f; }))
      throw DegenerateInputError("snapshot " + std::to_string(i) + " (" + to_string(trace.snapshots[i].label) +
                                 ") is all zeros; cosine similarity is undefined");
  }
  CosineReport report;
  report.granularity = granularity;
  for (std::size_t l = 1; l <= layers; ++l) {
    const Matrix& x = trace.snapshots[block_input(granularity, l)].values;
    const Matrix& y = trace.snapshots[block_output(granularity, l)].values;
    double total = 0.0;
    std::size_t used = 0;
    std::size_t excluded = 0;
    for (std::size_t t = 0; t < trace.token_count; ++t) {
      const auto xr = x.row(t);
      const auto yr = y.row(t);
      double dot = 0.0, xx = 0.0, yy = 0.0;
      for (std::size_t c = 0; c < xr.size(); ++c) {
        dot += static_cast<double>(xr[c]) * yr[c];
        xx += static_cast<double>(xr[c]) * xr[c];
        yy += static_cast<double>(yr[c]) * yr[c];
      }
      if (xx == 0.0 || yy == 0.0) {
        ++excluded;
        continue;
      }
      total += std::clamp(1.0 - dot / (std::sqrt(xx) * std::sqrt(yy)), 0.0, 2.0);
      ++used;
    }
    if (used == 0)
      throw DegenerateInputError("block " + std::to_string(l) + ": every token has a zero-norm input or output");
    report.scores.push_back({l, total / static_cast<double>(used), Criterion::CosineDistance});
    report.excluded_tokens.push_back(excluded);
  }
  return report;
}

struct PruningPlan {
  Granularity granularity = Granularity::FullLayer;
  Criterion criterion = Criterion::EntropyIncrease;
  std::string estimator;  // describe() of the estimator, empty for cosine
  std::size_t block_count = 0;
  std::size_t s_start = 1;
  std::vector<std::size_t> ranked;   // eligible blocks, ascending score
  std::vector<double> ranked_scores;
  std::vector<std::size_t> prune_set;  // first k of `ranked`, in ranking order
  std::size_t k = 0;
};

/// Ranks blocks with index >= s_start by ascending score (lower block first on
/// ties) and selects the first k.
inline PruningPlan make_plan(std::span<const ImportanceScore> scores, Granularity granularity, std::size_t k,
                             std::size_t s_start) {
  std::vector<ImportanceScore> eligible;
  for (const auto& s : scores) {
    require(std::isfinite(s.score), "importance score for block " + std::to_string(s.block) + " is not finite");
    if (s.block >= s_start) eligible.push_back(s);
  }
  if (k > eligible.size()) {
    throw CapacityError("cannot prune " + std::to_string(k) + " blocks: only " + std::to_string(eligible.size()) +
                            " blocks are eligible (s_start = " + std::to_string(s_start) + ")",
                        eligible.size());
  }
  std::sort(eligible.begin(), eligible.end(), [](const ImportanceScore& a, const ImportanceScore& b) {
    return a.score != b.score ? a.score < b.score : a.block < b.block;
  });
  PruningPlan plan;
  plan.granularity = granularity;
  plan.criterion = scores.empty() ? Criterion::EntropyIncrease : scores.front().criterion;
  plan.block_count = scores.size();
  plan.s_start = s_start;
  plan.k = k;
  for (const auto& s : eligible) {
    plan.ranked.push_back(s.block);
    plan.ranked_scores.push_back(s.score);
  }
  plan.prune_set.assign(plan.ranked.begin(), plan.ranked.begin() + static_cast<std::ptrdiff_t>(k));
  return plan;
}

/// Entropy-increase plan. Stage-1 blocks (before the entropy minimum) are
/// protected unless `s_start_override` is given.
inline PruningPlan make_plan(const EntropyProfile& profile, std::size_t k,
                             std::optional<std::size_t> s_start_override = std::nullopt) {
  const auto scores = entropy_scores(profile);
  auto plan = make_plan(scores, profile.granularity, k, s_start_override.value_or(detect_stage_start(profile)));
  plan.estimator = describe(profile.estimator);
  return plan;
}

/// Cosine-distance plan; without an override every block is eligible.
inline PruningPlan make_plan(const CosineReport& report, std::size_t k,
                             std::optional<std::size_t> s_start_override = std::nullopt) {
  auto plan = make_plan(report.scores, report.granularity, k, s_start_override.value_or(1));
  plan.criterion = Criterion::CosineDistance;
  return plan;
}

/// Spearman correlation of the two rankings over the blocks both consider eligible.
inline double rank_correlation(const PruningPlan& a, const PruningPlan& b) {
  require(a.granularity == b.granularity, "rank_correlation: plans have different granularities");
  require(a.block_count == b.block_count, "rank_correlation: plans have different block counts");
  std::vector<std::size_t> shared;
  for (std::size_t block : a.ranked)
    if (std::find(b.ranked.begin(), b.ranked.end(), block) != b.ranked.end()) shared.push_back(block);
  require(shared.size() >= 2, "rank_correlation: plans share fewer than two eligible blocks");

  auto ranks_of = [&](const PruningPlan& p) {
    std::vector<double> rank(shared.size());
    std::size_t r = 0;
    for (std::size_t block : p.ranked) {
      const auto it = std::find(shared.begin(), shared.end(), block);
      if (it != shared.end()) rank[static_cast<std::size_t>(it - shared.begin())] = static_cast<double>(r++);
    }
    return rank;
  };
  const auto ra = ranks_of(a);
  const auto rb = ranks_of(b);
  double d2 = 0.0;
  for (std::size_t i = 0; i < shared.size(); ++i) d2 += (ra[i] - rb[i]) * (ra[i] - rb[i]);
  const double n = static_cast<double>(shared.size());
  return 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
}

struct SweepEntry {
  EstimatorConfig config;
  std::optional<EntropyProfile> profile;
  std::optional<PruningPlan> plan;
  std::string error;  // non-empty when this entry failed
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  std::vector<std::vector<double>> correlation;  // NaN where either entry failed
};

/// One profile and plan per estimator configuration plus the pairwise rank
/// correlation of their plans. A failing entry is recorded and skipped.
inline SweepResult sweep(const ActivationTrace& trace, const std::vector<EstimatorConfig>& grid,
                         Granularity granularity, std::size_t k = 0,
                         std::optional<std::size_t> s_start_override = std::nullopt,
                         std::size_t threads = default_thread_count()) {
  SweepResult result;
  for (const auto& config : grid) {
    SweepEntry entry{config, std::nullopt, std::nullopt, {}};
    try {
      entry.profile = build_profile(trace, config, granularity, threads);
      entry.plan = make_plan(*entry.profile, k, s_start_override);
    } catch (const Error& e) {
      entry.profile.reset();
      entry.error = e.what();
    }
    result.entries.push_back(std::move(entry));
  }
  const std::size_t n = result.entries.size();
  const double nan = std::numeric_limits<double>::quiet_NaN();
  result.correlation.assign(n, std::vector<double>(n, nan));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const auto& a = result.entries[i].plan;
      const auto& b = result.entries[j].plan;
      if (!a || !b) continue;
      try {
        result.correlation[i][j] = i == j ? 1.0 : rank_correlation(*a, *b);
      } catch (const ContractViolation&) {
      }
    }
  }
  return result;
}

}  // namespace entrodrop
