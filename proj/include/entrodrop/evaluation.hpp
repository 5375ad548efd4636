#pragma once

#include <vector>

#include "entrodrop/bench.hpp"
#include "entrodrop/corpus.hpp"
#include "entrodrop/importance.hpp"
#include "entrodrop/rng.hpp"
#include "entrodrop/training.hpp"

namespace entrodrop {

/// Captures every sequence of `corpus` and stacks the token rows of each
/// snapshot in corpus order.
inline ActivationTrace calibration_trace(const ToyModel& model, const SyntheticCorpus& corpus, const BlockMask& mask,
                                         std::string source, std::size_t threads = default_thread_count()) {
  require(!corpus.sequences.empty(), "calibration corpus is empty");
  std::vector<ActivationTrace> parts(corpus.sequences.size());
  parallel_for(parts.size(), threads, [&](std::size_t i) {
    parts[i] = std::move(*forward(model, corpus.sequences[i], mask, true).trace);
  });
  ActivationTrace trace;
  trace.hidden_dim = model.config.hidden_dim;
  trace.seed = model.config.seed;
  trace.source = std::move(source);
  for (const auto& p : parts) trace.token_count += p.token_count;
  for (std::size_t s = 0; s < parts.front().snapshots.size(); ++s) {
    std::vector<float> values;
    values.reserve(trace.token_count * trace.hidden_dim);
    for (const auto& p : parts) {
      const auto data = p.snapshots[s].values.data();
      values.insert(values.end(), data.begin(), data.end());
    }
    trace.snapshots.push_back({parts.front().snapshots[s].label, Matrix(trace.token_count, trace.hidden_dim, std::move(values))});
  }
  return trace;
}

struct DegradationRow {
  std::size_t k = 0;
  double ppl_before = 0.0;
  double ppl_after = 0.0;

  /// Relative perplexity change, ppl_after / ppl_before - 1.
  double degradation() const { return ppl_after / ppl_before - 1.0; }
};

/// Perplexity with the first k blocks of the plan removed, for k = 0..max_k.
inline std::vector<DegradationRow> evaluate_prefixes(const ToyModel& model, const PruningPlan& plan,
                                                     const SyntheticCorpus& corpus, std::size_t max_k,
                                                     std::size_t threads = default_thread_count()) {
  require(max_k <= plan.ranked.size(), "evaluate: k exceeds the plan's ranking of " +
                                           std::to_string(plan.ranked.size()) + " blocks");
  const std::size_t layers = model.config.layers;
  const double before = perplexity(model, corpus, BlockMask::none(layers), threads);
  std::vector<DegradationRow> rows;
  for (std::size_t k = 0; k <= max_k; ++k) {
    const double after = k == 0 ? before : perplexity(model, corpus, mask_from_plan(plan, k, layers), threads);
    rows.push_back({k, before, after});
  }
  return rows;
}

/// Same eligible blocks as `plan`, ranked by a seeded uniform shuffle.
inline PruningPlan random_plan(const PruningPlan& plan, std::uint64_t seed) {
  PruningPlan out = plan;
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(out.ranked));
  out.ranked_scores.assign(out.ranked.size(), 0.0);
  out.estimator = "random seed=" + std::to_string(seed);
  out.prune_set.assign(out.ranked.begin(), out.ranked.begin() + static_cast<std::ptrdiff_t>(out.k));
  return out;
}

}  // namespace entrodrop
