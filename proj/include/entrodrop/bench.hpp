#pragma once

#include <chrono>
#include <cmath>
#include <vector>

#include "entrodrop/importance.hpp"
#include "entrodrop/model.hpp"

namespace entrodrop {

/// Mask that skips the first `k` blocks of `plan.ranked`.
inline BlockMask mask_from_plan(const PruningPlan& plan, std::size_t k, std::size_t layers) {
  require(plan.block_count == layers, "plan covers " + std::to_string(plan.block_count) + " blocks but the model has " +
                                          std::to_string(layers) + " layers");
  require(k <= plan.ranked.size(), "prefix k exceeds the plan's ranking");
  BlockMask mask = BlockMask::none(layers);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t layer = plan.ranked[i] - 1;
    if (plan.granularity != Granularity::MlpBlock) mask.skip_attention[layer] = true;
    if (plan.granularity != Granularity::AttentionBlock) mask.skip_mlp[layer] = true;
  }
  return mask;
}

struct TimingRow {
  std::size_t mask_index = 0;
  std::size_t skipped_blocks = 0;
  double mean_ms = 0.0;
  double std_ms = 0.0;
  std::vector<double> runs_ms;
};

/// Times greedy generation (prefill `seq_len` prompt tokens, then decode
/// `gen_len` tokens with the key/value cache) once per repeat for every mask.
/// Masks run in sequence on the calling thread; one untimed warm-up precedes
/// the measurements of each mask. std_ms is the sample standard deviation.
inline std::vector<TimingRow> bench_inference(const ToyModel& model, const std::vector<BlockMask>& masks,
                                              std::size_t seq_len, std::size_t gen_len, std::size_t repeats,
                                              std::uint64_t prompt_seed = 0) {
  require(repeats >= 1, "bench_inference: repeats must be >= 1");
  require(seq_len >= 1, "bench_inference: seq_len must be >= 1");
  if (seq_len + gen_len > model.config.max_seq)
    throw CapacityError("seq_len + gen_len = " + std::to_string(seq_len + gen_len) + " exceeds max_seq " +
                            std::to_string(model.config.max_seq),
                        model.config.max_seq);
  Rng rng(prompt_seed);
  std::vector<Token> prompt(seq_len);
  for (auto& t : prompt) t = static_cast<Token>(rng.below(model.config.vocab));

  std::vector<TimingRow> table;
  for (std::size_t m = 0; m < masks.size(); ++m) {
    TimingRow row;
    row.mask_index = m;
    row.skipped_blocks = masks[m].skipped();
    (void)generate(model, prompt, std::min<std::size_t>(gen_len, 1), masks[m]);
    for (std::size_t r = 0; r < repeats; ++r) {
      const auto start = std::chrono::steady_clock::now();
      const auto out = generate(model, prompt, gen_len, masks[m]);
      const auto stop = std::chrono::steady_clock::now();
      if (out.size() != gen_len) throw Error("generation produced the wrong number of tokens");
      row.runs_ms.push_back(std::chrono::duration<double, std::milli>(stop - start).count());
    }
    double mean = 0.0;
    for (double v : row.runs_ms) mean += v;
    mean /= static_cast<double>(repeats);
    double var = 0.0;
    for (double v : row.runs_ms) var += (v - mean) * (v - mean);
    row.mean_ms = mean;
    row.std_ms = repeats > 1 ? std::sqrt(var / static_cast<double>(repeats - 1)) : 0.0;
    table.push_back(std::move(row));
  }
  return table;
}

/// Least-squares slope of ys against xs.
inline double regression_slope(std::span<const double> xs, std::span<const double> ys) {
  require(xs.size() == ys.size() && xs.size() >= 2, "regression_slope needs two or more points");
  const double n = static_cast<double>(xs.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    mx += xs[i];
    my += ys[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxy += (xs[i] - mx) * (ys[i] - my);
    sxx += (xs[i] - mx) * (xs[i] - mx);
  }
  require(sxx > 0.0, "regression_slope: xs are all equal");
  return sxy / sxx;
}

}  // namespace entrodrop
