#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "entrodrop/error.hpp"
#include "entrodrop/numerics.hpp"
#include "entrodrop/special.hpp"
#include "entrodrop/trace.hpp"

namespace entrodrop {

// Entropy estimators. Every estimator maps a sample matrix (rows = tokens,
// cols = hidden dimensions) to one value in nats.

struct BucketConfig {
  std::size_t bins = 40;
  friend bool operator==(const BucketConfig&, const BucketConfig&) = default;
};

struct KnnConfig {
  std::size_t k = 25;
  friend bool operator==(const KnnConfig&, const KnnConfig&) = default;
};

struct RenyiConfig {
  double alpha = 2.0;
  std::size_t bins = 40;
  friend bool operator==(const RenyiConfig&, const RenyiConfig&) = default;
};

struct EstimatorConfig {
  std::variant<BucketConfig, KnnConfig, RenyiConfig> kind = BucketConfig{};
  SamplePolicy sample_policy{};

  friend bool operator==(const EstimatorConfig&, const EstimatorConfig&) = default;

  static EstimatorConfig bucket(std::size_t bins, SamplePolicy policy = {}) { return {BucketConfig{bins}, policy}; }
  static EstimatorConfig knn(std::size_t k, SamplePolicy policy = {}) { return {KnnConfig{k}, policy}; }
  static EstimatorConfig renyi(double alpha, std::size_t bins, SamplePolicy policy = {}) {
    return {RenyiConfig{alpha, bins}, policy};
  }
};

inline std::string estimator_name(const EstimatorConfig& c) {
  return std::visit(
      [](const auto& k) -> std::string {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, BucketConfig>) return "bucket";
        else if constexpr (std::is_same_v<K, KnnConfig>) return "knn";
        else return "renyi";
      },
      c.kind);
}

/// Stable one-line rendering, e.g. "bucket bins=40 max_tokens=4096 sample_seed=0".
inline std::string describe(const EstimatorConfig& c) {
  std::string params = std::visit(
      [](const auto& k) -> std::string {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, BucketConfig>) return "bins=" + std::to_string(k.bins);
        else if constexpr (std::is_same_v<K, KnnConfig>) return "k=" + std::to_string(k.k);
        else {
          char buf[64];
          std::snprintf(buf, sizeof buf, "alpha=%.17g bins=%zu", k.alpha, k.bins);
          return buf;
        }
      },
      c.kind);
  return estimator_name(c) + " " + params + " max_tokens=" + std::to_string(c.sample_policy.max_tokens) +
         " sample_seed=" + std::to_string(c.sample_policy.seed);
}

struct EntropyValue {
  double nats = 0.0;
  EstimatorConfig estimator;
  std::size_t sample_size = 0;
};

inline constexpr std::size_t kMaxBins = 65536;
inline constexpr double kKnnDistanceFloor = 1e-12;

namespace detail {

inline void check_bins(std::size_t bins) {
  require(bins >= 2 && bins <= kMaxBins, "bins must be in [2, 65536], got " + std::to_string(bins));
}

/// Counts of the pooled scalar population over `bins` equal-width bins spanning
/// [min, max]. Returns an empty vector when the range is degenerate.
template <typename T>
std::vector<std::size_t> histogram(const BasicMatrix<T>& sample, std::size_t bins) {
  require(!sample.empty(), "entropy of an empty sample");
  check_bins(bins);
  const auto [lo_it, hi_it] = std::minmax_element(sample.data().begin(), sample.data().end());
  const double lo = *lo_it;
  const double hi = *hi_it;
  if (!(hi > lo)) return {};
  const double width = hi - lo;
  std::vector<std::size_t> counts(bins, 0);
  for (T v : sample.data()) {
    const double t = (static_cast<double>(v) - lo) / width;
    const auto b = std::min(bins - 1, static_cast<std::size_t>(t * static_cast<double>(bins)));
    ++counts[b];
  }
  return counts;
}

}  // namespace detail

/// Shannon entropy of the equal-width histogram of all scalars in `sample`.
template <typename T>
EntropyValue bucket_entropy(const BasicMatrix<T>& sample, std::size_t bins) {
  const auto counts = detail::histogram(sample, bins);
  EntropyValue out{0.0, EstimatorConfig::bucket(bins), sample.rows()};
  if (counts.empty()) return out;
  const double n = static_cast<double>(sample.size());
  double h = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / n;
    h -= p * std::log(p);
  }
  out.nats = std::clamp(h, 0.0, std::log(static_cast<double>(bins)));
  return out;
}

/// Renyi entropy of order `alpha` of the same histogram bucket_entropy uses.
template <typename T>
EntropyValue renyi_entropy(const BasicMatrix<T>& sample, double alpha, std::size_t bins) {
  if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ContractViolation("renyi alpha must be positive");
  if (alpha == 1.0) throw ContractViolation("renyi alpha = 1 is Shannon entropy; use bucket_entropy");
  const auto counts = detail::histogram(sample, bins);
  EntropyValue out{0.0, EstimatorConfig::renyi(alpha, bins), sample.rows()};
  if (counts.empty()) return out;
  const double n = static_cast<double>(sample.size());
  double power_sum = 0.0;
  for (std::size_t c : counts) {
    if (c == 0) continue;
    power_sum += std::pow(static_cast<double>(c) / n, alpha);
  }
  out.nats = std::clamp(std::log(power_sum) / (1.0 - alpha), 0.0, std::log(static_cast<double>(bins)));
  return out;
}

/// Kozachenko-Leonenko differential entropy of the rows of `sample`, using the
/// Euclidean distance to each point's k-th nearest neighbour (exact search).
template <typename T>
EntropyValue knn_entropy(const BasicMatrix<T>& sample, std::size_t k) {
  const std::size_t n = sample.rows();
  const std::size_t d = sample.cols();
  require(k >= 1, "knn k must be >= 1");
  require(d >= 1, "knn sample has zero dimensions");
  if (n < k + 1) {
    throw ContractViolation("knn_entropy needs at least k+1 = " + std::to_string(k + 1) + " points, got " +
                            std::to_string(n));
  }
  const std::vector<double> pts(sample.data().begin(), sample.data().end());
  std::vector<double> log_eps(n);
  std::vector<double> dist2(n - 1);
  const double floor2 = kKnnDistanceFloor * kKnnDistanceFloor;
  for (std::size_t i = 0; i < n; ++i) {
    const double* pi = pts.data() + i * d;
    std::size_t slot = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double* pj = pts.data() + j * d;
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = pi[c] - pj[c];
        s += diff * diff;
      }
      dist2[slot++] = s;
    }
    std::nth_element(dist2.begin(), dist2.begin() + static_cast<std::ptrdiff_t>(k - 1), dist2.end());
    log_eps[i] = 0.5 * std::log(std::max(dist2[k - 1], floor2));
  }
  // summing in sorted order makes the result independent of row order
  std::sort(log_eps.begin(), log_eps.end());
  double sum_log = 0.0;
  for (double v : log_eps) sum_log += v;
  const double nd = static_cast<double>(n);
  const double h = digamma(nd) - digamma(static_cast<double>(k)) + log_unit_ball_volume(d) +
                   static_cast<double>(d) / nd * sum_log;
  return {h, EstimatorConfig::knn(k), n};
}

inline void validate(const EstimatorConfig& config) {
  require(config.sample_policy.max_tokens >= 2, "sample policy max_tokens must be >= 2");
  std::visit(
      [](const auto& k) {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, BucketConfig>) {
          detail::check_bins(k.bins);
        } else if constexpr (std::is_same_v<K, KnnConfig>) {
          require(k.k >= 1, "knn k must be >= 1");
        } else {
          detail::check_bins(k.bins);
          require(k.alpha > 0.0 && std::isfinite(k.alpha) && k.alpha != 1.0, "renyi alpha must be > 0 and != 1");
        }
      },
      config.kind);
}

/// Subsamples rows per the config's policy, then dispatches to the estimator.
template <typename T>
EntropyValue estimate(const BasicMatrix<T>& sample, const EstimatorConfig& config) {
  validate(config);
  const auto rows = select_rows(sample.rows(), config.sample_policy);
  const BasicMatrix<T> reduced = rows.size() == sample.rows() ? sample : take_rows(sample, rows);
  EntropyValue value = std::visit(
      [&](const auto& k) -> EntropyValue {
        using K = std::decay_t<decltype(k)>;
        if constexpr (std::is_same_v<K, BucketConfig>) return bucket_entropy(reduced, k.bins);
        else if constexpr (std::is_same_v<K, KnnConfig>) return knn_entropy(reduced, k.k);
        else return renyi_entropy(reduced, k.alpha, k.bins);
      },
      config.kind);
  value.estimator = config;
  return value;
}

}  // namespace entrodrop
