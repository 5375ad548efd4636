#pragma once

#include <cmath>
#include <numbers>

#include "entrodrop/error.hpp"

namespace entrodrop {

// Both functions shift the argument upward with the recurrence until the
// asymptotic series is accurate to ~1e-14, so results do not depend on the
// platform's libm special functions.

inline double digamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("digamma: argument must be positive and finite");
  double shift = 0.0;
  while (x < 10.0) {
    shift -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  // ln x - 1/(2x) - sum B_2n / (2n x^2n)
  const double series =
      inv2 * (1.0 / 12 -
              inv2 * (1.0 / 120 -
                      inv2 * (1.0 / 252 - inv2 * (1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760))))));
  return shift + std::log(x) - 0.5 * inv - series;
}

inline double log_gamma(double x) {
  if (!(x > 0.0) || !std::isfinite(x)) throw DomainError("log_gamma: argument must be positive and finite");
  double shift = 0.0;
  while (x < 10.0) {
    shift -= std::log(x);
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  const double series =
      inv * (1.0 / 12 - inv2 * (1.0 / 360 - inv2 * (1.0 / 1260 - inv2 * (1.0 / 1680 - inv2 * (1.0 / 1188)))));
  return shift + (x - 0.5) * std::log(x) - x + 0.5 * std::log(2.0 * std::numbers::pi) + series;
}

/// ln of the volume of the unit Euclidean ball in `d` dimensions.
inline double log_unit_ball_volume(std::size_t d) {
  require(d >= 1, "log_unit_ball_volume: dimension must be >= 1");
  const double half = 0.5 * static_cast<double>(d);
  return half * std::log(std::numbers::pi) - log_gamma(half + 1.0);
}

}  // namespace entrodrop
