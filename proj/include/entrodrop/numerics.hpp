#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "entrodrop/error.hpp"

namespace entrodrop {

/// Dense row-major matrix. `Matrix` (float storage) is the interchange type for
/// traces and inference; the double instantiation backs reference and gradient
/// checks.
template <typename T>
class BasicMatrix {
 public:
  using value_type = T;

  BasicMatrix() = default;
  BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  BasicMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "matrix data length " + std::to_string(data_.size()) +
                                               " != " + std::to_string(rows_) + "x" +
                                               std::to_string(cols_));
  }

  template <typename U>
  static BasicMatrix from(const BasicMatrix<U>& other) {
    std::vector<T> data(other.data().begin(), other.data().end());
    return BasicMatrix(other.rows(), other.cols(), std::move(data));
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T>& storage() noexcept { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  friend bool operator==(const BasicMatrix&, const BasicMatrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<T> data_;
};

using Matrix = BasicMatrix<float>;
using MatrixD = BasicMatrix<double>;

template <typename T>
BasicMatrix<T> identity(std::size_t n) {
  BasicMatrix<T> m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = T{1};
  return m;
}

template <typename T>
BasicMatrix<T> transpose(const BasicMatrix<T>& m) {
  BasicMatrix<T> out(m.cols(), m.rows());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

/// a × b with double accumulation.
template <typename T>
BasicMatrix<T> matmul(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  if (a.cols() != b.rows()) {
    throw ContractViolation("matmul: inner dimensions differ (" + std::to_string(a.cols()) + " vs " +
                            std::to_string(b.rows()) + ")");
  }
  BasicMatrix<T> out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    const auto arow = a.row(i);
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (std::size_t j = 0; j < b.cols(); ++j) acc[j] += aik * static_cast<double>(brow[j]);
    }
    auto orow = out.row(i);
    for (std::size_t j = 0; j < b.cols(); ++j) orow[j] = static_cast<T>(acc[j]);
  }
  return out;
}

/// aᵀ × b, accumulated into `out` (which must be a.cols() x b.cols()).
template <typename T>
void accumulate_tn(const BasicMatrix<T>& a, const BasicMatrix<T>& b, BasicMatrix<T>& out) {
  require(a.rows() == b.rows() && out.rows() == a.cols() && out.cols() == b.cols(), "accumulate_tn: shape mismatch");
  for (std::size_t r = 0; r < a.rows(); ++r) {
    const auto arow = a.row(r);
    const auto brow = b.row(r);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const T ai = arow[i];
      if (ai == T{0}) continue;
      auto orow = out.row(i);
      for (std::size_t j = 0; j < b.cols(); ++j) orow[j] += ai * brow[j];
    }
  }
}

/// a × bᵀ with double accumulation.
template <typename T>
BasicMatrix<T> matmul_nt(const BasicMatrix<T>& a, const BasicMatrix<T>& b) {
  require(a.cols() == b.cols(), "matmul_nt: inner dimensions differ");
  return matmul(a, transpose(b));
}

template <typename T>
void add_inplace(BasicMatrix<T>& target, const BasicMatrix<T>& delta) {
  require(target.rows() == delta.rows() && target.cols() == delta.cols(), "add_inplace: shape mismatch");
  auto t = target.data();
  auto d = delta.data();
  for (std::size_t i = 0; i < t.size(); ++i) t[i] += d[i];
}

/// In-place softmax of one row, max-subtracted.
template <typename T>
void softmax_inplace(std::span<T> row) {
  if (row.empty()) return;
  const double peak = *std::max_element(row.begin(), row.end());
  double total = 0.0;
  for (auto& v : row) {
    const double e = std::exp(static_cast<double>(v) - peak);
    v = static_cast<T>(e);
    total += e;
  }
  for (auto& v : row) v = static_cast<T>(static_cast<double>(v) / total);
}

template <typename T>
BasicMatrix<T> softmax_rows(const BasicMatrix<T>& m) {
  BasicMatrix<T> out = m;
  for (std::size_t r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return out;
}

/// Normalizes one row in place to zero mean / unit variance, then applies gain and bias.
template <typename T>
void layer_norm_row(std::span<const T> in, std::span<const T> gain, std::span<const T> bias, double eps,
                    std::span<T> out) {
  const std::size_t n = in.size();
  double mean = 0.0;
  for (T v : in) mean += v;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (T v : in) var += (v - mean) * (v - mean);
  var /= static_cast<double>(n);
  const double inv = 1.0 / std::sqrt(var + eps);
  for (std::size_t j = 0; j < n; ++j)
    out[j] = static_cast<T>((static_cast<double>(in[j]) - mean) * inv * gain[j] + bias[j]);
}

template <typename T>
BasicMatrix<T> layer_norm(const BasicMatrix<T>& m, std::span<const T> gain, std::span<const T> bias,
                          double eps) {
  require(gain.size() == m.cols() && bias.size() == m.cols(), "layer_norm: gain/bias length != cols");
  require(eps > 0.0, "layer_norm: eps must be positive");
  BasicMatrix<T> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) layer_norm_row(m.row(r), gain, bias, eps, out.row(r));
  return out;
}

}  // namespace entrodrop
