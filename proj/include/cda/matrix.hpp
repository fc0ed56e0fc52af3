#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "cda/common.hpp"

namespace cda {

// Dense row-major matrix of doubles. Small, value-semantic; all linear
// algebra in this project is explicit loops over this type.
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), 0.0) {}

  double& operator()(int i, int j) {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)];
  }
  double operator()(int i, int j) const {
    return data[static_cast<std::size_t>(i) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(j)];
  }

  std::span<double> row(int i) {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(cols), static_cast<std::size_t>(cols)};
  }
  std::span<const double> row(int i) const {
    return {data.data() + static_cast<std::size_t>(i) * static_cast<std::size_t>(cols), static_cast<std::size_t>(cols)};
  }

  bool empty() const { return rows == 0 || cols == 0; }
};

inline bool all_finite(const Matrix& m) {
  for (double v : m.data)
    if (!std::isfinite(v)) return false;
  return true;
}

inline Matrix vstack(const std::vector<Matrix>& parts) {
  Matrix out;
  if (parts.empty()) return out;
  int cols = parts.front().cols;
  int rows = 0;
  for (const Matrix& p : parts) {
    require(p.cols == cols, "vstack: column mismatch");
    rows += p.rows;
  }
  out = Matrix(rows, cols);
  int at = 0;
  for (const Matrix& p : parts) {
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(at) * cols);
    at += p.rows;
  }
  return out;
}

inline Matrix take_rows(const Matrix& m, const std::vector<int>& idx) {
  Matrix out(static_cast<int>(idx.size()), m.cols);
  for (int i = 0; i < out.rows; ++i) {
    auto src = m.row(idx[static_cast<std::size_t>(i)]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace cda
