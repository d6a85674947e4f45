#pragma once

// Test-only oracles, independent of the library implementations they check:
// a dense linear solver for stationary walk distributions and a full-sort
// recall evaluator.

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <vector>

namespace oracle {

// Solves A x = b by Gaussian elimination with partial pivoting.
inline std::vector<double> solve_dense(std::vector<std::vector<double>> a,
                                       std::vector<double> b) {
  size_t n = b.size();
  for (size_t col = 0; col < n; ++col) {
    size_t piv = col;
    for (size_t r = col + 1; r < n; ++r)
      if (std::abs(a[r][col]) > std::abs(a[piv][col])) piv = r;
    if (std::abs(a[piv][col]) < 1e-14) throw std::runtime_error("singular system");
    std::swap(a[piv], a[col]);
    std::swap(b[piv], b[col]);
    for (size_t r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = a[r][col] / a[col][col];
      if (f == 0.0) continue;
      for (size_t c = col; c < n; ++c) a[r][c] -= f * a[col][c];
      b[r] -= f * b[col];
    }
  }
  std::vector<double> x(n);
  for (size_t i = 0; i < n; ++i) x[i] = b[i] / a[i][i];
  return x;
}

// Stationary distribution of a row-stochastic transition matrix: solves
// pi^T M = pi^T with sum(pi) = 1 by replacing the last equation.
inline std::vector<double> stationary(const std::vector<std::vector<double>>& m) {
  size_t n = m.size();
  std::vector<std::vector<double>> a(n, std::vector<double>(n, 0.0));
  std::vector<double> b(n, 0.0);
  for (size_t i = 0; i < n; ++i)
    for (size_t j = 0; j < n; ++j) a[i][j] = m[j][i] - (i == j ? 1.0 : 0.0);
  for (size_t j = 0; j < n; ++j) a[n - 1][j] = 1.0;
  b[n - 1] = 1.0;
  return solve_dense(std::move(a), std::move(b));
}

// Recall@n by brute force: fully sorts all item scores (score desc, index
// asc) and scans the top n for the target.
inline double brute_force_recall(
    const std::vector<std::pair<std::vector<double>, int>>& scored_instances,
    int n) {
  if (scored_instances.empty()) return 0.0;
  size_t hits = 0;
  for (const auto& [scores, target] : scored_instances) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      if (scores[size_t(a)] != scores[size_t(b)]) return scores[size_t(a)] > scores[size_t(b)];
      return a < b;
    });
    size_t top = std::min(size_t(n), order.size());
    for (size_t i = 0; i < top; ++i)
      if (order[i] == target) {
        ++hits;
        break;
      }
  }
  return double(hits) / double(scored_instances.size());
}

}  // namespace oracle
