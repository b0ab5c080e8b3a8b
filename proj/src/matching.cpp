#include "maskseg/matching.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <stdexcept>

namespace maskseg {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

/// Shortest-augmenting-path solver with potentials, O(n^2 m).
/// Returns the column for each of rows[0..n).
std::vector<std::size_t> solve(const CostMatrix& a, const std::vector<std::size_t>& rows,
                               const std::vector<std::size_t>& cols) {
  const std::size_t n = rows.size(), m = cols.size();
  std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
  std::vector<std::size_t> p(m + 1, 0), way(m + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(m + 1, kInf);
    std::vector<bool> used(m + 1, false);
    do {
      used[j0] = true;
      const std::size_t i0 = p[j0];
      double delta = kInf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= m; ++j) {
        if (used[j]) continue;
        const double cur = a[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= m; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<std::size_t> out(n);
  for (std::size_t j = 1; j <= m; ++j)
    if (p[j]) out[p[j] - 1] = cols[j - 1];
  return out;
}

double row_sum(const CostMatrix& a, const std::vector<std::size_t>& rows, const std::vector<std::size_t>& assign) {
  double s = 0.0;
  for (std::size_t k = 0; k < rows.size(); ++k) s += a[rows[k]][assign[k]];
  return s;
}

void check(const CostMatrix& cost) {
  if (cost.empty()) return;
  const std::size_t m = cost[0].size();
  for (const auto& r : cost) {
    if (r.size() != m) throw std::invalid_argument("hungarian: ragged cost matrix");
    for (double c : r)
      if (!std::isfinite(c)) throw std::invalid_argument("hungarian: non-finite cost");
  }
  if (cost.size() > m)
    throw std::invalid_argument("hungarian: " + std::to_string(cost.size()) + " ground-truth segments but only " +
                                std::to_string(m) + " prediction slots");
}

}  // namespace

MatchingResult hungarian(const CostMatrix& cost) {
  check(cost);
  MatchingResult r;
  if (cost.empty()) return r;
  const std::size_t n = cost.size(), m = cost[0].size();
  std::vector<std::size_t> all_rows(n), all_cols(m);
  for (std::size_t i = 0; i < n; ++i) all_rows[i] = i;
  for (std::size_t j = 0; j < m; ++j) all_cols[j] = j;
  const double best = row_sum(cost, all_rows, solve(cost, all_rows, all_cols));
  double mag = 1.0;
  for (const auto& row : cost)
    for (double c : row) mag = std::max(mag, std::fabs(c));
  const double tol = 1e-12 * mag * static_cast<double>(n);

  // Fix rows in order to the smallest column that keeps the optimum reachable.
  std::vector<bool> taken(m, false);
  double prefix = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    std::vector<std::size_t> rest_rows;
    for (std::size_t k = j + 1; k < n; ++k) rest_rows.push_back(k);
    bool fixed = false;
    for (std::size_t c = 0; c < m && !fixed; ++c) {
      if (taken[c]) continue;
      std::vector<std::size_t> rest_cols;
      for (std::size_t k = 0; k < m; ++k)
        if (!taken[k] && k != c) rest_cols.push_back(k);
      const double sub = rest_rows.empty() ? 0.0 : row_sum(cost, rest_rows, solve(cost, rest_rows, rest_cols));
      if (prefix + cost[j][c] + sub <= best + tol) {
        r.sigma.push_back(c);
        taken[c] = true;
        prefix += cost[j][c];
        fixed = true;
      }
    }
    if (!fixed) throw std::logic_error("hungarian: tie-break lost the optimum");
  }
  for (std::size_t j = 0; j < n; ++j) r.total_cost += cost[j][r.sigma[j]];
  return r;
}

MatchingResult brute_force_assignment(const CostMatrix& cost) {
  check(cost);
  MatchingResult best;
  if (cost.empty()) return best;
  const std::size_t n = cost.size(), m = cost[0].size();
  best.total_cost = kInf;
  std::vector<std::size_t> cur(n);
  std::vector<bool> used(m, false);
  std::function<void(std::size_t)> rec = [&](std::size_t j) {
    if (j == n) {
      double s = 0.0;
      for (std::size_t k = 0; k < n; ++k) s += cost[k][cur[k]];
      if (s < best.total_cost) {  // strict: first (lexicographically smallest) optimum wins
        best.total_cost = s;
        best.sigma = cur;
      }
      return;
    }
    for (std::size_t c = 0; c < m; ++c) {
      if (used[c]) continue;
      used[c] = true;
      cur[j] = c;
      rec(j + 1);
      used[c] = false;
    }
  };
  rec(0);
  return best;
}

}  // namespace maskseg
