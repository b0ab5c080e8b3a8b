#pragma once

#include <vector>

namespace maskseg {

using CostMatrix = std::vector<std::vector<double>>;

struct MatchingResult {
  std::vector<std::size_t> sigma;  // ground-truth row j -> prediction slot sigma[j]
  double total_cost = 0.0;         // summed over j in row order
};

/// Minimum-cost injective assignment of rows to columns (rows <= columns).
/// Among optimal assignments the lexicographically smallest sigma is returned.
MatchingResult hungarian(const CostMatrix& cost);

/// Exhaustive reference solver for small matrices.
MatchingResult brute_force_assignment(const CostMatrix& cost);

}  // namespace maskseg
