#include "kse/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "kse/common.hpp"

namespace kse::match {

num::Matrix build_cost_matrix(const std::vector<std::string>& padded_targets,
                              const num::Matrix& slot_probs) {
  const std::size_t n = padded_targets.size();
  std::size_t n_real = 0;
  for (const auto& t : padded_targets)
    if (!t.empty()) ++n_real;
  require(slot_probs.rows == n_real,
          "build_cost_matrix: probability grid rows must match real targets");
  require(slot_probs.cols == n,
          "build_cost_matrix: probability grid columns must match slot count");
  for (double p : slot_probs.data)
    require(p >= 0.0 && p <= 1.0, "build_cost_matrix: probability outside [0, 1]");

  num::Matrix cost(n, n);
  std::size_t grid_row = 0;
  for (std::size_t j = 0; j < n; ++j) {
    if (padded_targets[j].empty()) continue;
    for (std::size_t k = 0; k < n; ++k) cost.at(j, k) = -slot_probs.at(grid_row, k);
    ++grid_row;
  }
  return cost;
}

MatchProblem make_match_problem(const std::vector<std::string>& real_targets,
                                const num::Matrix& slot_probs) {
  for (const auto& t : real_targets)
    require(!t.empty(), "make_match_problem: real target strings must be non-empty");
  require(real_targets.size() <= slot_probs.cols,
          "make_match_problem: more targets than slots");
  std::vector<std::string> padded = real_targets;
  padded.resize(slot_probs.cols);
  return MatchProblem{padded, build_cost_matrix(padded, slot_probs)};
}

namespace {

// Shortest-augmenting-path assignment with dual potentials (Jonker-Volgenant
// style). cost is a dense n x n row-major block.
std::vector<std::size_t> jv_assign(const std::vector<double>& cost, std::size_t n) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);

  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      std::size_t i0 = p[j0], j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
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
      std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<std::size_t> perm(n, 0);
  for (std::size_t j = 1; j <= n; ++j)
    if (p[j] != 0) perm[p[j] - 1] = j - 1;
  return perm;
}

double row_order_total(const num::Matrix& cost, const std::vector<std::size_t>& perm) {
  double total = 0.0;
  for (std::size_t j = 0; j < perm.size(); ++j) total += cost.at(j, perm[j]);
  return total;
}

// Completes a partial assignment: rows 0..fixed-1 already mapped via perm,
// remaining rows solved optimally over the still-free columns.
std::vector<std::size_t> complete_assignment(const num::Matrix& cost,
                                             const std::vector<std::size_t>& perm,
                                             std::size_t fixed) {
  const std::size_t n = cost.rows;
  std::vector<std::size_t> result = perm;
  const std::size_t m = n - fixed;
  if (m == 0) return result;

  std::vector<char> col_taken(n, 0);
  for (std::size_t j = 0; j < fixed; ++j) col_taken[perm[j]] = 1;
  std::vector<std::size_t> free_cols;
  for (std::size_t c = 0; c < n; ++c)
    if (!col_taken[c]) free_cols.push_back(c);

  std::vector<double> sub(m * m);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < m; ++c)
      sub[r * m + c] = cost.at(fixed + r, free_cols[c]);

  std::vector<std::size_t> sub_perm = jv_assign(sub, m);
  for (std::size_t r = 0; r < m; ++r) result[fixed + r] = free_cols[sub_perm[r]];
  return result;
}

}  // namespace

Assignment hungarian_solve(const num::Matrix& cost) {
  require(cost.rows == cost.cols, "hungarian_solve: cost matrix must be square");
  require(cost.rows >= 1, "hungarian_solve: empty cost matrix");
  require(cost.all_finite(), "hungarian_solve: non-finite cost entry");
  const std::size_t n = cost.rows;

  std::vector<std::size_t> incumbent = jv_assign(cost.data, n);
  double best_total = row_order_total(cost, incumbent);

  // Refine toward the lexicographically smallest optimal permutation: fix
  // rows in order, trying every free column and keeping the smallest one
  // whose optimal completion still attains the minimum. The incumbent's own
  // column is carried over verbatim so its exact total stays reachable.
  std::vector<char> col_taken(n, 0);
  for (std::size_t row = 0; row < n; ++row) {
    std::size_t chosen = incumbent[row];
    std::vector<std::size_t> chosen_full = incumbent;
    for (std::size_t c = 0; c < n; ++c) {
      if (col_taken[c] || c == incumbent[row]) continue;
      std::vector<std::size_t> candidate = incumbent;
      candidate[row] = c;
      std::vector<std::size_t> full = complete_assignment(cost, candidate, row + 1);
      double total = row_order_total(cost, full);
      if (total < best_total || (total == best_total && c < chosen)) {
        best_total = total;
        chosen = c;
        chosen_full = full;
      }
    }
    incumbent = chosen_full;
    col_taken[chosen] = 1;
  }

  return Assignment{incumbent, best_total};
}

Assignment brute_force_assignment(const num::Matrix& cost) {
  require(cost.rows == cost.cols, "brute_force_assignment: cost matrix must be square");
  require(cost.rows >= 1, "brute_force_assignment: empty cost matrix");
  require(cost.rows <= 9, "brute_force_assignment: matrix too large for exhaustion");
  const std::size_t n = cost.rows;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::vector<std::size_t> best = idx;
  double best_total = row_order_total(cost, idx);
  while (std::next_permutation(idx.begin(), idx.end())) {
    double total = row_order_total(cost, idx);
    if (total < best_total) {
      best_total = total;
      best = idx;
    }
  }
  return Assignment{best, best_total};
}

}  // namespace kse::match
