#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kse/numerics.hpp"

namespace kse::match {

// Padded target-to-slot assignment problem. Targets are object strings; an
// empty string marks a padding slot that may be matched at zero cost.
struct MatchProblem {
  std::vector<std::string> targets;  // size N, "" for padding
  num::Matrix cost;                  // N x N
};

struct Assignment {
  std::vector<std::size_t> perm;  // perm[row] = assigned column
  double total_cost = 0.0;
};

// slot_probs is (real targets x N slots) with entries in [0, 1]. Returns the
// N x N cost matrix: -P for real-target rows, all-zero rows for padding.
// padded_targets supplies the padding layout; its non-empty entries must
// correspond row-by-row to slot_probs.
num::Matrix build_cost_matrix(const std::vector<std::string>& padded_targets,
                              const num::Matrix& slot_probs);

// Pads real_targets with "" up to the slot count and builds the cost matrix.
MatchProblem make_match_problem(const std::vector<std::string>& real_targets,
                                const num::Matrix& slot_probs);

// Minimum-cost perfect matching on a square finite matrix in O(N^3), with
// ties broken toward the lexicographically smallest permutation.
Assignment hungarian_solve(const num::Matrix& cost);

// Exhaustive minimum over all N! permutations (N <= 9). Keeps the first
// permutation in lexicographic order that attains the minimal total.
Assignment brute_force_assignment(const num::Matrix& cost);

}  // namespace kse::match
