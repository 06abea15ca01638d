#pragma once

// Local Bipartite Matching distance between two ordered box sequences.
//
// For traces of lengths q <= m, row i of the shorter trace may only be
// matched to columns j of the longer one with
//     floor((i - k) * m / q) <= j < (i + 1 + k) * m / q,
// every row exactly once and every column at most once. The score is the
// optimal total cost divided by q, where the cost of a pair is the mean
// L1 distance over (x1, y1, x2, y2).
//
// The constraint matrix is that of a transportation problem, so an
// integral optimum exists and the linear program reduces to a rectangular
// assignment problem with forbidden edges.

#include <cstddef>
#include <vector>

#include "mitr/trace.hpp"

namespace mitr {

// Row-major q x m table of the per-pair costs.
struct CostMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;

  double operator()(std::size_t i, std::size_t j) const { return entries[i * cols + j]; }
};

// Per row, the half-open column range [begin, end) a row may match.
struct BandMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> begin;
  std::vector<std::size_t> end;

  bool allowed(std::size_t i, std::size_t j) const { return j >= begin[i] && j < end[i]; }
};

// row -> matched column.
using Assignment = std::vector<std::size_t>;

// Mean L1 distance over the four coordinates; the area channel is ignored.
double box_distance(const TraceBox& a, const TraceBox& b);

BandMask band_mask(std::size_t q, std::size_t m, std::size_t k);

// `a` must be the shorter (or equal length) trace.
CostMatrix cost_matrix(const AlignedTrace& a, const AlignedTrace& b);

struct LbmResult {
  double score = 0.0;
  Assignment assignment;  // rows of the shorter trace
  bool swapped = false;   // true when the rows are the predicted trace
};

LbmResult lbm_match(const AlignedTrace& gt, const AlignedTrace& pred, std::size_t k);

double lbm_score(const AlignedTrace& gt, const AlignedTrace& pred, std::size_t k);

// Exhaustive search over band-respecting injective assignments; q, m <= 8.
double lbm_brute_force(const AlignedTrace& gt, const AlignedTrace& pred, std::size_t k);

// Mean in-order box distance for equal-length traces.
double in_order_distance(const AlignedTrace& a, const AlignedTrace& b);

// Minimum-cost assignment of every row of a rows x cols matrix (rows <= cols)
// to a distinct column, by shortest augmenting paths.
Assignment solve_rectangular_assignment(const std::vector<double>& cost, std::size_t rows,
                                        std::size_t cols);

}  // namespace mitr
