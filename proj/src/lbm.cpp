#include "mitr/lbm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mitr/error.hpp"

namespace mitr {

namespace {

constexpr double kForbidden = 1e9;

// floor(a / b) for b > 0.
long long floor_div(long long a, long long b) {
  long long q = a / b;
  if ((a % b != 0) && (a < 0)) {
    --q;
  }
  return q;
}

void require_non_empty(const AlignedTrace& a, const AlignedTrace& b, const char* op) {
  if (a.empty() || b.empty()) {
    throw DataError(std::string(op) + ": traces must be non-empty");
  }
}

bool lexicographic_less(const AlignedTrace& a, const AlignedTrace& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end(),
                                      [](const TraceBox& x, const TraceBox& y) {
                                        return x.channels() < y.channels();
                                      });
}

}  // namespace

double box_distance(const TraceBox& a, const TraceBox& b) {
  return (std::abs(a.x1 - b.x1) + std::abs(a.y1 - b.y1) + std::abs(a.x2 - b.x2) +
          std::abs(a.y2 - b.y2)) /
         4.0;
}

BandMask band_mask(std::size_t q, std::size_t m, std::size_t k) {
  if (q == 0 || m == 0) {
    throw DataError("band_mask: lengths must be positive");
  }
  if (q > m) {
    throw DataError("band_mask: q (" + std::to_string(q) + ") exceeds m (" + std::to_string(m) + ")");
  }
  BandMask band{q, m, std::vector<std::size_t>(q), std::vector<std::size_t>(q)};
  const auto Q = static_cast<long long>(q);
  const auto M = static_cast<long long>(m);
  const auto K = static_cast<long long>(k);
  for (long long i = 0; i < Q; ++i) {
    const long long lo = std::max(0LL, floor_div((i - K) * M, Q));
    // j * q < (i + 1 + k) * m  <=>  j < ceil((i + 1 + k) * m / q)
    const long long hi_num = (i + 1 + K) * M;
    const long long hi = std::min(M, (hi_num + Q - 1) / Q);
    band.begin[static_cast<std::size_t>(i)] = static_cast<std::size_t>(lo);
    band.end[static_cast<std::size_t>(i)] = static_cast<std::size_t>(std::max(lo, hi));
  }
  return band;
}

CostMatrix cost_matrix(const AlignedTrace& a, const AlignedTrace& b) {
  require_non_empty(a, b, "cost_matrix");
  if (a.size() > b.size()) {
    throw DataError("cost_matrix: first trace must not be longer than the second");
  }
  CostMatrix c{a.size(), b.size(), std::vector<double>(a.size() * b.size())};
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t j = 0; j < b.size(); ++j) {
      c.entries[i * b.size() + j] = box_distance(a[i], b[j]);
    }
  }
  return c;
}

Assignment solve_rectangular_assignment(const std::vector<double>& cost, std::size_t rows,
                                        std::size_t cols) {
  if (rows > cols || cost.size() != rows * cols) {
    throw Error("solve_rectangular_assignment: need rows <= cols and a full cost table");
  }
  // Shortest augmenting paths with potentials; 1-based with a virtual column 0.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(rows + 1, 0.0), v(cols + 1, 0.0);
  std::vector<std::size_t> owner(cols + 1, 0), way(cols + 1, 0);
  for (std::size_t i = 1; i <= rows; ++i) {
    owner[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(cols + 1, inf);
    std::vector<char> used(cols + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = owner[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= cols; ++j) {
        if (used[j]) {
          continue;
        }
        const double cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= cols; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  Assignment a(rows, 0);
  for (std::size_t j = 1; j <= cols; ++j) {
    if (owner[j] != 0) {
      a[owner[j] - 1] = j - 1;
    }
  }
  return a;
}

LbmResult lbm_match(const AlignedTrace& gt, const AlignedTrace& pred, std::size_t k) {
  require_non_empty(gt, pred, "lbm_score");
  LbmResult result;
  // Equal lengths: rows go to the lexicographically smaller trace, so that
  // swapping the arguments repeats exactly the same arithmetic.
  result.swapped = gt.size() > pred.size() ||
                   (gt.size() == pred.size() && lexicographic_less(pred, gt));
  const AlignedTrace& shorter = result.swapped ? pred : gt;
  const AlignedTrace& longer = result.swapped ? gt : pred;
  const CostMatrix c = cost_matrix(shorter, longer);
  const BandMask band = band_mask(c.rows, c.cols, k);

  std::vector<double> masked = c.entries;
  for (std::size_t i = 0; i < c.rows; ++i) {
    for (std::size_t j = 0; j < c.cols; ++j) {
      if (!band.allowed(i, j)) {
        masked[i * c.cols + j] = kForbidden;
      }
    }
  }
  result.assignment = solve_rectangular_assignment(masked, c.rows, c.cols);

  double total = 0.0;
  for (std::size_t i = 0; i < c.rows; ++i) {
    const std::size_t j = result.assignment[i];
    if (!band.allowed(i, j)) {
      throw NumericalError("lbm_score: no band-respecting matching exists (row " +
                           std::to_string(i) + ")");
    }
    total += c(i, j);
  }
  result.score = total / static_cast<double>(c.rows);
  return result;
}

double lbm_score(const AlignedTrace& gt, const AlignedTrace& pred, std::size_t k) {
  return lbm_match(gt, pred, k).score;
}

double lbm_brute_force(const AlignedTrace& gt, const AlignedTrace& pred, std::size_t k) {
  require_non_empty(gt, pred, "lbm_brute_force");
  if (gt.size() > 8 || pred.size() > 8) {
    throw DataError("lbm_brute_force: traces longer than 8 are not supported");
  }
  const AlignedTrace& shorter = gt.size() <= pred.size() ? gt : pred;
  const AlignedTrace& longer = gt.size() <= pred.size() ? pred : gt;
  const CostMatrix c = cost_matrix(shorter, longer);
  const BandMask band = band_mask(c.rows, c.cols, k);

  double best = std::numeric_limits<double>::infinity();
  std::vector<char> taken(c.cols, 0);
  auto search = [&](auto&& self, std::size_t row, double acc) -> void {
    if (row == c.rows) {
      best = std::min(best, acc);
      return;
    }
    for (std::size_t j = band.begin[row]; j < band.end[row]; ++j) {
      if (!taken[j]) {
        taken[j] = 1;
        self(self, row + 1, acc + c(row, j));
        taken[j] = 0;
      }
    }
  };
  search(search, 0, 0.0);
  if (!std::isfinite(best)) {
    throw NumericalError("lbm_brute_force: no band-respecting matching exists");
  }
  return best / static_cast<double>(c.rows);
}

double in_order_distance(const AlignedTrace& a, const AlignedTrace& b) {
  require_non_empty(a, b, "in_order_distance");
  if (a.size() != b.size()) {
    throw DataError("in_order_distance: traces differ in length");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    total += box_distance(a[i], b[i]);
  }
  return total / static_cast<double>(a.size());
}

}  // namespace mitr
