#pragma once

#include <string>
#include <vector>

namespace mitr {

struct SelftestCheck {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Quick built-in suites: LBM against brute force, band fixture, gradient
// check on a tiny model, mask leakage for every task, Gumbel-softmax rows,
// metric maxima, checkpoint round-trip.
std::vector<SelftestCheck> run_selftest();

}  // namespace mitr
