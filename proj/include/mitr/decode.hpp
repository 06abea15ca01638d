#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mitr/model.hpp"

namespace mitr {

// Controlled caption generation: beam search over the caption stream with
// the whole trace visible. Returns token ids without END. Scores are summed
// log-probabilities; ties go to the lower token id. Width 1 is greedy.
std::vector<int> generate_caption(const Mitr& model, const Tensor& regions,
                                  const AlignedTrace& trace, std::size_t beam_width = 5);

std::vector<int> greedy_caption(const Mitr& model, const Tensor& regions,
                                const AlignedTrace& trace);

// Controlled trace generation: one box per caption token, each step fed
// the boxes predicted so far. `caption` holds word ids without END.
AlignedTrace generate_trace(const Mitr& model, const Tensor& regions, std::span<const int> caption);

struct JointOutput {
  std::vector<int> caption;  // without END
  AlignedTrace trace;        // same length as caption
};

// Joint generation from the image alone: one word and one box per step,
// greedy, until END or max_len.
JointOutput generate_joint(const Mitr& model, const Tensor& regions);

}  // namespace mitr
