#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "mitr/data.hpp"
#include "mitr/model.hpp"
#include "mitr/rng.hpp"

namespace mitr {

// Weights of the four loss terms.
struct LossWeights {
  double trace = 1.0;
  double caption = 0.3;
  double cycle = 0.1;
  double joint = 1.0;

  void validate() const;
};

enum class CycleMode { None, Batch, Segment };

const char* cycle_mode_name(CycleMode mode);

struct TrainConfig {
  double lr = 5e-4;
  double lr_decay = 0.8;
  std::size_t lr_decay_every = 3;  // epochs
  std::size_t batch_size = 30;
  std::size_t epochs = 30;
  std::size_t max_steps = 0;  // 0: no limit
  double replace_prob = 0.5;
  double gumbel_tau = 1.0;
  std::size_t segments = 3;
  CycleMode cycle = CycleMode::None;
  std::size_t eval_every = 0;  // epochs; 0 disables validation metrics
  std::uint64_t seed = 0;

  void validate() const;
};

// Learning rate in effect during `epoch` (0-based).
double learning_rate(const TrainConfig& config, std::size_t epoch);

struct LossBreakdown {
  double total = 0.0;
  double trace = 0.0;
  double caption = 0.0;
  double cycle = 0.0;
  double joint = 0.0;
};

struct LossResult {
  Var total;
  LossBreakdown parts;
};

// Weighted sum of the controlled-trace L1, controlled-caption cross-entropy,
// cycle and joint losses over a batch; each term is a batch mean. Terms with
// zero weight are not evaluated.
LossResult loss_total(Tape& tape, const Mitr& model, std::span<const Example* const> batch,
                      const LossWeights& weights, const TrainConfig& config, Rng& rng);

// Each box independently replaced by the whole-image box with probability p.
AlignedTrace random_box_replacement(const AlignedTrace& trace, double p, Rng& rng);

// Cut into `segments` contiguous near-equal pieces (longer pieces first) and
// reorder them: piece order[i] goes to position i.
AlignedTrace permute_segments(const AlignedTrace& trace, std::size_t segments,
                              std::span<const std::size_t> order);

// Batch mode: trace i of the result is trace perm[i] of the input, perm a
// random cyclic permutation (a derangement). Segment mode: every trace gets
// its segments randomly permuted.
std::vector<AlignedTrace> manipulate_trace(std::span<const AlignedTrace> traces, CycleMode mode,
                                           std::size_t segments, Rng& rng);

// softmax((logits + noise) / tau), row-wise.
Var gumbel_softmax(Var logits, const Tensor& noise, double tau);
Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng);

// Cycle loss over a batch: manipulated trace -> controlled caption ->
// relaxed words -> controlled trace -> L1 to the manipulated trace.
Var cycle_step(Tape& tape, const Mitr& model, std::span<const Example* const> batch,
               const TrainConfig& config, Rng& rng);

struct MetricRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
  double lr = 0.0;
};

struct ValidationRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double caption_accuracy = 0.0;
  double trace_lbm_k0 = 0.0;
  double caption_bleu4 = 0.0;
};

struct TrainResult {
  std::vector<MetricRecord> steps;
  std::vector<ValidationRecord> validation;
  std::vector<std::string> warnings;
};

// JSON line for the metrics log.
std::string metric_json(const MetricRecord& r);
std::string validation_json(const ValidationRecord& r);

// Epoch loop with Adam and the step-decay schedule. Deterministic for a
// given seed. Throws NumericalError on a non-finite loss.
TrainResult train(Mitr& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& config, const LossWeights& weights,
                  std::ostream* log = nullptr);

// Fraction of caption tokens (END included) predicted correctly under
// teacher forcing in controlled-caption mode.
double teacher_forced_accuracy(const Mitr& model, std::span<const Example> data);

// Mean LBM between generated and reference word traces (controlled trace
// generation from the reference caption).
double trace_generation_lbm(const Mitr& model, std::span<const Example> data, std::size_t k);

// Same, for the joint task (caption and trace generated from the image).
double joint_generation_lbm(const Mitr& model, std::span<const Example> data, std::size_t k);

// LBM of predicting the whole-image box for every word.
double whole_image_baseline_lbm(std::span<const Example> data, std::size_t k);

}  // namespace mitr
