#include "mitr/training.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

#include <json.hpp>

#include "mitr/decode.hpp"
#include "mitr/error.hpp"
#include "mitr/lbm.hpp"
#include "mitr/metrics.hpp"

namespace mitr {

void LossWeights::validate() const {
  for (double w : {trace, caption, cycle, joint}) {
    if (!(w >= 0.0 && w <= 1.0)) {
      throw UsageError("loss weights must lie in [0, 1]");
    }
  }
}

const char* cycle_mode_name(CycleMode mode) {
  switch (mode) {
    case CycleMode::None: return "none";
    case CycleMode::Batch: return "cycle_b";
    case CycleMode::Segment: return "cycle_s";
  }
  return "?";
}

void TrainConfig::validate() const {
  if (!(replace_prob >= 0.0 && replace_prob <= 1.0)) {
    throw UsageError("train config: replacement probability must lie in [0, 1]");
  }
  if (!(gumbel_tau > 0.0)) {
    throw UsageError("train config: gumbel temperature must be positive");
  }
  if (segments < 1) {
    throw UsageError("train config: segment count must be at least 1");
  }
  if (batch_size < 1) {
    throw UsageError("train config: batch size must be at least 1");
  }
  if (!(lr >= 0.0) || !(lr_decay > 0.0) || lr_decay_every < 1) {
    throw UsageError("train config: invalid learning-rate schedule");
  }
}

double learning_rate(const TrainConfig& config, std::size_t epoch) {
  return config.lr * std::pow(config.lr_decay, static_cast<double>(epoch / config.lr_decay_every));
}

// ---------------------------------------------------------------- manipulations

AlignedTrace random_box_replacement(const AlignedTrace& trace, double p, Rng& rng) {
  if (!(p >= 0.0 && p <= 1.0)) {
    throw UsageError("random_box_replacement: probability must lie in [0, 1]");
  }
  AlignedTrace out = trace;
  for (TraceBox& b : out) {
    if (rng.bernoulli(p)) {
      b = TraceBox::whole_image();
    }
  }
  return out;
}

AlignedTrace permute_segments(const AlignedTrace& trace, std::size_t segments,
                              std::span<const std::size_t> order) {
  if (segments < 1 || trace.size() < segments) {
    throw DataError("permute_segments: trace of length " + std::to_string(trace.size()) +
                    " cannot be cut into " + std::to_string(segments) + " segments");
  }
  if (order.size() != segments) {
    throw DataError("permute_segments: order must list every segment once");
  }
  std::vector<char> seen(segments, 0);
  for (std::size_t s : order) {
    if (s >= segments || seen[s]) {
      throw DataError("permute_segments: order is not a permutation");
    }
    seen[s] = 1;
  }
  const std::size_t base = trace.size() / segments;
  const std::size_t extra = trace.size() % segments;
  std::vector<std::size_t> begin(segments + 1, 0);
  for (std::size_t s = 0; s < segments; ++s) {
    begin[s + 1] = begin[s] + base + (s < extra ? 1 : 0);
  }
  AlignedTrace out;
  out.reserve(trace.size());
  for (std::size_t s : order) {
    out.insert(out.end(), trace.begin() + static_cast<std::ptrdiff_t>(begin[s]),
               trace.begin() + static_cast<std::ptrdiff_t>(begin[s + 1]));
  }
  return out;
}

std::vector<AlignedTrace> manipulate_trace(std::span<const AlignedTrace> traces, CycleMode mode,
                                           std::size_t segments, Rng& rng) {
  std::vector<AlignedTrace> out;
  switch (mode) {
    case CycleMode::None:
      out.assign(traces.begin(), traces.end());
      break;
    case CycleMode::Batch: {
      if (traces.size() < 2) {
        throw DataError("manipulate_trace: batch switching needs at least two traces");
      }
      // Sattolo's algorithm: a uniformly random single cycle, hence no fixed point.
      std::vector<std::size_t> perm(traces.size());
      for (std::size_t i = 0; i < perm.size(); ++i) {
        perm[i] = i;
      }
      for (std::size_t i = perm.size() - 1; i > 0; --i) {
        std::swap(perm[i], perm[rng.index(i)]);
      }
      for (std::size_t i = 0; i < perm.size(); ++i) {
        out.push_back(traces[perm[i]]);
      }
      break;
    }
    case CycleMode::Segment: {
      for (const AlignedTrace& t : traces) {
        std::vector<std::size_t> order(segments);
        for (std::size_t s = 0; s < segments; ++s) {
          order[s] = s;
        }
        rng.shuffle(order);
        out.push_back(permute_segments(t, segments, order));
      }
      break;
    }
  }
  return out;
}

// ---------------------------------------------------------------- gumbel

Tensor sample_gumbel(std::size_t rows, std::size_t cols, Rng& rng) {
  Tensor g(rows, cols);
  for (double& v : g.data) {
    double u = rng.uniform();
    while (u <= 0.0) {
      u = rng.uniform();
    }
    v = -std::log(-std::log(u));
  }
  return g;
}

Var gumbel_softmax(Var logits, const Tensor& noise, double tau) {
  if (!(tau > 0.0)) {
    throw UsageError("gumbel_softmax: temperature must be positive");
  }
  return masked_softmax(scale(add(logits, logits.tape->constant(noise)), 1.0 / tau));
}

// ---------------------------------------------------------------- losses

namespace {

Var mean_of(Tape& tape, const std::vector<Var>& terms) {
  if (terms.empty()) {
    return tape.constant(Tensor::scalar(0.0));
  }
  Var acc = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) {
    acc = add(acc, terms[i]);
  }
  return scale(acc, 1.0 / static_cast<double>(terms.size()));
}

// Caption of exactly `length` tokens, greedy, under controlled-caption masking.
std::vector<int> forced_length_caption(const Mitr& model, const Tensor& memory,
                                       const Tensor& trace_in, std::size_t length) {
  std::vector<int> tokens;
  for (std::size_t step = 0; step < length; ++step) {
    Tape scratch(&model.params());
    CaptionInput in;
    in.ids.push_back(Vocabulary::kBos);
    in.ids.insert(in.ids.end(), tokens.begin(), tokens.end());
    const auto out = model.decode(scratch, TaskMode::ControlledCaption, scratch.constant(memory), in,
                                  trace_in);
    const Tensor& logits = out.word_logits.value();
    int best = Vocabulary::kEnd;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      const int id = static_cast<int>(j);
      if (id != Vocabulary::kPad && id != Vocabulary::kBos &&
          logits(step, j) > logits(step, static_cast<std::size_t>(best))) {
        best = id;
      }
    }
    tokens.push_back(best);
  }
  return tokens;
}

std::optional<Var> cycle_loss(Tape& tape, const Mitr& model, std::span<const Example* const> batch,
                              std::span<const Var> images, const TrainConfig& config, Rng& rng) {
  if (config.cycle == CycleMode::None) {
    return std::nullopt;
  }
  if (config.cycle == CycleMode::Batch && batch.size() < 2) {
    return std::nullopt;
  }
  std::vector<AlignedTrace> words;
  words.reserve(batch.size());
  for (const Example* ex : batch) {
    words.push_back(ex->word_trace());
  }
  std::vector<AlignedTrace> manipulated;
  if (config.cycle == CycleMode::Segment) {
    for (const AlignedTrace& w : words) {
      const std::size_t s = std::min(config.segments, w.size());
      const AlignedTrace one[] = {w};
      manipulated.push_back(manipulate_trace(one, CycleMode::Segment, s, rng)[0]);
    }
  } else {
    manipulated = manipulate_trace(words, config.cycle, config.segments, rng);
  }

  std::vector<Var> terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    AlignedTrace target = manipulated[i];
    target.push_back(TraceBox::whole_image());
    const Tensor target_t = boxes_to_tensor(target);
    const std::size_t n = target.size();

    const std::vector<int> words_hat =
        forced_length_caption(model, images[i].value(), target_t, n);
    CaptionInput in;
    in.ids.push_back(Vocabulary::kBos);
    in.ids.insert(in.ids.end(), words_hat.begin(), words_hat.end() - 1);
    const auto caption_out = model.decode(tape, TaskMode::ControlledCaption, images[i], in, target_t);
    const Tensor noise = sample_gumbel(n, model.config().vocab_size, rng);
    CaptionInput soft;
    soft.soft = gumbel_softmax(caption_out.word_logits, noise, config.gumbel_tau);
    const auto trace_out = model.forward(tape, TaskMode::ControlledTrace, images[i], soft, target_t);
    terms.push_back(l1_loss(trace_out.boxes, target_t));
  }
  return mean_of(tape, terms);
}

}  // namespace

Var cycle_step(Tape& tape, const Mitr& model, std::span<const Example* const> batch,
               const TrainConfig& config, Rng& rng) {
  if (batch.empty()) {
    throw DataError("cycle_step: empty batch");
  }
  std::vector<Var> images;
  for (const Example* ex : batch) {
    images.push_back(model.encode_image(tape, ex->regions));
  }
  auto loss = cycle_loss(tape, model, batch, images, config, rng);
  return loss ? *loss : tape.constant(Tensor::scalar(0.0));
}

LossResult loss_total(Tape& tape, const Mitr& model, std::span<const Example* const> batch,
                      const LossWeights& weights, const TrainConfig& config, Rng& rng) {
  if (batch.empty()) {
    throw DataError("loss_total: empty batch");
  }
  const bool any = weights.trace > 0.0 || weights.caption > 0.0 || weights.joint > 0.0 ||
                   (weights.cycle > 0.0 && config.cycle != CycleMode::None);
  LossResult result;
  if (!any) {
    result.total = tape.constant(Tensor::scalar(0.0));
    return result;
  }

  std::vector<Var> images;
  images.reserve(batch.size());
  for (const Example* ex : batch) {
    images.push_back(model.encode_image(tape, ex->regions));
  }

  std::vector<Var> trace_terms, caption_terms, joint_terms;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const Example& ex = *batch[i];
    const Tensor target = boxes_to_tensor(ex.trace);
    CaptionInput cap;
    cap.ids = ex.caption;
    if (weights.trace > 0.0) {
      const auto out = model.forward(tape, TaskMode::ControlledTrace, images[i], cap, target);
      trace_terms.push_back(l1_loss(out.boxes, target));
    }
    if (weights.caption > 0.0) {
      const auto out = model.forward(tape, TaskMode::ControlledCaption, images[i], cap, target);
      caption_terms.push_back(cross_entropy(out.word_logits, ex.caption));
    }
    if (weights.joint > 0.0) {
      const Tensor fed = boxes_to_tensor(random_box_replacement(ex.trace, config.replace_prob, rng));
      const auto out = model.forward(tape, TaskMode::Joint, images[i], cap, fed);
      joint_terms.push_back(add(cross_entropy(out.word_logits, ex.caption), l1_loss(out.boxes, target)));
    }
  }

  std::vector<Var> weighted;
  auto include = [&](double w, std::optional<Var> term, double& slot) {
    if (!term) {
      return;
    }
    slot = term->value().item();
    weighted.push_back(scale(*term, w));
  };
  if (weights.trace > 0.0) {
    include(weights.trace, mean_of(tape, trace_terms), result.parts.trace);
  }
  if (weights.caption > 0.0) {
    include(weights.caption, mean_of(tape, caption_terms), result.parts.caption);
  }
  if (weights.cycle > 0.0) {
    include(weights.cycle, cycle_loss(tape, model, batch, images, config, rng), result.parts.cycle);
  }
  if (weights.joint > 0.0) {
    include(weights.joint, mean_of(tape, joint_terms), result.parts.joint);
  }
  Var total = weighted.empty() ? tape.constant(Tensor::scalar(0.0)) : weighted[0];
  for (std::size_t i = 1; i < weighted.size(); ++i) {
    total = add(total, weighted[i]);
  }
  result.total = total;
  result.parts.total = total.value().item();
  return result;
}

// ---------------------------------------------------------------- evaluation

double teacher_forced_accuracy(const Mitr& model, std::span<const Example> data) {
  std::size_t correct = 0;
  std::size_t total = 0;
  for (const Example& ex : data) {
    Tape tape(&model.params());
    const auto out = model.forward(tape, TaskMode::ControlledCaption, ex.regions, ex.caption, ex.trace);
    const Tensor& logits = out.word_logits.value();
    for (std::size_t t = 0; t < ex.caption.size(); ++t) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < logits.cols(); ++j) {
        if (logits(t, j) > logits(t, best)) {
          best = j;
        }
      }
      correct += static_cast<int>(best) == ex.caption[t] ? 1 : 0;
      ++total;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
}

double trace_generation_lbm(const Mitr& model, std::span<const Example> data, std::size_t k) {
  if (data.empty()) {
    return 0.0;
  }
  double sum = 0.0;
  for (const Example& ex : data) {
    sum += lbm_score(ex.word_trace(), generate_trace(model, ex.regions, ex.words()), k);
  }
  return sum / static_cast<double>(data.size());
}

double joint_generation_lbm(const Mitr& model, std::span<const Example> data, std::size_t k) {
  if (data.empty()) {
    return 0.0;
  }
  double sum = 0.0;
  for (const Example& ex : data) {
    AlignedTrace pred = generate_joint(model, ex.regions).trace;
    if (pred.empty()) {
      pred.push_back(TraceBox::whole_image());
    }
    sum += lbm_score(ex.word_trace(), pred, k);
  }
  return sum / static_cast<double>(data.size());
}

double whole_image_baseline_lbm(std::span<const Example> data, std::size_t k) {
  if (data.empty()) {
    return 0.0;
  }
  double sum = 0.0;
  for (const Example& ex : data) {
    const AlignedTrace gt = ex.word_trace();
    sum += lbm_score(gt, AlignedTrace(gt.size(), TraceBox::whole_image()), k);
  }
  return sum / static_cast<double>(data.size());
}

namespace {

ValidationRecord validate_model(const Mitr& model, std::span<const Example> val, std::size_t step,
                                std::size_t epoch) {
  ValidationRecord v;
  v.step = step;
  v.epoch = epoch;
  v.caption_accuracy = teacher_forced_accuracy(model, val);
  v.trace_lbm_k0 = trace_generation_lbm(model, val, 0);
  std::vector<Tokens> cands;
  std::vector<std::vector<Tokens>> refs;
  for (const Example& ex : val) {
    const auto ids = greedy_caption(model, ex.regions, ex.word_trace());
    cands.push_back(model.vocab().decode(ids));
    refs.push_back({model.vocab().decode(ex.caption)});
  }
  v.caption_bleu4 = corpus_bleu(cands, refs, 4);
  return v;
}

}  // namespace

std::string metric_json(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["L_total"] = r.loss.total;
  j["L_trace"] = r.loss.trace;
  j["L_caption"] = r.loss.caption;
  j["L_cycle"] = r.loss.cycle;
  j["L_joint"] = r.loss.joint;
  j["lr"] = r.lr;
  return j.dump();
}

std::string validation_json(const ValidationRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["val_caption_accuracy"] = r.caption_accuracy;
  j["val_lbm_k0"] = r.trace_lbm_k0;
  j["val_bleu4"] = r.caption_bleu4;
  return j.dump();
}

TrainResult train(Mitr& model, std::span<const Example> train_set, std::span<const Example> val_set,
                  const TrainConfig& config, const LossWeights& weights, std::ostream* log) {
  config.validate();
  weights.validate();
  if (train_set.empty()) {
    throw DataError("train: empty training set");
  }
  TrainResult result;
  if (config.cycle == CycleMode::Batch && weights.cycle > 0.0 &&
      (config.batch_size < 2 || train_set.size() < 2)) {
    result.warnings.push_back("batch switching needs two traces per batch; cycle loss skipped");
  }

  Rng rng(config.seed);
  AdamState adam = AdamState::zeros_like(model.params());
  std::vector<std::size_t> order(train_set.size());
  for (std::size_t i = 0; i < order.size(); ++i) {
    order[i] = i;
  }

  std::size_t step = 0;
  bool done = false;
  for (std::size_t epoch = 0; epoch < config.epochs && !done; ++epoch) {
    const double lr = learning_rate(config, epoch);
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size() && !done; start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<const Example*> batch;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train_set[order[i]]);
      }
      Tape tape(&model.params());
      const LossResult loss = loss_total(tape, model, batch, weights, config, rng);
      if (!std::isfinite(loss.parts.total)) {
        throw NumericalError("train: non-finite loss at step " + std::to_string(step) + " (trace " +
                             std::to_string(loss.parts.trace) + ", caption " +
                             std::to_string(loss.parts.caption) + ", cycle " +
                             std::to_string(loss.parts.cycle) + ", joint " +
                             std::to_string(loss.parts.joint) + ")");
      }
      const Gradients grads = tape.backward(loss.total);
      adam_step(model.params(), grads, adam, lr);

      MetricRecord rec{step, epoch, loss.parts, lr};
      if (log != nullptr) {
        *log << metric_json(rec) << '\n';
      }
      result.steps.push_back(rec);
      ++step;
      if (config.max_steps > 0 && step >= config.max_steps) {
        done = true;
      }
    }
    const bool last = done || epoch + 1 == config.epochs;
    if (!val_set.empty() && config.eval_every > 0 && ((epoch + 1) % config.eval_every == 0 || last)) {
      result.validation.push_back(validate_model(model, val_set, step, epoch));
      if (log != nullptr) {
        *log << validation_json(result.validation.back()) << '\n';
      }
    }
  }
  return result;
}

}  // namespace mitr
