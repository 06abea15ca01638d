#include "mitr/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mitr/error.hpp"

namespace mitr {

namespace {

Tensor image_memory(const Mitr& model, const Tensor& regions) {
  Tape tape(&model.params());
  return model.encode_image(tape, regions).value();
}

Tensor trace_with_end(const AlignedTrace& trace) {
  AlignedTrace t = trace;
  t.push_back(TraceBox::whole_image());
  return boxes_to_tensor(t);
}

Tensor shifted_boxes(const AlignedTrace& prefix) {
  AlignedTrace t;
  t.reserve(prefix.size() + 1);
  t.push_back(TraceBox::whole_image());
  t.insert(t.end(), prefix.begin(), prefix.end());
  return boxes_to_tensor(t);
}

bool selectable(int id) { return id != Vocabulary::kPad && id != Vocabulary::kBos; }

// Log-softmax of one row of logits.
std::vector<double> log_probs(const Tensor& logits, std::size_t row) {
  std::vector<double> out(logits.cols());
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    mx = std::max(mx, logits(row, j));
  }
  double z = 0.0;
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    z += std::exp(logits(row, j) - mx);
  }
  const double lz = mx + std::log(z);
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    out[j] = logits(row, j) - lz;
  }
  return out;
}

// Highest log-probability selectable word; the lowest id wins ties.
int argmax_word(const Tensor& logits, std::size_t row) {
  const auto lp = log_probs(logits, row);
  int best = -1;
  for (std::size_t j = 0; j < lp.size(); ++j) {
    const int id = static_cast<int>(j);
    if (selectable(id) && (best < 0 || lp[j] > lp[static_cast<std::size_t>(best)])) {
      best = id;
    }
  }
  return best;
}

}  // namespace

std::vector<int> generate_caption(const Mitr& model, const Tensor& regions,
                                  const AlignedTrace& trace, std::size_t beam_width) {
  if (trace.empty()) {
    throw DataError("generate_caption: empty trace");
  }
  if (beam_width == 0) {
    throw UsageError("generate_caption: beam width must be positive");
  }
  const Tensor memory = image_memory(model, regions);
  const Tensor trace_in = trace_with_end(trace);

  struct Hyp {
    std::vector<int> tokens;
    double logp = 0.0;
  };
  struct Candidate {
    std::size_t beam;
    int token;
    double logp;
  };
  std::vector<Hyp> active{Hyp{}};
  std::vector<Hyp> done;

  for (std::size_t step = 0; step < model.config().max_len && !active.empty(); ++step) {
    std::vector<Candidate> cands;
    for (std::size_t b = 0; b < active.size(); ++b) {
      Tape tape(&model.params());
      CaptionInput in;
      in.ids.push_back(Vocabulary::kBos);
      in.ids.insert(in.ids.end(), active[b].tokens.begin(), active[b].tokens.end());
      const auto out =
          model.decode(tape, TaskMode::ControlledCaption, tape.constant(memory), in, trace_in);
      const auto lp = log_probs(out.word_logits.value(), step);
      for (std::size_t v = 0; v < lp.size(); ++v) {
        if (selectable(static_cast<int>(v))) {
          cands.push_back({b, static_cast<int>(v), active[b].logp + lp[v]});
        }
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
      if (a.logp != b.logp) {
        return a.logp > b.logp;
      }
      return a.token < b.token;
    });
    std::vector<Hyp> next;
    for (std::size_t c = 0; c < cands.size() && c < beam_width; ++c) {
      Hyp h{active[cands[c].beam].tokens, cands[c].logp};
      if (cands[c].token == Vocabulary::kEnd) {
        done.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[c].token);
        next.push_back(std::move(h));
      }
    }
    active = std::move(next);
    if (!done.empty() && !active.empty()) {
      // Scores only decrease, so no active hypothesis can overtake a finished one.
      double best_done = -std::numeric_limits<double>::infinity();
      for (const Hyp& h : done) {
        best_done = std::max(best_done, h.logp);
      }
      const bool settled = std::all_of(active.begin(), active.end(),
                                       [&](const Hyp& h) { return h.logp <= best_done; });
      if (settled) {
        break;
      }
    }
  }

  const std::vector<Hyp>& pool = done.empty() ? active : done;
  const Hyp* best = nullptr;
  for (const Hyp& h : pool) {
    if (best == nullptr || h.logp > best->logp) {
      best = &h;
    }
  }
  return best == nullptr ? std::vector<int>{} : best->tokens;
}

std::vector<int> greedy_caption(const Mitr& model, const Tensor& regions, const AlignedTrace& trace) {
  if (trace.empty()) {
    throw DataError("greedy_caption: empty trace");
  }
  const Tensor memory = image_memory(model, regions);
  const Tensor trace_in = trace_with_end(trace);
  std::vector<int> tokens;
  for (std::size_t step = 0; step < model.config().max_len; ++step) {
    Tape tape(&model.params());
    CaptionInput in;
    in.ids.push_back(Vocabulary::kBos);
    in.ids.insert(in.ids.end(), tokens.begin(), tokens.end());
    const auto out =
        model.decode(tape, TaskMode::ControlledCaption, tape.constant(memory), in, trace_in);
    const int next = argmax_word(out.word_logits.value(), step);
    if (next == Vocabulary::kEnd) {
      break;
    }
    tokens.push_back(next);
  }
  return tokens;
}

AlignedTrace generate_trace(const Mitr& model, const Tensor& regions, std::span<const int> caption) {
  if (caption.empty()) {
    throw DataError("generate_trace: empty caption");
  }
  const Tensor memory = image_memory(model, regions);
  CaptionInput in;
  in.ids.assign(caption.begin(), caption.end());
  in.ids.push_back(Vocabulary::kEnd);
  AlignedTrace boxes;
  for (std::size_t step = 0; step < caption.size(); ++step) {
    Tape tape(&model.params());
    const auto out = model.decode(tape, TaskMode::ControlledTrace, tape.constant(memory), in,
                                  shifted_boxes(boxes));
    const Tensor& b = out.boxes.value();
    boxes.push_back(TraceBox{b(step, 0), b(step, 1), b(step, 2), b(step, 3), b(step, 4)});
  }
  return boxes;
}

JointOutput generate_joint(const Mitr& model, const Tensor& regions) {
  const Tensor memory = image_memory(model, regions);
  JointOutput result;
  for (std::size_t step = 0; step < model.config().max_len; ++step) {
    Tape tape(&model.params());
    CaptionInput in;
    in.ids.push_back(Vocabulary::kBos);
    in.ids.insert(in.ids.end(), result.caption.begin(), result.caption.end());
    const auto out = model.decode(tape, TaskMode::Joint, tape.constant(memory), in,
                                  shifted_boxes(result.trace));
    const int word = argmax_word(out.word_logits.value(), step);
    if (word == Vocabulary::kEnd) {
      break;
    }
    const Tensor& b = out.boxes.value();
    result.caption.push_back(word);
    result.trace.push_back(TraceBox{b(step, 0), b(step, 1), b(step, 2), b(step, 3), b(step, 4)});
  }
  return result;
}

}  // namespace mitr
