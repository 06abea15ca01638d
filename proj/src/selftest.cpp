#include "mitr/selftest.hpp"

#include <cmath>
#include <sstream>

#include "mitr/checkpoint.hpp"
#include "mitr/lbm.hpp"
#include "mitr/metrics.hpp"
#include "mitr/model.hpp"
#include "mitr/rng.hpp"
#include "mitr/training.hpp"

namespace mitr {

namespace {

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(3);
  o << v;
  return o.str();
}

TraceBox random_box(Rng& rng) {
  const double x1 = rng.uniform(0.0, 0.8);
  const double y1 = rng.uniform(0.0, 0.8);
  const double x2 = rng.uniform(x1 + 0.01, 1.0);
  const double y2 = rng.uniform(y1 + 0.01, 1.0);
  return {x1, y1, x2, y2, (x2 - x1) * (y2 - y1)};
}

AlignedTrace random_trace(Rng& rng, std::size_t n) {
  AlignedTrace t;
  for (std::size_t i = 0; i < n; ++i) {
    t.push_back(random_box(rng));
  }
  return t;
}

Vocabulary tiny_vocab() {
  const std::vector<std::string> words{"a", "b", "c"};
  return Vocabulary(words);
}

ModelConfig tiny_config(std::size_t vocab_size) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 1;
  c.d_ffn = 12;
  c.vocab_size = vocab_size;
  c.d_visual = 4;
  c.max_len = 8;
  return c;
}

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(r, c);
  for (double& v : t.data) {
    v = rng.uniform(-1.0, 1.0);
  }
  return t;
}

SelftestCheck lbm_oracle() {
  Rng rng(11);
  double worst = 0.0;
  for (int i = 0; i < 60; ++i) {
    const auto a = random_trace(rng, 1 + rng.index(6));
    const auto b = random_trace(rng, 1 + rng.index(6));
    const std::size_t k = rng.index(3);
    worst = std::max(worst, std::abs(lbm_score(a, b, k) - lbm_brute_force(a, b, k)));
  }
  return {"lbm matches brute force", worst <= 1e-9, "max diff " + fmt(worst)};
}

SelftestCheck band_fixture() {
  const BandMask band = band_mask(5, 5, 1);
  bool ok = true;
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      const bool expect = j + 1 >= i && j <= i + 1;
      ok = ok && band.allowed(i, j) == expect;
    }
  }
  return {"band k=1 is the tridiagonal", ok, ""};
}

SelftestCheck gradients() {
  const Vocabulary vocab = tiny_vocab();
  Mitr model(tiny_config(vocab.size()), vocab, 3);
  Rng rng(5);
  const Tensor regions = random_tensor(rng, 3, 4);
  const std::vector<int> caption{4, 5, 6, Vocabulary::kEnd};
  AlignedTrace trace = random_trace(rng, 3);
  trace.push_back(TraceBox::whole_image());
  const LossFn fn = [&](Tape& tape) {
    Var total = tape.constant(Tensor::scalar(0.0));
    for (TaskMode task : {TaskMode::ControlledTrace, TaskMode::ControlledCaption, TaskMode::Joint}) {
      const auto out = model.forward(tape, task, regions, caption, trace);
      total = add(total, add(cross_entropy(out.word_logits, caption),
                             l1_loss(out.boxes, boxes_to_tensor(trace))));
    }
    return total;
  };
  const auto r = grad_check(fn, model.params(), 1e-5, 40, rng);
  return {"gradient check (40 coordinates)", r.max_rel_error <= 1e-4,
          "max rel error " + fmt(r.max_rel_error)};
}

SelftestCheck leakage(TaskMode task) {
  const Vocabulary vocab = tiny_vocab();
  const Mitr model(tiny_config(vocab.size()), vocab, 9);
  Rng rng(13);
  const Tensor regions = random_tensor(rng, 3, 4);
  const std::size_t n = 5;
  std::vector<int> ids;
  for (std::size_t i = 0; i < n; ++i) {
    ids.push_back(4 + static_cast<int>(rng.index(3)));
  }
  const Tensor boxes = boxes_to_tensor(random_trace(rng, n));
  const MaskSet masks = build_masks(task, n, n);
  auto run = [&](const std::vector<int>& w, const Tensor& r) {
    Tape tape(&model.params());
    CaptionInput in;
    in.ids = w;
    const auto out = model.decode(tape, task, model.encode_image(tape, regions), in, r);
    return std::make_pair(out.word_logits.value(), out.boxes.value());
  };
  const auto base = run(ids, boxes);
  double worst = 0.0;
  for (std::size_t t = 1; t < n; ++t) {
    auto w = ids;
    Tensor r = boxes;
    if (masks.shift_caption) {
      for (std::size_t i = t; i < n; ++i) w[i] = 4 + static_cast<int>((w[i] - 3) % 3);
    }
    if (masks.shift_trace) {
      for (std::size_t i = t; i < n; ++i) r(i, 0) = 0.5 * r(i, 0);
    }
    const auto moved = run(w, r);
    for (std::size_t i = 0; i < t; ++i) {
      if (masks.shift_caption) {
        for (std::size_t j = 0; j < base.first.cols(); ++j) {
          worst = std::max(worst, std::abs(base.first(i, j) - moved.first(i, j)));
        }
      }
      if (masks.shift_trace) {
        for (std::size_t j = 0; j < 5; ++j) {
          worst = std::max(worst, std::abs(base.second(i, j) - moved.second(i, j)));
        }
      }
    }
  }
  return {std::string("no future leakage in ") + task_name(task) + " mode", worst <= 1e-12,
          "max change " + fmt(worst)};
}

SelftestCheck gumbel_rows() {
  Rng rng(17);
  Tape tape;
  const Tensor logits = random_tensor(rng, 4, 7);
  const Var g = gumbel_softmax(tape.constant(logits), sample_gumbel(4, 7, rng), 0.7);
  double worst = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 7; ++j) s += g.value()(i, j);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  return {"gumbel-softmax rows sum to 1", worst <= 1e-12, "max deviation " + fmt(worst)};
}

SelftestCheck metric_maxima() {
  const Tokens c = tokenize("a man rides a red horse");
  const std::vector<Tokens> refs{c};
  const std::vector<Tokens> cands{c, tokenize("two dogs play")};
  const std::vector<std::vector<Tokens>> corpus{{c}, {tokenize("two dogs play")}};
  const bool ok = bleu_n(c, refs, 1) == 1.0 && bleu_n(c, refs, 4) == 1.0 && rouge_l(c, refs) == 1.0 &&
                  cider(cands, corpus).scores[0] > 0.0;
  return {"identical captions score the maximum", ok, ""};
}

SelftestCheck checkpoint_round_trip() {
  const Vocabulary vocab = tiny_vocab();
  const Mitr model(tiny_config(vocab.size()), vocab, 21);
  const std::string bytes = serialize_checkpoint(model);
  const bool ok = serialize_checkpoint(deserialize_checkpoint(bytes)) == bytes;
  return {"checkpoint round-trip is byte-exact", ok, ""};
}

template <typename F>
SelftestCheck guarded(const char* name, F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    return {name, false, e.what()};
  }
}

}  // namespace

std::vector<SelftestCheck> run_selftest() {
  std::vector<SelftestCheck> out;
  out.push_back(guarded("lbm matches brute force", lbm_oracle));
  out.push_back(guarded("band k=1 is the tridiagonal", band_fixture));
  out.push_back(guarded("gradient check", gradients));
  for (TaskMode task : {TaskMode::Joint, TaskMode::ControlledCaption, TaskMode::ControlledTrace}) {
    out.push_back(guarded("no future leakage", [task] { return leakage(task); }));
  }
  out.push_back(guarded("gumbel-softmax rows", gumbel_rows));
  out.push_back(guarded("metric maxima", metric_maxima));
  out.push_back(guarded("checkpoint round-trip", checkpoint_round_trip));
  return out;
}

}  // namespace mitr
