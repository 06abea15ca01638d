#include <doctest.h>

#include <cmath>
#include <map>
#include <set>

#include "mitr/checkpoint.hpp"
#include "mitr/error.hpp"
#include "mitr/model.hpp"

using namespace mitr;

namespace {

Vocabulary vocab3() {
  const std::vector<std::string> w{"a", "b", "c"};
  return Vocabulary(w);
}

ModelConfig tiny(std::size_t vocab_size) {
  ModelConfig c;
  c.d_model = 8;
  c.n_heads = 2;
  c.n_layers = 2;
  c.d_ffn = 12;
  c.vocab_size = vocab_size;
  c.d_visual = 4;
  c.max_len = 10;
  return c;
}

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(r, c);
  for (double& v : t.data) v = rng.uniform(-1.0, 1.0);
  return t;
}

AlignedTrace random_trace(Rng& rng, std::size_t n) {
  AlignedTrace t;
  for (std::size_t i = 0; i < n; ++i) {
    const double x1 = rng.uniform(0.0, 0.5), y1 = rng.uniform(0.0, 0.5);
    const double x2 = rng.uniform(x1, 1.0), y2 = rng.uniform(y1, 1.0);
    t.push_back({x1, y1, x2, y2, (x2 - x1) * (y2 - y1)});
  }
  return t;
}

bool is_causal(const Mask& m) {
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      if (m(r, c) != (c <= r)) return false;
  return true;
}

bool is_full(const Mask& m) {
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c)
      if (!m(r, c)) return false;
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b, std::size_t rows) {
  double w = 0.0;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < a.cols(); ++c) w = std::max(w, std::abs(a(r, c) - b(r, c)));
  return w;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c = tiny(7);
  CHECK_NOTHROW(c.validate());
  c.n_heads = 3;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = tiny(7);
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  c = tiny(7);
  c.max_len = 0;
  CHECK_THROWS_AS(c.validate(), UsageError);
  CHECK_THROWS_AS(Mitr(tiny(9), vocab3(), 1), UsageError);
}

TEST_CASE("masks per task") {
  const MaskSet cap = build_masks(TaskMode::ControlledCaption, 3, 3);
  CHECK(is_causal(cap.caption_self));
  CHECK(is_full(cap.trace_self));
  CHECK(is_full(cap.caption_fusion));
  CHECK(is_full(cap.trace_fusion));
  CHECK(cap.shift_caption);
  CHECK_FALSE(cap.shift_trace);

  const MaskSet joint = build_masks(TaskMode::Joint, 2, 2);
  CHECK(is_causal(joint.caption_self));
  CHECK(is_causal(joint.trace_self));
  CHECK(is_causal(joint.caption_fusion));
  CHECK(is_causal(joint.trace_fusion));
  CHECK(joint.shift_caption);
  CHECK(joint.shift_trace);
}

TEST_CASE("controlled trace masks mirror controlled caption") {
  for (std::size_t n : {1, 2, 5}) {
    const MaskSet cap = build_masks(TaskMode::ControlledCaption, n, n);
    const MaskSet tr = build_masks(TaskMode::ControlledTrace, n, n);
    CHECK(tr.caption_self.allowed == cap.trace_self.allowed);
    CHECK(tr.trace_self.allowed == cap.caption_self.allowed);
    CHECK(tr.caption_fusion.allowed == cap.trace_fusion.allowed);
    CHECK(tr.trace_fusion.allowed == cap.caption_fusion.allowed);
    CHECK(tr.shift_caption == cap.shift_trace);
    CHECK(tr.shift_trace == cap.shift_caption);
  }
}

TEST_CASE("streams have mirrored parameter layouts") {
  const Mitr m(tiny(7), vocab3(), 1);
  const ParamStore& p = m.params();
  std::map<std::string, std::vector<std::size_t>> cap, tr;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const std::string& n = p.name(i);
    if (n.rfind("caption.", 0) == 0) cap[n.substr(8)] = p.value(i).shape;
    if (n.rfind("trace.", 0) == 0) tr[n.substr(6)] = p.value(i).shape;
  }
  std::set<std::string> only_cap, only_tr;
  for (const auto& [k, s] : cap) {
    if (!tr.count(k)) only_cap.insert(k);
    else if (k.rfind("head", 0) != 0) CHECK_MESSAGE(tr[k] == s, k);
  }
  for (const auto& [k, s] : tr)
    if (!cap.count(k)) only_tr.insert(k);
  CHECK(only_cap == std::set<std::string>{"embed"});
  CHECK(only_tr == std::set<std::string>{"proj.w", "proj.b"});
  CHECK(cap["head.w"] == std::vector<std::size_t>{8, 7});
  CHECK(tr["head.w"] == std::vector<std::size_t>{8, 5});
}

TEST_CASE("image encoder shapes and region permutation equivariance") {
  const Mitr m(tiny(7), vocab3(), 2);
  Rng rng(3);
  {
    Tape tape(&m.params());
    const Var h = m.encode_image(tape, random_tensor(rng, 1, 4));
    CHECK(h.rows() == 1);
    CHECK(h.cols() == 8);
  }
  const Tensor x = random_tensor(rng, 5, 4);
  const std::vector<std::size_t> perm{3, 0, 4, 1, 2};
  Tensor xp(5, 4);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 4; ++c) xp(i, c) = x(perm[i], c);
  Tape tape(&m.params());
  const Tensor h = m.encode_image(tape, x).value();
  const Tensor hp = m.encode_image(tape, xp).value();
  double worst = 0.0;
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t c = 0; c < 8; ++c) worst = std::max(worst, std::abs(hp(i, c) - h(perm[i], c)));
  CHECK(worst <= 1e-12);

  CHECK_THROWS(m.encode_image(tape, Tensor(0, 4)));
  CHECK_THROWS_AS(m.encode_image(tape, Tensor(2, 3)), ShapeError);
}

TEST_CASE("forward output shapes and ranges") {
  const Mitr m(tiny(7), vocab3(), 4);
  Rng rng(5);
  const Tensor regions = random_tensor(rng, 3, 4);
  const std::vector<int> caption{4, 5, 6, Vocabulary::kEnd};
  AlignedTrace trace = random_trace(rng, 3);
  trace.push_back(TraceBox::whole_image());
  for (TaskMode t : {TaskMode::ControlledTrace, TaskMode::ControlledCaption, TaskMode::Joint}) {
    Tape tape(&m.params());
    const auto out = m.forward(tape, t, regions, caption, trace);
    CHECK(out.word_logits.rows() == 4);
    CHECK(out.word_logits.cols() == 7);
    CHECK(out.boxes.rows() == 4);
    CHECK(out.boxes.cols() == 5);
    for (double v : out.boxes.value().data) CHECK((v > 0.0 && v < 1.0));
  }
  Tape tape(&m.params());
  const AlignedTrace short_trace(trace.begin(), trace.end() - 1);
  CHECK_THROWS(m.forward(tape, TaskMode::Joint, regions, caption, short_trace));
  const std::vector<int> too_long(12, 4);
  CHECK_THROWS(m.forward(tape, TaskMode::ControlledCaption, regions, too_long,
                         AlignedTrace(12, TraceBox::whole_image())));
}

TEST_CASE("no leakage from later positions") {
  const Mitr m(tiny(7), vocab3(), 6);
  Rng rng(7);
  const Tensor regions = random_tensor(rng, 3, 4);
  const std::size_t n = 6;
  std::vector<int> ids;
  for (std::size_t i = 0; i < n; ++i) ids.push_back(3 + static_cast<int>(rng.index(4)));
  const Tensor boxes = boxes_to_tensor(random_trace(rng, n));

  for (TaskMode task : {TaskMode::Joint, TaskMode::ControlledCaption, TaskMode::ControlledTrace}) {
    const MaskSet masks = build_masks(task, n, n);
    auto run = [&](const std::vector<int>& w, const Tensor& r) {
      Tape tape(&m.params());
      CaptionInput in;
      in.ids = w;
      const auto out = m.decode(tape, task, m.encode_image(tape, regions), in, r);
      return std::make_pair(out.word_logits.value(), out.boxes.value());
    };
    const auto base = run(ids, boxes);
    for (std::size_t t = 1; t < n; ++t) {
      auto w = ids;
      Tensor r = boxes;
      // Only causally masked streams are perturbed; the other stream is visible by design.
      if (masks.shift_caption)
        for (std::size_t i = t; i < n; ++i) w[i] = w[i] == 4 ? 5 : 4;
      if (masks.shift_trace)
        for (std::size_t i = t; i < n; ++i) r(i, 1) = 1.0 - r(i, 1);
      const auto moved = run(w, r);
      INFO(task_name(task), " t=", t);
      if (masks.shift_caption) CHECK(max_abs_diff(base.first, moved.first, t) <= 1e-12);
      if (masks.shift_trace) CHECK(max_abs_diff(base.second, moved.second, t) <= 1e-12);
      if (task == TaskMode::Joint) {
        CHECK(max_abs_diff(base.first, moved.first, t) <= 1e-12);
        CHECK(max_abs_diff(base.second, moved.second, t) <= 1e-12);
      }
      // Later positions do see the change.
      CHECK(max_abs_diff(base.first, moved.first, n) + max_abs_diff(base.second, moved.second, n) > 0.0);
    }
  }
}

TEST_CASE("controlled caption sees the whole trace") {
  const Mitr m(tiny(7), vocab3(), 8);
  Rng rng(9);
  const Tensor regions = random_tensor(rng, 3, 4);
  const std::vector<int> ids{Vocabulary::kBos, 4, 5, 6};
  const Tensor boxes = boxes_to_tensor(random_trace(rng, 4));
  auto logits = [&](const Tensor& r) {
    Tape tape(&m.params());
    CaptionInput in;
    in.ids = ids;
    return m.decode(tape, TaskMode::ControlledCaption, m.encode_image(tape, regions), in, r)
        .word_logits.value();
  };
  const Tensor base = logits(boxes);
  Tensor moved_boxes = boxes;
  moved_boxes(3, 0) = 0.9;
  moved_boxes(3, 2) = 1.0;
  const Tensor moved = logits(moved_boxes);
  // Changing only the last box moves the logits at the first position.
  double d0 = 0.0;
  for (std::size_t c = 0; c < 7; ++c) d0 = std::max(d0, std::abs(base(0, c) - moved(0, c)));
  CHECK(d0 > 1e-6);
}

TEST_CASE("one parameter set serves every task") {
  const Mitr m(tiny(7), vocab3(), 10);
  Rng rng(11);
  const Tensor regions = random_tensor(rng, 2, 4);
  const std::vector<int> caption{4, Vocabulary::kEnd};
  const AlignedTrace trace{random_trace(rng, 1)[0], TraceBox::whole_image()};
  const std::uint64_t before = m.params().checksum();
  const ParamStore* store = &m.params();
  std::set<int> param_nodes_per_task;
  for (TaskMode t : {TaskMode::ControlledTrace, TaskMode::ControlledCaption, TaskMode::Joint,
                     TaskMode::ControlledCaption}) {
    Tape tape(&m.params());
    m.forward(tape, t, regions, caption, trace);
    CHECK(tape.params() == store);
    std::size_t leaves = 0;
    for (int i = 0; i < static_cast<int>(tape.size()); ++i)
      if (tape.kind(i) == OpKind::Param) ++leaves;
    param_nodes_per_task.insert(static_cast<int>(leaves));
  }
  // Every task touches the full parameter set.
  CHECK(param_nodes_per_task == std::set<int>{static_cast<int>(m.params().size())});
  CHECK(m.params().checksum() == before);

  const Mitr copy = deserialize_checkpoint(serialize_checkpoint(m));
  CHECK(copy.params().checksum() == before);
  for (TaskMode t : {TaskMode::ControlledTrace, TaskMode::ControlledCaption, TaskMode::Joint}) {
    Tape a(&m.params()), b(&copy.params());
    CHECK(m.forward(a, t, regions, caption, trace).boxes.value() ==
          copy.forward(b, t, regions, caption, trace).boxes.value());
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  const Mitr m(tiny(7), vocab3(), 12);
  const std::string bytes = serialize_checkpoint(m);
  const Mitr back = deserialize_checkpoint(bytes);
  CHECK(back.config() == m.config());
  CHECK(back.vocab() == m.vocab());
  CHECK(back.params() == m.params());
  CHECK(serialize_checkpoint(back) == bytes);

  std::string bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(deserialize_checkpoint(bad), DataError);
  CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
  CHECK(fnv1a64("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("full model gradient check") {
  const Vocabulary v = vocab3();
  Mitr m(tiny(v.size()), v, 13);
  Rng rng(14);
  const Tensor regions = random_tensor(rng, 3, 4);
  const std::vector<int> caption{4, 6, 5, Vocabulary::kEnd};
  AlignedTrace trace = random_trace(rng, 3);
  trace.push_back(TraceBox::whole_image());
  const Tensor target = boxes_to_tensor(trace);
  const LossFn fn = [&](Tape& tape) {
    Var total = tape.constant(Tensor::scalar(0.0));
    for (TaskMode t : {TaskMode::ControlledTrace, TaskMode::ControlledCaption, TaskMode::Joint}) {
      const auto out = m.forward(tape, t, regions, caption, trace);
      total = add(total, add(cross_entropy(out.word_logits, caption), l1_loss(out.boxes, target)));
    }
    return total;
  };
  const auto r = grad_check(fn, m.params(), 1e-5, 60, rng);
  CHECK(r.coordinates == 60);
  CHECK(r.max_rel_error <= 1e-4);
}
