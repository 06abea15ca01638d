#include "mitr/model.hpp"

#include <cmath>

#include "mitr/error.hpp"

namespace mitr {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw UsageError("model config: d_model (" + std::to_string(d_model) +
                     ") must be a positive multiple of n_heads (" + std::to_string(n_heads) + ")");
  }
  if (n_layers < 1) {
    throw UsageError("model config: n_layers must be at least 1");
  }
  if (max_len < 1) {
    throw UsageError("model config: max_len must be at least 1");
  }
  if (d_ffn == 0 || d_visual == 0) {
    throw UsageError("model config: d_ffn and d_visual must be positive");
  }
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kUnk)) {
    throw UsageError("model config: vocabulary must contain the special tokens");
  }
}

ModelConfig ModelConfig::desk(std::size_t vocab_size, std::size_t d_visual) {
  ModelConfig c;
  c.d_model = 64;
  c.n_heads = 1;
  c.n_layers = 1;
  c.d_ffn = 128;
  c.vocab_size = vocab_size;
  c.d_visual = d_visual;
  c.max_len = 32;
  return c;
}

const char* task_name(TaskMode task) {
  switch (task) {
    case TaskMode::ControlledTrace: return "trace";
    case TaskMode::ControlledCaption: return "caption";
    case TaskMode::Joint: return "joint";
  }
  return "?";
}

TaskMode parse_task(const std::string& name) {
  if (name == "trace") {
    return TaskMode::ControlledTrace;
  }
  if (name == "caption") {
    return TaskMode::ControlledCaption;
  }
  if (name == "joint") {
    return TaskMode::Joint;
  }
  throw UsageError("unknown task '" + name + "' (expected trace, caption or joint)");
}

MaskSet build_masks(TaskMode task, std::size_t n_w, std::size_t n_r) {
  MaskSet m;
  switch (task) {
    case TaskMode::ControlledCaption:
      m.caption_self = Mask::causal(n_w, n_w);
      m.trace_self = Mask::full(n_r, n_r);
      m.caption_fusion = Mask::full(n_w, n_r);
      m.trace_fusion = Mask::full(n_r, n_w);
      m.shift_caption = true;
      break;
    case TaskMode::ControlledTrace:
      m.caption_self = Mask::full(n_w, n_w);
      m.trace_self = Mask::causal(n_r, n_r);
      m.caption_fusion = Mask::full(n_w, n_r);
      m.trace_fusion = Mask::full(n_r, n_w);
      m.shift_trace = true;
      break;
    case TaskMode::Joint:
      m.caption_self = Mask::causal(n_w, n_w);
      m.trace_self = Mask::causal(n_r, n_r);
      m.caption_fusion = Mask::causal(n_w, n_r);
      m.trace_fusion = Mask::causal(n_r, n_w);
      m.shift_caption = true;
      m.shift_trace = true;
      break;
  }
  return m;
}

Tensor boxes_to_tensor(const AlignedTrace& trace) {
  if (trace.empty()) {
    throw DataError("boxes_to_tensor: empty trace");
  }
  Tensor t(trace.size(), 5);
  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto ch = trace[i].channels();
    for (std::size_t c = 0; c < 5; ++c) {
      t(i, c) = ch[c];
    }
  }
  return t;
}

AlignedTrace tensor_to_boxes(const Tensor& t) {
  if (t.cols() != 5) {
    throw ShapeError("tensor_to_boxes: expected 5 columns, got " + t.shape_str());
  }
  AlignedTrace out(t.rows());
  for (std::size_t i = 0; i < t.rows(); ++i) {
    out[i] = TraceBox{t(i, 0), t(i, 1), t(i, 2), t(i, 3), t(i, 4)};
  }
  return out;
}

// ---------------------------------------------------------------- construction

Mitr::Mitr(ModelConfig config, Vocabulary vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  if (config_.vocab_size != vocab_.size()) {
    throw UsageError("model config: vocab_size " + std::to_string(config_.vocab_size) +
                     " does not match vocabulary of " + std::to_string(vocab_.size()));
  }
  config_.validate();
  build_layout(true, seed);
}

Mitr::Mitr(ModelConfig config, Vocabulary vocab, ParamStore params)
    : config_(config), vocab_(std::move(vocab)), params_(std::move(params)) {
  if (config_.vocab_size != vocab_.size()) {
    throw DataError("checkpoint: vocab_size does not match the stored vocabulary");
  }
  config_.validate();
  build_layout(false, 0);
}

void Mitr::build_layout(bool allocate, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = config_.d_model;
  std::size_t expected = 0;

  enum class Init { Xavier, Zero, One, Embed };
  auto slot = [&](const std::string& name, std::size_t rows, std::size_t cols, Init init) {
    ++expected;
    if (!allocate) {
      const auto idx = params_.find(name);
      if (!idx) {
        throw DataError("checkpoint: missing parameter '" + name + "'");
      }
      const Tensor& t = params_.value(*idx);
      if (t.rows() != rows || t.cols() != cols) {
        throw DataError("checkpoint: parameter '" + name + "' has shape " + t.shape_str() +
                        ", expected " + std::to_string(rows) + "x" + std::to_string(cols));
      }
      return *idx;
    }
    Tensor t(rows, cols);
    switch (init) {
      case Init::Xavier: {
        const double a = std::sqrt(6.0 / static_cast<double>(rows + cols));
        for (double& v : t.data) {
          v = rng.uniform(-a, a);
        }
        break;
      }
      case Init::Embed: {
        const double s = 1.0 / std::sqrt(static_cast<double>(cols));
        for (double& v : t.data) {
          v = s * rng.normal();
        }
        break;
      }
      case Init::One:
        std::fill(t.data.begin(), t.data.end(), 1.0);
        break;
      case Init::Zero:
        break;
    }
    return params_.add(name, std::move(t));
  };
  auto linear = [&](const std::string& name, std::size_t in, std::size_t out) {
    Linear l;
    l.w = slot(name + ".w", in, out, Init::Xavier);
    l.b = slot(name + ".b", 1, out, Init::Zero);
    return l;
  };
  auto norm = [&](const std::string& name) {
    Norm n;
    n.gain = slot(name + ".gain", 1, d, Init::One);
    n.bias = slot(name + ".bias", 1, d, Init::Zero);
    return n;
  };
  auto attention = [&](const std::string& name) {
    Attention a;
    a.q = linear(name + ".q", d, d);
    a.k = linear(name + ".k", d, d);
    a.v = linear(name + ".v", d, d);
    a.o = linear(name + ".o", d, d);
    return a;
  };
  auto ffn = [&](const std::string& name) {
    Ffn f;
    f.in = linear(name + ".in", d, config_.d_ffn);
    f.out = linear(name + ".out", config_.d_ffn, d);
    return f;
  };
  auto stream = [&](const std::string& name, std::size_t head_out) {
    Stream s;
    s.positions = slot(name + ".pos", config_.max_len + 1, d, Init::Embed);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const std::string p = name + "." + std::to_string(l);
      StreamLayer layer;
      layer.self = attention(p + ".self");
      layer.self_norm = norm(p + ".self_norm");
      layer.cross = attention(p + ".cross");
      layer.cross_norm = norm(p + ".cross_norm");
      layer.ffn = ffn(p + ".ffn");
      layer.ffn_norm = norm(p + ".ffn_norm");
      s.layers.push_back(layer);
    }
    s.fusion = attention(name + ".fusion");
    s.fusion_norm = norm(name + ".fusion_norm");
    s.ffn = ffn(name + ".out_ffn");
    s.ffn_norm = norm(name + ".out_ffn_norm");
    s.head = linear(name + ".head", d, head_out);
    return s;
  };

  image_proj_ = linear("image.proj", config_.d_visual, d);
  image_layers_.clear();
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string p = "image." + std::to_string(l);
    ImageLayer layer;
    layer.self = attention(p + ".self");
    layer.self_norm = norm(p + ".self_norm");
    layer.ffn = ffn(p + ".ffn");
    layer.ffn_norm = norm(p + ".ffn_norm");
    image_layers_.push_back(layer);
  }
  word_embed_ = slot("caption.embed", config_.vocab_size, d, Init::Embed);
  caption_ = stream("caption", config_.vocab_size);
  trace_proj_ = linear("trace.proj", 5, d);
  trace_ = stream("trace", 5);

  if (!allocate && params_.size() != expected) {
    throw DataError("checkpoint: " + std::to_string(params_.size()) + " parameters, expected " +
                    std::to_string(expected));
  }
}

// ---------------------------------------------------------------- layers

Var Mitr::linear(Tape& tape, const Linear& l, Var x) const {
  return add_row(matmul(x, tape.param(l.w)), tape.param(l.b));
}

Var Mitr::norm(Tape& tape, const Norm& n, Var x) const {
  return add_row(mul_row(layer_norm(x), tape.param(n.gain)), tape.param(n.bias));
}

Var Mitr::attention(Tape& tape, const Attention& a, Var query, Var memory,
                    const std::shared_ptr<const Mask>& mask) const {
  const Var q = linear(tape, a.q, query);
  const Var k = linear(tape, a.k, memory);
  const Var v = linear(tape, a.v, memory);
  const std::size_t dh = config_.d_model / config_.n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> heads;
  heads.reserve(config_.n_heads);
  for (std::size_t h = 0; h < config_.n_heads; ++h) {
    const Var qh = slice_cols(q, h * dh, dh);
    const Var kh = slice_cols(k, h * dh, dh);
    const Var vh = slice_cols(v, h * dh, dh);
    const Var weights = masked_softmax(scale(matmul_nt(qh, kh), inv_sqrt), mask);
    heads.push_back(matmul(weights, vh));
  }
  return linear(tape, a.o, concat_cols(heads));
}

Var Mitr::ffn(Tape& tape, const Ffn& f, Var x) const {
  return linear(tape, f.out, relu(linear(tape, f.in, x)));
}

namespace {

std::shared_ptr<const Mask> share(const Mask& m) {
  if (m.all_allowed()) {
    return nullptr;
  }
  return std::make_shared<const Mask>(m);
}

std::vector<int> iota_ids(std::size_t n) {
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) {
    ids[i] = static_cast<int>(i);
  }
  return ids;
}

}  // namespace

Var Mitr::run_stream(Tape& tape, const Stream& s, Var x, Var image,
                     const std::shared_ptr<const Mask>& self_mask) const {
  for (const StreamLayer& l : s.layers) {
    x = norm(tape, l.self_norm, add(x, attention(tape, l.self, x, x, self_mask)));
    x = norm(tape, l.cross_norm, add(x, attention(tape, l.cross, x, image, nullptr)));
    x = norm(tape, l.ffn_norm, add(x, ffn(tape, l.ffn, x)));
  }
  return x;
}

Var Mitr::encode_image(Tape& tape, const Tensor& regions) const {
  if (regions.size() == 0 || regions.rows() == 0) {
    throw DataError("encode_image: no regions");
  }
  if (regions.cols() != config_.d_visual) {
    throw ShapeError("encode_image: region features have width " + std::to_string(regions.cols()) +
                     ", model expects " + std::to_string(config_.d_visual));
  }
  Var x = linear(tape, image_proj_, tape.constant(regions));
  for (const ImageLayer& l : image_layers_) {
    x = norm(tape, l.self_norm, add(x, attention(tape, l.self, x, x, nullptr)));
    x = norm(tape, l.ffn_norm, add(x, ffn(tape, l.ffn, x)));
  }
  return x;
}

ModelOutputs Mitr::decode(Tape& tape, TaskMode task, Var image, const CaptionInput& caption_in,
                          const Tensor& trace_in) const {
  const std::size_t n_w = caption_in.length();
  const std::size_t n_r = trace_in.rows();
  if (n_w == 0 || n_r == 0 || trace_in.size() == 0) {
    throw DataError("mitr: caption and trace inputs must be non-empty");
  }
  if (task == TaskMode::Joint && n_w != n_r) {
    throw DataError("mitr: joint mode needs equal caption and trace lengths (" +
                    std::to_string(n_w) + " vs " + std::to_string(n_r) + ")");
  }
  if (n_w > config_.max_len + 1 || n_r > config_.max_len + 1) {
    throw DataError("mitr: sequence longer than max_len + 1");
  }
  if (trace_in.cols() != 5) {
    throw ShapeError("mitr: trace input must have 5 channels, got " + trace_in.shape_str());
  }
  const MaskSet masks = build_masks(task, n_w, n_r);

  Var words;
  if (caption_in.soft) {
    if (caption_in.soft->cols() != config_.vocab_size) {
      throw ShapeError("mitr: soft caption has width " + std::to_string(caption_in.soft->cols()));
    }
    words = matmul(*caption_in.soft, tape.param(word_embed_));
  } else {
    words = embedding(tape.param(word_embed_), caption_in.ids);
  }
  const Var x_w = add(words, embedding(tape.param(caption_.positions), iota_ids(n_w)));
  const Var x_r = add(linear(tape, trace_proj_, tape.constant(trace_in)),
                      embedding(tape.param(trace_.positions), iota_ids(n_r)));

  const Var h_w = run_stream(tape, caption_, x_w, image, share(masks.caption_self));
  const Var h_r = run_stream(tape, trace_, x_r, image, share(masks.trace_self));

  Var f_w = norm(tape, caption_.fusion_norm,
                 add(h_w, attention(tape, caption_.fusion, h_w, h_r, share(masks.caption_fusion))));
  Var f_r = norm(tape, trace_.fusion_norm,
                 add(h_r, attention(tape, trace_.fusion, h_r, h_w, share(masks.trace_fusion))));
  f_w = norm(tape, caption_.ffn_norm, add(f_w, ffn(tape, caption_.ffn, f_w)));
  f_r = norm(tape, trace_.ffn_norm, add(f_r, ffn(tape, trace_.ffn, f_r)));

  return ModelOutputs{linear(tape, caption_.head, f_w), sigmoid(linear(tape, trace_.head, f_r))};
}

ModelOutputs Mitr::forward(Tape& tape, TaskMode task, Var image, const CaptionInput& caption,
                           const Tensor& trace) const {
  if (caption.length() == 0 || trace.size() == 0) {
    throw DataError("mitr: caption and trace must be non-empty");
  }
  const MaskSet masks = build_masks(task, caption.length(), trace.rows());
  CaptionInput cap_in;
  if (!masks.shift_caption) {
    cap_in = caption;
  } else if (caption.soft) {
    Tensor bos(1, config_.vocab_size);
    bos.data[Vocabulary::kBos] = 1.0;
    std::vector<Var> parts{tape.constant(std::move(bos))};
    if (caption.soft->rows() > 1) {
      parts.push_back(slice_rows(*caption.soft, 0, caption.soft->rows() - 1));
    }
    cap_in.soft = concat_rows(parts);
  } else {
    cap_in.ids.reserve(caption.ids.size());
    cap_in.ids.push_back(Vocabulary::kBos);
    cap_in.ids.insert(cap_in.ids.end(), caption.ids.begin(), caption.ids.end() - 1);
  }

  if (!masks.shift_trace) {
    return decode(tape, task, image, cap_in, trace);
  }
  Tensor shifted(trace.rows(), 5);
  const auto sentinel = TraceBox::whole_image().channels();
  std::copy(sentinel.begin(), sentinel.end(), shifted.data.begin());
  std::copy(trace.data.begin(), trace.data.end() - 5, shifted.data.begin() + 5);
  return decode(tape, task, image, cap_in, shifted);
}

ModelOutputs Mitr::forward(Tape& tape, TaskMode task, const Tensor& regions,
                           std::span<const int> caption, const AlignedTrace& trace) const {
  CaptionInput cap;
  cap.ids.assign(caption.begin(), caption.end());
  return forward(tape, task, encode_image(tape, regions), cap, boxes_to_tensor(trace));
}

}  // namespace mitr
