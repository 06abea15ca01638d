#pragma once

// Mirrored transformer over three modalities.
//
// An image encoder turns region features into h_v. Two structurally
// identical streams, one for the caption and one for the trace, each run
// N layers of self-attention followed by cross-attention to h_v, and are
// then fused by attending to each other. The caption stream ends in a
// vocabulary head, the trace stream in a 5-channel sigmoid box head.
//
// The task only changes which stream is shifted right and which
// attentions are causally masked; the parameters are the same for all
// tasks. Every sublayer is post-norm: LayerNorm(x + sublayer(x)).

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mitr/autodiff.hpp"
#include "mitr/trace.hpp"
#include "mitr/vocab.hpp"

namespace mitr {

struct ModelConfig {
  std::size_t d_model = 512;
  std::size_t n_heads = 8;
  std::size_t n_layers = 1;
  std::size_t d_ffn = 2048;
  std::size_t vocab_size = 0;
  std::size_t d_visual = 0;
  std::size_t max_len = 100;

  // Throws UsageError on inconsistent values.
  void validate() const;

  // d_model 64, one head, d_ffn 128, one layer, max_len 32.
  static ModelConfig desk(std::size_t vocab_size, std::size_t d_visual);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class TaskMode { ControlledTrace, ControlledCaption, Joint };

const char* task_name(TaskMode task);
TaskMode parse_task(const std::string& name);  // "trace" | "caption" | "joint"

struct MaskSet {
  Mask caption_self;    // n_w x n_w
  Mask trace_self;      // n_r x n_r
  Mask caption_fusion;  // n_w x n_r, caption queries over trace keys
  Mask trace_fusion;    // n_r x n_w
  bool shift_caption = false;
  bool shift_trace = false;
};

MaskSet build_masks(TaskMode task, std::size_t n_w, std::size_t n_r);

// Caption stream input: token ids, or a soft distribution over the
// vocabulary (rows x vocab_size) mixed through the embedding table.
struct CaptionInput {
  std::vector<int> ids;
  std::optional<Var> soft;

  std::size_t length() const { return soft ? soft->rows() : ids.size(); }
};

struct ModelOutputs {
  Var word_logits;  // n_w x vocab_size
  Var boxes;        // n_r x 5, each channel in (0, 1)
};

// Boxes as an n x 5 tensor.
Tensor boxes_to_tensor(const AlignedTrace& trace);
AlignedTrace tensor_to_boxes(const Tensor& t);

class Mitr {
 public:
  // Fresh model with seeded random initialization.
  Mitr(ModelConfig config, Vocabulary vocab, std::uint64_t seed);
  // Model around existing parameters (e.g. from a checkpoint); names and
  // shapes must match the architecture exactly.
  Mitr(ModelConfig config, Vocabulary vocab, ParamStore params);

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ParamStore& params() const { return params_; }
  ParamStore& params() { return params_; }

  // h_v from region features (regions x d_visual). No mask, no positions.
  Var encode_image(Tape& tape, const Tensor& regions) const;

  // Runs both streams on inputs exactly as given; shifting is the caller's
  // business. Masks come from build_masks(task, ...).
  ModelOutputs decode(Tape& tape, TaskMode task, Var image, const CaptionInput& caption_in,
                      const Tensor& trace_in) const;

  // Teacher-forced pass from target sequences: streams are shifted right
  // (BOS / whole-image box in front, last element dropped) as the task requires.
  ModelOutputs forward(Tape& tape, TaskMode task, Var image, const CaptionInput& caption,
                       const Tensor& trace) const;
  ModelOutputs forward(Tape& tape, TaskMode task, const Tensor& regions,
                       std::span<const int> caption, const AlignedTrace& trace) const;

 private:
  struct Linear {
    std::size_t w = 0;
    std::size_t b = 0;
  };
  struct Norm {
    std::size_t gain = 0;
    std::size_t bias = 0;
  };
  struct Attention {
    Linear q, k, v, o;
  };
  struct Ffn {
    Linear in, out;
  };
  struct ImageLayer {
    Attention self;
    Norm self_norm;
    Ffn ffn;
    Norm ffn_norm;
  };
  struct StreamLayer {
    Attention self;
    Norm self_norm;
    Attention cross;
    Norm cross_norm;
    Ffn ffn;
    Norm ffn_norm;
  };
  struct Stream {
    std::size_t positions = 0;
    std::vector<StreamLayer> layers;
    Attention fusion;
    Norm fusion_norm;
    Ffn ffn;
    Norm ffn_norm;
    Linear head;
  };

  void build_layout(bool allocate, std::uint64_t seed);

  Var linear(Tape& tape, const Linear& l, Var x) const;
  Var norm(Tape& tape, const Norm& n, Var x) const;
  Var attention(Tape& tape, const Attention& a, Var query, Var memory,
                const std::shared_ptr<const Mask>& mask) const;
  Var ffn(Tape& tape, const Ffn& f, Var x) const;
  Var run_stream(Tape& tape, const Stream& s, Var x, Var image,
                 const std::shared_ptr<const Mask>& self_mask) const;

  ModelConfig config_;
  Vocabulary vocab_;
  ParamStore params_;

  Linear image_proj_;
  std::vector<ImageLayer> image_layers_;
  std::size_t word_embed_ = 0;
  Linear trace_proj_;
  Stream caption_;
  Stream trace_;
};

}  // namespace mitr
