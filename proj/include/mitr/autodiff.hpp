#pragma once

// Reverse-mode automatic differentiation over dense 2-D tensors.
//
// A Tape records every operation in execution order, so the node list is
// already a topological order and backward() is a single reverse sweep.
// Leaves are either constants or parameters borrowed from a ParamStore; the
// store must outlive the tape. A tape and its nodes belong to one thread.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mitr/rng.hpp"
#include "mitr/tensor.hpp"

namespace mitr {

// Named parameter tensors. Index order is insertion order and is stable.
class ParamStore {
 public:
  std::size_t add(std::string name, Tensor value);

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_[i]; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  Tensor& value(std::size_t i) { return values_[i]; }

  std::optional<std::size_t> find(const std::string& name) const;
  std::size_t index(const std::string& name) const;

  std::size_t scalar_count() const;

  // FNV-1a over names, shapes and the raw bytes of every value.
  std::uint64_t checksum() const;

  friend bool operator==(const ParamStore&, const ParamStore&) = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

// Per-parameter gradients, parallel to a ParamStore.
using Gradients = std::vector<Tensor>;

// Boolean attention mask; allowed(r, c) == true means query r may see key c.
struct Mask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> allowed;

  static Mask full(std::size_t rows, std::size_t cols);
  // Lower-triangular inclusive: allowed iff c <= r.
  static Mask causal(std::size_t rows, std::size_t cols);

  bool operator()(std::size_t r, std::size_t c) const { return allowed[r * cols + c] != 0; }
  bool all_allowed() const;
  friend bool operator==(const Mask&, const Mask&) = default;
};

enum class OpKind {
  Constant,
  Param,
  MatMul,
  MatMulNT,  // a * b^T
  Transpose,
  Add,
  Sub,
  Mul,
  AddRow,  // add a 1 x n row to every row
  MulRow,  // multiply every row elementwise by a 1 x n row
  Scale,
  Relu,
  Sigmoid,
  MaskedSoftmax,
  LayerNorm,
  Embedding,
  ConcatCols,
  ConcatRows,
  SliceCols,
  SliceRows,
  Sum,
  CrossEntropy,
  L1Loss,
};

const char* op_name(OpKind kind);

inline constexpr double kLayerNormEps = 1e-5;

class Tape;

// Handle to a node on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Tensor& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Tape {
 public:
  explicit Tape(const ParamStore* params = nullptr) : params_(params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  // Leaf for parameter i; repeated calls return the same node.
  Var param(std::size_t i);
  Var param(const std::string& name);

  const ParamStore* params() const { return params_; }
  std::size_t size() const { return nodes_.size(); }
  OpKind kind(int id) const { return nodes_[static_cast<std::size_t>(id)].op; }
  std::span<const int> inputs(int id) const { return nodes_[static_cast<std::size_t>(id)].inputs; }
  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value_ref(); }

  // Gradient of a 1x1 node with respect to every parameter of the store.
  // Parameters that do not influence the loss get exact zeros.
  Gradients backward(Var loss) const;

  // Node record, used by the operation implementations.
  struct Node {
    OpKind op = OpKind::Constant;
    std::vector<int> inputs;
    Tensor value;
    const Tensor* external = nullptr;  // parameter leaves borrow the store's tensor
    std::size_t param = 0;
    double scalar = 0.0;
    std::size_t offset = 0;
    std::vector<int> ids;
    std::shared_ptr<const Mask> mask;
    Tensor aux;

    const Tensor& value_ref() const { return external ? *external : value; }
  };

  Var push(Node node);
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

 private:
  const ParamStore* params_;
  std::vector<Node> nodes_;
  std::vector<int> param_nodes_;
};

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var add_row(Var a, Var row);
Var mul_row(Var a, Var row);
Var scale(Var a, double s);
// max(x, 0); the subgradient at 0 is 0.
Var relu(Var a);
Var sigmoid(Var a);
// Row-wise softmax. Masked entries receive exactly 0; a row with no allowed
// entry is an error. A null mask allows everything.
Var masked_softmax(Var a, std::shared_ptr<const Mask> mask = nullptr);
// Row-wise normalization to zero mean and unit variance (no affine part).
Var layer_norm(Var a);
// Gathers rows of `table`.
Var embedding(Var table, std::span<const int> ids);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var slice_cols(Var a, std::size_t start, std::size_t count);
Var slice_rows(Var a, std::size_t start, std::size_t count);
Var sum(Var a);
// Mean over rows of -log softmax(logits)[row, target]. Targets < 0 are ignored.
Var cross_entropy(Var logits, std::span<const int> targets);
// Mean absolute difference to a constant target; sign(0) is taken as 0.
Var l1_loss(Var pred, const Tensor& target);

// Adam with bias correction.
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::vector<Tensor> first;
  std::vector<Tensor> second;

  static AdamState zeros_like(const ParamStore& params);
};

void adam_step(ParamStore& params, const Gradients& grads, AdamState& state, double lr);

struct Coordinate {
  std::size_t param = 0;
  std::size_t index = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
  Coordinate worst;
};

using LossFn = std::function<Var(Tape&)>;

inline constexpr double kGradCheckFloor = 1.0;

// Picks `count` coordinates uniformly over the scalars of the selected
// parameters (all parameters when `selected` is empty).
std::vector<Coordinate> sample_coordinates(const ParamStore& params, std::size_t count, Rng& rng,
                                           std::span<const std::size_t> selected = {});

// Compares backward() against central differences at the given coordinates:
// max |analytic - numeric| / max(floor, |analytic|, |numeric|).
// `params` is perturbed in place and restored before returning.
GradCheckResult grad_check(const LossFn& fn, ParamStore& params, double eps,
                           std::span<const Coordinate> coords);

// Same, on `samples` random coordinates drawn from `rng`.
GradCheckResult grad_check(const LossFn& fn, ParamStore& params, double eps,
                           std::size_t samples, Rng& rng);

}  // namespace mitr
