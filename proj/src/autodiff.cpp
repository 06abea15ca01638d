#include "mitr/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "mitr/error.hpp"

namespace mitr {

namespace {

using Node = Tape::Node;

[[noreturn]] void shape_error(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

Tape* same_tape(const char* op, Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw Error(std::string(op) + ": operands live on different tapes");
  }
  return a.tape;
}

Tape* tape_of(const char* op, Var a) {
  if (a.tape == nullptr) {
    throw Error(std::string(op) + ": operand is not attached to a tape");
  }
  return a.tape;
}

// out (n x m) += a (n x k) * b (k x m)
void gemm_nn(const double* __restrict a, const double* __restrict b, double* __restrict out,
             std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    double* orow = out + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) {
        continue;
      }
      const double* brow = b + p * m;
      for (std::size_t j = 0; j < m; ++j) {
        orow[j] += av * brow[j];
      }
    }
  }
}

// out (n x m) += a (n x k) * b^T, b is (m x k)
void gemm_nt(const double* __restrict a, const double* __restrict b, double* __restrict out,
             std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < m; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        acc += arow[p] * brow[p];
      }
      out[i * m + j] += acc;
    }
  }
}

// out (k x m) += a^T * b, a is (n x k), b is (n x m)
void gemm_tn(const double* __restrict a, const double* __restrict b, double* __restrict out,
             std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    const double* brow = b + i * m;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) {
        continue;
      }
      double* orow = out + p * m;
      for (std::size_t j = 0; j < m; ++j) {
        orow[j] += av * brow[j];
      }
    }
  }
}

Node make(OpKind op, std::initializer_list<int> inputs, Tensor value) {
  Node n;
  n.op = op;
  n.inputs.assign(inputs);
  n.value = std::move(value);
  return n;
}

}  // namespace

// ---------------------------------------------------------------- ParamStore

std::size_t ParamStore::add(std::string name, Tensor value) {
  if (find(name)) {
    throw Error("param store: duplicate parameter '" + name + "'");
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
  return values_.size() - 1;
}

std::optional<std::size_t> ParamStore::find(const std::string& name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) {
      return i;
    }
  }
  return std::nullopt;
}

std::size_t ParamStore::index(const std::string& name) const {
  if (auto i = find(name)) {
    return *i;
  }
  throw Error("param store: unknown parameter '" + name + "'");
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) {
    n += v.size();
  }
  return n;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 14695981039346656037ULL;
  auto mix = [&h](const void* p, std::size_t len) {
    const auto* bytes = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < len; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (std::size_t i = 0; i < values_.size(); ++i) {
    mix(names_[i].data(), names_[i].size());
    mix(values_[i].shape.data(), values_[i].shape.size() * sizeof(std::size_t));
    mix(values_[i].data.data(), values_[i].data.size() * sizeof(double));
  }
  return h;
}

// ---------------------------------------------------------------- Mask

Mask Mask::full(std::size_t rows, std::size_t cols) {
  return Mask{rows, cols, std::vector<std::uint8_t>(rows * cols, 1)};
}

Mask Mask::causal(std::size_t rows, std::size_t cols) {
  Mask m{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c <= r && c < cols; ++c) {
      m.allowed[r * cols + c] = 1;
    }
  }
  return m;
}

bool Mask::all_allowed() const {
  return std::all_of(allowed.begin(), allowed.end(), [](std::uint8_t v) { return v != 0; });
}

// ---------------------------------------------------------------- Tape

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::Constant: return "constant";
    case OpKind::Param: return "param";
    case OpKind::MatMul: return "matmul";
    case OpKind::MatMulNT: return "matmul_nt";
    case OpKind::Transpose: return "transpose";
    case OpKind::Add: return "add";
    case OpKind::Sub: return "sub";
    case OpKind::Mul: return "mul";
    case OpKind::AddRow: return "add_row";
    case OpKind::MulRow: return "mul_row";
    case OpKind::Scale: return "scale";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::MaskedSoftmax: return "masked_softmax";
    case OpKind::LayerNorm: return "layer_norm";
    case OpKind::Embedding: return "embedding";
    case OpKind::ConcatCols: return "concat_cols";
    case OpKind::ConcatRows: return "concat_rows";
    case OpKind::SliceCols: return "slice_cols";
    case OpKind::SliceRows: return "slice_rows";
    case OpKind::Sum: return "sum";
    case OpKind::CrossEntropy: return "cross_entropy";
    case OpKind::L1Loss: return "l1_loss";
  }
  return "?";
}

const Tensor& Var::value() const { return tape->value(id); }

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.op = OpKind::Constant;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(std::size_t i) {
  if (params_ == nullptr || i >= params_->size()) {
    throw Error("tape: parameter index out of range");
  }
  if (param_nodes_.size() < params_->size()) {
    param_nodes_.resize(params_->size(), -1);
  }
  if (param_nodes_[i] >= 0) {
    return Var{this, param_nodes_[i]};
  }
  Node n;
  n.op = OpKind::Param;
  n.external = &params_->value(i);
  n.param = i;
  Var v = push(std::move(n));
  param_nodes_[i] = v.id;
  return v;
}

Var Tape::param(const std::string& name) {
  if (params_ == nullptr) {
    throw Error("tape: no parameter store attached");
  }
  return param(params_->index(name));
}

// ---------------------------------------------------------------- forward ops

Var matmul(Var a, Var b) {
  Tape* t = same_tape("matmul", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.rows()) {
    shape_error("matmul", A, B);
  }
  Tensor out(A.rows(), B.cols());
  gemm_nn(A.data.data(), B.data.data(), out.data.data(), A.rows(), A.cols(), B.cols());
  return t->push(make(OpKind::MatMul, {a.id, b.id}, std::move(out)));
}

Var matmul_nt(Var a, Var b) {
  Tape* t = same_tape("matmul_nt", a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (A.cols() != B.cols()) {
    shape_error("matmul_nt", A, B);
  }
  Tensor out(A.rows(), B.rows());
  gemm_nt(A.data.data(), B.data.data(), out.data.data(), A.rows(), A.cols(), B.rows());
  return t->push(make(OpKind::MatMulNT, {a.id, b.id}, std::move(out)));
}

Var transpose(Var a) {
  Tape* t = tape_of("transpose", a);
  const Tensor& A = a.value();
  Tensor out(A.cols(), A.rows());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    for (std::size_t j = 0; j < A.cols(); ++j) {
      out(j, i) = A(i, j);
    }
  }
  return t->push(make(OpKind::Transpose, {a.id}, std::move(out)));
}

namespace {

template <typename F>
Var elementwise(const char* name, OpKind kind, Var a, Var b, F f) {
  Tape* t = same_tape(name, a, b);
  const Tensor& A = a.value();
  const Tensor& B = b.value();
  if (!A.same_shape(B)) {
    shape_error(name, A, B);
  }
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out.data[i] = f(A.data[i], B.data[i]);
  }
  return t->push(make(kind, {a.id, b.id}, std::move(out)));
}

template <typename F>
Var row_broadcast(const char* name, OpKind kind, Var a, Var row, F f) {
  Tape* t = same_tape(name, a, row);
  const Tensor& A = a.value();
  const Tensor& R = row.value();
  if (R.rows() != 1 || R.cols() != A.cols()) {
    shape_error(name, A, R);
  }
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    for (std::size_t j = 0; j < A.cols(); ++j) {
      out(i, j) = f(A(i, j), R.data[j]);
    }
  }
  return t->push(make(kind, {a.id, row.id}, std::move(out)));
}

}  // namespace

Var add(Var a, Var b) {
  return elementwise("add", OpKind::Add, a, b, [](double x, double y) { return x + y; });
}

Var sub(Var a, Var b) {
  return elementwise("sub", OpKind::Sub, a, b, [](double x, double y) { return x - y; });
}

Var mul(Var a, Var b) {
  return elementwise("mul", OpKind::Mul, a, b, [](double x, double y) { return x * y; });
}

Var add_row(Var a, Var row) {
  return row_broadcast("add_row", OpKind::AddRow, a, row, [](double x, double y) { return x + y; });
}

Var mul_row(Var a, Var row) {
  return row_broadcast("mul_row", OpKind::MulRow, a, row, [](double x, double y) { return x * y; });
}

Var scale(Var a, double s) {
  Tape* t = tape_of("scale", a);
  Tensor out = a.value();
  for (double& v : out.data) {
    v *= s;
  }
  Node n = make(OpKind::Scale, {a.id}, std::move(out));
  n.scalar = s;
  return t->push(std::move(n));
}

Var relu(Var a) {
  Tape* t = tape_of("relu", a);
  Tensor out = a.value();
  for (double& v : out.data) {
    v = v > 0.0 ? v : 0.0;
  }
  return t->push(make(OpKind::Relu, {a.id}, std::move(out)));
}

Var sigmoid(Var a) {
  Tape* t = tape_of("sigmoid", a);
  Tensor out = a.value();
  for (double& v : out.data) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return t->push(make(OpKind::Sigmoid, {a.id}, std::move(out)));
}

Var masked_softmax(Var a, std::shared_ptr<const Mask> mask) {
  Tape* t = tape_of("masked_softmax", a);
  const Tensor& A = a.value();
  if (mask && (mask->rows != A.rows() || mask->cols != A.cols())) {
    throw ShapeError("masked_softmax: mask " + std::to_string(mask->rows) + "x" +
                     std::to_string(mask->cols) + " does not match scores " + A.shape_str());
  }
  Tensor out(A.rows(), A.cols());
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < A.cols(); ++j) {
      if (!mask || (*mask)(i, j)) {
        mx = std::max(mx, A(i, j));
      }
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw NumericalError("masked_softmax: row " + std::to_string(i) +
                           " is fully masked (degenerate attention)");
    }
    double z = 0.0;
    for (std::size_t j = 0; j < A.cols(); ++j) {
      if (!mask || (*mask)(i, j)) {
        out(i, j) = std::exp(A(i, j) - mx);
        z += out(i, j);
      }
    }
    for (std::size_t j = 0; j < A.cols(); ++j) {
      out(i, j) /= z;
    }
  }
  Node n = make(OpKind::MaskedSoftmax, {a.id}, std::move(out));
  n.mask = std::move(mask);
  return t->push(std::move(n));
}

Var layer_norm(Var a) {
  Tape* t = tape_of("layer_norm", a);
  const Tensor& A = a.value();
  const std::size_t n = A.cols();
  Tensor out(A.rows(), n);
  Tensor inv_std(A.rows(), 1);
  for (std::size_t i = 0; i < A.rows(); ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      mean += A(i, j);
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double d = A(i, j) - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + kLayerNormEps);
    inv_std.data[i] = is;
    for (std::size_t j = 0; j < n; ++j) {
      out(i, j) = (A(i, j) - mean) * is;
    }
  }
  Node node = make(OpKind::LayerNorm, {a.id}, std::move(out));
  node.aux = std::move(inv_std);
  return t->push(std::move(node));
}

Var embedding(Var table, std::span<const int> ids) {
  Tape* t = tape_of("embedding", table);
  const Tensor& T = table.value();
  if (ids.empty()) {
    throw ShapeError("embedding: empty id list");
  }
  Tensor out(ids.size(), T.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= T.rows()) {
      throw ShapeError("embedding: id " + std::to_string(ids[i]) + " outside table " +
                       T.shape_str());
    }
    std::copy_n(&T.data[static_cast<std::size_t>(ids[i]) * T.cols()], T.cols(), &out(i, 0));
  }
  Node n = make(OpKind::Embedding, {table.id}, std::move(out));
  n.ids.assign(ids.begin(), ids.end());
  return t->push(std::move(n));
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_cols: no operands");
  }
  Tape* t = tape_of("concat_cols", parts[0]);
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const Var& p : parts) {
    same_tape("concat_cols", parts[0], p);
    if (p.rows() != rows) {
      shape_error("concat_cols", parts[0].value(), p.value());
    }
    cols += p.cols();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  Node n;
  n.op = OpKind::ConcatCols;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    for (std::size_t i = 0; i < rows; ++i) {
      std::copy_n(&P.data[i * P.cols()], P.cols(), &out(i, off));
    }
    off += P.cols();
    n.inputs.push_back(p.id);
  }
  n.value = std::move(out);
  return t->push(std::move(n));
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) {
    throw ShapeError("concat_rows: no operands");
  }
  Tape* t = tape_of("concat_rows", parts[0]);
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const Var& p : parts) {
    same_tape("concat_rows", parts[0], p);
    if (p.cols() != cols) {
      shape_error("concat_rows", parts[0].value(), p.value());
    }
    rows += p.rows();
  }
  Tensor out(rows, cols);
  std::size_t off = 0;
  Node n;
  n.op = OpKind::ConcatRows;
  for (const Var& p : parts) {
    const Tensor& P = p.value();
    std::copy(P.data.begin(), P.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += P.size();
    n.inputs.push_back(p.id);
  }
  n.value = std::move(out);
  return t->push(std::move(n));
}

Var slice_cols(Var a, std::size_t start, std::size_t count) {
  Tape* t = tape_of("slice_cols", a);
  const Tensor& A = a.value();
  if (count == 0 || start + count > A.cols()) {
    throw ShapeError("slice_cols: columns [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + A.shape_str());
  }
  Tensor out(A.rows(), count);
  for (std::size_t i = 0; i < A.rows(); ++i) {
    std::copy_n(&A(i, start), count, &out(i, 0));
  }
  Node n = make(OpKind::SliceCols, {a.id}, std::move(out));
  n.offset = start;
  return t->push(std::move(n));
}

Var slice_rows(Var a, std::size_t start, std::size_t count) {
  Tape* t = tape_of("slice_rows", a);
  const Tensor& A = a.value();
  if (count == 0 || start + count > A.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " +
                     std::to_string(start + count) + ") outside " + A.shape_str());
  }
  Tensor out(count, A.cols());
  std::copy_n(&A(start, 0), count * A.cols(), out.data.begin());
  Node n = make(OpKind::SliceRows, {a.id}, std::move(out));
  n.offset = start;
  return t->push(std::move(n));
}

Var sum(Var a) {
  Tape* t = tape_of("sum", a);
  double s = 0.0;
  for (double v : a.value().data) {
    s += v;
  }
  return t->push(make(OpKind::Sum, {a.id}, Tensor::scalar(s)));
}

Var cross_entropy(Var logits, std::span<const int> targets) {
  Tape* t = tape_of("cross_entropy", logits);
  const Tensor& L = logits.value();
  if (targets.size() != L.rows()) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     L.shape_str());
  }
  Tensor probs(L.rows(), L.cols());
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t i = 0; i < L.rows(); ++i) {
    double mx = L(i, 0);
    for (std::size_t j = 1; j < L.cols(); ++j) {
      mx = std::max(mx, L(i, j));
    }
    double z = 0.0;
    for (std::size_t j = 0; j < L.cols(); ++j) {
      probs(i, j) = std::exp(L(i, j) - mx);
      z += probs(i, j);
    }
    for (std::size_t j = 0; j < L.cols(); ++j) {
      probs(i, j) /= z;
    }
    if (targets[i] < 0) {
      continue;
    }
    if (static_cast<std::size_t>(targets[i]) >= L.cols()) {
      throw ShapeError("cross_entropy: target " + std::to_string(targets[i]) +
                       " outside vocabulary of " + std::to_string(L.cols()));
    }
    total += -(L(i, static_cast<std::size_t>(targets[i])) - mx - std::log(z));
    ++counted;
  }
  if (counted == 0) {
    throw ShapeError("cross_entropy: every target is ignored");
  }
  Node n = make(OpKind::CrossEntropy, {logits.id}, Tensor::scalar(total / static_cast<double>(counted)));
  n.ids.assign(targets.begin(), targets.end());
  n.aux = std::move(probs);
  n.scalar = static_cast<double>(counted);
  return t->push(std::move(n));
}

Var l1_loss(Var pred, const Tensor& target) {
  Tape* t = tape_of("l1_loss", pred);
  const Tensor& P = pred.value();
  if (!P.same_shape(target)) {
    shape_error("l1_loss", P, target);
  }
  double s = 0.0;
  for (std::size_t i = 0; i < P.size(); ++i) {
    s += std::abs(P.data[i] - target.data[i]);
  }
  Node n = make(OpKind::L1Loss, {pred.id}, Tensor::scalar(s / static_cast<double>(P.size())));
  n.aux = target;
  return t->push(std::move(n));
}

// ---------------------------------------------------------------- backward

Gradients Tape::backward(Var loss) const {
  if (loss.tape != this) {
    throw Error("backward: loss lives on a different tape");
  }
  if (value(loss.id).size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + value(loss.id).shape_str());
  }
  std::vector<Tensor> g(nodes_.size());
  auto grad_of = [&](int id) -> Tensor& {
    Tensor& t = g[static_cast<std::size_t>(id)];
    if (t.data.empty()) {
      const Tensor& v = value(id);
      t = Tensor(v.rows(), v.cols());
    }
    return t;
  };
  grad_of(loss.id).data[0] = 1.0;

  for (int id = loss.id; id >= 0; --id) {
    const Tensor& dy = g[static_cast<std::size_t>(id)];
    if (dy.data.empty()) {
      continue;
    }
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const Tensor& y = n.value_ref();
    switch (n.op) {
      case OpKind::Constant:
      case OpKind::Param:
        break;
      case OpKind::MatMul: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& B = value(n.inputs[1]);
        // dA += dY B^T ; dB += A^T dY
        gemm_nt(dy.data.data(), B.data.data(), grad_of(n.inputs[0]).data.data(), A.rows(),
                B.cols(), A.cols());
        gemm_tn(A.data.data(), dy.data.data(), grad_of(n.inputs[1]).data.data(), A.rows(),
                A.cols(), B.cols());
        break;
      }
      case OpKind::MatMulNT: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& B = value(n.inputs[1]);
        // Y = A B^T: dA += dY B ; dB += dY^T A
        gemm_nn(dy.data.data(), B.data.data(), grad_of(n.inputs[0]).data.data(), A.rows(),
                B.rows(), A.cols());
        gemm_tn(dy.data.data(), A.data.data(), grad_of(n.inputs[1]).data.data(), A.rows(),
                B.rows(), A.cols());
        break;
      }
      case OpKind::Transpose: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            da(j, i) += dy(i, j);
          }
        }
        break;
      }
      case OpKind::Add:
      case OpKind::Sub: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          da.data[i] += dy.data[i];
        }
        Tensor& db = grad_of(n.inputs[1]);
        const double sign = n.op == OpKind::Add ? 1.0 : -1.0;
        for (std::size_t i = 0; i < dy.size(); ++i) {
          db.data[i] += sign * dy.data[i];
        }
        break;
      }
      case OpKind::Mul: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& B = value(n.inputs[1]);
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          da.data[i] += dy.data[i] * B.data[i];
        }
        Tensor& db = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          db.data[i] += dy.data[i] * A.data[i];
        }
        break;
      }
      case OpKind::AddRow: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          da.data[i] += dy.data[i];
        }
        Tensor& dr = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            dr.data[j] += dy(i, j);
          }
        }
        break;
      }
      case OpKind::MulRow: {
        const Tensor& A = value(n.inputs[0]);
        const Tensor& R = value(n.inputs[1]);
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            da(i, j) += dy(i, j) * R.data[j];
          }
        }
        Tensor& dr = grad_of(n.inputs[1]);
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            dr.data[j] += dy(i, j) * A(i, j);
          }
        }
        break;
      }
      case OpKind::Scale: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          da.data[i] += n.scalar * dy.data[i];
        }
        break;
      }
      case OpKind::Relu: {
        const Tensor& A = value(n.inputs[0]);
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          if (A.data[i] > 0.0) {
            da.data[i] += dy.data[i];
          }
        }
        break;
      }
      case OpKind::Sigmoid: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.size(); ++i) {
          da.data[i] += dy.data[i] * y.data[i] * (1.0 - y.data[i]);
        }
        break;
      }
      case OpKind::MaskedSoftmax: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            dot += dy(i, j) * y(i, j);
          }
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            da(i, j) += y(i, j) * (dy(i, j) - dot);
          }
        }
        break;
      }
      case OpKind::LayerNorm: {
        Tensor& da = grad_of(n.inputs[0]);
        const double cols = static_cast<double>(dy.cols());
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          double mean_dy = 0.0;
          double mean_dy_y = 0.0;
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            mean_dy += dy(i, j);
            mean_dy_y += dy(i, j) * y(i, j);
          }
          mean_dy /= cols;
          mean_dy_y /= cols;
          const double is = n.aux.data[i];
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            da(i, j) += is * (dy(i, j) - mean_dy - y(i, j) * mean_dy_y);
          }
        }
        break;
      }
      case OpKind::Embedding: {
        Tensor& dt = grad_of(n.inputs[0]);
        const std::size_t d = dy.cols();
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          double* row = &dt.data[static_cast<std::size_t>(n.ids[i]) * d];
          for (std::size_t j = 0; j < d; ++j) {
            row[j] += dy(i, j);
          }
        }
        break;
      }
      case OpKind::ConcatCols: {
        std::size_t off = 0;
        for (int in : n.inputs) {
          Tensor& dp = grad_of(in);
          for (std::size_t i = 0; i < dp.rows(); ++i) {
            for (std::size_t j = 0; j < dp.cols(); ++j) {
              dp(i, j) += dy(i, off + j);
            }
          }
          off += dp.cols();
        }
        break;
      }
      case OpKind::ConcatRows: {
        std::size_t off = 0;
        for (int in : n.inputs) {
          Tensor& dp = grad_of(in);
          for (std::size_t i = 0; i < dp.size(); ++i) {
            dp.data[i] += dy.data[off + i];
          }
          off += dp.size();
        }
        break;
      }
      case OpKind::SliceCols: {
        Tensor& da = grad_of(n.inputs[0]);
        for (std::size_t i = 0; i < dy.rows(); ++i) {
          for (std::size_t j = 0; j < dy.cols(); ++j) {
            da(i, n.offset + j) += dy(i, j);
          }
        }
        break;
      }
      case OpKind::SliceRows: {
        Tensor& da = grad_of(n.inputs[0]);
        const std::size_t base = n.offset * dy.cols();
        for (std::size_t i = 0; i < dy.size(); ++i) {
          da.data[base + i] += dy.data[i];
        }
        break;
      }
      case OpKind::Sum: {
        Tensor& da = grad_of(n.inputs[0]);
        for (double& v : da.data) {
          v += dy.data[0];
        }
        break;
      }
      case OpKind::CrossEntropy: {
        Tensor& dl = grad_of(n.inputs[0]);
        const double w = dy.data[0] / n.scalar;
        for (std::size_t i = 0; i < n.ids.size(); ++i) {
          if (n.ids[i] < 0) {
            continue;
          }
          for (std::size_t j = 0; j < dl.cols(); ++j) {
            dl(i, j) += w * n.aux(i, j);
          }
          dl(i, static_cast<std::size_t>(n.ids[i])) -= w;
        }
        break;
      }
      case OpKind::L1Loss: {
        const Tensor& P = value(n.inputs[0]);
        Tensor& dp = grad_of(n.inputs[0]);
        const double w = dy.data[0] / static_cast<double>(P.size());
        for (std::size_t i = 0; i < P.size(); ++i) {
          const double d = P.data[i] - n.aux.data[i];
          if (d > 0.0) {
            dp.data[i] += w;
          } else if (d < 0.0) {
            dp.data[i] -= w;
          }
        }
        break;
      }
    }
  }

  Gradients out;
  if (params_ != nullptr) {
    out.reserve(params_->size());
    for (std::size_t i = 0; i < params_->size(); ++i) {
      const Tensor& v = params_->value(i);
      const int node = i < param_nodes_.size() ? param_nodes_[i] : -1;
      if (node >= 0 && node <= loss.id && !g[static_cast<std::size_t>(node)].data.empty()) {
        out.push_back(std::move(g[static_cast<std::size_t>(node)]));
      } else {
        out.emplace_back(v.rows(), v.cols());
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- Adam

AdamState AdamState::zeros_like(const ParamStore& params) {
  AdamState s;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& v = params.value(i);
    s.first.emplace_back(v.rows(), v.cols());
    s.second.emplace_back(v.rows(), v.cols());
  }
  return s;
}

void adam_step(ParamStore& params, const Gradients& grads, AdamState& state, double lr) {
  if (grads.size() != params.size() || state.first.size() != params.size() ||
      state.second.size() != params.size()) {
    throw ShapeError("adam_step: " + std::to_string(params.size()) + " params, " +
                     std::to_string(grads.size()) + " grads, " +
                     std::to_string(state.first.size()) + " moments");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i].same_shape(params.value(i)) || !state.first[i].same_shape(params.value(i)) ||
        !state.second[i].same_shape(params.value(i))) {
      throw ShapeError("adam_step: shape mismatch for '" + params.name(i) + "'");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params.value(i);
    Tensor& m = state.first[i];
    Tensor& v = state.second[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m.data[j] = state.beta1 * m.data[j] + (1.0 - state.beta1) * g.data[j];
      v.data[j] = state.beta2 * v.data[j] + (1.0 - state.beta2) * g.data[j] * g.data[j];
      const double mhat = m.data[j] / c1;
      const double vhat = v.data[j] / c2;
      p.data[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

// ---------------------------------------------------------------- grad check

std::vector<Coordinate> sample_coordinates(const ParamStore& params, std::size_t count, Rng& rng,
                                           std::span<const std::size_t> selected) {
  std::vector<std::size_t> pool;
  if (selected.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      pool.push_back(i);
    }
  } else {
    pool.assign(selected.begin(), selected.end());
  }
  std::size_t total = 0;
  for (std::size_t p : pool) {
    total += params.value(p).size();
  }
  if (total == 0) {
    throw Error("sample_coordinates: no scalars to sample");
  }
  std::vector<Coordinate> out;
  out.reserve(count);
  for (std::size_t c = 0; c < count; ++c) {
    std::size_t k = rng.index(total);
    for (std::size_t p : pool) {
      const std::size_t n = params.value(p).size();
      if (k < n) {
        out.push_back({p, k});
        break;
      }
      k -= n;
    }
  }
  return out;
}

namespace {

double evaluate(const LossFn& fn, const ParamStore& params) {
  Tape tape(&params);
  const double v = fn(tape).value().item();
  if (!std::isfinite(v)) {
    throw NumericalError("grad_check: non-finite loss value");
  }
  return v;
}

}  // namespace

GradCheckResult grad_check(const LossFn& fn, ParamStore& params, double eps,
                           std::span<const Coordinate> coords) {
  if (!(eps >= 1e-7 && eps <= 1e-4)) {
    throw Error("grad_check: step must lie in [1e-7, 1e-4]");
  }
  Gradients analytic;
  {
    Tape tape(&params);
    Var loss = fn(tape);
    if (!std::isfinite(loss.value().item())) {
      throw NumericalError("grad_check: non-finite loss value");
    }
    analytic = tape.backward(loss);
  }
  GradCheckResult result;
  for (const Coordinate& c : coords) {
    double& x = params.value(c.param).data.at(c.index);
    const double saved = x;
    x = saved + eps;
    const double up = evaluate(fn, params);
    x = saved - eps;
    const double down = evaluate(fn, params);
    x = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic[c.param].data[c.index];
    if (!std::isfinite(numeric) || !std::isfinite(a)) {
      throw NumericalError("grad_check: non-finite derivative at '" + params.name(c.param) + "'");
    }
    const double err =
        std::abs(a - numeric) / std::max({kGradCheckFloor, std::abs(a), std::abs(numeric)});
    if (result.coordinates == 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst = c;
    }
    ++result.coordinates;
  }
  return result;
}

GradCheckResult grad_check(const LossFn& fn, ParamStore& params, double eps, std::size_t samples,
                           Rng& rng) {
  const auto coords = sample_coordinates(params, samples, rng);
  return grad_check(fn, params, eps, coords);
}

}  // namespace mitr
