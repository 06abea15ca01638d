#include <doctest.h>

#include <cmath>
#include <functional>
#include <memory>

#include "mitr/autodiff.hpp"
#include "mitr/error.hpp"

using namespace mitr;

namespace {

Tensor random_tensor(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0, double hi = 1.0) {
  Tensor t(r, c);
  for (double& v : t.data) {
    v = rng.uniform(lo, hi);
  }
  return t;
}

// Values away from the ReLU kink.
Tensor off_kink(Rng& rng, std::size_t r, std::size_t c) {
  Tensor t(r, c);
  for (double& v : t.data) {
    const double m = rng.uniform(0.05, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

// Central differences over every coordinate of every parameter, compared
// with backward() using a pure relative error (floor 1e-8).
double check_all(ParamStore& params, const LossFn& fn, double eps = 1e-6) {
  Gradients analytic;
  {
    Tape tape(&params);
    analytic = tape.backward(fn(tape));
  }
  double worst = 0.0;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params.value(p).size(); ++i) {
      double& x = params.value(p).data[i];
      const double saved = x;
      x = saved + eps;
      double up, down;
      {
        Tape t(&params);
        up = fn(t).value().item();
      }
      x = saved - eps;
      {
        Tape t(&params);
        down = fn(t).value().item();
      }
      x = saved;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[p].data[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1e-8, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

// Fixed random projection turning any tensor into a scalar, so every output
// entry carries a distinct upstream gradient.
Var project(Var x, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(x, x.tape->constant(random_tensor(rng, x.rows(), x.cols()))));
}

}  // namespace

TEST_CASE("relu fixture and kink convention") {
  Tape tape;
  const Var x = tape.constant(Tensor(1, 3, {-1.0, 0.0, 2.0}));
  CHECK(relu(x).value() == Tensor(1, 3, {0.0, 0.0, 2.0}));

  ParamStore ps;
  ps.add("x", Tensor(1, 3, {0.0, 0.0, 0.0}));
  Tape t2(&ps);
  const auto g = t2.backward(sum(relu(t2.param(0))));
  CHECK(g[0] == Tensor(1, 3, {0.0, 0.0, 0.0}));
}

TEST_CASE("masked softmax fixture") {
  Tape tape;
  auto mask = std::make_shared<Mask>(Mask::full(1, 3));
  mask->allowed[2] = 0;
  const Var s = masked_softmax(tape.constant(Tensor(1, 3, {0.7, 0.7, 5.0})), mask);
  CHECK(s.value()(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.value()(0, 1) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s.value()(0, 2) == 0.0);
}

TEST_CASE("masked softmax rows sum to one and masked entries are exactly zero") {
  Rng rng(3);
  Tape tape;
  const Tensor logits = random_tensor(rng, 5, 5, -20.0, 20.0);
  const auto mask = std::make_shared<Mask>(Mask::causal(5, 5));
  const Tensor& s = masked_softmax(tape.constant(logits), mask).value();
  for (std::size_t i = 0; i < 5; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j > i) {
        CHECK(s(i, j) == 0.0);
      }
      row += s(i, j);
    }
    CHECK(std::abs(row - 1.0) <= 1e-12);
  }
}

TEST_CASE("fully masked softmax row is an error") {
  Tape tape;
  auto mask = std::make_shared<Mask>(Mask::full(2, 2));
  mask->allowed[2] = 0;
  mask->allowed[3] = 0;
  CHECK_THROWS_AS(masked_softmax(tape.constant(Tensor(2, 2, 0.0)), mask), NumericalError);
}

TEST_CASE("matmul of ones") {
  Tape tape;
  const Var c = matmul(tape.constant(Tensor(2, 3, 1.0)), tape.constant(Tensor(3, 2, 1.0)));
  CHECK(c.value() == Tensor(2, 2, 3.0));
}

TEST_CASE("shape mismatch names the operation and shapes") {
  Tape tape;
  try {
    matmul(tape.constant(Tensor(2, 3, 1.0)), tape.constant(Tensor(2, 3, 1.0)));
    FAIL("expected a shape error");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("matmul") != std::string::npos);
    CHECK(what.find("2x3") != std::string::npos);
  }
}

TEST_CASE("gradient of sum is all ones") {
  ParamStore ps;
  ps.add("x", Tensor(3, 4, 0.25));
  Tape tape(&ps);
  const auto g = tape.backward(sum(tape.param(0)));
  CHECK(g[0] == Tensor(3, 4, 1.0));
}

TEST_CASE("gradient of half squared norm is the input") {
  ParamStore ps;
  ps.add("x", Tensor(1, 2, {1.0, 2.0}));
  Tape tape(&ps);
  const Var x = tape.param(0);
  const auto g = tape.backward(scale(sum(mul(x, x)), 0.5));
  CHECK(g[0] == Tensor(1, 2, {1.0, 2.0}));
}

TEST_CASE("unreached parameters get exact zeros and non-scalar loss is rejected") {
  ParamStore ps;
  ps.add("used", Tensor(1, 2, 1.0));
  ps.add("unused", Tensor(2, 2, 1.0));
  Tape tape(&ps);
  const auto g = tape.backward(sum(tape.param(0)));
  CHECK(g[1] == Tensor(2, 2, 0.0));
  CHECK_THROWS_AS(tape.backward(tape.param(1)), ShapeError);
}

TEST_CASE("every operation matches central differences") {
  Rng rng(42);
  ParamStore ps;
  const auto a = ps.add("a", random_tensor(rng, 3, 4));
  const auto b = ps.add("b", random_tensor(rng, 4, 5));
  const auto c = ps.add("c", random_tensor(rng, 3, 4));
  const auto row = ps.add("row", random_tensor(rng, 1, 4));
  const auto r = ps.add("r", off_kink(rng, 3, 4));
  const auto table = ps.add("table", random_tensor(rng, 6, 4));
  const auto bt = ps.add("bt", random_tensor(rng, 5, 4));

  Tensor l1_target = ps.value(r);
  for (double& v : l1_target.data) v += rng.uniform(-0.04, 0.04) + 0.3 * (v > 0 ? 1 : -1);

  using Case = std::pair<const char*, LossFn>;
  const std::vector<Case> cases{
      {"matmul", [&](Tape& t) { return project(matmul(t.param(a), t.param(b)), 1); }},
      {"matmul_nt", [&](Tape& t) { return project(matmul_nt(t.param(a), t.param(bt)), 2); }},
      {"transpose", [&](Tape& t) { return project(transpose(t.param(a)), 3); }},
      {"add", [&](Tape& t) { return project(add(t.param(a), t.param(c)), 4); }},
      {"sub", [&](Tape& t) { return project(sub(t.param(a), t.param(c)), 5); }},
      {"mul", [&](Tape& t) { return project(mul(t.param(a), t.param(c)), 6); }},
      {"add_row", [&](Tape& t) { return project(add_row(t.param(a), t.param(row)), 7); }},
      {"mul_row", [&](Tape& t) { return project(mul_row(t.param(a), t.param(row)), 8); }},
      {"scale", [&](Tape& t) { return project(scale(t.param(a), -1.7), 9); }},
      {"relu", [&](Tape& t) { return project(relu(t.param(r)), 10); }},
      {"sigmoid", [&](Tape& t) { return project(sigmoid(t.param(a)), 11); }},
      {"softmax", [&](Tape& t) { return project(masked_softmax(t.param(a)), 12); }},
      {"masked softmax",
       [&](Tape& t) {
         return project(masked_softmax(t.param(a), std::make_shared<Mask>(Mask::causal(3, 4))), 13);
       }},
      {"layer_norm", [&](Tape& t) { return project(layer_norm(t.param(a)), 14); }},
      {"embedding",
       [&](Tape& t) {
         const std::vector<int> ids{5, 0, 5, 2};
         return project(embedding(t.param(table), ids), 15);
       }},
      {"concat_cols",
       [&](Tape& t) {
         const Var parts[] = {t.param(a), t.param(c)};
         return project(concat_cols(parts), 16);
       }},
      {"concat_rows",
       [&](Tape& t) {
         const Var parts[] = {t.param(a), t.param(row)};
         return project(concat_rows(parts), 17);
       }},
      {"slice_cols", [&](Tape& t) { return project(slice_cols(t.param(a), 1, 2), 18); }},
      {"slice_rows", [&](Tape& t) { return project(slice_rows(t.param(table), 2, 3), 19); }},
      {"cross_entropy",
       [&](Tape& t) {
         const std::vector<int> targets{1, -1, 3};
         return cross_entropy(t.param(a), targets);
       }},
      {"l1_loss",
       [&](Tape& t) { return l1_loss(t.param(r), l1_target); }},
  };
  for (const auto& [name, fn] : cases) {
    INFO(std::string(name));
    const double err = check_all(ps, fn);
    INFO(err);
    CHECK(err <= 1e-6);
  }
}

TEST_CASE("cross entropy of uniform logits is log of the class count") {
  Tape tape;
  const std::vector<int> targets{0, 3, 6};
  const Var l = cross_entropy(tape.constant(Tensor(3, 7, 0.4)), targets);
  CHECK(std::abs(l.value().item() - std::log(7.0)) <= 1e-12);
}

TEST_CASE("layer norm output has zero mean and unit variance up to eps") {
  Rng rng(8);
  Tape tape;
  const Tensor x = random_tensor(rng, 2, 16, -3.0, 3.0);
  const Tensor& y = layer_norm(tape.constant(x)).value();
  for (std::size_t i = 0; i < 2; ++i) {
    double mean = 0.0, var = 0.0, xm = 0.0, xv = 0.0;
    for (std::size_t j = 0; j < 16; ++j) {
      mean += y(i, j) / 16;
      xm += x(i, j) / 16;
    }
    for (std::size_t j = 0; j < 16; ++j) {
      var += (y(i, j) - mean) * (y(i, j) - mean) / 16;
      xv += (x(i, j) - xm) * (x(i, j) - xm) / 16;
    }
    CHECK(std::abs(mean) <= 1e-12);
    CHECK(std::abs(var - xv / (xv + kLayerNormEps)) <= 1e-12);
  }
}

TEST_CASE("grad_check: quadratic is exact and constants give zero") {
  Rng rng(5);
  ParamStore ps;
  ps.add("x", random_tensor(rng, 3, 3));
  const LossFn quad = [](Tape& t) {
    const Var x = t.param(0);
    return sum(mul(x, x));
  };
  CHECK(grad_check(quad, ps, 1e-5, 9, rng).max_rel_error <= 1e-9);
  const LossFn constant = [](Tape& t) { return t.constant(Tensor::scalar(2.5)); };
  const auto r = grad_check(constant, ps, 1e-5, 9, rng);
  CHECK(r.max_rel_error == 0.0);
  CHECK_THROWS(grad_check(quad, ps, 1e-3, 3, rng));
}

TEST_CASE("adam: one step against a hand computation") {
  ParamStore ps;
  ps.add("w", Tensor(1, 3, {1.0, -2.0, 0.5}));
  const Gradients g{Tensor(1, 3, {0.3, -4.0, 1e-9})};
  AdamState st = AdamState::zeros_like(ps);
  const double lr = 0.01;
  adam_step(ps, g, st, lr);
  CHECK(st.step == 1);
  const double w0[] = {1.0, -2.0, 0.5};
  for (std::size_t i = 0; i < 3; ++i) {
    const double gi = g[0].data[i];
    const double m = 0.1 * gi, v = 0.001 * gi * gi;
    const double mhat = m / (1 - 0.9), vhat = v / (1 - 0.999);
    const double expect = w0[i] - lr * mhat / (std::sqrt(vhat) + 1e-8);
    CHECK(std::abs(ps.value(0).data[i] - expect) <= 1e-15);
  }
  // Large gradients move by almost exactly lr in the sign direction.
  CHECK(std::abs(ps.value(0).data[0] - (1.0 - lr)) <= 1e-8);
}

TEST_CASE("adam: zero gradients and zero rate leave parameters alone") {
  ParamStore ps;
  ps.add("w", Tensor(2, 2, 0.7));
  const ParamStore before = ps;
  AdamState st = AdamState::zeros_like(ps);
  adam_step(ps, Gradients{Tensor(2, 2, 0.0)}, st, 0.1);
  CHECK(ps == before);
  CHECK(st.first[0] == Tensor(2, 2, 0.0));
  CHECK(st.second[0] == Tensor(2, 2, 0.0));
  adam_step(ps, Gradients{Tensor(2, 2, 3.0)}, st, 0.0);
  CHECK(ps == before);
  CHECK_THROWS(adam_step(ps, Gradients{Tensor(1, 2, 0.0)}, st, 0.1));
}

TEST_CASE("tape replay is bit-identical") {
  Rng rng(9);
  const Tensor x = random_tensor(rng, 4, 6);
  auto run = [&] {
    Tape tape;
    return layer_norm(matmul_nt(tape.constant(x), tape.constant(x))).value();
  };
  CHECK(run() == run());
}
