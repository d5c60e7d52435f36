#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ddeq/autodiff.hpp"

using namespace ddeq;

namespace {

Tensor randn(Rng& rng, int64_t r, int64_t c) { return rng.normal_matrix(r, c); }

Tensor randn3(Rng& rng, int64_t a, int64_t b, int64_t c) {
  Tensor t(a, b, c);
  for (auto& v : t.vec()) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("relu forward and backward") {
  Tape t;
  Tensor x(1, 4);
  x.vec() = {-2.0, -0.5, 0.5, 3.0};
  Var xv = t.leaf(x, true);
  Var y = t.sum_all(t.relu(xv));
  Tensor g = t.value(t.grad(y, {xv})[0]);
  CHECK(g(0, 0) == 0.0);
  CHECK(g(0, 1) == 0.0);
  CHECK(g(0, 2) == 1.0);
  CHECK(g(0, 3) == 1.0);
}

TEST_CASE("masked softmax with a single unmasked logit") {
  Tape t;
  Tensor x(2, 3);
  x.vec() = {1.0, 5.0, -2.0, 0.0, 0.5, 9.0};
  Var xv = t.leaf(x, true);
  Var y = t.masked_softmax(xv, {0, 1, 0});
  CHECK(t.value(y)(0, 1) == 1.0);
  CHECK(t.value(y)(1, 1) == 1.0);
  CHECK(t.value(y)(0, 0) == 0.0);
  // constant output => zero gradient for the logits
  Var s = t.sum_all(t.mul(y, t.constant(Tensor::full(2, 3, 1.5))));
  Tensor g = t.value(t.grad(s, {xv})[0]);
  for (double v : g.vec()) CHECK(v == 0.0);
}

TEST_CASE("masked softmax rejects an all-masked row") {
  Tape t;
  Var xv = t.leaf(Tensor::zeros(1, 3), true);
  CHECK_THROWS_AS(t.masked_softmax(xv, {0, 0, 0}), AllSourcesMasked);
}

TEST_CASE("grad requires a scalar output") {
  Tape t;
  Var xv = t.leaf(Tensor::zeros(2, 2), true);
  CHECK_THROWS_AS(t.grad(xv, {xv}), NotScalarOutput);
}

TEST_CASE("sum of leaf gives all-ones; untouched leaf gives zeros") {
  Tape t;
  Rng rng(7);
  Var a = t.leaf(randn(rng, 3, 2), true);
  Var b = t.leaf(randn(rng, 2, 2), true);
  Var y = t.sum_all(a);
  auto g = t.grad(y, {a, b});
  for (double v : t.value(g[0]).vec()) CHECK(v == 1.0);
  for (double v : t.value(g[1]).vec()) CHECK(v == 0.0);
}

TEST_CASE("gradcheck: every primitive against central finite differences") {
  Rng rng(42);
  std::vector<GradCheckItem> items;
  auto run = [&](const std::string& name, const GradCheckFn& f,
                 std::vector<Tensor> inputs) {
    items.push_back(gradcheck(name, f, inputs, 1e-6));
  };

  run("add",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.add(v[0], v[1]), v[2]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4), randn(rng, 3, 4)});
  run("sub",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.sub(v[0], v[1]), v[2]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4), randn(rng, 3, 4)});
  run("mul",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.mul(v[0], v[1]), v[2]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4), randn(rng, 3, 4)});
  {
    Tensor denom = randn(rng, 3, 4);
    for (auto& x : denom.vec()) x += x > 0 ? 1.0 : -1.0;  // keep away from 0
    run("div_nz",
        [](Tape& t, const std::vector<Var>& v) {
          return t.sum_all(t.mul(t.div_nz(v[0], v[1]), v[2]));
        },
        {randn(rng, 3, 4), denom, randn(rng, 3, 4)});
  }
  run("scale",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.scale(v[0], -1.7), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4)});
  run("add_scalar",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.add_scalar(v[0], 0.3), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4)});
  run("matmul",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.matmul(v[0], v[1]), v[2]));
      },
      {randn(rng, 4, 5), randn(rng, 5, 3), randn(rng, 4, 3)});
  run("matmul_tn",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.matmul(v[0], v[1], true, false), v[2]));
      },
      {randn(rng, 5, 4), randn(rng, 5, 3), randn(rng, 4, 3)});
  run("matmul_nt",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.matmul(v[0], v[1], false, true), v[2]));
      },
      {randn(rng, 4, 5), randn(rng, 3, 5), randn(rng, 4, 3)});
  run("matmul_tt",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.matmul(v[0], v[1], true, true), v[2]));
      },
      {randn(rng, 5, 4), randn(rng, 3, 5), randn(rng, 4, 3)});
  run("transpose",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.transpose(v[0]), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 4, 3)});
  {
    Tensor x = randn(rng, 3, 4);
    for (auto& v : x.vec()) v += v > 0 ? 0.5 : -0.5;  // avoid the kink
    run("relu",
        [](Tape& t, const std::vector<Var>& v) {
          return t.sum_all(t.mul(t.relu(v[0]), v[1]));
        },
        {x, randn(rng, 3, 4)});
  }
  run("exp",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.exp(v[0]), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4)});
  {
    Tensor x = randn(rng, 3, 4);
    for (auto& v : x.vec()) v = std::abs(v) + 0.5;
    run("log",
        [](Tape& t, const std::vector<Var>& v) {
          return t.sum_all(t.mul(t.log(v[0]), v[1]));
        },
        {x, randn(rng, 3, 4)});
    run("sqrt",
        [](Tape& t, const std::vector<Var>& v) {
          return t.sum_all(t.mul(t.sqrt(v[0]), v[1]));
        },
        {x, randn(rng, 3, 4)});
  }
  run("row_sum",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.row_sum(v[0]), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 1)});
  run("col_sum",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.col_sum(v[0]), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 1, 4)});
  run("broadcast_row",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.broadcast_row(v[0], 5), v[1]));
      },
      {randn(rng, 1, 4), randn(rng, 5, 4)});
  run("broadcast_col",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.broadcast_col(v[0], 6), v[1]));
      },
      {randn(rng, 3, 1), randn(rng, 3, 6)});
  run("broadcast_scalar",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.broadcast_scalar(v[0], 3, 4), v[1]));
      },
      {randn(rng, 1, 1), randn(rng, 3, 4)});
  run("concat_slice",
      [](Tape& t, const std::vector<Var>& v) {
        Var c = t.concat_cols(v[0], v[1]);
        return t.sum_all(t.mul(t.slice_cols(c, 1, 5), v[2]));
      },
      {randn(rng, 3, 2), randn(rng, 3, 4), randn(rng, 3, 4)});
  run("tensor_vec_contract",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.tensor_vec_contract(v[0], v[1]), v[2]));
      },
      {randn3(rng, 3, 4, 5), randn(rng, 1, 5), randn(rng, 3, 4)});
  run("outer3_contract3",
      [](Tape& t, const std::vector<Var>& v) {
        Var o = t.outer3(v[0], v[1]);
        return t.sum_all(t.mul(t.contract3(o, v[2]), v[3]));
      },
      {randn(rng, 3, 4), randn(rng, 1, 5), randn(rng, 3, 4),
       randn(rng, 1, 5)});
  run("pairwise_dist",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.pairwise_dist(v[0], v[1]), v[2]));
      },
      {randn(rng, 4, 3), randn(rng, 5, 3), randn(rng, 4, 5)});
  run("pairwise_sqdist",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.pairwise_sqdist(v[0], v[1]), v[2]));
      },
      {randn(rng, 4, 3), randn(rng, 5, 3), randn(rng, 4, 5)});
  run("masked_softmax",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.masked_softmax(v[0], {1, 0, 1, 1}), v[1]));
      },
      {randn(rng, 3, 4), randn(rng, 3, 4)});
  run("masked_max_pool",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(t.masked_max_pool(v[0], {1, 1, 0, 1}), v[1]));
      },
      {randn(rng, 4, 5), randn(rng, 1, 5)});
  run("layer_norm",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(layer_norm(t, v[0]), v[1]));
      },
      {randn(rng, 3, 6), randn(rng, 3, 6)});
  run("masked_mean_rows",
      [](Tape& t, const std::vector<Var>& v) {
        return t.sum_all(t.mul(masked_mean_rows(t, v[0], {1, 0, 1, 1}), v[1]));
      },
      {randn(rng, 4, 3), randn(rng, 1, 3)});

  for (const auto& it : items) {
    INFO(it.name << " rel err " << it.max_rel_err);
    CHECK(it.pass);
  }
}

TEST_CASE("linear function is exact under gradcheck") {
  Rng rng(3);
  auto f = [](Tape& t, const std::vector<Var>& v) {
    return t.sum_all(t.scale(v[0], 2.5));
  };
  GradCheckItem item = gradcheck("linear", f, {randn(rng, 3, 3)}, 1e-10);
  CHECK(item.pass);
}

TEST_CASE("corrupted analytic gradient is detected") {
  Rng rng(5);
  std::vector<Tensor> inputs = {randn(rng, 2, 3)};
  auto f = [](Tape& t, const std::vector<Var>& v) {
    return t.sum_all(t.mul(v[0], v[0]));
  };
  Tape tape;
  Var x = tape.leaf(inputs[0], true);
  Tensor analytic = tape.value(tape.grad(f(tape, {x}), {x})[0]);
  analytic.vec()[0] += 0.25;  // deliberate corruption
  double err = grad_rel_err({analytic}, finite_diff_grad(f, inputs));
  CHECK(err > 1e-3);
}

TEST_CASE("double backward matches the analytic Hessian of a quartic") {
  // y = sum(x^2 * x^2) = sum(x^4); d2y/dx2 = 12 x^2, checked via grad of grad.
  Tape t;
  Tensor x0(1, 3);
  x0.vec() = {0.7, -1.3, 2.1};
  Var x = t.leaf(x0, true);
  Var x2 = t.mul(x, x);
  Var y = t.sum_all(t.mul(x2, x2));
  Var g = t.grad(y, {x})[0];  // 4 x^3
  // pick one coordinate of g and differentiate again
  Var g0 = t.slice_cols(g, 1, 2);
  Var h = t.grad(t.sum_all(g0), {x})[0];
  CHECK(t.value(h)(0, 1) == doctest::Approx(12.0 * 1.3 * 1.3).epsilon(1e-12));
  CHECK(t.value(h)(0, 0) == 0.0);
}

TEST_CASE("repeated backward over the same graph is bit-identical") {
  Rng rng(11);
  Tensor x0 = randn(rng, 4, 4);
  auto build = [&](Tensor& out_grad) {
    Tape t;
    Var x = t.leaf(x0, true);
    Var y = t.sum_all(t.mul(t.exp(t.scale(x, 0.3)), x));
    out_grad = t.value(t.grad(y, {x})[0]);
  };
  Tensor g1, g2;
  build(g1);
  build(g2);
  CHECK(g1.max_abs_diff(g2) == 0.0);
}

TEST_CASE("backward never writes nonzero gradient into masked positions") {
  Rng rng(13);
  Tensor x0 = randn(rng, 4, 3);
  Tape t;
  Var x = t.leaf(x0, true);
  std::vector<uint8_t> mask = {1, 0, 1, 0};
  Var z = zero_masked_rows(t, x, mask);
  Var y = t.sum_all(t.mul(z, z));
  Tensor g = t.value(t.grad(y, {x})[0]);
  for (int64_t i = 0; i < 4; ++i)
    if (!mask[i])
      for (int64_t j = 0; j < 3; ++j) CHECK(g(i, j) == 0.0);
}
