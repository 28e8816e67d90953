#include <cmath>
#include <cstring>

#include "doctest.h"
#include "support.hpp"
#include "trinet/graph.hpp"
#include "trinet/optimizer.hpp"

using namespace trinet;
using tritest::fd_check;
using tritest::kink_safe;
using tritest::random_tensor;

TEST_CASE("forward: identity graph") {
  Graph g;
  int x = g.input("x", {2});
  g.mark_output("y", x);
  auto ev = forward_eval(g, {{"x", Tensor({2}, {1, 2})}});
  auto out = output_values(g, ev);
  CHECK(out["y"].v == std::vector<double>{1, 2});
}

TEST_CASE("forward: dense with identity weights") {
  Graph g;
  int x = g.input("x", {2});
  int W = g.param("W", {2, 2});
  int b = g.param("b", {2});
  g.mark_output("y", g.dense(x, W, b));
  TensorMap bind{{"x", Tensor({2}, {3, 4})},
                 {"W", Tensor({2, 2}, {1, 0, 0, 1})},
                 {"b", Tensor({2}, {0, 0})}};
  auto out = output_values(g, forward_eval(g, bind));
  CHECK(out["y"].v == std::vector<double>{3, 4});
}

TEST_CASE("forward: relu of a negative value is zero") {
  Graph g;
  int x = g.input("x", {});
  g.mark_output("y", g.relu(x));
  auto out = output_values(g, forward_eval(g, {{"x", Tensor::scalar(-2)}}));
  CHECK(out["y"].item() == 0.0);
}

TEST_CASE("forward: determinism across calls") {
  Graph g;
  int x = g.input("x", {3});
  int W = g.param("W", {3, 4});
  int b = g.param("b", {4});
  int y = g.tanh_(g.dense(x, W, b));
  g.mark_output("y", y);
  Rng rng(7);
  TensorMap bind{{"x", random_tensor({3}, rng)},
                 {"W", random_tensor({3, 4}, rng)},
                 {"b", random_tensor({4}, rng)}};
  auto a = output_values(g, forward_eval(g, bind));
  auto c = output_values(g, forward_eval(g, bind));
  CHECK(a["y"].v == c["y"].v);
}

TEST_CASE("forward: unbound leaf and shape mismatch raise") {
  Graph g;
  int x = g.input("x", {2});
  g.mark_output("y", g.relu(x));
  CHECK_THROWS_WITH_AS(forward_eval(g, {}), doctest::Contains("'x'"), Error);
  CHECK_THROWS_AS(forward_eval(g, {{"x", Tensor({3}, {1, 2, 3})}}), Error);
}

TEST_CASE("forward: non-finite value aborts") {
  Graph g;
  int x = g.input("x", {});
  g.mark_output("y", g.sqrt_(x));
  CHECK_THROWS_WITH_AS(forward_eval(g, {{"x", Tensor::scalar(-1.0)}}),
                       doctest::Contains("non-finite"), Error);
}

TEST_CASE("backward: quadratic") {
  Graph g;
  int th = g.param("theta", {});
  int loss = g.square(th);
  auto ev = forward_eval(g, {{"theta", Tensor::scalar(3.0)}});
  auto grads = backward(g, ev, loss);
  CHECK(grads["theta"].item() == doctest::Approx(6.0));
}

TEST_CASE("backward: loss independent of parameter gives zero") {
  Graph g;
  int th = g.param("theta", {});
  int x = g.input("x", {});
  (void)th;
  int loss = g.square(x);
  auto ev = forward_eval(g, {{"theta", Tensor::scalar(1.0)}, {"x", Tensor::scalar(2.0)}});
  auto grads = backward(g, ev, loss);
  CHECK(grads["theta"].item() == 0.0);
}

TEST_CASE("backward: requires evaluated graph and scalar loss") {
  Graph g;
  int th = g.param("theta", {2});
  int loss = g.sum(g.square(th));
  Evaluation ev;  // never evaluated
  CHECK_THROWS_WITH_AS(backward(g, ev, loss), doctest::Contains("not evaluated"), Error);
  auto ok = forward_eval(g, {{"theta", Tensor({2}, {1, 2})}});
  CHECK_THROWS_WITH_AS(backward(g, ok, th), doctest::Contains("scalar"), Error);
}

TEST_CASE("backward: two-layer net matches central finite differences") {
  Rng rng(11);
  Graph g;
  int x = g.input("x", {2, 3});
  int W1 = g.param("W1", {3, 4});
  int b1 = g.param("b1", {4});
  int W2 = g.param("W2", {4, 1});
  int b2 = g.param("b2", {1});
  int h1 = g.tanh_(g.dense(x, W1, b1));
  int loss = g.mean(g.square(g.dense(h1, W2, b2)));
  TensorMap bind{{"x", random_tensor({2, 3}, rng)},
                 {"W1", random_tensor({3, 4}, rng)},
                 {"b1", random_tensor({4}, rng)},
                 {"W2", random_tensor({4, 1}, rng)},
                 {"b2", random_tensor({1}, rng)}};
  auto rep = fd_check(g, bind, loss, {"W1", "b1", "W2", "b2"});
  CHECK(rep.max_rel_err < 1e-4);
  CHECK(rep.checked == 3 * 4 + 4 + 4 + 1);
}

TEST_CASE("backward: every smooth op matches finite differences over 100 seeds") {
  // one compound graph touching dense/matmul/activations/reductions/eltwise
  int done = 0;
  for (std::uint64_t seed = 0; done < 100; ++seed) {
    Rng rng(seed);
    Graph g;
    int x = g.input("x", {2, 3});
    int W = g.param("W", {3, 3});
    int b = g.param("b", {3});
    int E = g.param("E", {2, 3});
    int h = g.sigmoid(g.dense(x, W, b));
    int t = g.tanh_(g.matmul(h, W));
    int lr = g.leaky_relu(g.sub(t, E), 0.2);
    int r = g.relu(g.add(lr, E));
    int mixed = g.mul(g.add_scalar(g.scale(r, 1.5), 0.25), g.sigmoid(E));
    int sm = g.log_softmax(mixed);
    int p = g.softmax(mixed);
    int q = g.div(g.add_scalar(g.square(p), 1.0), g.add_scalar(g.sqrt_(g.add_scalar(g.square(sm), 1.0)), 0.5));
    int cat = g.concat_cols(q, g.neg(p));
    int loss = g.add(g.mean(cat), g.scale(g.sum(g.row_sum(q)), 0.01));
    TensorMap bind{{"x", random_tensor({2, 3}, rng)},
                   {"W", random_tensor({3, 3}, rng)},
                   {"b", random_tensor({3}, rng)},
                   {"E", random_tensor({2, 3}, rng)}};
    auto ev = forward_eval(g, bind);
    if (!kink_safe(g, ev)) continue;
    auto rep = fd_check(g, bind, loss, {"W", "b", "E"});
    CHECK(rep.max_rel_err < 1e-4);
    ++done;
  }
}

TEST_CASE("backward: linearity of the reverse pass") {
  Rng rng(5);
  Graph g;
  int th = g.param("theta", {4});
  int a = g.sum(g.square(th));
  int b = g.mean(g.mul(th, th));
  int both = g.add(a, b);
  TensorMap bind{{"theta", random_tensor({4}, rng)}};
  auto ev = forward_eval(g, bind);
  auto ga = backward(g, ev, a);
  auto gb = backward(g, ev, b);
  auto gs = backward(g, ev, both);
  for (std::size_t i = 0; i < 4; ++i)
    CHECK(std::abs(gs["theta"].v[i] - (ga["theta"].v[i] + gb["theta"].v[i])) < 1e-10);
}

TEST_CASE("grad_wrt: double-backward of x^2") {
  // d/dx (df/dx)^2 = d/dx (2x)^2 = 8x
  for (double xv : {-1.5, -0.3, 0.2, 2.0}) {
    Graph g;
    int x = g.param("x", {});
    int f = g.square(x);
    int dfdx = g.grad_wrt(f, x);
    int q = g.square(dfdx);
    auto ev = forward_eval(g, {{"x", Tensor::scalar(xv)}});
    auto grads = backward(g, ev, q);
    CHECK(grads["x"].item() == doctest::Approx(8.0 * xv).epsilon(1e-6));
  }
}

TEST_CASE("grad_wrt: zero constant when output does not depend on wrt") {
  Graph g;
  int x = g.param("x", {2});
  int y = g.input("y", {});
  int loss = g.square(y);
  int gx = g.grad_wrt(loss, x);
  auto ev = forward_eval(g, {{"x", Tensor({2}, {1, 2})}, {"y", Tensor::scalar(3)}});
  CHECK(ev.value(gx).v == std::vector<double>{0, 0});
}

TEST_CASE("grad_l2_norm_rows: matches hand computation on a linear map") {
  // f(x) = sum(x @ W); per-row gradient is the column-sum vector of W
  Graph g;
  int x = g.input("x", {2, 2});
  int W = g.param("W", {2, 2});
  int b = g.param("b", {2});
  int out = g.dense(x, W, b);
  int s = g.sum(out);
  int norms = g.grad_l2_norm_rows(s, x);
  TensorMap bind{{"x", Tensor({2, 2}, {1, 2, 3, 4})},
                 {"W", Tensor({2, 2}, {1, 2, 3, 4})},
                 {"b", Tensor({2}, {0, 0})}};
  auto ev = forward_eval(g, bind);
  // dx[b,i] = sum_o W[i,o] -> row grad = [3, 7], norm = sqrt(9+49)
  const double expect = std::sqrt(58.0);
  CHECK(ev.value(norms).v[0] == doctest::Approx(expect));
  CHECK(ev.value(norms).v[1] == doctest::Approx(expect));
}

TEST_CASE("grad_l2_norm_rows: gradient-penalty term matches finite differences") {
  int done = 0;
  for (std::uint64_t seed = 0; done < 20; ++seed) {
    Rng rng(seed + 100);
    Graph g;
    int x = g.input("x", {3, 2});
    int W1 = g.param("W1", {2, 5});
    int b1 = g.param("b1", {5});
    int W2 = g.param("W2", {5, 1});
    int b2 = g.param("b2", {1});
    int h = g.leaky_relu(g.dense(x, W1, b1), 0.2);
    int score = g.dense(h, W2, b2);
    int ssum = g.sum(score);
    int norms = g.grad_l2_norm_rows(ssum, x);
    int gp = g.mean(g.square(g.add_scalar(norms, -1.0)));
    TensorMap bind{{"x", random_tensor({3, 2}, rng)},
                   {"W1", random_tensor({2, 5}, rng)},
                   {"b1", random_tensor({5}, rng)},
                   {"W2", random_tensor({5, 1}, rng)},
                   {"b2", random_tensor({1}, rng)}};
    auto ev = forward_eval(g, bind);
    if (!kink_safe(g, ev)) continue;
    auto rep = fd_check(g, bind, gp, {"W1", "b1", "W2", "b2"});
    CHECK(rep.max_rel_err < 1e-4);
    ++done;
  }
}

TEST_CASE("apply_gate: elementwise product and identity/annihilation cases") {
  GradMap grads{{"p", Tensor({2}, {1, 2})}};
  auto gated = apply_gate(grads, {{"p", Tensor({2}, {0, 1})}});
  CHECK(gated["p"].v == std::vector<double>{0, 2});

  auto ones = apply_gate(grads, {{"p", Tensor({2}, {1, 1})}});
  CHECK(ones["p"].v == grads["p"].v);

  CHECK_THROWS_AS(apply_gate(grads, {{"p", Tensor({3}, {1, 1, 1})}}), Error);
}

TEST_CASE("apply_gate: zero gate followed by any optimizer step is a bitwise no-op") {
  for (auto kind : {OptKind::sgd, OptKind::adam}) {
    ParameterStore params;
    params.set("p", Tensor({3}, {0.1, -2.5, 3.75}));
    std::vector<double> before = params.at("p").v;
    GradMap grads{{"p", Tensor({3}, {1.0, -7.0, 0.5})}};
    auto gated = apply_gate(grads, {{"p", Tensor::zeros({3})}});
    OptimizerState st = kind == OptKind::sgd ? OptimizerState::sgd_state(0.1)
                                             : OptimizerState::adam_state(0.1);
    for (int i = 0; i < 3; ++i) optimizer_step(params, gated, st);
    CHECK(std::memcmp(params.at("p").v.data(), before.data(), 3 * sizeof(double)) == 0);
  }
}

TEST_CASE("optimizer: sgd update rule") {
  ParameterStore params;
  params.set("p", Tensor::scalar(1.0));
  OptimizerState st = OptimizerState::sgd_state(0.1);
  optimizer_step(params, {{"p", Tensor::scalar(2.0)}}, st);
  CHECK(params.at("p").item() == doctest::Approx(0.8));
  optimizer_step(params, {{"p", Tensor::scalar(0.0)}}, st);
  CHECK(params.at("p").item() == doctest::Approx(0.8));
}

TEST_CASE("optimizer: adam matches a reference scalar recursion and converges") {
  // reference implementation, kept independent of optimizer_step
  double theta_ref = 0.0, m = 0.0, v = 0.0;
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  ParameterStore params;
  params.set("p", Tensor::scalar(0.0));
  OptimizerState st = OptimizerState::adam_state(lr, b1, b2, eps);

  for (int t = 1; t <= 100; ++t) {
    const double g_ref = 2.0 * (theta_ref - 5.0);
    m = b1 * m + (1 - b1) * g_ref;
    v = b2 * v + (1 - b2) * g_ref * g_ref;
    theta_ref -= lr * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);

    const double g_cur = 2.0 * (params.at("p").item() - 5.0);
    optimizer_step(params, {{"p", Tensor::scalar(g_cur)}}, st);
    CHECK(params.at("p").item() == doctest::Approx(theta_ref).epsilon(1e-12));
  }
  CHECK(std::abs(params.at("p").item() - 5.0) < 0.5);
}

TEST_CASE("optimizer: non-finite gradient aborts naming the parameter") {
  ParameterStore params;
  params.set("weird", Tensor::scalar(1.0));
  OptimizerState st = OptimizerState::sgd_state(0.1);
  GradMap g{{"weird", Tensor::scalar(std::numeric_limits<double>::infinity())}};
  CHECK_THROWS_WITH_AS(optimizer_step(params, g, st), doctest::Contains("weird"), Error);
}
