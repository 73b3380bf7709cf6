#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "cip/grad_check.hpp"
#include "cip/rng.hpp"
#include "cip/tape.hpp"
#include "cip/tensor.hpp"

using namespace cip;

namespace {

// Independent naive matmul oracle.
Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor out = Tensor::zeros({a.rows(), b.cols()});
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (int k = 0; k < a.cols(); ++k) s += a.at(i, k) * b.at(k, j);
      out.at(i, j) = s;
    }
  return out;
}

Tensor randn(std::vector<int> shape, Rng& rng) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

TEST_CASE("tensor shape/data invariant") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), std::invalid_argument);
  Tensor t = Tensor::zeros({3, 4});
  CHECK(t.size() == 12);
  CHECK(t.rows() == 3);
  CHECK(t.cols() == 4);
}

TEST_CASE("rng determinism and moments") {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(42);
  double mean = 0.0, var = 0.0;
  const int n = 200'000;
  for (int i = 0; i < n; ++i) {
    const double x = c.normal();
    mean += x;
    var += x * x;
  }
  mean /= n;
  var = var / n - mean * mean;
  CHECK(std::abs(mean) < 0.01);
  CHECK(std::abs(var - 1.0) < 0.02);

  Rng d(7);
  const std::string state = d.save_state();
  std::vector<double> ahead;
  for (int i = 0; i < 16; ++i) ahead.push_back(d.normal());
  Rng e(0);
  e.load_state(state);
  for (int i = 0; i < 16; ++i) CHECK(e.normal() == ahead[i]);
}

TEST_CASE("affine identity and hand-expanded cases") {
  Tape tape;
  Var x = tape.constant(Tensor::row_major(1, 2, {1.0, 0.0}));
  Var W = tape.constant(Tensor::row_major(2, 2, {1.0, 0.0, 0.0, 1.0}));
  Var b = tape.constant(Tensor::vec({0.0, 0.0}));
  Var y = affine(tape, x, W, b);
  CHECK(tape.val(y).data == std::vector<double>{1.0, 0.0});

  Var x2 = tape.constant(Tensor::row_major(1, 2, {1.0, 1.0}));
  Var W2 = tape.constant(Tensor::row_major(2, 2, {2.0, 0.0, 0.0, 3.0}));
  Var b2 = tape.constant(Tensor::vec({1.0, 1.0}));
  Var y2 = affine(tape, x2, W2, b2);
  CHECK(tape.val(y2).data == std::vector<double>{3.0, 4.0});
}

TEST_CASE("matmul matches the naive triple-loop oracle") {
  Rng rng(11);
  Tensor a = randn({3, 4}, rng), b = randn({4, 5}, rng);
  Tape tape;
  Var y = tape.matmul(tape.constant(a), tape.constant(b));
  Tensor expect = naive_matmul(a, b);
  double worst = 0.0;
  for (std::size_t i = 0; i < expect.size(); ++i)
    worst = std::max(worst, std::abs(expect.data[i] - tape.val(y).data[i]));
  CHECK(worst < 1e-12);
  CHECK_THROWS_AS(tape.matmul(tape.constant(a), tape.constant(a)), std::invalid_argument);
}

TEST_CASE("softmax and logsumexp closed forms") {
  Tape tape;
  Var s = tape.softmax_rows(tape.constant(Tensor::row_major(1, 3, {0.0, 0.0, 0.0})));
  for (double v : tape.val(s).data) CHECK(v == Catch::Approx(1.0 / 3.0).margin(1e-15));

  Var l = tape.logsumexp_rows(tape.constant(Tensor::row_major(1, 2, {0.0, std::log(3.0)})));
  CHECK(tape.val(l).data[0] == Catch::Approx(std::log(4.0)).margin(1e-12));

  Var big = tape.logsumexp_rows(tape.constant(Tensor::row_major(1, 2, {1000.0, 1000.0})));
  CHECK(tape.val(big).data[0] == Catch::Approx(1000.0 + std::log(2.0)).margin(1e-12));

  // Shift invariance through the tape route.
  Rng rng(3);
  Tensor x = randn({4, 6}, rng);
  Tensor shifted = x;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 6; ++j) shifted.at(i, j) += 13.25;
  Var p1 = tape.softmax_rows(tape.constant(x));
  Var p2 = tape.softmax_rows(tape.constant(shifted));
  for (std::size_t i = 0; i < tape.val(p1).size(); ++i)
    CHECK(std::abs(tape.val(p1).data[i] - tape.val(p2).data[i]) < 1e-12);
  CHECK_THROWS_AS(tape.softmax_rows(tape.constant(Tensor::zeros({2, 0}))), std::invalid_argument);
}

TEST_CASE("backward: sum gives ones, half squared norm gives x") {
  Rng rng(5);
  Tensor x = randn({3, 4}, rng);
  {
    Tape tape;
    Var xv = tape.leaf(&x);
    tape.backward(tape.sum(xv));
    const Tensor* g = tape.grad(xv);
    REQUIRE(g != nullptr);
    for (double v : g->data) CHECK(v == 1.0);
  }
  {
    Tape tape;
    Var xv = tape.leaf(&x);
    Var loss = tape.scale(tape.sum(tape.mul(xv, xv)), 0.5);
    tape.backward(loss);
    const Tensor* g = tape.grad(xv);
    REQUIRE(g != nullptr);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(g->data[i] == Catch::Approx(x.data[i]));
  }
  {
    Tape tape;
    Var xv = tape.leaf(&x);
    CHECK_THROWS_AS(tape.backward(xv), std::invalid_argument);  // non-scalar loss
  }
}

TEST_CASE("mlp loss gradient matches central finite differences") {
  Rng rng(17);
  Tensor x = randn({2, 3}, rng);
  Tensor W1 = randn({3, 5}, rng), b1 = randn({5}, rng);
  Tensor W2 = randn({5, 2}, rng), b2 = randn({2}, rng);
  std::vector<Tensor*> params = {&x, &W1, &b1, &W2, &b2};

  auto eval = [&]() {
    Tape tape;
    Var h = tape.tanh(affine(tape, tape.leaf(&x), tape.leaf(&W1), tape.leaf(&b1)));
    Var out = affine(tape, h, tape.leaf(&W2), tape.leaf(&b2));
    return tape.val(tape.mean(tape.mul(out, out))).item();
  };
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (auto* p : params) vars.push_back(tape.leaf(p));
    Var h = tape.tanh(affine(tape, vars[0], vars[1], vars[2]));
    Var out = affine(tape, h, vars[3], vars[4]);
    tape.backward(tape.mean(tape.mul(out, out)));
    for (Var v : vars) analytic.push_back(*tape.grad(v));
  }
  CHECK(grad_check_max_rel_error(eval, params, analytic) < 1e-4);
}

TEST_CASE("gather, select_k, stack_cols and their gradients") {
  Tape tape;
  Tensor a = Tensor::row_major(3, 2, {1, 2, 3, 4, 5, 6});
  Var av = tape.leaf(&a);
  Var g = tape.gather_cols(av, {1, 0, 1});
  CHECK(tape.val(g).data == std::vector<double>{2, 3, 6});

  Tensor u = Tensor::vec({10, 20});
  Tensor w = Tensor::vec({30, 40});
  Var uv = tape.leaf(&u), wv = tape.leaf(&w);
  Var sel = tape.select_k({uv, wv}, {1, 0});
  CHECK(tape.val(sel).data == std::vector<double>{30, 20});

  Var st = tape.stack_cols({uv, wv});
  CHECK(tape.val(st).shape == std::vector<int>{2, 2});
  CHECK(tape.val(st).data == std::vector<double>{10, 30, 20, 40});

  Var loss = tape.add(tape.sum(g), tape.add(tape.sum(sel), tape.sum(st)));
  tape.backward(loss);
  CHECK(tape.grad(av)->data == std::vector<double>{0, 1, 1, 0, 0, 1});
  // u gets: select row 1 (20) + stack both entries.
  CHECK(tape.grad(uv)->data == std::vector<double>{1, 2});
  CHECK(tape.grad(wv)->data == std::vector<double>{2, 1});
}

TEST_CASE("min and clamp gradients implement the PPO clipping semantics") {
  // Positive advantage, ratio at 2: the clipped branch is active and the
  // gradient with respect to the ratio vanishes.
  {
    Tensor ratio = Tensor::vec({2.0});
    Tape tape;
    Var r = tape.leaf(&ratio);
    Var adv = tape.constant(Tensor::vec({1.5}));
    Var surr = tape.minimum(tape.mul(r, adv), tape.mul(tape.clamp(r, 0.8, 1.2), adv));
    tape.backward(tape.sum(surr));
    CHECK(tape.val(surr).data[0] == Catch::Approx(1.2 * 1.5));
    CHECK(tape.grad(r)->data[0] == 0.0);
  }
  // Negative advantage, ratio at 2: the unclipped branch is the minimum and
  // its gradient flows.
  {
    Tensor ratio = Tensor::vec({2.0});
    Tape tape;
    Var r = tape.leaf(&ratio);
    Var adv = tape.constant(Tensor::vec({-1.0}));
    Var surr = tape.minimum(tape.mul(r, adv), tape.mul(tape.clamp(r, 0.8, 1.2), adv));
    tape.backward(tape.sum(surr));
    CHECK(tape.val(surr).data[0] == Catch::Approx(-2.0));
    CHECK(tape.grad(r)->data[0] == -1.0);
  }
}

TEST_CASE("concat, reshape, mul_colvec round out the op set") {
  Rng rng(23);
  Tensor a = randn({2, 2}, rng), b = randn({2, 3}, rng), m = randn({2}, rng);
  Tape tape;
  Var c = tape.concat_cols(tape.leaf(&a), tape.leaf(&b));
  CHECK(tape.val(c).shape == std::vector<int>{2, 5});
  CHECK(tape.val(c).at(0, 0) == a.at(0, 0));
  CHECK(tape.val(c).at(1, 4) == b.at(1, 2));

  Var r = tape.reshape(c, {5, 2});
  CHECK(tape.val(r).shape == std::vector<int>{5, 2});

  Var mc = tape.mul_colvec(tape.constant(b), tape.constant(m));
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 3; ++j) CHECK(tape.val(mc).at(i, j) == Catch::Approx(b.at(i, j) * m.data[i]));
}

TEST_CASE("tape reuse after reset") {
  Tape tape;
  for (int round = 0; round < 3; ++round) {
    Var x = tape.constant(Tensor::vec({1.0, 2.0}));
    Var s = tape.sum(x);
    CHECK(tape.val(s).item() == 3.0);
    tape.reset();
    CHECK(tape.size() == 0);
  }
}
