#include <doctest.h>

#include <random>

#include "clipvs/autograd.hpp"
#include "clipvs/errors.hpp"
#include "clipvs/layers.hpp"
#include "../support/oracles.hpp"

using namespace clipvs;
using nn::Shape;
using nn::Tensor;
using nn::Var;

namespace {

// Projects an op output onto fixed random weights so any op becomes a scalar.
Var project(const Var& out, const Tensor& weights) {
  const int k = static_cast<int>(out.value().size());
  return nn::matmul_nt(nn::reshape(out, {1, k}), Var(weights.reshaped({1, k})));
}

/// Checks d/dx of <op(x), r> for every input, returning the worst relative error.
double check_op(const std::function<Var(const std::vector<Var>&)>& op, const std::vector<Tensor>& inputs,
                std::mt19937_64& rng) {
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.emplace_back(t, true);
  const Var out = op(vars);
  const Tensor r = Tensor::randn(out.shape(), 1.0, rng);
  project(out, r).backward();
  double worst = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    auto f = [&](const oracle::Vec& x) {
      std::vector<Var> vs;
      for (std::size_t j = 0; j < inputs.size(); ++j)
        vs.emplace_back(j == i ? Tensor(inputs[j].shape(), x) : inputs[j], false);
      nn::NoGradGuard guard;
      return project(op(vs), r).value()[0];
    };
    const oracle::Vec numeric = oracle::numeric_gradient(f, inputs[i].to_vector());
    const oracle::Vec analytic = vars[i].has_grad() ? vars[i].grad().to_vector() : oracle::Vec(numeric.size(), 0.0);
    worst = std::max(worst, oracle::relative_error(analytic, numeric));
  }
  return worst;
}

}  // namespace

TEST_CASE("elementwise and dense ops match finite differences") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = Tensor::randn({3, 4}, 1.0, rng), b = Tensor::randn({3, 4}, 1.0, rng);
    const Tensor w = Tensor::randn({4, 5}, 1.0, rng), bias = Tensor::randn({5}, 1.0, rng);
    CHECK(check_op([](auto& v) { return nn::add(v[0], v[1]); }, {a, b}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::sub(v[0], v[1]); }, {a, b}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::mul(v[0], v[1]); }, {a, b}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::scale(v[0], -2.5); }, {a}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::relu(v[0]); }, {a}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::matmul(v[0], v[1]); }, {a, w}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::matmul_nt(v[0], v[1]); }, {a, b}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::linear(v[0], v[1], v[2]); }, {a, w, bias}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::softmax_rows(v[0]); }, {a}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::layer_norm_rows(v[0]); }, {a}, rng) < 1e-5);
    CHECK(check_op([](auto& v) { return nn::l2_normalize_rows(v[0]); }, {a}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::row_norms(v[0]); }, {a}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::mean_rows(v[0]); }, {a}, rng) < 1e-6);
    CHECK(check_op([](auto& v) { return nn::add_n(v); }, {a, b}, rng) < 1e-6);
    const Tensor s = Tensor::randn({1}, 1.0, rng), t = Tensor::randn({1}, 1.0, rng);
    CHECK(check_op([](auto& v) { return nn::scalar_affine(v[0], v[1], v[2]); }, {a, s, t}, rng) < 1e-6);
  }
}

TEST_CASE("shape ops route gradients") {
  std::mt19937_64 rng(4);
  const Tensor a = Tensor::randn({4, 3}, 1.0, rng), b = Tensor::randn({2, 3}, 1.0, rng);
  CHECK(check_op([](auto& v) { return nn::concat_rows(v); }, {a, b}, rng) < 1e-6);
  const std::vector<int> rows = {3, 0, 3};
  CHECK(check_op([&](auto& v) { return nn::select_rows(v[0], rows); }, {a}, rng) < 1e-6);
  CHECK(check_op([](auto& v) { return nn::reshape(v[0], {2, 6}); }, {a}, rng) < 1e-6);
  CHECK_THROWS_AS(nn::reshape(Var(a), {5, 2}), ContractError);
}

TEST_CASE("feature map ops match finite differences") {
  std::mt19937_64 rng(5);
  for (int stride : {1, 2}) {
    for (int kernel : {1, 3}) {
      const Tensor x = Tensor::randn({2, 5, 6, 3}, 1.0, rng);
      const Tensor w = Tensor::randn({kernel * kernel * 3, 4}, 0.5, rng), b = Tensor::randn({4}, 0.5, rng);
      const int pad = kernel / 2;
      CHECK(check_op([&](auto& v) { return nn::conv2d(v[0], v[1], v[2], kernel, stride, pad); }, {x, w, b}, rng) <
            1e-6);
    }
  }
  const Tensor x = Tensor::randn({2, 4, 5, 3}, 1.0, rng);
  CHECK(check_op([](auto& v) { return nn::global_avg_pool(v[0]); }, {x}, rng) < 1e-6);
  const std::vector<Box> boxes = {{1.3, 2.1, 13.7, 11.2}, {0, 0, 19.5, 15.5}, {5.5, 4.4, 7.7, 9.9}};
  const Tensor f = Tensor::randn({1, 4, 5, 3}, 1.0, rng);
  CHECK(check_op([&](auto& v) { return nn::roi_align(v[0], boxes, 0.25, 3, 3); }, {f}, rng) < 1e-6);
}

TEST_CASE("scalar_with_grads splices external gradients") {
  Var x(Tensor({3}, std::vector<double>{1, 2, 3}), true);
  Var y = nn::scalar_with_grads(7.0, {x}, {Tensor({3}, std::vector<double>{0.5, -1, 2})});
  CHECK(y.value()[0] == 7.0);
  nn::scale(y, 2.0).backward();
  CHECK(x.grad().to_vector() == std::vector<double>{1, -2, 4});
}

TEST_CASE("no-grad mode builds no graph") {
  Var x(Tensor({2, 2}, 1.0), true);
  Var y;
  {
    nn::NoGradGuard guard;
    CHECK_FALSE(nn::grad_enabled());
    y = nn::relu(nn::scale(x, 3.0));
  }
  CHECK(nn::grad_enabled());
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("sgd momentum and weight decay follow the update rule") {
  nn::ParameterSet ps;
  Var p = ps.add("p", Tensor({2}, std::vector<double>{1.0, -2.0}));
  nn::Sgd opt(ps.entries(), {0.1, 0.9, 0.01, 0.0});
  std::vector<double> v = {0, 0}, x = {1.0, -2.0};
  for (int step = 0; step < 3; ++step) {
    opt.zero_grad();
    nn::scalar_with_grads(0.0, {p}, {Tensor({2}, std::vector<double>{0.5, 0.25})}).backward();
    opt.step();
    for (int i = 0; i < 2; ++i) {
      const double g = (i == 0 ? 0.5 : 0.25) + 0.01 * x[static_cast<std::size_t>(i)];
      v[static_cast<std::size_t>(i)] = 0.9 * v[static_cast<std::size_t>(i)] + g;
      x[static_cast<std::size_t>(i)] -= 0.1 * v[static_cast<std::size_t>(i)];
    }
  }
  CHECK(p.value()[0] == doctest::Approx(x[0]).epsilon(1e-12));
  CHECK(p.value()[1] == doctest::Approx(x[1]).epsilon(1e-12));
}
