#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <functional>
#include <optional>
#include <vector>

#include "fas/autodiff.hpp"
#include "fas/optim.hpp"
#include "fas/rng.hpp"

using namespace fas;

namespace {

using Builder = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

Tensor64 random64(Rng& rng, Shape s, double scale = 1.0) {
  Tensor64 t(std::move(s));
  for (double& v : t.data()) v = scale * rng.uniform(-1.0, 1.0);
  return t;
}

double eval(const Builder& f, const std::vector<Tensor64>& params) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  return f(tape, vars).value().item();
}

// Largest entrywise relative error between tape gradients and central differences.
double max_fd_error(const Builder& f, std::vector<Tensor64> params, double h = 1e-3) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& p : params) vars.push_back(tape.parameter(p));
  const Gradients<double> g = backward(tape, f(tape, vars));
  double worst = 0.0;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const Tensor64 gk = g.of(vars[k]);
    for (std::size_t i = 0; i < params[k].size(); ++i) {
      const double keep = params[k][i];
      params[k][i] = keep + h;
      const double up = eval(f, params);
      params[k][i] = keep - h;
      const double down = eval(f, params);
      params[k][i] = keep;
      const double fd = (up - down) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(gk[i]), 1e-6});
      worst = std::max(worst, std::abs(fd - gk[i]) / denom);
    }
  }
  return worst;
}

}  // namespace

TEST(Backward, SquareHasDerivativeSix) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor64::scalar(3.0));
  const auto g = backward(tape, ops::mul(x, x));
  EXPECT_DOUBLE_EQ(g.of(x).item(), 6.0);
}

TEST(Backward, ConstantGetsZeroGradient) {
  Tape<double> tape;
  auto c = tape.constant(Tensor64::scalar(2.0));
  auto x = tape.parameter(Tensor64::scalar(1.0));
  const auto g = backward(tape, ops::mul(x, c));
  EXPECT_EQ(g.of(c).item(), 0.0);
  EXPECT_EQ(g.of(x).item(), 2.0);
}

TEST(Backward, FanOutAccumulates) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor64::scalar(2.0));
  auto y = ops::add(ops::mul(x, x), ops::scale(x, 3.0));  // x^2 + 3x
  EXPECT_DOUBLE_EQ(backward(tape, y).of(x).item(), 7.0);
}

TEST(Backward, UndefinedInputIsInternalError) {
  Tape<double> tape;
  tape.parameter(Tensor64::scalar(1.0));
  EXPECT_THROW(tape.push("bogus", Tensor64::scalar(0.0), {5}, nullptr), InternalError);
}

TEST(Backward, NonScalarNeedsSeed) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor64({3}, 1.0));
  EXPECT_THROW(backward(tape, ops::scale(x, 2.0)), DimensionError);
  const auto g = backward(tape, ops::scale(x, 2.0), std::optional<Tensor64>(Tensor64({3}, {1.0, 0.5, -1.0})));
  EXPECT_DOUBLE_EQ(g.of(x)[1], 1.0);
  EXPECT_THROW(backward(tape, ops::scale(x, 2.0), std::optional<Tensor64>(Tensor64({2}, 1.0))), DimensionError);
}

TEST(Backward, ForeignVariableRejected) {
  Tape<double> a, b;
  auto x = a.parameter(Tensor64::scalar(1.0));
  EXPECT_THROW(backward(b, x), InternalError);
}

TEST(Backward, DetachBlocksGradient) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor64::scalar(4.0));
  auto y = ops::mul(ops::detach(x), x);
  EXPECT_DOUBLE_EQ(backward(tape, y).of(x).item(), 4.0);
}

TEST(FiniteDifference, TwoLayerSmoothNet) {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(seed);
    const Tensor64 x = random64(rng, {5, 4});
    const Tensor64 y = random64(rng, {5, 3});
    const Builder f = [&](Tape<double>& t, const std::vector<Var<double>>& p) {
      auto h = ops::tanh(ops::add_row(ops::matmul(t.constant(x), p[0]), p[1]));
      auto o = ops::add_row(ops::matmul(ops::gelu(h), p[2]), p[3]);
      return ops::mse(o, t.constant(y));
    };
    const std::vector<Tensor64> params = {random64(rng, {4, 6}), random64(rng, {6}), random64(rng, {6, 3}),
                                          random64(rng, {3})};
    EXPECT_LT(max_fd_error(f, params), 1e-4) << "seed " << seed;
  }
}

TEST(FiniteDifference, CrossEntropyAndDistillation) {
  Rng rng(7);
  const std::vector<std::size_t> labels = {0, 2, 1, 2};
  const Builder f = [&](Tape<double>&, const std::vector<Var<double>>& p) {
    auto logits = ops::mul_row(p[0], p[1]);
    auto ce = ops::cross_entropy(logits, labels);
    auto kd = ops::soft_cross_entropy(p[2], logits, 2.0);
    return ops::add_scalar_nodes(ce, kd, 1.0, 0.5);
  };
  EXPECT_LT(max_fd_error(f, {random64(rng, {4, 3}, 2.0), random64(rng, {3}), random64(rng, {4, 3}, 2.0)}), 1e-4);
}

TEST(FiniteDifference, EmbeddingLookup) {
  Rng rng(8);
  const Tensor64 ids({3, 2}, {0, 1, 2, 2, 1, 0});
  const Builder f = [&](Tape<double>&, const std::vector<Var<double>>& p) {
    return ops::mean(ops::tanh(ops::matmul(ops::embedding(p[0], ids), p[1])));
  };
  EXPECT_LT(max_fd_error(f, {random64(rng, {3, 4}), random64(rng, {8, 2})}), 1e-4);
}

TEST(Ste, FloorForwardAndIdentityGradient) {
  Tape<double> tape;
  auto u = tape.parameter(Tensor64({2}, {1.7, -0.2}));
  auto y = ops::ste_floor(u);
  EXPECT_EQ(y.value()[0], 1.0);
  EXPECT_EQ(y.value()[1], -1.0);
  const auto g = backward(tape, ops::sum(ops::scale(y, 3.0)));
  EXPECT_EQ(g.of(u)[0], 3.0);
  EXPECT_EQ(g.of(u)[1], 3.0);
}

TEST(Ste, QcfsPassesUpstreamInsideAndBlocksOutside) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor64({1, 3}, {0.3, -0.5, 1.5}));
  auto lam = tape.parameter(Tensor64::scalar(1.0));
  auto y = ops::qcfs(x, lam, 4);
  EXPECT_EQ(y.value()[0], 0.25);
  const auto g = backward(tape, y, std::optional<Tensor64>(Tensor64({1, 3}, {2.5, 2.5, 2.5})));
  EXPECT_EQ(g.of(x)[0], 2.5);
  EXPECT_EQ(g.of(x)[1], 0.0);
  EXPECT_EQ(g.of(x)[2], 0.0);
}

TEST(Ste, QcfsUnitSlopeOnRandomInteriorPoints) {
  Rng rng(3);
  for (int rep = 0; rep < 200; ++rep) {
    const double lam = rng.uniform(0.1, 3.0);
    const std::size_t L = 1 + rng.below(32);
    double xv = rng.uniform(-lam, 2 * lam);
    if (xv == 0.0 || xv == lam) continue;
    Tape<double> tape;
    auto x = tape.parameter(Tensor64::scalar(xv));
    auto l = tape.parameter(Tensor64::scalar(lam));
    const double g = backward(tape, ops::qcfs(x, l, L)).of(x).item();
    EXPECT_EQ(g, (xv > 0 && xv < lam) ? 1.0 : 0.0);
  }
}

TEST(Ste, QcfsRejectsBadParameters) {
  Tape<double> tape;
  auto x = tape.parameter(Tensor64::scalar(0.5));
  EXPECT_THROW(ops::qcfs(x, tape.parameter(Tensor64::scalar(0.0)), 4), ParameterError);
  EXPECT_THROW(ops::qcfs(x, tape.parameter(Tensor64::scalar(1.0)), 0), ParameterError);
}

TEST(Surrogate, Examples) {
  const SurrogateSpec spec;
  EXPECT_EQ(surrogate_value(1.0, 1.0, spec), 1.0);
  EXPECT_EQ(surrogate_value(0.0, 1.0, spec), 0.0);
  EXPECT_EQ(surrogate_value(1.4, 1.0, spec), 1.0);
}

TEST(Surrogate, BoundedNonnegativeAndWindowed) {
  Rng rng(4);
  for (int rep = 0; rep < 50; ++rep) {
    SurrogateSpec spec{rng.uniform(0.05, 1.0)};
    const Tensor64 theta = map(random64(rng, {6}), [](double v) { return 0.1 + std::abs(v) * 2; });
    const Tensor64 v = random64(rng, {4, 6}, 3.0);
    const Tensor64 g = surrogate_spike_grad(v, theta, spec);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double th = theta[i % 6];
      const bool inside = std::abs(v[i] - th) < spec.half_width * th;
      EXPECT_EQ(g[i], inside ? 1.0 / th : 0.0);
    }
  }
}

TEST(Surrogate, NonPositiveThresholdRejected) {
  EXPECT_THROW(surrogate_spike_grad(Tensor64({1, 2}, 0.5), Tensor64({2}, {1.0, 0.0}), SurrogateSpec{}), ParameterError);
  EXPECT_THROW(surrogate_spike_grad(Tensor64({1, 1}, 0.5), Tensor64({1}, 1.0), SurrogateSpec{0.0}), ParameterError);
}

TEST(Surrogate, SpikeOpRoutesGradientToPotentialAndThreshold) {
  Tape<double> tape;
  auto v = tape.parameter(Tensor64({2, 2}, {1.2, 0.1, 1.0, 2.0}));
  auto th = tape.parameter(Tensor64({2}, {1.0, 1.0}));
  auto s = ops::spike(v, th, SurrogateSpec{});
  EXPECT_EQ(s.value()[0], 1.0);
  EXPECT_EQ(s.value()[1], 0.0);
  EXPECT_EQ(s.value()[2], 1.0);  // tie fires
  const auto g = backward(tape, ops::sum(s));
  EXPECT_EQ(g.of(v)[0], 1.0);
  EXPECT_EQ(g.of(v)[1], 0.0);
  EXPECT_EQ(g.of(v)[3], 0.0);
  EXPECT_EQ(g.of(th)[0], -2.0);
  EXPECT_EQ(g.of(th)[1], 0.0);
}

TEST(Backward, DeterministicAcrossIdenticalTapes) {
  auto run = [] {
    Rng rng(12);
    Tape<float> tape;
    auto w = tape.parameter(rng_uniform(rng, -1, 1, {8, 8}));
    auto x = tape.constant(rng_uniform(rng, -1, 1, {16, 8}));
    auto y = ops::mean(ops::relu(ops::matmul(ops::tanh(ops::matmul(x, w)), w)));
    return backward(tape, y).of(w);
  };
  const Tensor a = run(), b = run();
  EXPECT_EQ(std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(float)), 0);
}

TEST(Adam, ZeroGradientFreshStateLeavesParameter) {
  Tensor p({3}, {1, -2, 3});
  const Tensor before = p;
  AdamState<float> s;
  adam_step(p, Tensor({3}), s, AdamConfig{0.1});
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(p[i], before[i]);
  EXPECT_EQ(s.m[0], 0.0f);
}

TEST(Adam, ZeroGradientDecaysMoments) {
  Tensor p({1}, {1});
  AdamState<float> s;
  adam_step(p, Tensor({1}, 1.0f), s, AdamConfig{0.0});
  const float m = s.m[0], v = s.v[0];
  adam_step(p, Tensor({1}), s, AdamConfig{0.0});
  EXPECT_FLOAT_EQ(s.m[0], 0.9f * m);
  EXPECT_FLOAT_EQ(s.v[0], 0.999f * v);
}

TEST(Adam, FirstStepMovesByLearningRate) {
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  Tensor p({1}, {0.5f});
  AdamState<float> s;
  adam_step(p, Tensor({1}, 1.0f), s, AdamConfig{0.1});
  EXPECT_NEAR(p[0], 0.4f, 1e-6);
}

TEST(Adam, ZeroLearningRateIsNoop) {
  Tensor p({2}, {1, 2});
  AdamState<float> s;
  adam_step(p, Tensor({2}, {5, -5}), s, AdamConfig{0.0});
  EXPECT_EQ(p[0], 1.0f);
  EXPECT_EQ(p[1], 2.0f);
}

TEST(Adam, ShapeMismatchThrows) {
  Tensor p({2});
  AdamState<float> s;
  EXPECT_THROW(adam_step(p, Tensor({3}), s, AdamConfig{}), ParameterError);
}
