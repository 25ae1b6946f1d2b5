#include "aevis/net.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include <gtest/gtest.h>

#include "aevis/error.hpp"
#include "fixtures.hpp"

namespace aevis {
namespace {

using testing::central_difference;
using testing::minimal_model;
using testing::random_gates;
using testing::random_input;
using testing::random_model;
using testing::relative_error;

TEST(Forward, AllOnesGatesMatchUngatedPass) {
  const auto model = random_model(3);
  const auto x = random_input(model.input_shape(), 11);
  const auto gated = forward(model, x, GateVector::ones(model.gate_count()));
  const auto plain = forward(model, x);
  EXPECT_EQ(gated.logits, plain.logits);
  EXPECT_EQ(gated.probabilities, plain.probabilities);
  ASSERT_EQ(gated.activations.size(), plain.activations.size());
  for (std::size_t i = 0; i < gated.activations.size(); ++i) EXPECT_EQ(gated.activations[i], plain.activations[i]);
}

TEST(Forward, ZeroGatesWithZeroBiasHeadGiveUniformPrediction) {
  const auto model = minimal_model(3, 4, /*zero_fc_bias=*/true);
  const auto x = random_input(model.input_shape(), 5);
  const auto r = forward(model, x, GateVector::zeros(model.gate_count()));
  for (double l : r.logits) EXPECT_EQ(l, 0.0);
  for (double p : r.probabilities) EXPECT_DOUBLE_EQ(p, 0.25);
}

TEST(Forward, IdentityConvCachesInput) {
  const auto model = testing::identity_model(1);
  const auto x = random_input(model.input_shape(), 2);
  const auto r = forward(model, x, GateVector::ones(1));
  ASSERT_EQ(r.activations.size(), 1u);
  EXPECT_EQ(r.activations[0].values(), x.values());
  EXPECT_EQ(r.activations[0].shape(), (Shape{3, 3}));
}

TEST(Forward, GatesScaleCachedActivations) {
  const auto model = minimal_model(2);
  const auto x = random_input(model.input_shape(), 9);
  const auto full = forward(model, x);
  const auto half = forward(model, x, GateVector({0.5, 1.0}));
  for (std::size_t i = 0; i < full.activations[0].size(); ++i) {
    EXPECT_DOUBLE_EQ(half.activations[0][i], 0.5 * full.activations[0][i]);
    EXPECT_EQ(half.activations[1][i], full.activations[1][i]);
  }
}

TEST(Forward, RejectsShapeMismatches) {
  const auto model = minimal_model(2);
  EXPECT_THROW(forward(model, Tensor({1, 5, 5})), DimensionError);
  EXPECT_THROW(forward(model, Tensor({1, 4, 4}), GateVector::ones(3)), DimensionError);
}

TEST(Forward, NonFiniteActivationIsNumericError) {
  const auto model = minimal_model(2);
  Tensor x({1, 4, 4}, 0.5);
  x[3] = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward(model, x), NumericError);
}

TEST(GateVector, RejectsOutOfRangeValues) {
  EXPECT_THROW(GateVector({0.5, 1.5}), ValidationError);
  EXPECT_THROW(GateVector({-0.1}), ValidationError);
  EXPECT_EQ(GateVector::clamped({-1.0, 0.3, 2.0}).values(), (std::vector<double>{0.0, 0.3, 1.0}));
}

TEST(Forward, SoftmaxNormalizedAndDeterministic) {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto model = random_model(seed);
    const auto x = random_input(model.input_shape(), seed + 100);
    const auto z = random_gates(model.gate_count(), seed + 200, 0.0, 1.0);
    const auto a = forward(model, x, z);
    const auto b = forward(model, x, z);
    const double total = std::accumulate(a.probabilities.begin(), a.probabilities.end(), 0.0);
    EXPECT_NEAR(total, 1.0, 1e-9);
    for (double p : a.probabilities) EXPECT_GE(p, 0.0);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.probabilities, b.probabilities);
  }
}

TEST(Forward, LogitsAreAffineInLastLayerGate) {
  // Gates of the last conv layer only feed avgpool and fullyconnected, which
  // are linear, so logits are affine in each of them.
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto model = minimal_model(3, 3, false, seed);
    const auto x = random_input(model.input_shape(), seed);
    for (std::size_t k = 0; k < model.gate_count(); ++k) {
      auto at = [&](double v) {
        std::vector<double> z(model.gate_count(), 0.7);
        z[k] = v;
        return forward(model, x, GateVector(z)).logits;
      };
      const auto l0 = at(0.0), l5 = at(0.5), l1 = at(1.0);
      for (std::size_t c = 0; c < l0.size(); ++c) EXPECT_NEAR(l5[c], 0.5 * (l0[c] + l1[c]), 1e-12);
    }
  }
}

TEST(GateGradients, SparsityTermAloneIsConstantLambda) {
  const auto model = random_model(4);
  const auto x = random_input(model.input_shape(), 4);
  GateLoss loss;
  loss.lambda = 0.37;
  const auto g = gate_gradients(model, x, random_gates(model.gate_count(), 1), loss);
  for (double v : g.gradient) EXPECT_EQ(v, 0.37);
}

TEST(GateGradients, DeadFeatureMapHasZeroPreservationGradient) {
  auto model = minimal_model(3);
  auto layers = model.layers();
  auto& conv = std::get<Conv2d>(layers[0]);
  // channel 1: zero kernel and negative bias, so its relu output is zero
  for (std::size_t i = 9; i < 18; ++i) conv.weights[i] = 0.0;
  conv.bias[1] = -1.0;
  model = ModelSpec::build(model.input_shape(), model.class_count(), layers, model.layer_groups());
  const auto x = random_input(model.input_shape(), 3);
  GateLoss loss;
  loss.preservation = ProbabilityPreservation{{0.9, 0.1}};
  const auto g = gate_gradients(model, x, GateVector({0.6, 0.6, 0.6}), loss);
  EXPECT_EQ(g.gradient[1], 0.0);
  EXPECT_NE(g.gradient[0], 0.0);
}

TEST(GateGradients, MatchFiniteDifferencesOnRandomFixture) {
  const auto model = random_model(21);
  const auto x = random_input(model.input_shape(), 22);
  const auto z = random_gates(model.gate_count(), 23);
  GateLoss loss;
  loss.preservation = ProbabilityPreservation{forward(model, x).probabilities};
  loss.lambda = 0.05;
  loss.gamma = 0.3;
  loss.anchors = {random_gates(model.gate_count(), 24)};
  const auto analytic = gate_gradients(model, x, z, loss).gradient;
  const auto numeric = central_difference(
      [&](const std::vector<double>& v) { return gate_loss(model, x, GateVector(v), loss); }, z.values());
  for (std::size_t i = 0; i < analytic.size(); ++i) EXPECT_LT(relative_error(analytic[i], numeric[i]), 1e-5) << i;
}

TEST(GateGradients, ActivationPreservationMatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto model = random_model(seed);
    if (model.gated_layers().size() < 2) continue;
    const auto target = model.first_gate(model.gated_layers().back());
    const auto x = random_input(model.input_shape(), seed + 1);
    GateLoss loss;
    ActivationPreservation ap;
    ap.feature_map = target;
    ap.reference = forward(model, x).activations[target];
    ap.mask.assign(ap.reference.size(), 0);
    for (std::size_t i = 0; i < ap.mask.size(); i += 2) ap.mask[i] = 1;
    loss.preservation = ap;
    loss.lambda = 0.01;
    const auto z = random_gates(model.gate_count(), seed + 2);
    const auto analytic = gate_gradients(model, x, z, loss).gradient;
    const auto numeric = central_difference(
        [&](const std::vector<double>& v) { return gate_loss(model, x, GateVector(v), loss); }, z.values());
    // the target map is read below its own gate
    EXPECT_NEAR(numeric[target], loss.lambda, 1e-7);
    for (std::size_t i = 0; i < analytic.size(); ++i) {
      if (i == target) continue;
      EXPECT_LT(relative_error(analytic[i], numeric[i]), 1e-5) << "seed " << seed << " gate " << i;
    }
  }
}

TEST(InputGradients, ZeroGatesZeroBiasGiveZeroGradient) {
  const auto model = minimal_model(3, 2, true);
  const auto g = input_gradients(model, random_input(model.input_shape(), 1), GateVector::zeros(3), 1);
  EXPECT_EQ(g.max_abs(), 0.0);
}

TEST(InputGradients, MatchFiniteDifferencesAndAreDeterministic) {
  const auto model = random_model(8);
  const auto x = random_input(model.input_shape(), 9);
  const auto z = random_gates(model.gate_count(), 10);
  const auto analytic = input_gradients(model, x, z, 1);
  const auto again = input_gradients(model, x, z, 1);
  EXPECT_EQ(analytic, again);
  const auto numeric = central_difference(
      [&](const std::vector<double>& v) { return cross_entropy(model, Tensor(x.shape(), v), z, 1); }, x.values());
  for (std::size_t i = 0; i < numeric.size(); ++i) EXPECT_LT(relative_error(analytic[i], numeric[i]), 1e-5) << i;
}

TEST(InputGradients, RejectsBadLabel) {
  const auto model = minimal_model(2, 2);
  EXPECT_THROW(input_gradients(model, Tensor({1, 4, 4}), GateVector::ones(2), 2), ValidationError);
}

TEST(WeightGradients, MatchFiniteDifferences) {
  const auto model = random_model(12);
  const auto x = random_input(model.input_shape(), 13);
  const auto tg = weight_gradients(model, x, 0);
  for (std::size_t l = 0; l < model.layers().size(); ++l) {
    std::vector<double> params;
    if (const auto* c = std::get_if<Conv2d>(&model.layers()[l])) params = c->weights;
    else if (const auto* f = std::get_if<FullyConnected>(&model.layers()[l])) params = f->weights;
    else continue;
    auto loss_at = [&](const std::vector<double>& w) {
      auto layers = model.layers();
      std::visit([&](auto& layer) {
        if constexpr (requires { layer.weights; }) layer.weights = w;
      }, layers[l]);
      auto m = ModelSpec::build(model.input_shape(), model.class_count(), layers, {});
      return cross_entropy(m, x, GateVector::ones(m.gate_count()), 0);
    };
    const auto numeric = central_difference(loss_at, params);
    for (std::size_t i = 0; i < params.size(); ++i) {
      EXPECT_LT(relative_error(tg.gradients.weights[l][i], numeric[i]), 1e-5) << "layer " << l << " w " << i;
    }
  }
}

}  // namespace
}  // namespace aevis
