#pragma once

#include <cstdint>

#include "aevis/dataset.hpp"
#include "aevis/model.hpp"

namespace aevis {

struct TrainOptions {
  std::size_t epochs = 20;
  double learning_rate = 0.05;
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
};

/// Mini-batch gradient descent on cross-entropy. Deterministic given the
/// seed; throws TrainingError naming the epoch if the loss becomes
/// non-finite.
ModelSpec train_toy(const ModelSpec& model_init, const Dataset& dataset, const TrainOptions& options);

/// Fraction of examples whose argmax prediction equals the label.
double accuracy(const ModelSpec& model, const Dataset& dataset);

/// Residual toy CNN over [1, 8, 8] inputs: a stem (conv, relu, maxpool) then
/// `blocks` residual blocks of two 3x3 convs, global average pooling and a
/// fullyconnected head. Every conv has `width` channels, so the model has
/// (1 + 2 * blocks) gated layers. Weights are He-initialized from `seed`.
ModelSpec toy_architecture(std::size_t class_count, std::uint64_t seed, std::size_t width = 4,
                           std::size_t blocks = 4);

struct ToyFixtureOptions {
  std::size_t class_count = 2;
  std::size_t train_count = 400;
  std::size_t test_count = 100;
  std::size_t width = 4;
  std::size_t blocks = 4;
  TrainOptions train{.epochs = 40, .learning_rate = 0.1, .batch_size = 16, .seed = 4};
  /// Training-set seed; the test set uses seed + 1 and the architecture
  /// seed + 2.
  std::uint64_t seed = 1;
};

struct ToyFixture {
  ModelSpec model;
  Dataset train;
  Dataset test;
};

/// toy_architecture trained on procedural textures, plus a held-out test set.
ToyFixture make_toy_fixture(const ToyFixtureOptions& options = {});

}  // namespace aevis
