#include "aevis/train.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "aevis/error.hpp"
#include "aevis/net.hpp"

namespace aevis {
namespace {

Conv2d he_conv(std::size_t in, std::size_t out, double scale, std::mt19937_64& rng) {
  Conv2d c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel_h = c.kernel_w = 3;
  c.padding = 1;
  std::normal_distribution<double> dist(0.0, scale * std::sqrt(2.0 / static_cast<double>(in * 9)));
  c.weights.resize(out * in * 9);
  for (double& w : c.weights) w = dist(rng);
  c.bias.assign(out, 0.0);
  return c;
}

}  // namespace

ModelSpec toy_architecture(std::size_t class_count, std::uint64_t seed, std::size_t width, std::size_t blocks) {
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> layers;
  std::vector<LayerGroup> groups;
  layers.push_back(he_conv(1, width, 1.0, rng));
  layers.push_back(Relu{});
  layers.push_back(MaxPool{2, 2});
  groups.push_back({"stem", 0, 2});
  for (std::size_t b = 0; b < blocks; ++b) {
    const std::size_t block_input = layers.size() - 1;
    const std::size_t first = layers.size();
    layers.push_back(he_conv(width, width, 1.0, rng));
    layers.push_back(Relu{});
    layers.push_back(he_conv(width, width, 0.5, rng));
    layers.push_back(Relu{});
    layers.push_back(AddSkip{block_input});
    groups.push_back({"block" + std::to_string(b + 1), first, layers.size() - 1});
  }
  layers.push_back(AvgPoolGlobal{});
  FullyConnected fc;
  fc.in_features = width;
  fc.out_features = class_count;
  std::normal_distribution<double> dist(0.0, std::sqrt(1.0 / static_cast<double>(width)));
  fc.weights.resize(width * class_count);
  for (double& w : fc.weights) w = dist(rng);
  fc.bias.assign(class_count, 0.0);
  layers.push_back(fc);
  groups.push_back({"head", layers.size() - 2, layers.size() - 1});
  return ModelSpec::build({1, 8, 8}, class_count, std::move(layers), std::move(groups));
}

ModelSpec train_toy(const ModelSpec& model_init, const Dataset& dataset, const TrainOptions& options) {
  if (dataset.size() == 0) throw ValidationError("training dataset is empty");
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (dataset.images[i].shape() != model_init.input_shape()) {
      throw DimensionError("training image " + std::to_string(i) + " does not match the model input shape");
    }
    if (dataset.labels[i] >= model_init.class_count()) {
      throw ValidationError("training label " + std::to_string(i) + " out of range");
    }
  }
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  ModelSpec model = model_init;
  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    // Fisher-Yates with raw engine output keeps the order identical across
    // standard library implementations.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      WeightGradients total;
      for (std::size_t j = start; j < end; ++j) {
        TrainingGradient tg;
        try {
          tg = weight_gradients(model, dataset.images[order[j]], dataset.labels[order[j]]);
        } catch (const NumericError& e) {
          throw TrainingError("training diverged in epoch " + std::to_string(epoch) + ": " + e.what());
        }
        epoch_loss += tg.loss;
        if (total.weights.empty()) {
          total = std::move(tg.gradients);
          continue;
        }
        for (std::size_t l = 0; l < total.weights.size(); ++l) {
          for (std::size_t i = 0; i < total.weights[l].size(); ++i) total.weights[l][i] += tg.gradients.weights[l][i];
          for (std::size_t i = 0; i < total.bias[l].size(); ++i) total.bias[l][i] += tg.gradients.bias[l][i];
        }
      }
      if (!std::isfinite(epoch_loss)) {
        throw TrainingError("training diverged in epoch " + std::to_string(epoch));
      }
      const double step = options.learning_rate / static_cast<double>(end - start);
      auto& layers = model.mutable_layers();
      for (std::size_t l = 0; l < layers.size(); ++l) {
        std::visit(
            [&](auto& layer) {
              if constexpr (requires { layer.weights; layer.bias; }) {
                for (std::size_t i = 0; i < layer.weights.size(); ++i) layer.weights[i] -= step * total.weights[l][i];
                for (std::size_t i = 0; i < layer.bias.size(); ++i) layer.bias[i] -= step * total.bias[l][i];
              }
            },
            layers[l]);
      }
    }
    if (!std::isfinite(epoch_loss)) throw TrainingError("training diverged in epoch " + std::to_string(epoch));
  }
  for (const auto& layer : model.layers()) {
    bool finite = true;
    std::visit(
        [&](const auto& l) {
          if constexpr (requires { l.weights; }) {
            for (double w : l.weights) finite = finite && std::isfinite(w);
          }
        },
        layer);
    if (!finite) throw TrainingError("training produced non-finite weights");
  }
  return model;
}

double accuracy(const ModelSpec& model, const Dataset& dataset) {
  if (dataset.size() == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    if (argmax(forward(model, dataset.images[i]).probabilities) == dataset.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(dataset.size());
}

ToyFixture make_toy_fixture(const ToyFixtureOptions& options) {
  TextureOptions data;
  data.class_count = options.class_count;
  data.count = options.train_count;
  data.seed = options.seed;
  Dataset train = texture_dataset(data);
  data.count = options.test_count;
  data.seed = options.seed + 1;
  Dataset test = texture_dataset(data);
  const ModelSpec init = toy_architecture(options.class_count, options.seed + 2, options.width, options.blocks);
  return {train_toy(init, train, options.train), std::move(train), std::move(test)};
}

}  // namespace aevis
