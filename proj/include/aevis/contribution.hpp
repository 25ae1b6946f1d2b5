#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aevis/datapath.hpp"
#include "aevis/model.hpp"
#include "aevis/tensor.hpp"

namespace aevis {

/// Brushed area of interest on one feature map; `selected` is row-major over
/// the map's [h, w] grid.
struct NeuronMask {
  std::size_t feature_map = 0;
  Shape shape;
  std::vector<std::uint8_t> selected;

  std::size_t count() const;
  /// Shape must match the model's map and at least one neuron must be
  /// selected ("empty selection" otherwise).
  void validate(const ModelSpec& model) const;

  static NeuronMask full(const ModelSpec& model, std::size_t feature_map);
};

/// Alternating run lengths starting with unselected entries, e.g.
/// 0 0 1 1 1 0 -> [2, 3, 1]. A mask starting with a selected entry begins
/// with a 0 run.
std::vector<std::size_t> mask_to_runs(std::span<const std::uint8_t> selected);
std::vector<std::uint8_t> mask_from_runs(std::span<const std::size_t> runs, std::size_t size);

struct ContributionResult {
  std::size_t target_feature_map = 0;
  std::optional<NeuronMask> mask;
  std::string model_ref;
  ExtractionParams params;
  /// Gated maps in layers strictly before the target's layer, ascending id.
  std::vector<std::size_t> feature_maps;
  std::vector<std::size_t> feature_map_layers;
  /// Mean over examples, aligned with feature_maps.
  std::vector<double> values;
  /// One vector per example, aligned with feature_maps.
  std::vector<std::vector<double>> per_example;
  std::vector<double> converged_loss;
};

/// Jointly fits one gate vector per example over the target's predecessor
/// maps so the target map's activation is preserved:
///   sum_neurons (f(x_i) - f(x_i; z_i))^2 + lambda |z_i| + gamma sum_{j != i} ||z_j - z_i||_2
/// Gates at or after the target layer stay at 1. Every iteration moves all
/// vectors at once, each along its own objective with the others fixed at
/// their current values; the gradient noise draw is shared by all examples.
ContributionResult contribution_whole(const ModelSpec& model, std::span<const Tensor> examples,
                                      std::size_t target_feature_map, const ExtractionParams& params);

/// As contribution_whole with the preservation sum restricted to the
/// selected neurons of `mask`.
ContributionResult contribution_area(const ModelSpec& model, std::span<const Tensor> examples,
                                     std::size_t target_feature_map, const NeuronMask& mask,
                                     const ExtractionParams& params);

/// Top k (feature map id, mean value) pairs, descending by value with ties
/// by ascending id, optionally restricted to one model layer.
std::vector<std::pair<std::size_t, double>> rank_contributions(const ContributionResult& result, std::size_t k,
                                                               std::optional<std::size_t> layer = std::nullopt);

std::string save_contribution(const ContributionResult& result);
ContributionResult load_contribution(const std::string& bytes);

std::string save_mask(const NeuronMask& mask);
NeuronMask load_mask(const std::string& bytes);

}  // namespace aevis
