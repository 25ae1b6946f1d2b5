#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "aevis/model.hpp"
#include "aevis/layout.hpp"
#include "aevis/net.hpp"
#include "aevis/pattern.hpp"
#include "aevis/tensor.hpp"

namespace aevis::testing {

/// conv(channels, 3x3, pad 1) -> relu -> avgpool_global -> fullyconnected.
ModelSpec minimal_model(std::size_t channels = 3, std::size_t classes = 2, bool zero_fc_bias = false,
                        std::uint64_t seed = 7);

/// Single 1x1 identity conv (no bias) -> relu -> avgpool -> fc.
ModelSpec identity_model(std::size_t channels = 1);

/// Random CNN with at most three conv layers and eight feature maps; may
/// include maxpool, add_skip and a flattening fullyconnected head.
ModelSpec random_model(std::uint64_t seed);

struct Fixture {
  ModelSpec model;
  Tensor input;
};

/// Three conv maps, only map 0 feeds the classifier (logit margin 2 at
/// z = 1). Maps 1 and 2 carry activation but have zero downstream weight.
Fixture singleton_fixture();

/// `copies` conv maps with identical kernels and identical classifier
/// weights, plus one map with zero downstream weight. Any one copy can stand
/// in for the others.
Fixture redundant_fixture(std::size_t copies = 3);

/// Three conv layers of four maps on a [1,6,6] input with a three-class
/// head. One to three live maps of the last conv layer get a large weight
/// into one class; every other head weight is small noise.
Fixture planted_fixture(std::uint64_t seed);

/// (p(x) - p(x; 1_S))^2 + lambda |S| evaluated from two forward passes.
double subset_cost(const ModelSpec& model, const Tensor& x, const std::vector<std::size_t>& subset, double lambda);

struct SubsetOptimum {
  double cost = 0.0;
  std::vector<std::size_t> ids;
};

/// Exhaustive search over all 2^n feature-map subsets. First minimum in
/// bitmask order wins.
SubsetOptimum exhaustive_subset(const ModelSpec& model, const Tensor& x, double lambda);

enum class SeriesFamily { detected, plateau, early_max };

/// Random diff series of `length` >= r + 1 entries built so that
///   detected:  the last r steps strictly increase and the last entry is the
///              unique maximum;
///   plateau:   as detected except one of the last r steps is flat;
///   early_max: the last r steps strictly increase but an earlier entry is
///              at least as large as the last one.
std::vector<double> pattern_series(SeriesFamily family, std::uint64_t seed, std::size_t length, std::size_t r);

/// Set relation over one to three random subsets of {0..15} (every set
/// non-empty).
SetRelation random_relation(std::uint64_t seed);

/// Treemap objective recomputed from cell rectangles alone.
double treemap_objective_oracle(const TreemapLayout& layout, const SetRelation& relation);

/// Every parent assignment, top-level order and sibling order, laid out with
/// the fixed-plan treemap and scored with treemap_objective_oracle.
std::vector<double> enumerate_treemap_objectives(const SetRelation& relation, const Rect& canvas);

Tensor random_input(const Shape& shape, std::uint64_t seed, double low = 0.0, double high = 1.0);
GateVector random_gates(std::size_t n, std::uint64_t seed, double low = 0.1, double high = 0.9);

/// Central finite difference of a scalar function of a vector.
std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& at, double h = 1e-5);

/// |a - b| / max(|a|, |b|, floor). The floor keeps components that are zero
/// up to round-off from producing meaningless ratios.
double relative_error(double a, double b, double floor = 1e-4);

}  // namespace aevis::testing
