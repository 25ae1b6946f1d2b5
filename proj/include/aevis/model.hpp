#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "aevis/tensor.hpp"

namespace aevis {

struct Conv2d {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::vector<double> weights;  // [out][in][kh][kw]
  std::vector<double> bias;     // [out]

  friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

struct Relu {
  friend bool operator==(const Relu&, const Relu&) = default;
};

struct MaxPool {
  std::size_t window = 2;
  std::size_t stride = 2;
  friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct AvgPoolGlobal {
  friend bool operator==(const AvgPoolGlobal&, const AvgPoolGlobal&) = default;
};

struct FullyConnected {
  std::size_t in_features = 0;
  std::size_t out_features = 0;
  std::vector<double> weights;  // [out][in]
  std::vector<double> bias;     // [out]

  friend bool operator==(const FullyConnected&, const FullyConnected&) = default;
};

/// Residual addition of the output of an earlier layer (identical shapes).
struct AddSkip {
  std::size_t source = 0;
  friend bool operator==(const AddSkip&, const AddSkip&) = default;
};

using LayerSpec =
    std::variant<Conv2d, Relu, MaxPool, AvgPoolGlobal, FullyConnected, AddSkip>;

std::string layer_kind_name(const LayerSpec& layer);

struct LayerGroup {
  std::string name;
  std::size_t first_layer = 0;
  std::size_t last_layer = 0;
  friend bool operator==(const LayerGroup&, const LayerGroup&) = default;
};

/// Location of one gated feature map: the conv layer that produces it and the
/// output channel.
struct FeatureMapRef {
  std::size_t layer = 0;
  std::size_t channel = 0;
  friend bool operator==(const FeatureMapRef&, const FeatureMapRef&) = default;
};

/// A fixed-weight layered CNN. Immutable once built; construct through
/// ModelSpec::build, which validates the layer chain and derives the gate
/// index (feature-map ids are assigned in layer order, then channel order).
class ModelSpec {
 public:
  static ModelSpec build(Shape input_shape, std::size_t class_count,
                         std::vector<LayerSpec> layers,
                         std::vector<LayerGroup> layer_groups);

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t class_count() const noexcept { return class_count_; }
  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  const std::vector<LayerGroup>& layer_groups() const noexcept { return layer_groups_; }

  /// Total number of gated feature maps (n).
  std::size_t gate_count() const noexcept { return gate_index_.size(); }
  const std::vector<FeatureMapRef>& gate_index() const noexcept { return gate_index_; }
  const FeatureMapRef& feature_map(std::size_t id) const;

  /// Output shape of layer `i`.
  const Shape& output_shape(std::size_t layer) const { return output_shapes_.at(layer); }

  /// Layer whose output the gates of conv layer `conv_layer` multiply: the
  /// relu that directly follows it, or the conv itself.
  std::size_t gate_point(std::size_t conv_layer) const;
  /// Conv layer gated at the output of `layer`, if any.
  std::optional<std::size_t> gated_conv_at(std::size_t layer) const;

  /// First feature-map id of a conv layer (its channels are contiguous).
  std::size_t first_gate(std::size_t conv_layer) const;

  /// Conv layers in order; these are the layers that own gated maps.
  const std::vector<std::size_t>& gated_layers() const noexcept { return gated_layers_; }

  /// Feature-map ids owned by a layer (empty for layers without gates).
  std::vector<std::size_t> layer_feature_maps(std::size_t layer) const;

  /// Spatial shape (h, w) of a feature map's activation.
  Shape feature_map_shape(std::size_t id) const;

  /// Mutable access for training; callers must keep shapes unchanged.
  std::vector<LayerSpec>& mutable_layers() noexcept { return layers_; }

  friend bool operator==(const ModelSpec& a, const ModelSpec& b) {
    return a.input_shape_ == b.input_shape_ && a.class_count_ == b.class_count_ &&
           a.layers_ == b.layers_ && a.layer_groups_ == b.layer_groups_;
  }

 private:
  ModelSpec() = default;

  Shape input_shape_;
  std::size_t class_count_ = 0;
  std::vector<LayerSpec> layers_;
  std::vector<LayerGroup> layer_groups_;

  std::vector<Shape> output_shapes_;
  std::vector<FeatureMapRef> gate_index_;
  std::vector<std::size_t> gated_layers_;
  std::vector<std::size_t> first_gate_;        // per layer; npos for non-conv
  std::vector<std::size_t> gate_point_;        // per layer; npos for non-conv
  std::vector<std::size_t> gated_conv_at_;     // per layer; npos if none
};

/// Content hash of the serialized model, used as its identifier.
std::string model_id(const ModelSpec& model);

}  // namespace aevis
