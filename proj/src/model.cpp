#include "aevis/model.hpp"

#include <cmath>
#include <limits>

#include "aevis/error.hpp"
#include "aevis/model_io.hpp"

namespace aevis {
namespace {

constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

[[noreturn]] void layer_error(std::size_t index, const std::string& what) {
  throw ValidationError("layer " + std::to_string(index) + ": " + what);
}

void check_finite(std::size_t index, const std::vector<double>& values, const char* name) {
  for (double v : values) {
    if (!std::isfinite(v)) layer_error(index, std::string("non-finite ") + name);
  }
}

}  // namespace

std::string layer_kind_name(const LayerSpec& layer) {
  return std::visit(Overloaded{
                        [](const Conv2d&) { return std::string("conv2d"); },
                        [](const Relu&) { return std::string("relu"); },
                        [](const MaxPool&) { return std::string("maxpool"); },
                        [](const AvgPoolGlobal&) { return std::string("avgpool_global"); },
                        [](const FullyConnected&) { return std::string("fullyconnected"); },
                        [](const AddSkip&) { return std::string("add_skip"); },
                    },
                    layer);
}

ModelSpec ModelSpec::build(Shape input_shape, std::size_t class_count,
                           std::vector<LayerSpec> layers,
                           std::vector<LayerGroup> layer_groups) {
  if (input_shape.size() != 3 || shape_size(input_shape) == 0) {
    throw ValidationError("input_shape must be [channels, height, width] with nonzero sizes");
  }
  if (class_count == 0) throw ValidationError("class_count must be positive");
  if (layers.empty()) throw ValidationError("model has no layers");

  ModelSpec m;
  m.input_shape_ = std::move(input_shape);
  m.class_count_ = class_count;
  m.layers_ = std::move(layers);
  m.layer_groups_ = std::move(layer_groups);

  const std::size_t count = m.layers_.size();
  m.first_gate_.assign(count, kNone);
  m.gate_point_.assign(count, kNone);
  m.gated_conv_at_.assign(count, kNone);

  Shape current = m.input_shape_;
  for (std::size_t i = 0; i < count; ++i) {
    const LayerSpec& layer = m.layers_[i];
    Shape next = std::visit(
        Overloaded{
            [&](const Conv2d& c) -> Shape {
              if (current.size() != 3) layer_error(i, "conv2d expects a [c,h,w] input");
              if (c.in_channels != current[0]) {
                layer_error(i, "conv2d in_channels " + std::to_string(c.in_channels) +
                                   " does not match input channels " +
                                   std::to_string(current[0]));
              }
              if (c.out_channels == 0 || c.kernel_h == 0 || c.kernel_w == 0 || c.stride == 0) {
                layer_error(i, "conv2d sizes must be positive");
              }
              if (c.weights.size() != c.out_channels * c.in_channels * c.kernel_h * c.kernel_w) {
                layer_error(i, "conv2d weights length mismatch");
              }
              if (c.bias.size() != c.out_channels) layer_error(i, "conv2d bias length mismatch");
              check_finite(i, c.weights, "weight");
              check_finite(i, c.bias, "bias");
              const std::size_t ph = current[1] + 2 * c.padding;
              const std::size_t pw = current[2] + 2 * c.padding;
              if (ph < c.kernel_h || pw < c.kernel_w) layer_error(i, "conv2d kernel larger than input");
              return {c.out_channels, (ph - c.kernel_h) / c.stride + 1,
                      (pw - c.kernel_w) / c.stride + 1};
            },
            [&](const Relu&) -> Shape { return current; },
            [&](const MaxPool& p) -> Shape {
              if (current.size() != 3) layer_error(i, "maxpool expects a [c,h,w] input");
              if (p.window == 0 || p.stride == 0) layer_error(i, "maxpool sizes must be positive");
              if (current[1] < p.window || current[2] < p.window) {
                layer_error(i, "maxpool window larger than input");
              }
              return {current[0], (current[1] - p.window) / p.stride + 1,
                      (current[2] - p.window) / p.stride + 1};
            },
            [&](const AvgPoolGlobal&) -> Shape {
              if (current.size() != 3) layer_error(i, "avgpool_global expects a [c,h,w] input");
              return {current[0]};
            },
            [&](const FullyConnected& f) -> Shape {
              if (f.in_features != shape_size(current)) {
                layer_error(i, "fullyconnected in_features " + std::to_string(f.in_features) +
                                   " does not match input size " +
                                   std::to_string(shape_size(current)));
              }
              if (f.out_features == 0) layer_error(i, "fullyconnected out_features must be positive");
              if (f.weights.size() != f.in_features * f.out_features) {
                layer_error(i, "fullyconnected weights length mismatch");
              }
              if (f.bias.size() != f.out_features) layer_error(i, "fullyconnected bias length mismatch");
              check_finite(i, f.weights, "weight");
              check_finite(i, f.bias, "bias");
              return {f.out_features};
            },
            [&](const AddSkip& s) -> Shape {
              if (s.source >= i) {
                layer_error(i, "add_skip source " + std::to_string(s.source) +
                                   " must precede the layer");
              }
              if (m.output_shapes_[s.source] != current) {
                layer_error(i, "add_skip source shape " +
                                   shape_to_string(m.output_shapes_[s.source]) +
                                   " does not match " + shape_to_string(current));
              }
              return current;
            },
        },
        layer);
    m.output_shapes_.push_back(next);
    current = std::move(next);
  }
  if (current != Shape{class_count}) {
    throw ValidationError("final layer output " + shape_to_string(current) +
                          " does not match class_count " + std::to_string(class_count));
  }

  for (std::size_t i = 0; i < count; ++i) {
    const auto* conv = std::get_if<Conv2d>(&m.layers_[i]);
    if (!conv) continue;
    m.gated_layers_.push_back(i);
    m.first_gate_[i] = m.gate_index_.size();
    for (std::size_t ch = 0; ch < conv->out_channels; ++ch) m.gate_index_.push_back({i, ch});
    const bool relu_follows = i + 1 < count && std::holds_alternative<Relu>(m.layers_[i + 1]);
    m.gate_point_[i] = relu_follows ? i + 1 : i;
    m.gated_conv_at_[m.gate_point_[i]] = i;
  }

  std::size_t expected = 0;
  for (const auto& g : m.layer_groups_) {
    if (g.first_layer != expected || g.last_layer < g.first_layer || g.last_layer >= count) {
      throw ValidationError("layer_groups must partition the layer list; group '" + g.name +
                            "' covers [" + std::to_string(g.first_layer) + "," +
                            std::to_string(g.last_layer) + "]");
    }
    expected = g.last_layer + 1;
  }
  if (!m.layer_groups_.empty() && expected != count) {
    throw ValidationError("layer_groups do not cover the final layers");
  }
  if (m.layer_groups_.empty()) m.layer_groups_.push_back({"all", 0, count - 1});
  return m;
}

const FeatureMapRef& ModelSpec::feature_map(std::size_t id) const {
  if (id >= gate_index_.size()) {
    throw LookupError("unknown feature map " + std::to_string(id));
  }
  return gate_index_[id];
}

std::size_t ModelSpec::gate_point(std::size_t conv_layer) const {
  if (conv_layer >= gate_point_.size() || gate_point_[conv_layer] == kNone) {
    throw LookupError("layer " + std::to_string(conv_layer) + " is not a conv layer");
  }
  return gate_point_[conv_layer];
}

std::optional<std::size_t> ModelSpec::gated_conv_at(std::size_t layer) const {
  if (layer >= gated_conv_at_.size() || gated_conv_at_[layer] == kNone) return std::nullopt;
  return gated_conv_at_[layer];
}

std::size_t ModelSpec::first_gate(std::size_t conv_layer) const {
  if (conv_layer >= first_gate_.size() || first_gate_[conv_layer] == kNone) {
    throw LookupError("layer " + std::to_string(conv_layer) + " is not a conv layer");
  }
  return first_gate_[conv_layer];
}

std::vector<std::size_t> ModelSpec::layer_feature_maps(std::size_t layer) const {
  if (layer >= layers_.size()) throw LookupError("unknown layer " + std::to_string(layer));
  std::vector<std::size_t> ids;
  if (const auto* conv = std::get_if<Conv2d>(&layers_[layer])) {
    for (std::size_t ch = 0; ch < conv->out_channels; ++ch) ids.push_back(first_gate_[layer] + ch);
  }
  return ids;
}

Shape ModelSpec::feature_map_shape(std::size_t id) const {
  const auto& ref = feature_map(id);
  const Shape& s = output_shapes_[ref.layer];
  return {s[1], s[2]};
}

std::string model_id(const ModelSpec& model) {
  // FNV-1a over the canonical document.
  const std::string doc = save_model(model);
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : doc) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xF];
    h >>= 4;
  }
  return "m-" + out;
}

}  // namespace aevis
