#include "aevis/model_io.hpp"

#include <fstream>
#include <sstream>

#include "aevis/detail/json_reader.hpp"
#include "aevis/error.hpp"

namespace aevis {
namespace {

using nlohmann::json;
using detail::JsonReader;

json array_doc(const Shape& shape, const std::vector<double>& data) {
  return json{{"shape", shape}, {"data", data}};
}

std::vector<double> read_array(const JsonReader& r, const Shape& expected) {
  const Shape shape = r.field("shape").indices();
  if (shape != expected) {
    r.field("shape").fail("expected " + shape_to_string(expected) + ", got " + shape_to_string(shape));
  }
  auto data = r.field("data").numbers();
  if (data.size() != shape_size(shape)) {
    r.field("data").fail("expected " + std::to_string(shape_size(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  return data;
}

LayerSpec read_layer(const JsonReader& r) {
  const std::string kind = r.field("kind").string();
  if (kind == "conv2d") {
    Conv2d c;
    c.in_channels = r.field("in_channels").index();
    c.out_channels = r.field("out_channels").index();
    const auto kernel = r.field("kernel").indices();
    if (kernel.size() != 2) r.field("kernel").fail("expected [height, width]");
    c.kernel_h = kernel[0];
    c.kernel_w = kernel[1];
    c.stride = r.has("stride") ? r.field("stride").index() : 1;
    c.padding = r.has("padding") ? r.field("padding").index() : 0;
    c.weights = read_array(r.field("weights"), {c.out_channels, c.in_channels, c.kernel_h, c.kernel_w});
    c.bias = r.field("bias").numbers();
    return c;
  }
  if (kind == "relu") return Relu{};
  if (kind == "maxpool") {
    MaxPool p;
    p.window = r.field("window").index();
    p.stride = r.has("stride") ? r.field("stride").index() : p.window;
    return p;
  }
  if (kind == "avgpool_global") return AvgPoolGlobal{};
  if (kind == "fullyconnected") {
    FullyConnected f;
    f.in_features = r.field("in_features").index();
    f.out_features = r.field("out_features").index();
    f.weights = read_array(r.field("weights"), {f.out_features, f.in_features});
    f.bias = r.field("bias").numbers();
    return f;
  }
  if (kind == "add_skip") return AddSkip{r.field("source").index()};
  r.field("kind").fail("unknown layer kind '" + kind + "'");
}

json write_layer(const LayerSpec& layer) {
  json out{{"kind", layer_kind_name(layer)}};
  if (const auto* c = std::get_if<Conv2d>(&layer)) {
    out["in_channels"] = c->in_channels;
    out["out_channels"] = c->out_channels;
    out["kernel"] = {c->kernel_h, c->kernel_w};
    out["stride"] = c->stride;
    out["padding"] = c->padding;
    out["weights"] = array_doc({c->out_channels, c->in_channels, c->kernel_h, c->kernel_w}, c->weights);
    out["bias"] = c->bias;
  } else if (const auto* p = std::get_if<MaxPool>(&layer)) {
    out["window"] = p->window;
    out["stride"] = p->stride;
  } else if (const auto* f = std::get_if<FullyConnected>(&layer)) {
    out["in_features"] = f->in_features;
    out["out_features"] = f->out_features;
    out["weights"] = array_doc({f->out_features, f->in_features}, f->weights);
    out["bias"] = f->bias;
  } else if (const auto* s = std::get_if<AddSkip>(&layer)) {
    out["source"] = s->source;
  }
  return out;
}

}  // namespace

ModelSpec load_model(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const JsonReader root(doc, "");
  const auto version = root.field("version");
  if (version.index() != static_cast<std::size_t>(kModelFormatVersion)) {
    version.fail("unsupported model format version " + version.node().dump());
  }
  Shape input_shape = root.field("input_shape").indices();
  const std::size_t class_count = root.field("class_count").index();

  const auto layers_r = root.field("layers");
  std::vector<LayerSpec> layers;
  for (std::size_t i = 0; i < layers_r.array_size(); ++i) layers.push_back(read_layer(layers_r.element(i)));

  std::vector<LayerGroup> groups;
  if (root.has("layer_groups")) {
    const auto groups_r = root.field("layer_groups");
    for (std::size_t i = 0; i < groups_r.array_size(); ++i) {
      const auto g = groups_r.element(i);
      groups.push_back({g.field("name").string(), g.field("first_layer").index(),
                        g.field("last_layer").index()});
    }
  }
  return ModelSpec::build(std::move(input_shape), class_count, std::move(layers), std::move(groups));
}

std::string save_model(const ModelSpec& model) {
  json layers = json::array();
  for (const auto& layer : model.layers()) layers.push_back(write_layer(layer));
  json groups = json::array();
  for (const auto& g : model.layer_groups()) {
    groups.push_back({{"name", g.name}, {"first_layer", g.first_layer}, {"last_layer", g.last_layer}});
  }
  json doc{{"version", kModelFormatVersion},
           {"input_shape", model.input_shape()},
           {"class_count", model.class_count()},
           {"layers", layers},
           {"layer_groups", groups}};
  return doc.dump();
}

ModelSpec load_model_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("cannot read model file " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return load_model(ss.str());
}

void save_model_file(const ModelSpec& model, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("io_error", "cannot write model file " + path);
  out << save_model(model);
}

}  // namespace aevis
