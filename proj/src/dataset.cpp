#include "aevis/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "aevis/detail/json_reader.hpp"
#include "aevis/error.hpp"

namespace aevis {
namespace {

using nlohmann::json;
using detail::JsonReader;

double texture(std::size_t kind, double y, double x, double period, double phase) {
  const double w = 2.0 * std::numbers::pi / period;
  switch (kind) {
    case 0: return std::sin(w * y + phase);
    case 1: return std::sin(w * x + phase);
    case 2: return std::sin(w * (x + y) / std::numbers::sqrt2 + phase);
    default: return std::sin(w * x + phase) * std::sin(w * y + phase);
  }
}

json image_doc(const Tensor& t) { return json{{"shape", t.shape()}, {"data", t.values()}}; }

Tensor read_image(const JsonReader& r) {
  Shape shape = r.field("shape").indices();
  auto data = r.field("data").numbers();
  if (data.size() != shape_size(shape)) r.field("data").fail("length does not match shape");
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

Dataset texture_dataset(const TextureOptions& o) {
  if (o.class_count < 2 || o.class_count > 4) throw ValidationError("texture class_count must be in [2,4]");
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  Dataset d;
  for (std::size_t i = 0; i < o.count; ++i) {
    const std::size_t label = i % o.class_count;
    const double amplitude = o.amplitude_low + (o.amplitude_high - o.amplitude_low) * unit(rng);
    const double period = unit(rng) < 0.5 ? 4.0 : 3.0;
    const double phase = 2.0 * std::numbers::pi * unit(rng);
    Tensor img({1, o.side, o.side});
    for (std::size_t y = 0; y < o.side; ++y) {
      for (std::size_t x = 0; x < o.side; ++x) {
        const double v = 0.5 + amplitude * texture(label, static_cast<double>(y), static_cast<double>(x), period, phase) +
                         o.noise * noise(rng);
        img.at(0, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

Dataset blob_dataset(std::size_t count, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.05);
  Dataset d;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t label = i % 2;
    const double cx = (label == 0 ? 0.5 : 4.5) + 2.0 * unit(rng);
    const double cy = 1.5 + 4.0 * unit(rng);
    Tensor img({1, 8, 8});
    for (std::size_t y = 0; y < 8; ++y) {
      for (std::size_t x = 0; x < 8; ++x) {
        const double d2 = (static_cast<double>(x) - cx) * (static_cast<double>(x) - cx) +
                          (static_cast<double>(y) - cy) * (static_cast<double>(y) - cy);
        img.at(0, y, x) = std::clamp(0.1 + 0.8 * std::exp(-d2 / 2.0) + noise(rng), 0.0, 1.0);
      }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
  }
  return d;
}

std::string save_dataset(const Dataset& dataset) {
  json images = json::array();
  for (const auto& img : dataset.images) images.push_back(image_doc(img));
  return json{{"version", 1}, {"images", images}, {"labels", dataset.labels}}.dump();
}

Dataset load_dataset(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const JsonReader root(doc, "");
  Dataset d;
  const auto images = root.field("images");
  for (std::size_t i = 0; i < images.array_size(); ++i) d.images.push_back(read_image(images.element(i)));
  d.labels = root.field("labels").indices();
  if (d.labels.size() != d.images.size()) root.field("labels").fail("expected one label per image");
  return d;
}

std::string save_image(const Tensor& image) { return image_doc(image).dump(); }

Tensor load_image(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  return read_image(JsonReader(doc, ""));
}

std::string save_manifest(const std::vector<TripletEntry>& entries) {
  json triplets = json::array();
  for (const auto& e : entries) {
    triplets.push_back({{"source_path", e.source_path},
                        {"adversarial_path", e.adversarial_path},
                        {"target_paths", e.target_paths},
                        {"source_label", e.source_label},
                        {"predicted_label", e.predicted_label}});
  }
  return json{{"version", 1}, {"triplets", triplets}}.dump(2);
}

std::vector<TripletEntry> load_manifest(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const JsonReader root(doc, "");
  const auto triplets = root.field("triplets");
  std::vector<TripletEntry> out;
  for (std::size_t i = 0; i < triplets.array_size(); ++i) {
    const auto t = triplets.element(i);
    TripletEntry e;
    e.source_path = t.field("source_path").string();
    e.adversarial_path = t.field("adversarial_path").string();
    const auto targets = t.field("target_paths");
    for (std::size_t j = 0; j < targets.array_size(); ++j) e.target_paths.push_back(targets.element(j).string());
    e.source_label = t.field("source_label").index();
    e.predicted_label = t.field("predicted_label").index();
    out.push_back(std::move(e));
  }
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LookupError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("io_error", "cannot write " + path);
  out << bytes;
  if (!out) throw Error("io_error", "short write to " + path);
}

Dataset load_dataset_file(const std::string& path) { return load_dataset(read_file(path)); }
void save_dataset_file(const Dataset& dataset, const std::string& path) { write_file(path, save_dataset(dataset)); }
Tensor load_image_file(const std::string& path) { return load_image(read_file(path)); }
void save_image_file(const Tensor& image, const std::string& path) { write_file(path, save_image(image)); }

}  // namespace aevis
