#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "aevis/tensor.hpp"

namespace aevis {

struct Dataset {
  std::vector<Tensor> images;
  std::vector<std::size_t> labels;

  std::size_t size() const noexcept { return images.size(); }
};

struct TextureOptions {
  std::size_t count = 200;
  std::size_t class_count = 2;  // 2..4 textures
  std::size_t side = 8;
  double amplitude_low = 0.08;
  double amplitude_high = 0.2;
  double noise = 0.08;
  std::uint64_t seed = 1;
};

/// Procedural stripe/checker textures on a [1, side, side] grid with pixel
/// values in [0,1]. Class c uses texture c: horizontal stripes, vertical
/// stripes, diagonal stripes, checkerboard. Labels cycle through the classes.
Dataset texture_dataset(const TextureOptions& options);

/// Two linearly separable classes: a bright blob in the left (label 0) or
/// right (label 1) half of a [1, 8, 8] image.
Dataset blob_dataset(std::size_t count, std::uint64_t seed);

std::string save_dataset(const Dataset& dataset);
Dataset load_dataset(const std::string& bytes);
Dataset load_dataset_file(const std::string& path);
void save_dataset_file(const Dataset& dataset, const std::string& path);

/// Single-image document: {"shape": [...], "data": [...]}.
std::string save_image(const Tensor& image);
Tensor load_image(const std::string& bytes);
Tensor load_image_file(const std::string& path);
void save_image_file(const Tensor& image, const std::string& path);

/// One (source, adversarial, targets) group as referenced from a manifest.
struct TripletEntry {
  std::string source_path;
  std::string adversarial_path;
  std::vector<std::string> target_paths;
  std::size_t source_label = 0;
  std::size_t predicted_label = 0;
};

std::string save_manifest(const std::vector<TripletEntry>& entries);
std::vector<TripletEntry> load_manifest(const std::string& bytes);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& bytes);

}  // namespace aevis
