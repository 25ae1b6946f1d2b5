#include "aevis/contribution.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "aevis/detail/json_reader.hpp"
#include "aevis/detail/params_doc.hpp"
#include "aevis/error.hpp"
#include "aevis/net.hpp"

namespace aevis {
namespace {

using nlohmann::json;

ContributionResult run_contribution(const ModelSpec& model, std::span<const Tensor> examples, std::size_t target,
                                    const NeuronMask* mask, const ExtractionParams& params) {
  params.validate();
  if (examples.empty()) throw ValidationError("contribution analysis needs at least one example");
  const auto& ref = model.feature_map(target);
  if (mask) {
    if (mask->feature_map != target) throw ValidationError("mask belongs to a different feature map");
    mask->validate(model);
  }

  ContributionResult result;
  result.target_feature_map = target;
  if (mask) result.mask = *mask;
  result.model_ref = model_id(model);
  result.params = params;
  for (std::size_t id = 0; id < model.gate_count(); ++id) {
    const std::size_t layer = model.feature_map(id).layer;
    if (layer < ref.layer) {
      result.feature_maps.push_back(id);
      result.feature_map_layers.push_back(layer);
    }
  }
  if (result.feature_maps.empty()) {
    throw ValidationError("feature map " + std::to_string(target) + " has no predecessors");
  }
  const auto& free = result.feature_maps;
  const std::size_t m = examples.size();
  const std::size_t n = model.gate_count();

  std::vector<GateLoss> losses(m);
  for (std::size_t i = 0; i < m; ++i) {
    ActivationPreservation a;
    a.feature_map = target;
    a.reference = forward(model, examples[i]).activations[target];
    if (mask) a.mask = mask->selected;
    losses[i].preservation = std::move(a);
    losses[i].lambda = params.lambda;
    losses[i].gamma = params.gamma;
    losses[i].free_gates = free;
  }
  auto with_anchors = [&](std::size_t i, const std::vector<std::vector<double>>& z) {
    GateLoss loss = losses[i];
    if (params.gamma != 0.0) {
      for (std::size_t j = 0; j < m; ++j) {
        if (j != i) loss.anchors.emplace_back(z[j]);
      }
    }
    return loss;
  };

  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noisy_steps = static_cast<double>(params.iterations) / 2.0;
  std::vector<std::vector<double>> z(m, std::vector<double>(n, 1.0));
  std::vector<double> noise(free.size(), 0.0);
  for (std::size_t t = 0; t < params.iterations; ++t) {
    const double sigma = params.gradient_noise * std::max(0.0, 1.0 - static_cast<double>(t) / noisy_steps);
    for (double& e : noise) e = sigma > 0.0 ? sigma * normal(rng) : 0.0;
    std::vector<std::vector<double>> next = z;
    for (std::size_t i = 0; i < m; ++i) {
      GateGradient gg;
      try {
        gg = gate_gradients(model, examples[i], GateVector(z[i]), with_anchors(i, z));
      } catch (const NumericError& e) {
        throw ExtractionError("contribution analysis diverged at iteration " + std::to_string(t) + ": " + e.what());
      }
      for (std::size_t k = 0; k < free.size(); ++k) {
        const std::size_t id = free[k];
        next[i][id] = std::clamp(z[i][id] - params.learning_rate * (gg.gradient[id] + noise[k]), 0.0, 1.0);
        if (!std::isfinite(next[i][id])) {
          throw ExtractionError("contribution analysis diverged at iteration " + std::to_string(t));
        }
      }
    }
    z = std::move(next);
  }

  result.values.assign(free.size(), 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    std::vector<double> own(free.size());
    for (std::size_t k = 0; k < free.size(); ++k) {
      own[k] = z[i][free[k]];
      result.values[k] += own[k] / static_cast<double>(m);
    }
    result.per_example.push_back(std::move(own));
    result.converged_loss.push_back(gate_loss(model, examples[i], GateVector(z[i]), with_anchors(i, z)));
  }
  return result;
}

json mask_doc(const NeuronMask& mask) {
  return json{{"feature_map", mask.feature_map}, {"shape", mask.shape}, {"runs", mask_to_runs(mask.selected)}};
}

NeuronMask read_mask(const detail::JsonReader& r) {
  NeuronMask mask;
  mask.feature_map = r.field("feature_map").index();
  mask.shape = r.field("shape").indices();
  if (mask.shape.size() != 2) r.field("shape").fail("expected [h, w]");
  const auto runs = r.field("runs").indices();
  try {
    mask.selected = mask_from_runs(runs, shape_size(mask.shape));
  } catch (const ValidationError& e) {
    r.field("runs").fail(e.what());
  }
  return mask;
}

}  // namespace

std::size_t NeuronMask::count() const {
  return static_cast<std::size_t>(std::count_if(selected.begin(), selected.end(), [](std::uint8_t s) { return s != 0; }));
}

void NeuronMask::validate(const ModelSpec& model) const {
  const Shape expected = model.feature_map_shape(feature_map);
  if (shape != expected) {
    throw ValidationError("mask shape " + shape_to_string(shape) + " does not match feature map shape " +
                          shape_to_string(expected));
  }
  if (selected.size() != shape_size(shape)) throw ValidationError("mask length does not match its shape");
  if (count() == 0) throw ValidationError("empty selection");
}

NeuronMask NeuronMask::full(const ModelSpec& model, std::size_t feature_map) {
  NeuronMask mask;
  mask.feature_map = feature_map;
  mask.shape = model.feature_map_shape(feature_map);
  mask.selected.assign(shape_size(mask.shape), 1);
  return mask;
}

std::vector<std::size_t> mask_to_runs(std::span<const std::uint8_t> selected) {
  std::vector<std::size_t> runs;
  bool current = false;
  std::size_t length = 0;
  for (std::uint8_t s : selected) {
    if ((s != 0) != current) {
      runs.push_back(length);
      current = !current;
      length = 0;
    }
    ++length;
  }
  runs.push_back(length);
  return runs;
}

std::vector<std::uint8_t> mask_from_runs(std::span<const std::size_t> runs, std::size_t size) {
  std::vector<std::uint8_t> selected;
  selected.reserve(size);
  bool current = false;
  for (std::size_t r : runs) {
    if (selected.size() + r > size) throw ValidationError("runs exceed the mask size");
    selected.insert(selected.end(), r, current ? 1 : 0);
    current = !current;
  }
  if (selected.size() != size) throw ValidationError("runs do not cover the mask");
  return selected;
}

ContributionResult contribution_whole(const ModelSpec& model, std::span<const Tensor> examples,
                                      std::size_t target_feature_map, const ExtractionParams& params) {
  return run_contribution(model, examples, target_feature_map, nullptr, params);
}

ContributionResult contribution_area(const ModelSpec& model, std::span<const Tensor> examples,
                                     std::size_t target_feature_map, const NeuronMask& mask,
                                     const ExtractionParams& params) {
  return run_contribution(model, examples, target_feature_map, &mask, params);
}

std::vector<std::pair<std::size_t, double>> rank_contributions(const ContributionResult& result, std::size_t k,
                                                               std::optional<std::size_t> layer) {
  if (k < 1) throw ValidationError("k must be >= 1");
  std::vector<std::pair<std::size_t, double>> ranked;
  for (std::size_t i = 0; i < result.feature_maps.size(); ++i) {
    if (layer && result.feature_map_layers[i] != *layer) continue;
    ranked.emplace_back(result.feature_maps[i], result.values[i]);
  }
  std::stable_sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  if (ranked.size() > k) ranked.resize(k);
  return ranked;
}

std::string save_contribution(const ContributionResult& result) {
  json maps = json::array();
  for (std::size_t i = 0; i < result.feature_maps.size(); ++i) {
    maps.push_back(json{{"id", result.feature_maps[i]},
                        {"layer", result.feature_map_layers[i]},
                        {"value", result.values[i]}});
  }
  json examples = json::array();
  for (std::size_t i = 0; i < result.per_example.size(); ++i) {
    examples.push_back(json{{"gates", result.per_example[i]}, {"converged_loss", result.converged_loss[i]}});
  }
  json doc{{"target_feature_map", result.target_feature_map},
           {"model_id", result.model_ref},
           {"params", detail::params_doc(result.params)},
           {"feature_maps", std::move(maps)},
           {"examples", std::move(examples)}};
  doc["mask"] = result.mask ? mask_doc(*result.mask) : json(nullptr);
  return doc.dump();
}

ContributionResult load_contribution(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const detail::JsonReader r(doc, "");
  ContributionResult result;
  result.target_feature_map = r.field("target_feature_map").index();
  result.model_ref = r.field("model_id").string();
  result.params = detail::read_params(r.field("params"));
  if (r.has("mask") && !doc["mask"].is_null()) result.mask = read_mask(r.field("mask"));
  const auto maps = r.field("feature_maps");
  for (std::size_t i = 0; i < maps.array_size(); ++i) {
    const auto e = maps.element(i);
    result.feature_maps.push_back(e.field("id").index());
    result.feature_map_layers.push_back(e.field("layer").index());
    const double v = e.field("value").number();
    if (v < 0.0 || v > 1.0) e.field("value").fail("expected a value in [0,1]");
    result.values.push_back(v);
  }
  const auto examples = r.field("examples");
  for (std::size_t i = 0; i < examples.array_size(); ++i) {
    const auto e = examples.element(i);
    auto gates = e.field("gates").numbers();
    if (gates.size() != result.feature_maps.size()) e.field("gates").fail("length does not match feature_maps");
    result.per_example.push_back(std::move(gates));
    result.converged_loss.push_back(e.field("converged_loss").number());
  }
  return result;
}

std::string save_mask(const NeuronMask& mask) { return mask_doc(mask).dump(); }

NeuronMask load_mask(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  return read_mask(detail::JsonReader(doc, ""));
}

}  // namespace aevis
