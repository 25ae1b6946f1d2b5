#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <variant>
#include <vector>

#include "aevis/model.hpp"
#include "aevis/tensor.hpp"

namespace aevis {

/// One multiplier in [0,1] per gated feature map of a model.
class GateVector {
 public:
  GateVector() = default;
  /// Throws ValidationError if any value lies outside [0,1].
  explicit GateVector(std::vector<double> values);

  static GateVector ones(std::size_t n) { return GateVector(std::vector<double>(n, 1.0)); }
  static GateVector zeros(std::size_t n) { return GateVector(std::vector<double>(n, 0.0)); }
  /// Projects arbitrary values onto [0,1]^n.
  static GateVector clamped(std::vector<double> values);

  std::size_t size() const noexcept { return values_.size(); }
  double operator[](std::size_t i) const noexcept { return values_[i]; }
  const std::vector<double>& values() const noexcept { return values_; }
  double sum() const noexcept;

  friend bool operator==(const GateVector&, const GateVector&) = default;

 private:
  std::vector<double> values_;
};

struct ForwardResult {
  std::vector<double> logits;
  std::vector<double> probabilities;
  /// Gated post-nonlinearity activation of every feature map, indexed by
  /// feature-map id; each entry is an [h, w] tensor.
  std::vector<Tensor> activations;
};

ForwardResult forward(const ModelSpec& model, const Tensor& input, const GateVector& gates);
/// Forward pass with every gate at 1.
ForwardResult forward(const ModelSpec& model, const Tensor& input);

std::vector<double> softmax(std::span<const double> logits);
std::size_t argmax(std::span<const double> values);

/// Squared L2 distance between the reference prediction and the gated one.
struct ProbabilityPreservation {
  std::vector<double> reference;
};

/// Summed squared difference between a reference activation of one feature
/// map and its gated activation, restricted to `mask` when it is non-empty
/// (row-major over the map's [h, w] grid).
struct ActivationPreservation {
  std::size_t feature_map = 0;
  Tensor reference;
  std::vector<std::uint8_t> mask;
};

/// Scalar objective over gates:
///   preservation + lambda * sum(z_free) + gamma * sum_a ||z_free - a_free||_2
/// where `free_gates` selects the coordinates the sparsity and coupling terms
/// see (all gates when empty).
struct GateLoss {
  std::variant<std::monostate, ProbabilityPreservation, ActivationPreservation> preservation;
  double lambda = 0.0;
  std::vector<std::size_t> free_gates;
  double gamma = 0.0;
  std::vector<GateVector> anchors;
};

struct GateGradient {
  double loss = 0.0;
  std::vector<double> gradient;
};

/// Exact value and reverse-mode gradient of `loss` with respect to every gate.
/// Weights and input are constants. The coupling term's gradient at a point
/// coinciding with its anchor is defined as 0.
GateGradient gate_gradients(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                            const GateLoss& loss);
double gate_loss(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                 const GateLoss& loss);

/// Gradient of the cross-entropy at `target_label` with respect to the input.
Tensor input_gradients(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                       std::size_t target_label);
double cross_entropy(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                     std::size_t target_label);

/// Per-layer parameter gradients; empty vectors for parameter-free layers.
struct WeightGradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> bias;
};

struct TrainingGradient {
  double loss = 0.0;
  bool correct = false;
  WeightGradients gradients;
};

/// Cross-entropy gradient with respect to all conv and fullyconnected
/// parameters, with every gate at 1.
TrainingGradient weight_gradients(const ModelSpec& model, const Tensor& input, std::size_t label);

}  // namespace aevis
