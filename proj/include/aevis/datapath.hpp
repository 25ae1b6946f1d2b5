#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "aevis/model.hpp"
#include "aevis/net.hpp"

namespace aevis {

struct ExtractionParams {
  double lambda = 0.05;
  double gamma = 1.0;
  double learning_rate = 0.05;
  std::size_t iterations = 500;
  std::uint64_t seed = 0;
  double binarize_tau = 0.5;
  /// Standard deviation of the zero-mean noise added to each gradient
  /// estimate. It decays linearly to zero at the halfway iteration, so the
  /// second half of the run is plain projected gradient descent.
  double gradient_noise = 0.5;

  void validate() const;
};

struct Datapath {
  GateVector gates;
  std::string model_ref;
  std::string example_ref;
  double converged_loss = 0.0;
  bool label_preserved = false;
  ExtractionParams params;
};

/// Called after every projected step with the iteration index and the
/// current gates.
using ExtractionObserver = std::function<void(std::size_t, std::span<const double>)>;

/// (p(x) - p(x; z))^2 + lambda * sum(z), p being the ungated prediction.
double extraction_loss(const ModelSpec& model, const Tensor& x, const GateVector& z, double lambda);

/// Projected stochastic gradient descent on extraction_loss from z = 1,
/// clamping to [0,1] after every step.
Datapath extract_datapath(const ModelSpec& model, const Tensor& x, const ExtractionParams& params,
                          const std::string& example_ref = {}, const ExtractionObserver& observer = {});

/// As extract_datapath with the coupling term
///   gamma * sum_j ||z_j - z||_2
/// towards every anchor datapath.
Datapath extract_anchored(const ModelSpec& model, const Tensor& x, std::span<const Datapath> anchors,
                          const ExtractionParams& params, const std::string& example_ref = {});

/// Chain of conditional extractions: example i is coupled to the datapaths
/// already extracted for examples 0..i-1 and uses seed `params.seed + i`.
/// The first example is the anchor (conventionally the adversarial one).
std::vector<Datapath> extract_constrained(const ModelSpec& model, std::span<const Tensor> examples,
                                          const ExtractionParams& params,
                                          std::span<const std::string> example_refs = {});

/// Feature-map ids whose gate exceeds tau, ascending.
std::vector<std::size_t> binarize(const Datapath& dp, double tau);
std::vector<std::size_t> binarize(const GateVector& gates, double tau);

/// Discrete objective of a feature-map subset: (p(x) - p(x; F_s))^2 + lambda |F_s|.
double subset_objective(const ModelSpec& model, const Tensor& x, std::span<const std::size_t> subset, double lambda);

std::string save_datapath(const Datapath& dp);
Datapath load_datapath(const std::string& bytes);

std::string params_to_json(const ExtractionParams& p);

}  // namespace aevis
