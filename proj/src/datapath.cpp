#include "aevis/datapath.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "aevis/detail/json_reader.hpp"
#include "aevis/detail/params_doc.hpp"
#include "aevis/error.hpp"

namespace aevis {

namespace detail {

nlohmann::json params_doc(const ExtractionParams& p) {
  return nlohmann::json{{"lambda", p.lambda},
                        {"gamma", p.gamma},
                        {"learning_rate", p.learning_rate},
                        {"iterations", p.iterations},
                        {"seed", p.seed},
                        {"binarize_tau", p.binarize_tau},
                        {"gradient_noise", p.gradient_noise}};
}

ExtractionParams read_params(const JsonReader& r) {
  ExtractionParams p;
  p.lambda = r.field("lambda").number();
  p.gamma = r.field("gamma").number();
  p.learning_rate = r.field("learning_rate").number();
  p.iterations = r.field("iterations").index();
  p.seed = r.field("seed").index();
  p.binarize_tau = r.field("binarize_tau").number();
  if (r.has("gradient_noise")) p.gradient_noise = r.field("gradient_noise").number();
  return p;
}

}  // namespace detail

namespace {

using nlohmann::json;
using detail::params_doc;
using detail::read_params;

Datapath run_extraction(const ModelSpec& model, const Tensor& x, std::span<const Datapath> anchors,
                        const ExtractionParams& params, std::uint64_t seed, const std::string& example_ref,
                        const ExtractionObserver& observer = {}) {
  params.validate();
  const std::size_t n = model.gate_count();
  const auto reference = forward(model, x).probabilities;

  GateLoss loss;
  loss.preservation = ProbabilityPreservation{reference};
  loss.lambda = params.lambda;
  loss.gamma = params.gamma;
  for (const auto& a : anchors) {
    if (a.gates.size() != n) throw DimensionError("anchor datapath belongs to a different model");
    loss.anchors.push_back(a.gates);
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double noisy_steps = static_cast<double>(params.iterations) / 2.0;

  std::vector<double> z(n, 1.0);
  for (std::size_t t = 0; t < params.iterations; ++t) {
    GateGradient gg;
    try {
      gg = gate_gradients(model, x, GateVector(z), loss);
    } catch (const NumericError& e) {
      throw ExtractionError("extraction diverged at iteration " + std::to_string(t) + ": " + e.what());
    }
    const double sigma = params.gradient_noise * std::max(0.0, 1.0 - static_cast<double>(t) / noisy_steps);
    for (std::size_t k = 0; k < n; ++k) {
      double g = gg.gradient[k];
      if (sigma > 0.0) g += sigma * normal(rng);
      z[k] = std::clamp(z[k] - params.learning_rate * g, 0.0, 1.0);
    }
    for (double v : z) {
      if (!std::isfinite(v)) throw ExtractionError("extraction diverged at iteration " + std::to_string(t));
    }
    if (observer) observer(t, z);
  }

  Datapath dp;
  dp.gates = GateVector(std::move(z));
  dp.model_ref = model_id(model);
  dp.example_ref = example_ref;
  dp.params = params;
  dp.converged_loss = gate_loss(model, x, dp.gates, loss);
  if (!std::isfinite(dp.converged_loss)) throw ExtractionError("extraction produced a non-finite loss");
  dp.label_preserved = argmax(forward(model, x, dp.gates).probabilities) == argmax(reference);
  return dp;
}

}  // namespace

void ExtractionParams::validate() const {
  if (!(lambda >= 0.0)) throw ValidationError("lambda must be >= 0");
  if (!(gamma >= 0.0)) throw ValidationError("gamma must be >= 0");
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (iterations < 1) throw ValidationError("iterations must be >= 1");
  if (!(binarize_tau > 0.0 && binarize_tau < 1.0)) throw ValidationError("binarize_tau must lie in (0,1)");
  if (!(gradient_noise >= 0.0)) throw ValidationError("gradient_noise must be >= 0");
}

double extraction_loss(const ModelSpec& model, const Tensor& x, const GateVector& z, double lambda) {
  GateLoss loss;
  loss.preservation = ProbabilityPreservation{forward(model, x).probabilities};
  loss.lambda = lambda;
  return gate_loss(model, x, z, loss);
}

Datapath extract_datapath(const ModelSpec& model, const Tensor& x, const ExtractionParams& params,
                          const std::string& example_ref, const ExtractionObserver& observer) {
  return run_extraction(model, x, {}, params, params.seed, example_ref, observer);
}

Datapath extract_anchored(const ModelSpec& model, const Tensor& x, std::span<const Datapath> anchors,
                          const ExtractionParams& params, const std::string& example_ref) {
  return run_extraction(model, x, anchors, params, params.seed, example_ref);
}

std::vector<Datapath> extract_constrained(const ModelSpec& model, std::span<const Tensor> examples,
                                          const ExtractionParams& params,
                                          std::span<const std::string> example_refs) {
  if (examples.empty()) throw ValidationError("constrained extraction needs at least one example");
  if (!example_refs.empty() && example_refs.size() != examples.size()) {
    throw ValidationError("example_refs must match the example count");
  }
  std::vector<Datapath> chain;
  chain.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const std::string ref = example_refs.empty() ? std::string() : example_refs[i];
    try {
      chain.push_back(run_extraction(model, examples[i], chain, params, params.seed + i, ref));
    } catch (const Error& e) {
      throw ExtractionError("chain aborted at example " + std::to_string(i) + ": " + e.what());
    }
  }
  return chain;
}

std::vector<std::size_t> binarize(const GateVector& gates, double tau) {
  if (!(tau > 0.0 && tau < 1.0)) throw ValidationError("tau must lie in (0,1)");
  std::vector<std::size_t> ids;
  for (std::size_t k = 0; k < gates.size(); ++k) {
    if (gates[k] > tau) ids.push_back(k);
  }
  return ids;
}

std::vector<std::size_t> binarize(const Datapath& dp, double tau) { return binarize(dp.gates, tau); }

double subset_objective(const ModelSpec& model, const Tensor& x, std::span<const std::size_t> subset, double lambda) {
  std::vector<double> z(model.gate_count(), 0.0);
  for (std::size_t id : subset) z.at(id) = 1.0;
  return extraction_loss(model, x, GateVector(std::move(z)), lambda);
}

std::string params_to_json(const ExtractionParams& p) { return params_doc(p).dump(); }

std::string save_datapath(const Datapath& dp) {
  return json{{"model_id", dp.model_ref},
              {"example_id", dp.example_ref},
              {"params", params_doc(dp.params)},
              {"gates", dp.gates.values()},
              {"converged_loss", dp.converged_loss},
              {"label_preserved", dp.label_preserved}}
      .dump();
}

Datapath load_datapath(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const detail::JsonReader r(doc, "");
  Datapath dp;
  dp.model_ref = r.field("model_id").string();
  dp.example_ref = r.field("example_id").string();
  dp.params = read_params(r.field("params"));
  try {
    dp.gates = GateVector(r.field("gates").numbers());
  } catch (const ValidationError& e) {
    r.field("gates").fail(e.what());
  }
  dp.converged_loss = r.field("converged_loss").number();
  dp.label_preserved = r.field("label_preserved").boolean();
  return dp;
}

}  // namespace aevis
