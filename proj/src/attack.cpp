#include "aevis/attack.hpp"

#include <algorithm>
#include <cmath>

#include "aevis/error.hpp"
#include "aevis/net.hpp"

namespace aevis {
namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_within(const Tensor& x, PixelBounds b) {
  if (!(b.low < b.high)) throw ValidationError("pixel bounds require low < high");
  for (double v : x.data()) {
    if (v < b.low || v > b.high) throw ValidationError("input lies outside the pixel bounds");
  }
}

}  // namespace

void AttackParams::validate() const {
  if (!(epsilon >= 0.0)) throw ValidationError("epsilon must be >= 0");
  if (!(alpha > 0.0)) throw ValidationError("alpha must be > 0");
  if (steps < 1) throw ValidationError("steps must be >= 1");
  if (!(bounds.low < bounds.high)) throw ValidationError("pixel bounds require low < high");
}

Tensor fgsm(const ModelSpec& model, const Tensor& x, std::size_t true_label, double epsilon, PixelBounds bounds) {
  if (!(epsilon >= 0.0)) throw ValidationError("epsilon must be >= 0");
  check_within(x, bounds);
  const Tensor grad = input_gradients(model, x, GateVector::ones(model.gate_count()), true_label);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::clamp(x[i] + epsilon * sign(grad[i]), bounds.low, bounds.high);
  }
  return out;
}

Tensor mi_fgsm(const ModelSpec& model, const Tensor& x, std::size_t true_label, const AttackParams& params,
               const std::function<void(const Tensor&)>& observer) {
  params.validate();
  check_within(x, params.bounds);
  const GateVector gates = GateVector::ones(model.gate_count());
  std::vector<double> momentum(x.size(), 0.0);
  Tensor current = x;
  for (std::size_t step = 0; step < params.steps; ++step) {
    const Tensor grad = input_gradients(model, current, gates, true_label);
    double l1 = 0.0;
    for (double g : grad.data()) l1 += std::abs(g);
    for (std::size_t i = 0; i < momentum.size(); ++i) {
      momentum[i] = params.mu * momentum[i] + (l1 > 0.0 ? grad[i] / l1 : 0.0);
    }
    for (std::size_t i = 0; i < current.size(); ++i) {
      const double lo = std::max(params.bounds.low, x[i] - params.epsilon);
      const double hi = std::min(params.bounds.high, x[i] + params.epsilon);
      current[i] = std::clamp(current[i] + params.alpha * sign(momentum[i]), lo, hi);
    }
    if (observer) observer(current);
  }
  return current;
}

}  // namespace aevis
