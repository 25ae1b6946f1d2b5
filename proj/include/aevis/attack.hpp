#pragma once

#include <functional>

#include "aevis/model.hpp"
#include "aevis/tensor.hpp"

namespace aevis {

struct PixelBounds {
  double low = 0.0;
  double high = 1.0;
};

struct AttackParams {
  double epsilon = 0.1;
  double alpha = 0.01;
  double mu = 1.0;
  std::size_t steps = 10;
  PixelBounds bounds;

  /// Throws ValidationError when an invariant does not hold.
  void validate() const;
};

/// Single-step untargeted attack: clip(x + epsilon * sign(dCE/dx)).
Tensor fgsm(const ModelSpec& model, const Tensor& x, std::size_t true_label, double epsilon,
            PixelBounds bounds = {});

/// Momentum iterative attack. Each step accumulates
///   g <- mu * g + grad / ||grad||_1
/// (only mu * g when the gradient vanishes) and moves by alpha * sign(g),
/// projecting onto the epsilon ball around x intersected with the pixel
/// bounds. `observer`, if set, sees every intermediate iterate.
Tensor mi_fgsm(const ModelSpec& model, const Tensor& x, std::size_t true_label, const AttackParams& params,
               const std::function<void(const Tensor&)>& observer = {});

}  // namespace aevis
