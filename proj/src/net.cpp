#include "aevis/net.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "aevis/error.hpp"

namespace aevis {

GateVector::GateVector(std::vector<double> values) : values_(std::move(values)) {
  for (std::size_t i = 0; i < values_.size(); ++i) {
    if (!(values_[i] >= 0.0 && values_[i] <= 1.0)) {
      throw ValidationError("gate " + std::to_string(i) + " = " + std::to_string(values_[i]) +
                            " is outside [0,1]");
    }
  }
}

GateVector GateVector::clamped(std::vector<double> values) {
  for (double& v : values) {
    if (std::isnan(v)) throw NumericError("gate value is NaN");
    v = std::clamp(v, 0.0, 1.0);
  }
  return GateVector(std::move(values));
}

double GateVector::sum() const noexcept {
  double s = 0.0;
  for (double v : values_) s += v;
  return s;
}

std::vector<double> softmax(std::span<const double> logits) {
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<double> p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp(logits[i] - top);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

std::size_t argmax(std::span<const double> values) {
  return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

namespace {

struct Tape {
  std::vector<Tensor> outputs;                    // post-gate output per layer
  std::vector<Tensor> pregate;                    // pre-gate output at gate points
  std::vector<std::vector<std::size_t>> argmax;  // maxpool routing
};

void check_inputs(const ModelSpec& model, const Tensor& input, const GateVector& gates) {
  if (input.shape() != model.input_shape()) {
    throw DimensionError("input shape " + shape_to_string(input.shape()) + " does not match model input " +
                         shape_to_string(model.input_shape()));
  }
  if (gates.size() != model.gate_count()) {
    throw DimensionError("gate vector has " + std::to_string(gates.size()) + " entries, model has " +
                         std::to_string(model.gate_count()) + " feature maps");
  }
}

Tensor conv_forward(const Conv2d& c, const Tensor& in, const Shape& out_shape) {
  Tensor out(out_shape);
  const std::size_t ih = in.dim(1), iw = in.dim(2);
  const std::size_t oh = out_shape[1], ow = out_shape[2];
  const auto pad = static_cast<long>(c.padding);
  for (std::size_t co = 0; co < c.out_channels; ++co) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = c.bias[co];
        for (std::size_t ci = 0; ci < c.in_channels; ++ci) {
          const double* w = &c.weights[((co * c.in_channels + ci) * c.kernel_h) * c.kernel_w];
          for (std::size_t ky = 0; ky < c.kernel_h; ++ky) {
            const long iy = static_cast<long>(oy * c.stride + ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(ih)) continue;
            for (std::size_t kx = 0; kx < c.kernel_w; ++kx) {
              const long ix = static_cast<long>(ox * c.stride + kx) - pad;
              if (ix < 0 || ix >= static_cast<long>(iw)) continue;
              acc += w[ky * c.kernel_w + kx] * in.at(ci, static_cast<std::size_t>(iy), static_cast<std::size_t>(ix));
            }
          }
        }
        out.at(co, oy, ox) = acc;
      }
    }
  }
  return out;
}

Tape run_forward(const ModelSpec& model, const Tensor& input, const GateVector& gates) {
  check_inputs(model, input, gates);
  const auto& layers = model.layers();
  Tape tape;
  tape.outputs.resize(layers.size());
  tape.pregate.resize(layers.size());
  tape.argmax.resize(layers.size());
  for (std::size_t k = 0; k < layers.size(); ++k) {
    const Tensor& in = k == 0 ? input : tape.outputs[k - 1];
    const Shape& out_shape = model.output_shape(k);
    Tensor out;
    const LayerSpec& layer = layers[k];
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
      out = conv_forward(*c, in, out_shape);
    } else if (std::holds_alternative<Relu>(layer)) {
      out = in;
      for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
    } else if (const auto* p = std::get_if<MaxPool>(&layer)) {
      out = Tensor(out_shape);
      auto& routes = tape.argmax[k];
      routes.resize(out.size());
      const std::size_t ih = in.dim(1), iw = in.dim(2);
      std::size_t o = 0;
      for (std::size_t ch = 0; ch < out_shape[0]; ++ch) {
        for (std::size_t oy = 0; oy < out_shape[1]; ++oy) {
          for (std::size_t ox = 0; ox < out_shape[2]; ++ox, ++o) {
            double best = -std::numeric_limits<double>::infinity();
            std::size_t best_at = 0;
            for (std::size_t wy = 0; wy < p->window; ++wy) {
              for (std::size_t wx = 0; wx < p->window; ++wx) {
                const std::size_t at = (ch * ih + oy * p->stride + wy) * iw + ox * p->stride + wx;
                // strict comparison keeps the first index on ties
                if (in[at] > best) {
                  best = in[at];
                  best_at = at;
                }
              }
            }
            out[o] = best;
            routes[o] = best_at;
          }
        }
      }
    } else if (std::holds_alternative<AvgPoolGlobal>(layer)) {
      out = Tensor(out_shape);
      const std::size_t area = in.dim(1) * in.dim(2);
      for (std::size_t ch = 0; ch < out_shape[0]; ++ch) {
        double s = 0.0;
        for (std::size_t i = 0; i < area; ++i) s += in[ch * area + i];
        out[ch] = s / static_cast<double>(area);
      }
    } else if (const auto* f = std::get_if<FullyConnected>(&layer)) {
      out = Tensor(out_shape);
      for (std::size_t o = 0; o < f->out_features; ++o) {
        double acc = f->bias[o];
        const double* w = &f->weights[o * f->in_features];
        for (std::size_t i = 0; i < f->in_features; ++i) acc += w[i] * in[i];
        out[o] = acc;
      }
    } else if (const auto* s = std::get_if<AddSkip>(&layer)) {
      out = in;
      const Tensor& other = tape.outputs[s->source];
      for (std::size_t i = 0; i < out.size(); ++i) out[i] += other[i];
    }

    if (auto conv = model.gated_conv_at(k)) {
      tape.pregate[k] = out;
      const std::size_t first = model.first_gate(*conv);
      const std::size_t channels = out_shape[0];
      const std::size_t area = out.size() / channels;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double g = gates[first + ch];
        if (g == 1.0) continue;
        for (std::size_t i = 0; i < area; ++i) out[ch * area + i] *= g;
      }
    }
    if (!out.all_finite()) {
      throw NumericError("non-finite activation at layer " + std::to_string(k));
    }
    tape.outputs[k] = std::move(out);
  }
  return tape;
}

struct BackwardRequest {
  bool input = false;
  bool gates = false;
  bool weights = false;
  // The seed is the gradient with respect to the pre-gate output.
  bool seed_below_gate = false;
};

struct BackwardResult {
  Tensor input;
  std::vector<double> gates;
  WeightGradients weights;
};

/// Propagates `seed` (gradient with respect to the output of `seed_layer`)
/// back to the input.
BackwardResult run_backward(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                            const Tape& tape, std::size_t seed_layer, Tensor seed,
                            const BackwardRequest& request) {
  const auto& layers = model.layers();
  BackwardResult result;
  if (request.gates) result.gates.assign(model.gate_count(), 0.0);
  if (request.weights) {
    result.weights.weights.resize(layers.size());
    result.weights.bias.resize(layers.size());
  }
  if (request.input) result.input = Tensor(input.shape());

  std::vector<Tensor> grads(seed_layer + 1);
  grads[seed_layer] = std::move(seed);

  auto accumulate = [&](std::size_t layer, const Tensor& g) {
    if (grads[layer].size() == 0) {
      grads[layer] = g;
    } else {
      for (std::size_t i = 0; i < g.size(); ++i) grads[layer][i] += g[i];
    }
  };

  for (std::size_t kk = seed_layer + 1; kk-- > 0;) {
    if (grads[kk].size() == 0) continue;
    Tensor g = std::move(grads[kk]);
    const Tensor& in = kk == 0 ? input : tape.outputs[kk - 1];
    const bool need_input_grad = kk > 0 || request.input;

    auto conv = model.gated_conv_at(kk);
    if (kk == seed_layer && request.seed_below_gate) conv.reset();
    if (conv) {
      const Tensor& pre = tape.pregate[kk];
      const std::size_t first = model.first_gate(*conv);
      const std::size_t channels = g.dim(0);
      const std::size_t area = g.size() / channels;
      for (std::size_t ch = 0; ch < channels; ++ch) {
        const double gate = gates[first + ch];
        double dz = 0.0;
        for (std::size_t i = 0; i < area; ++i) {
          dz += g[ch * area + i] * pre[ch * area + i];
          g[ch * area + i] *= gate;
        }
        if (request.gates) result.gates[first + ch] += dz;
      }
    }

    const LayerSpec& layer = layers[kk];
    Tensor din;
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
      const std::size_t ih = in.dim(1), iw = in.dim(2);
      const std::size_t oh = g.dim(1), ow = g.dim(2);
      const auto pad = static_cast<long>(c->padding);
      if (need_input_grad) din = Tensor(in.shape());
      std::vector<double>* dw = nullptr;
      std::vector<double>* db = nullptr;
      if (request.weights) {
        result.weights.weights[kk].assign(c->weights.size(), 0.0);
        result.weights.bias[kk].assign(c->bias.size(), 0.0);
        dw = &result.weights.weights[kk];
        db = &result.weights.bias[kk];
      }
      for (std::size_t co = 0; co < c->out_channels; ++co) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double go = g.at(co, oy, ox);
            if (go == 0.0) continue;
            if (db) (*db)[co] += go;
            for (std::size_t ci = 0; ci < c->in_channels; ++ci) {
              const std::size_t wbase = ((co * c->in_channels + ci) * c->kernel_h) * c->kernel_w;
              for (std::size_t ky = 0; ky < c->kernel_h; ++ky) {
                const long iy = static_cast<long>(oy * c->stride + ky) - pad;
                if (iy < 0 || iy >= static_cast<long>(ih)) continue;
                for (std::size_t kx = 0; kx < c->kernel_w; ++kx) {
                  const long ix = static_cast<long>(ox * c->stride + kx) - pad;
                  if (ix < 0 || ix >= static_cast<long>(iw)) continue;
                  const auto y = static_cast<std::size_t>(iy), x = static_cast<std::size_t>(ix);
                  const std::size_t widx = wbase + ky * c->kernel_w + kx;
                  if (dw) (*dw)[widx] += go * in.at(ci, y, x);
                  if (need_input_grad) din.at(ci, y, x) += go * c->weights[widx];
                }
              }
            }
          }
        }
      }
    } else if (std::holds_alternative<Relu>(layer)) {
      din = std::move(g);
      for (std::size_t i = 0; i < din.size(); ++i) {
        if (!(in[i] > 0.0)) din[i] = 0.0;
      }
    } else if (std::holds_alternative<MaxPool>(layer)) {
      din = Tensor(in.shape());
      const auto& routes = tape.argmax[kk];
      for (std::size_t o = 0; o < g.size(); ++o) din[routes[o]] += g[o];
    } else if (std::holds_alternative<AvgPoolGlobal>(layer)) {
      din = Tensor(in.shape());
      const std::size_t area = in.dim(1) * in.dim(2);
      for (std::size_t ch = 0; ch < g.size(); ++ch) {
        const double v = g[ch] / static_cast<double>(area);
        for (std::size_t i = 0; i < area; ++i) din[ch * area + i] = v;
      }
    } else if (const auto* f = std::get_if<FullyConnected>(&layer)) {
      if (need_input_grad) din = Tensor(in.shape());
      if (request.weights) {
        auto& dw = result.weights.weights[kk];
        auto& db = result.weights.bias[kk];
        dw.assign(f->weights.size(), 0.0);
        db.assign(f->bias.size(), 0.0);
        for (std::size_t o = 0; o < f->out_features; ++o) {
          db[o] = g[o];
          for (std::size_t i = 0; i < f->in_features; ++i) dw[o * f->in_features + i] = g[o] * in[i];
        }
      }
      if (need_input_grad) {
        for (std::size_t o = 0; o < f->out_features; ++o) {
          const double go = g[o];
          if (go == 0.0) continue;
          const double* w = &f->weights[o * f->in_features];
          for (std::size_t i = 0; i < f->in_features; ++i) din[i] += go * w[i];
        }
      }
    } else if (const auto* s = std::get_if<AddSkip>(&layer)) {
      accumulate(s->source, g);
      din = std::move(g);
    }

    if (kk > 0) {
      accumulate(kk - 1, din);
    } else if (request.input) {
      result.input = std::move(din);
    }
  }
  return result;
}

/// d(loss)/d(logits) for loss = ||p - reference||^2 through the softmax.
Tensor probability_seed(const std::vector<double>& p, const std::vector<double>& reference) {
  std::vector<double> dp(p.size());
  double dot = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    dp[i] = 2.0 * (p[i] - reference[i]);
    dot += p[i] * dp[i];
  }
  Tensor seed(Shape{p.size()});
  for (std::size_t i = 0; i < p.size(); ++i) seed[i] = p[i] * (dp[i] - dot);
  return seed;
}

ForwardResult to_result(const ModelSpec& model, const Tape& tape) {
  ForwardResult r;
  r.logits = tape.outputs.back().values();
  r.probabilities = softmax(r.logits);
  r.activations.reserve(model.gate_count());
  for (std::size_t id = 0; id < model.gate_count(); ++id) {
    const auto& ref = model.gate_index()[id];
    const Tensor& out = tape.outputs[model.gate_point(ref.layer)];
    const std::size_t h = out.dim(1), w = out.dim(2);
    const auto begin = out.values().begin() + static_cast<long>(ref.channel * h * w);
    r.activations.emplace_back(Shape{h, w}, std::vector<double>(begin, begin + static_cast<long>(h * w)));
  }
  return r;
}

double gate_terms(const GateVector& gates, const GateLoss& loss, std::vector<double>* gradient) {
  std::vector<std::size_t> all;
  const std::vector<std::size_t>* free = &loss.free_gates;
  if (free->empty()) {
    all.resize(gates.size());
    for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
    free = &all;
  }
  double value = 0.0;
  for (std::size_t i : *free) {
    value += loss.lambda * gates[i];
    if (gradient) (*gradient)[i] += loss.lambda;
  }
  if (loss.gamma != 0.0) {
    for (const GateVector& anchor : loss.anchors) {
      if (anchor.size() != gates.size()) throw DimensionError("coupling anchor length mismatch");
      double sq = 0.0;
      for (std::size_t i : *free) sq += (gates[i] - anchor[i]) * (gates[i] - anchor[i]);
      const double norm = std::sqrt(sq);
      value += loss.gamma * norm;
      if (gradient && norm > 0.0) {
        for (std::size_t i : *free) (*gradient)[i] += loss.gamma * (gates[i] - anchor[i]) / norm;
      }
    }
  }
  return value;
}

void check_activation_term(const ModelSpec& model, const ActivationPreservation& a) {
  const Shape shape = model.feature_map_shape(a.feature_map);
  if (a.reference.shape() != shape) {
    throw DimensionError("activation reference shape " + shape_to_string(a.reference.shape()) +
                         " does not match feature map shape " + shape_to_string(shape));
  }
  if (!a.mask.empty() && a.mask.size() != a.reference.size()) {
    throw DimensionError("activation mask size does not match feature map");
  }
}

GateGradient evaluate(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                      const GateLoss& loss, bool want_gradient) {
  GateGradient out;
  if (want_gradient) out.gradient.assign(model.gate_count(), 0.0);
  if (const auto* pp = std::get_if<ProbabilityPreservation>(&loss.preservation)) {
    if (pp->reference.size() != model.class_count()) {
      throw DimensionError("reference prediction length does not match class_count");
    }
    const Tape tape = run_forward(model, input, gates);
    const auto p = softmax(tape.outputs.back().values());
    for (std::size_t i = 0; i < p.size(); ++i) out.loss += (p[i] - pp->reference[i]) * (p[i] - pp->reference[i]);
    if (want_gradient) {
      auto back = run_backward(model, input, gates, tape, model.layers().size() - 1,
                               probability_seed(p, pp->reference), {.gates = true});
      out.gradient = std::move(back.gates);
    }
  } else if (const auto* ap = std::get_if<ActivationPreservation>(&loss.preservation)) {
    check_activation_term(model, *ap);
    check_inputs(model, input, gates);
    const auto& ref = model.feature_map(ap->feature_map);
    const std::size_t layer = model.gate_point(ref.layer);
    const Tape tape = run_forward(model, input, gates);
    const Tensor& out_layer = tape.outputs[layer];
    const Tensor& pre = tape.pregate[layer];
    const std::size_t area = ap->reference.size();
    // The target map is read before its own gate, i.e. with its gate held at 1.
    Tensor seed(out_layer.shape());
    for (std::size_t i = 0; i < area; ++i) {
      if (!ap->mask.empty() && !ap->mask[i]) continue;
      const double diff = pre[ref.channel * area + i] - ap->reference[i];
      out.loss += diff * diff;
      seed[ref.channel * area + i] = 2.0 * diff;
    }
    if (want_gradient) {
      auto back = run_backward(model, input, gates, tape, layer, std::move(seed),
                               {.gates = true, .seed_below_gate = true});
      out.gradient = std::move(back.gates);
    }
  } else {
    check_inputs(model, input, gates);
  }
  out.loss += gate_terms(gates, loss, want_gradient ? &out.gradient : nullptr);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite loss");
  return out;
}

}  // namespace

ForwardResult forward(const ModelSpec& model, const Tensor& input, const GateVector& gates) {
  return to_result(model, run_forward(model, input, gates));
}

ForwardResult forward(const ModelSpec& model, const Tensor& input) {
  return forward(model, input, GateVector::ones(model.gate_count()));
}

GateGradient gate_gradients(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                            const GateLoss& loss) {
  return evaluate(model, input, gates, loss, true);
}

double gate_loss(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                 const GateLoss& loss) {
  return evaluate(model, input, gates, loss, false).loss;
}

double cross_entropy(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                     std::size_t target_label) {
  if (target_label >= model.class_count()) throw ValidationError("target label out of range");
  const Tape tape = run_forward(model, input, gates);
  const auto& logits = tape.outputs.back().values();
  const double top = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double l : logits) total += std::exp(l - top);
  return -(logits[target_label] - top - std::log(total));
}

Tensor input_gradients(const ModelSpec& model, const Tensor& input, const GateVector& gates,
                       std::size_t target_label) {
  if (target_label >= model.class_count()) throw ValidationError("target label out of range");
  const Tape tape = run_forward(model, input, gates);
  auto p = softmax(tape.outputs.back().values());
  p[target_label] -= 1.0;
  const std::size_t classes = p.size();
  Tensor seed(Shape{classes}, std::move(p));
  auto back = run_backward(model, input, gates, tape, model.layers().size() - 1, std::move(seed),
                           {.input = true});
  return std::move(back.input);
}

TrainingGradient weight_gradients(const ModelSpec& model, const Tensor& input, std::size_t label) {
  if (label >= model.class_count()) throw ValidationError("label out of range");
  const GateVector gates = GateVector::ones(model.gate_count());
  const Tape tape = run_forward(model, input, gates);
  auto p = softmax(tape.outputs.back().values());
  TrainingGradient out;
  out.loss = -std::log(std::max(p[label], std::numeric_limits<double>::min()));
  out.correct = argmax(p) == label;
  p[label] -= 1.0;
  const std::size_t classes = p.size();
  Tensor seed(Shape{classes}, std::move(p));
  auto back = run_backward(model, input, gates, tape, model.layers().size() - 1, std::move(seed),
                           {.weights = true});
  out.gradients = std::move(back.weights);
  return out;
}

}  // namespace aevis
