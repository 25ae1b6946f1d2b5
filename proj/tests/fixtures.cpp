#include "fixtures.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace aevis::testing {
namespace {

std::vector<double> normal_values(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

Conv2d random_conv(std::size_t in, std::size_t out, std::size_t k, std::size_t pad, std::mt19937_64& rng) {
  Conv2d c;
  c.in_channels = in;
  c.out_channels = out;
  c.kernel_h = c.kernel_w = k;
  c.padding = pad;
  c.weights = normal_values(out * in * k * k, std::sqrt(2.0 / static_cast<double>(in * k * k)), rng);
  c.bias = normal_values(out, 0.1, rng);
  return c;
}

FullyConnected random_fc(std::size_t in, std::size_t out, std::mt19937_64& rng) {
  FullyConnected f;
  f.in_features = in;
  f.out_features = out;
  f.weights = normal_values(in * out, std::sqrt(2.0 / static_cast<double>(in)), rng);
  f.bias = normal_values(out, 0.1, rng);
  return f;
}

}  // namespace

ModelSpec minimal_model(std::size_t channels, std::size_t classes, bool zero_fc_bias, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<LayerSpec> layers;
  layers.push_back(random_conv(1, channels, 3, 1, rng));
  layers.push_back(Relu{});
  layers.push_back(AvgPoolGlobal{});
  auto fc = random_fc(channels, classes, rng);
  if (zero_fc_bias) std::fill(fc.bias.begin(), fc.bias.end(), 0.0);
  layers.push_back(fc);
  return ModelSpec::build({1, 4, 4}, classes, std::move(layers), {{"features", 0, 1}, {"head", 2, 3}});
}

ModelSpec identity_model(std::size_t channels) {
  Conv2d c;
  c.in_channels = c.out_channels = channels;
  c.weights.assign(channels * channels, 0.0);
  for (std::size_t i = 0; i < channels; ++i) c.weights[i * channels + i] = 1.0;
  c.bias.assign(channels, 0.0);
  FullyConnected f;
  f.in_features = channels;
  f.out_features = 2;
  f.weights.assign(2 * channels, 0.5);
  f.bias.assign(2, 0.0);
  return ModelSpec::build({channels, 3, 3}, 2, {c, Relu{}, AvgPoolGlobal{}, f}, {});
}

ModelSpec random_model(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
  };
  const std::size_t in_c = pick(1, 2);
  const std::size_t side = pick(5, 6);
  const std::size_t classes = pick(2, 4);
  const std::size_t convs = pick(1, 3);
  std::size_t budget = 8;
  std::vector<LayerSpec> layers;
  Shape shape{in_c, side, side};
  for (std::size_t i = 0; i < convs; ++i) {
    const std::size_t remaining = convs - i - 1;
    const std::size_t out_c = std::min<std::size_t>(pick(1, 3), budget - remaining);
    budget -= out_c;
    const std::size_t k = pick(0, 1) ? 3 : 1;
    layers.push_back(random_conv(shape[0], out_c, k, k / 2, rng));
    shape[0] = out_c;
    layers.push_back(Relu{});
    if (i == 0 && pick(0, 2) == 0) {
      layers.push_back(MaxPool{2, 2});
      shape = {shape[0], (shape[1] - 2) / 2 + 1, (shape[2] - 2) / 2 + 1};
    }
    if (i > 0 && pick(0, 1) == 0) {
      // residual connection when the previous conv block kept the shape
      for (std::size_t src = layers.size() - 2; src-- > 0;) {
        if (std::holds_alternative<Relu>(layers[src])) {
          auto probe = layers;
          probe.push_back(AddSkip{src});
          probe.push_back(AvgPoolGlobal{});
          probe.push_back(random_fc(shape[0], classes, rng));
          try {
            ModelSpec::build({in_c, side, side}, classes, probe, {});
            layers.push_back(AddSkip{src});
          } catch (...) {
          }
          break;
        }
      }
    }
  }
  if (pick(0, 1) == 0) {
    layers.push_back(AvgPoolGlobal{});
    layers.push_back(random_fc(shape[0], classes, rng));
  } else {
    layers.push_back(random_fc(shape_size(shape), classes, rng));
  }
  return ModelSpec::build({in_c, side, side}, classes, std::move(layers), {});
}

Fixture singleton_fixture() {
  std::mt19937_64 rng(11);
  Conv2d conv = random_conv(1, 3, 3, 1, rng);
  std::fill(conv.weights.begin(), conv.weights.begin() + 9, 0.2);
  conv.bias = {0.0, 0.1, 0.1};
  Tensor x = random_input({1, 4, 4}, 12, 0.2, 1.0);

  FullyConnected fc;
  fc.in_features = 3;
  fc.out_features = 2;
  fc.weights.assign(6, 0.0);
  fc.bias.assign(2, 0.0);
  auto probe = ModelSpec::build({1, 4, 4}, 2, {conv, Relu{}, AvgPoolGlobal{}, fc}, {});
  double mean = 0.0;
  const auto probe_acts = forward(probe, x).activations;
  for (double v : probe_acts[0].data()) mean += v;
  mean /= 16.0;
  fc.weights[0] = 1.0 / mean;
  fc.weights[3] = -1.0 / mean;
  return {ModelSpec::build({1, 4, 4}, 2, {conv, Relu{}, AvgPoolGlobal{}, fc}, {}), x};
}

Fixture redundant_fixture(std::size_t copies) {
  std::mt19937_64 rng(21);
  const std::size_t n = copies + 1;
  Conv2d conv = random_conv(1, n, 3, 1, rng);
  for (std::size_t c = 0; c < copies; ++c) {
    for (std::size_t k = 0; k < 9; ++k) conv.weights[c * 9 + k] = 0.15 + 0.01 * static_cast<double>(k);
    conv.bias[c] = 0.0;
  }
  Tensor x = random_input({1, 4, 4}, 22, 0.2, 1.0);

  FullyConnected fc;
  fc.in_features = n;
  fc.out_features = 2;
  fc.weights.assign(2 * n, 0.0);
  fc.bias.assign(2, 0.0);
  auto probe = ModelSpec::build({1, 4, 4}, 2, {conv, Relu{}, AvgPoolGlobal{}, fc}, {});
  double mean = 0.0;
  const auto probe_acts = forward(probe, x).activations;
  for (double v : probe_acts[0].data()) mean += v;
  mean /= 16.0;
  // logit margin 2 from any single copy
  for (std::size_t c = 0; c < copies; ++c) {
    fc.weights[c] = 1.0 / mean;
    fc.weights[n + c] = -1.0 / mean;
  }
  return {ModelSpec::build({1, 4, 4}, 2, {conv, Relu{}, AvgPoolGlobal{}, fc}, {}), x};
}

Fixture planted_fixture(std::uint64_t seed) {
  constexpr std::size_t kLayers = 3;
  constexpr std::size_t kWidth = 4;
  constexpr std::size_t kClasses = 3;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<LayerSpec> layers;
  std::size_t in = 1;
  for (std::size_t l = 0; l < kLayers; ++l) {
    Conv2d c;
    c.in_channels = in;
    c.out_channels = kWidth;
    c.kernel_h = c.kernel_w = 3;
    c.padding = 1;
    std::normal_distribution<double> w(0.0, std::sqrt(2.0 / static_cast<double>(in * 9)));
    for (std::size_t i = 0; i < kWidth * in * 9; ++i) c.weights.push_back(w(rng));
    for (std::size_t i = 0; i < kWidth; ++i) c.bias.push_back(0.1 * unit(rng));
    layers.push_back(c);
    layers.push_back(Relu{});
    in = kWidth;
  }
  layers.push_back(AvgPoolGlobal{});
  FullyConnected fc;
  fc.in_features = kWidth;
  fc.out_features = kClasses;
  fc.weights.assign(kClasses * kWidth, 0.0);
  fc.bias.assign(kClasses, 0.0);
  layers.push_back(fc);
  Tensor x({1, 6, 6});
  for (double& v : x.data()) v = unit(rng);

  const Shape input{1, 6, 6};
  auto probe = ModelSpec::build(input, kClasses, layers, {});
  const auto acts = forward(probe, x).activations;
  const std::size_t first = probe.first_gate(probe.gated_layers().back());
  std::vector<double> mean(kWidth);
  std::vector<std::size_t> alive;
  for (std::size_t i = 0; i < kWidth; ++i) {
    for (double v : acts[first + i].data()) mean[i] += v;
    mean[i] /= static_cast<double>(acts[first + i].size());
    if (mean[i] > 0.02) alive.push_back(i);
  }
  const std::size_t k = std::min<std::size_t>(alive.size(), 1 + rng() % 3);
  for (std::size_t j = alive.size(); j > 1; --j) std::swap(alive[j - 1], alive[rng() % j]);
  const std::size_t cls = rng() % kClasses;
  std::normal_distribution<double> small(0.0, 0.3);
  for (double& w : fc.weights) w = small(rng);
  for (std::size_t j = 0; j < k; ++j) {
    fc.weights[cls * kWidth + alive[j]] = 4.0 / (static_cast<double>(k) * mean[alive[j]]);
  }
  layers.back() = fc;
  return {ModelSpec::build(input, kClasses, std::move(layers), {}), x};
}

double subset_cost(const ModelSpec& model, const Tensor& x, const std::vector<std::size_t>& subset, double lambda) {
  const auto p0 = forward(model, x).probabilities;
  std::vector<double> z(model.gate_count(), 0.0);
  for (std::size_t id : subset) z.at(id) = 1.0;
  const auto p = forward(model, x, GateVector(std::move(z))).probabilities;
  double sq = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) sq += (p[i] - p0[i]) * (p[i] - p0[i]);
  return sq + lambda * static_cast<double>(subset.size());
}

SubsetOptimum exhaustive_subset(const ModelSpec& model, const Tensor& x, double lambda) {
  const std::size_t n = model.gate_count();
  if (n > 20) throw std::invalid_argument("exhaustive_subset: too many feature maps");
  SubsetOptimum best;
  best.cost = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 0; mask < (std::uint64_t{1} << n); ++mask) {
    std::vector<std::size_t> ids;
    for (std::size_t k = 0; k < n; ++k) {
      if ((mask >> k) & 1U) ids.push_back(k);
    }
    const double cost = subset_cost(model, x, ids, lambda);
    if (cost < best.cost) best = {cost, std::move(ids)};
  }
  return best;
}

std::vector<double> pattern_series(SeriesFamily family, std::uint64_t seed, std::size_t length, std::size_t r) {
  if (length < r + 1) throw std::invalid_argument("pattern_series: length < r + 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> s(length);
  const std::size_t tail = length - r - 1;  // first index of the increasing run
  for (std::size_t i = 0; i < tail; ++i) s[i] = -1.0 + 2.0 * unit(rng);
  double v = -1.5 + unit(rng);
  for (std::size_t i = tail; i < length; ++i) {
    s[i] = v;
    v += 0.05 + unit(rng);
  }
  // the run ends above every prefix value
  const double shift = std::max(0.0, 1.5 - s[length - 1]);
  for (std::size_t i = tail; i < length; ++i) s[i] += shift;
  switch (family) {
    case SeriesFamily::detected:
      break;
    case SeriesFamily::plateau: {
      const std::size_t flat = length - r + rng() % r;  // step flat-1 -> flat
      const double delta = s[flat] - s[flat - 1];
      s[flat] = s[flat - 1];
      for (std::size_t i = flat + 1; i < length; ++i) s[i] -= delta;
      break;
    }
    case SeriesFamily::early_max: {
      if (tail == 0) throw std::invalid_argument("pattern_series: early_max needs length > r + 1");
      s[rng() % tail] = s[length - 1] + (rng() % 2 == 0 ? 0.0 : unit(rng));
      break;
    }
  }
  return s;
}

SetRelation random_relation(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::size_t k = 1 + rng() % 3;
  std::vector<LabeledSet> sets(k);
  for (std::size_t i = 0; i < k; ++i) {
    sets[i].id = "dp" + std::to_string(i);
    const std::size_t density = 2 + rng() % 5;  // out of 8
    for (std::size_t id = 0; id < 16; ++id) {
      if (rng() % 8 < density) sets[i].members.push_back(id);
    }
    if (sets[i].members.empty()) sets[i].members.push_back(rng() % 16);
  }
  return set_relations(sets);
}

double treemap_objective_oracle(const TreemapLayout& layout, const SetRelation& relation) {
  const std::size_t k = relation.set_ids.size();
  double total = 0.0;
  for (const auto& shared : layout.cells) {
    std::vector<std::size_t> members;
    for (std::size_t s = 0; s < k; ++s) {
      if (shared.signature >> s & 1U) members.push_back(s);
    }
    if (members.size() < 2) continue;
    double mx = 0.0, my = 0.0;
    for (std::size_t s : members) {
      double x0 = 1e300, y0 = 1e300, x1 = -1e300, y1 = -1e300;
      for (const auto& c : layout.cells) {
        if (!(c.signature >> s & 1U)) continue;
        x0 = std::min(x0, c.rect.x);
        y0 = std::min(y0, c.rect.y);
        x1 = std::max(x1, c.rect.x + c.rect.w);
        y1 = std::max(y1, c.rect.y + c.rect.h);
      }
      mx += (x0 + x1) / 2.0;
      my += (y0 + y1) / 2.0;
    }
    mx /= static_cast<double>(members.size());
    my /= static_cast<double>(members.size());
    const double cx = shared.rect.x + shared.rect.w / 2.0;
    const double cy = shared.rect.y + shared.rect.h / 2.0;
    total += (cx - mx) * (cx - mx) + (cy - my) * (cy - my);
  }
  return total;
}

namespace {

void permute_children(const SetRelation& relation, const Rect& canvas, TreemapPlan& plan, std::size_t set,
                      std::vector<double>& out) {
  if (set == plan.children.size()) {
    out.push_back(treemap_objective_oracle(treemap_layout(relation, canvas, plan), relation));
    return;
  }
  auto& list = plan.children[set];
  std::sort(list.begin(), list.end());
  do {
    permute_children(relation, canvas, plan, set + 1, out);
  } while (std::next_permutation(list.begin(), list.end()));
}

void assign_parents(const SetRelation& relation, const Rect& canvas, std::vector<std::size_t>& parent,
                    std::size_t region, std::vector<double>& out) {
  if (region == relation.regions.size()) {
    TreemapPlan plan;
    plan.parent = parent;
    plan.children.assign(relation.set_ids.size(), {});
    for (std::size_t r = 0; r < parent.size(); ++r) plan.children[parent[r]].push_back(r);
    for (std::size_t s = 0; s < plan.children.size(); ++s) {
      if (!plan.children[s].empty()) plan.set_order.push_back(s);
    }
    do {
      permute_children(relation, canvas, plan, 0, out);
    } while (std::next_permutation(plan.set_order.begin(), plan.set_order.end()));
    return;
  }
  for (std::size_t s = 0; s < relation.set_ids.size(); ++s) {
    if (!(relation.regions[region].signature >> s & 1U)) continue;
    parent[region] = s;
    assign_parents(relation, canvas, parent, region + 1, out);
  }
}

}  // namespace

std::vector<double> enumerate_treemap_objectives(const SetRelation& relation, const Rect& canvas) {
  std::vector<double> out;
  std::vector<std::size_t> parent(relation.regions.size(), 0);
  assign_parents(relation, canvas, parent, 0, out);
  return out;
}

Tensor random_input(const Shape& shape, std::uint64_t seed, double low, double high) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(low, high);
  Tensor t(shape);
  for (double& v : t.data()) v = dist(rng);
  return t;
}

GateVector random_gates(std::size_t n, std::uint64_t seed, double low, double high) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(low, high);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return GateVector(std::move(v));
}

std::vector<double> central_difference(const std::function<double(const std::vector<double>&)>& f,
                                       const std::vector<double>& at, double h) {
  std::vector<double> grad(at.size());
  std::vector<double> probe = at;
  for (std::size_t i = 0; i < at.size(); ++i) {
    probe[i] = at[i] + h;
    const double up = f(probe);
    probe[i] = at[i] - h;
    const double down = f(probe);
    probe[i] = at[i];
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

double relative_error(double a, double b, double floor) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace aevis::testing
