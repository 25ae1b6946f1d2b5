#include "aevis/pattern.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "aevis/detail/json_reader.hpp"
#include "aevis/error.hpp"

namespace aevis {
namespace {

using nlohmann::json;

void check_pair(const ModelSpec& model, const Datapath& a, const Datapath& b) {
  if (a.model_ref != b.model_ref) {
    throw ValidationError("datapaths belong to different models (" + a.model_ref + ", " + b.model_ref + ")");
  }
  if (a.gates.size() != model.gate_count() || b.gates.size() != model.gate_count()) {
    throw ValidationError("datapath length does not match the model");
  }
}

double slice_distance(const ModelSpec& model, const Datapath& a, const Datapath& b, std::size_t layer) {
  double s = 0.0;
  for (std::size_t id : model.layer_feature_maps(layer)) s += (a.gates[id] - b.gates[id]) * (a.gates[id] - b.gates[id]);
  return std::sqrt(s);
}

}  // namespace

double layer_distance(const ModelSpec& model, const Datapath& a, const Datapath& b, std::size_t layer) {
  check_pair(model, a, b);
  if (layer >= model.layers().size()) throw ValidationError("layer " + std::to_string(layer) + " out of range");
  if (model.layer_feature_maps(layer).empty()) {
    throw ValidationError("layer " + std::to_string(layer) + " has no gated feature maps");
  }
  return slice_distance(model, a, b, layer);
}

DiffSeries diff_series(const ModelSpec& model, const Datapath& adv, const Datapath& src, const Datapath& tar) {
  check_pair(model, adv, src);
  check_pair(model, adv, tar);
  DiffSeries s;
  for (std::size_t layer : model.gated_layers()) {
    s.layers.push_back(layer);
    s.values.push_back(slice_distance(model, adv, src, layer) - slice_distance(model, adv, tar, layer));
  }
  return s;
}

PatternReport detect_pattern(std::span<const double> values, std::size_t r) {
  if (r < 1) throw ValidationError("r must be >= 1");
  const std::size_t m = values.size();
  if (m < r + 1) {
    throw ValidationError("diff series has " + std::to_string(m) + " entries, needs at least r+1 = " +
                          std::to_string(r + 1));
  }
  PatternReport report;
  report.window = r;
  report.series.values.assign(values.begin(), values.end());
  for (std::size_t i = m - r; i < m; ++i) {
    if (values[i] > values[i - 1]) ++report.increases;
  }
  report.max_layer = static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
  report.detected = report.increases == r && report.max_layer == m - 1;
  return report;
}

PatternReport detect_pattern(const DiffSeries& series, std::size_t r) {
  auto report = detect_pattern(std::span<const double>(series.values), r);
  report.series = series;
  return report;
}

double datapath_similarity(const Datapath& a, const Datapath& b) {
  if (a.model_ref != b.model_ref) throw ValidationError("datapaths belong to different models");
  if (a.gates.size() != b.gates.size()) throw ValidationError("datapath lengths differ");
  double s = 0.0;
  for (std::size_t i = 0; i < a.gates.size(); ++i) s += (a.gates[i] - b.gates[i]) * (a.gates[i] - b.gates[i]);
  if (s == 0.0) return std::numeric_limits<double>::infinity();
  return 1.0 / std::sqrt(s);
}

double topk_score(std::span<const TopKCase> cases, std::size_t k) {
  if (k < 1) throw ValidationError("k must be >= 1");
  if (cases.empty()) throw ValidationError("no cases to score");
  double total = 0.0;
  for (const auto& c : cases) {
    if (c.targets.size() < k) {
      throw ValidationError("case " + c.adversarial_id + " has " + std::to_string(c.targets.size()) +
                            " targets, fewer than k = " + std::to_string(k));
    }
    std::vector<RankedTarget> ranked = c.targets;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const RankedTarget& a, const RankedTarget& b) { return a.similarity > b.similarity; });
    for (std::size_t i = 0; i < k; ++i) total += ranked[i].pattern ? 1.0 : 0.0;
  }
  return total / static_cast<double>(cases.size());
}

std::size_t SetRelation::set_size(std::size_t set) const {
  std::size_t n = 0;
  for (const auto& r : regions) {
    if (r.signature & (1U << set)) n += r.members.size();
  }
  return n;
}

SetRelation set_relations(std::span<const LabeledSet> sets) {
  if (sets.empty()) throw ValidationError("set relation needs at least one set");
  if (sets.size() > 3) {
    throw ValidationError("unsupported cardinality: " + std::to_string(sets.size()) + " sets (at most 3)");
  }
  SetRelation rel;
  std::vector<std::size_t> all;
  for (const auto& s : sets) {
    rel.set_ids.push_back(s.id);
    all.insert(all.end(), s.members.begin(), s.members.end());
  }
  std::sort(all.begin(), all.end());
  all.erase(std::unique(all.begin(), all.end()), all.end());
  std::vector<std::vector<std::size_t>> by_signature(std::size_t{1} << sets.size());
  for (std::size_t id : all) {
    std::uint32_t sig = 0;
    for (std::size_t i = 0; i < sets.size(); ++i) {
      if (std::find(sets[i].members.begin(), sets[i].members.end(), id) != sets[i].members.end()) sig |= 1U << i;
    }
    by_signature[sig].push_back(id);
  }
  for (std::uint32_t sig = 1; sig < by_signature.size(); ++sig) {
    if (!by_signature[sig].empty()) rel.regions.push_back({sig, std::move(by_signature[sig])});
  }
  return rel;
}

std::vector<std::size_t> group_feature_maps(const ModelSpec& model, std::size_t group) {
  if (group >= model.layer_groups().size()) {
    throw LookupError("layer group " + std::to_string(group) + " out of range");
  }
  const auto& g = model.layer_groups()[group];
  std::vector<std::size_t> fms;
  for (std::size_t l = g.first_layer; l <= g.last_layer; ++l) {
    for (std::size_t fm : model.layer_feature_maps(l)) fms.push_back(fm);
  }
  return fms;
}

GroupDistances group_distances(const ModelSpec& model, const Datapath& adv, const Datapath& src, const Datapath& tar) {
  check_pair(model, adv, src);
  check_pair(model, adv, tar);
  auto dist = [](const Datapath& a, const Datapath& b, const std::vector<std::size_t>& fms) {
    double s = 0.0;
    for (std::size_t id : fms) s += (a.gates[id] - b.gates[id]) * (a.gates[id] - b.gates[id]);
    return std::sqrt(s);
  };
  GroupDistances d;
  for (std::size_t g = 0; g < model.layer_groups().size(); ++g) {
    const auto fms = group_feature_maps(model, g);
    if (fms.empty()) continue;
    d.groups.push_back(g);
    d.names.push_back(model.layer_groups()[g].name);
    d.source_target.push_back(dist(src, tar, fms));
    d.adversarial_source.push_back(dist(adv, src, fms));
    d.adversarial_target.push_back(dist(adv, tar, fms));
  }
  return d;
}

std::vector<LabeledSet> group_sets(const ModelSpec& model, std::span<const Datapath> datapaths,
                                   std::span<const std::string> ids, std::size_t group) {
  if (ids.size() != datapaths.size()) throw ValidationError("one id per datapath required");
  const auto fms = group_feature_maps(model, group);
  std::vector<LabeledSet> sets;
  for (std::size_t i = 0; i < datapaths.size(); ++i) {
    if (datapaths[i].gates.size() != model.gate_count()) {
      throw ValidationError("datapath " + ids[i] + " does not match the model");
    }
    LabeledSet set{ids[i], {}};
    for (std::size_t fm : binarize(datapaths[i], datapaths[i].params.binarize_tau)) {
      if (std::binary_search(fms.begin(), fms.end(), fm)) set.members.push_back(fm);
    }
    sets.push_back(std::move(set));
  }
  return sets;
}

double activation_stats(const ForwardResult& cache, std::size_t feature_map) {
  if (feature_map >= cache.activations.size()) {
    throw LookupError("feature map " + std::to_string(feature_map) + " not in activation cache");
  }
  const auto data = cache.activations[feature_map].data();
  if (data.empty()) return 0.0;
  return *std::max_element(data.begin(), data.end());
}

std::string save_pattern_report(const PatternReport& report) {
  return json{{"layers", report.series.layers},
              {"diff", report.series.values},
              {"n_l", report.increases},
              {"r", report.window},
              {"detected", report.detected},
              {"max_layer", report.max_layer}}
      .dump();
}

ScoreTable build_score_table(std::span<const std::size_t> ks, std::span<const MethodCases> methods,
                             std::span<const std::string> case_groups) {
  if (methods.empty()) throw ValidationError("score table needs at least one method");
  ScoreTable table;
  table.ks.assign(ks.begin(), ks.end());
  table.columns.assign(case_groups.begin(), case_groups.end());
  std::sort(table.columns.begin(), table.columns.end());
  table.columns.erase(std::unique(table.columns.begin(), table.columns.end()), table.columns.end());
  const std::size_t groups = table.columns.size();
  table.columns.push_back("average");
  table.case_count = case_groups.size();
  for (const auto& m : methods) {
    if (m.cases.size() != case_groups.size()) {
      throw ValidationError("method " + m.method + " scores " + std::to_string(m.cases.size()) + " cases, expected " +
                            std::to_string(case_groups.size()));
    }
    table.methods.push_back(m.method);
  }
  for (std::size_t k : ks) {
    std::vector<std::vector<double>> rows;
    for (const auto& m : methods) {
      std::vector<double> row;
      for (std::size_t g = 0; g < groups; ++g) {
        std::vector<TopKCase> subset;
        for (std::size_t i = 0; i < m.cases.size(); ++i) {
          if (case_groups[i] == table.columns[g]) subset.push_back(m.cases[i]);
        }
        row.push_back(topk_score(subset, k));
      }
      row.push_back(topk_score(m.cases, k));
      rows.push_back(std::move(row));
    }
    table.scores.push_back(std::move(rows));
  }
  return table;
}

std::string format_score_table(const ScoreTable& table) {
  std::ostringstream out;
  char buf[64];
  std::size_t method_width = 6;
  for (const auto& m : table.methods) method_width = std::max(method_width, m.size());
  std::snprintf(buf, sizeof buf, "%-8s%-*s", "", static_cast<int>(method_width), "method");
  out << buf;
  for (const auto& c : table.columns) {
    std::snprintf(buf, sizeof buf, " %9s", c.c_str());
    out << buf;
  }
  out << '\n';
  for (std::size_t k = 0; k < table.ks.size(); ++k) {
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
      const std::string label = m == 0 ? "top-" + std::to_string(table.ks[k]) : "";
      std::snprintf(buf, sizeof buf, "%-8s%-*s", label.c_str(), static_cast<int>(method_width),
                    table.methods[m].c_str());
      out << buf;
      for (double v : table.scores[k][m]) {
        std::snprintf(buf, sizeof buf, " %9.3f", v);
        out << buf;
      }
      out << '\n';
    }
  }
  out << "cases: " << table.case_count << '\n';
  return out.str();
}

std::string save_score_table(const ScoreTable& table) {
  json rows = json::array();
  for (std::size_t k = 0; k < table.ks.size(); ++k) {
    for (std::size_t m = 0; m < table.methods.size(); ++m) {
      rows.push_back({{"k", table.ks[k]}, {"method", table.methods[m]}, {"scores", table.scores[k][m]}});
    }
  }
  return json{{"ks", table.ks}, {"columns", table.columns}, {"rows", std::move(rows)}, {"cases", table.case_count}}
      .dump();
}

std::string save_topk_cases(std::span<const TopKCase> cases) {
  json out = json::array();
  for (const auto& c : cases) {
    json targets = json::array();
    for (const auto& t : c.targets) {
      targets.push_back({{"id", t.id},
                         {"similarity", std::isfinite(t.similarity) ? json(t.similarity) : json(nullptr)},
                         {"pattern", t.pattern}});
    }
    out.push_back({{"adversarial_id", c.adversarial_id}, {"targets", std::move(targets)}});
  }
  return json{{"cases", std::move(out)}}.dump();
}

std::vector<TopKCase> load_topk_cases(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const detail::JsonReader cases = detail::JsonReader(doc, "").field("cases");
  std::vector<TopKCase> out(cases.array_size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const auto c = cases.element(i);
    out[i].adversarial_id = c.field("adversarial_id").string();
    const auto targets = c.field("targets");
    for (std::size_t j = 0; j < targets.array_size(); ++j) {
      const auto t = targets.element(j);
      const auto sim = t.field("similarity");
      out[i].targets.push_back({t.field("id").string(),
                                sim.node().is_null() ? std::numeric_limits<double>::infinity() : sim.number(),
                                t.field("pattern").boolean()});
    }
  }
  return out;
}

std::string save_labeled_sets(std::span<const LabeledSet> sets) {
  json out = json::array();
  for (const auto& s : sets) out.push_back({{"id", s.id}, {"members", s.members}});
  return json{{"sets", std::move(out)}}.dump();
}

std::vector<LabeledSet> load_labeled_sets(const std::string& bytes) {
  const json doc = detail::parse_document(bytes);
  const detail::JsonReader sets = detail::JsonReader(doc, "").field("sets");
  std::vector<LabeledSet> out(sets.array_size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].id = sets.element(i).field("id").string();
    out[i].members = sets.element(i).field("members").indices();
  }
  return out;
}

}  // namespace aevis
