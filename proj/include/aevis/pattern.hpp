#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aevis/datapath.hpp"
#include "aevis/model.hpp"
#include "aevis/net.hpp"

namespace aevis {

/// L2 distance between the gate slices of two datapaths over the maps of one
/// gated model layer.
double layer_distance(const ModelSpec& model, const Datapath& a, const Datapath& b, std::size_t layer);

/// diff(i) = ||z_adv(i) - z_src(i)|| - ||z_adv(i) - z_tar(i)|| for every
/// layer that owns gated maps, in layer order.
struct DiffSeries {
  std::vector<std::size_t> layers;
  std::vector<double> values;
};

DiffSeries diff_series(const ModelSpec& model, const Datapath& adv, const Datapath& src, const Datapath& tar);

inline constexpr std::size_t kDefaultPatternWindow = 8;

struct PatternReport {
  DiffSeries series;
  std::size_t increases = 0;  // n_l
  std::size_t window = kDefaultPatternWindow;  // r
  bool detected = false;
  /// 0-based index of the first series entry attaining the maximum.
  std::size_t max_layer = 0;
};

/// Counts strict increases over the last r steps; detected when all r are
/// increases and the last entry strictly exceeds every earlier one.
PatternReport detect_pattern(const DiffSeries& series, std::size_t r = kDefaultPatternWindow);
PatternReport detect_pattern(std::span<const double> values, std::size_t r = kDefaultPatternWindow);

/// 1 / ||z_a - z_b||_2; +infinity for identical gate vectors.
double datapath_similarity(const Datapath& a, const Datapath& b);

struct RankedTarget {
  std::string id;
  double similarity = 0.0;
  bool pattern = false;
};

struct TopKCase {
  std::string adversarial_id;
  std::vector<RankedTarget> targets;
};

/// Mean over cases of the number of pattern-carrying targets among the k
/// most similar ones (ties keep the given order).
double topk_score(std::span<const TopKCase> cases, std::size_t k);

/// {"cases":[{"adversarial_id","targets":[{"id","similarity","pattern"}]}]};
/// an infinite similarity is written as null.
std::string save_topk_cases(std::span<const TopKCase> cases);
std::vector<TopKCase> load_topk_cases(const std::string& bytes);

struct LabeledSet {
  std::string id;
  std::vector<std::size_t> members;
};

/// `signature` bit i is set when the region's maps belong to set i.
struct SetRegion {
  std::uint32_t signature = 0;
  std::vector<std::size_t> members;
};

struct SetRelation {
  std::vector<std::string> set_ids;
  std::vector<SetRegion> regions;  // ascending signature, empty ones omitted

  std::size_t set_size(std::size_t set) const;
};

SetRelation set_relations(std::span<const LabeledSet> sets);

/// {"sets":[{"id","members":[...]}]}
std::string save_labeled_sets(std::span<const LabeledSet> sets);
std::vector<LabeledSet> load_labeled_sets(const std::string& bytes);

/// Gated feature maps owned by the layers of one layer group, ascending.
std::vector<std::size_t> group_feature_maps(const ModelSpec& model, std::size_t group);

/// L2 distances between gate slices per layer group; groups without gated
/// maps are skipped.
struct GroupDistances {
  std::vector<std::size_t> groups;
  std::vector<std::string> names;
  std::vector<double> source_target;
  std::vector<double> adversarial_source;
  std::vector<double> adversarial_target;
};

GroupDistances group_distances(const ModelSpec& model, const Datapath& adv, const Datapath& src, const Datapath& tar);

/// Each datapath binarized at its own binarize_tau and restricted to one
/// layer group, labelled with `ids`.
std::vector<LabeledSet> group_sets(const ModelSpec& model, std::span<const Datapath> datapaths,
                                   std::span<const std::string> ids, std::size_t group);

/// Maximum neuron activation of one feature map.
double activation_stats(const ForwardResult& cache, std::size_t feature_map);
inline double activation_diff(double a, double b) { return a - b; }

std::string save_pattern_report(const PatternReport& report);

/// Top-K report laid out like the paper's evaluation table: one row per
/// (k, method), one column per case group followed by "average" over all
/// cases.
struct ScoreTable {
  std::vector<std::size_t> ks;
  std::vector<std::string> methods;
  std::vector<std::string> columns;
  std::vector<std::vector<std::vector<double>>> scores;  // [k][method][column]
  std::size_t case_count = 0;
};

struct MethodCases {
  std::string method;
  std::vector<TopKCase> cases;
};

/// Every method must score the same cases; `case_groups[i]` names the column
/// of case i. Group columns are sorted by name.
ScoreTable build_score_table(std::span<const std::size_t> ks, std::span<const MethodCases> methods,
                             std::span<const std::string> case_groups);

std::string format_score_table(const ScoreTable& table);
std::string save_score_table(const ScoreTable& table);

}  // namespace aevis
