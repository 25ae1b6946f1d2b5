#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "aevis/attack.hpp"
#include "aevis/datapath.hpp"
#include "aevis/dataset.hpp"
#include "aevis/model.hpp"
#include "aevis/pattern.hpp"

namespace aevis {

/// One misclassified adversarial example with its source image and the
/// candidate target images of the class it was misclassified as.
struct ScoringCase {
  std::string id;
  Tensor adversarial;
  Tensor source;
  std::vector<Tensor> targets;
  std::vector<std::string> target_ids;
  std::size_t source_label = 0;
  std::size_t predicted_label = 0;
};

struct ScoringMethod {
  std::string name;
  ExtractionParams params;
};

/// Each target j is extracted as the last link of the chain
/// [adversarial, source, target_j], i.e. extract_constrained on those three
/// images, so targets never see each other. A target is flagged when
/// diff_series(adversarial, source, target_j) carries the pattern with window
/// `window`; similarity is datapath_similarity to the adversarial datapath.
TopKCase score_case(const ModelSpec& model, const ScoringCase& scoring_case, const ExtractionParams& params,
                    std::size_t window = kDefaultPatternWindow);

/// Scores every case under every method; columns group cases by predicted
/// label ("class N"). `jobs` > 1 spreads cases over threads without changing
/// the result.
ScoreTable score_cases(const ModelSpec& model, std::span<const ScoringCase> cases,
                       std::span<const ScoringMethod> methods, std::span<const std::size_t> ks,
                       std::size_t window = kDefaultPatternWindow, std::size_t jobs = 1);

/// The default comparison: constrained (gamma 1) against independent
/// (gamma 0) extraction, otherwise default parameters.
std::vector<ScoringMethod> default_scoring_methods();

/// Reads a triplet manifest, resolving relative image paths against
/// `base_dir`. The first target's label sets predicted_label when the
/// manifest entry does not.
std::vector<ScoringCase> load_scoring_cases(const std::vector<TripletEntry>& entries, const std::string& base_dir);

struct PipelineOptions {
  AttackParams attack;
  std::size_t targets_per_case = 5;
  /// 0 keeps every flipped example.
  std::size_t max_cases = 0;
  std::uint64_t seed = 0;
  std::size_t window = kDefaultPatternWindow;
  std::vector<std::size_t> ks{1, 3, 5};
  std::vector<ScoringMethod> methods = default_scoring_methods();
  std::size_t jobs = 1;
};

struct PipelineReport {
  ScoreTable table;
  std::size_t attacked = 0;  // correctly classified test examples
  std::size_t flipped = 0;
  std::vector<ScoringCase> cases;
};

/// Attacks every correctly classified test example. Each one whose label
/// flips becomes a case; its targets are `targets_per_case` test images
/// correctly classified as the adversarial label, drawn without replacement
/// from a generator seeded with seed + case index. Flipped examples whose
/// class has too few such images are skipped.
std::vector<ScoringCase> build_scoring_cases(const ModelSpec& model, const Dataset& test, const PipelineOptions& options,
                                             std::size_t* attacked = nullptr, std::size_t* flipped = nullptr);

/// build_scoring_cases followed by score_cases.
PipelineReport run_topk_pipeline(const ModelSpec& model, const Dataset& test, const PipelineOptions& options);

}  // namespace aevis
