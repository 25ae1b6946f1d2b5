#include "aevis/evaluation.hpp"

#include <filesystem>

#include <gtest/gtest.h>

#include "aevis/error.hpp"
#include "aevis/net.hpp"
#include "aevis/train.hpp"

namespace aevis {
namespace {

const ToyFixture& toy() {
  static const ToyFixture f = make_toy_fixture();
  return f;
}

ExtractionParams short_run(double gamma) {
  ExtractionParams p;
  p.gamma = gamma;
  p.iterations = 60;
  return p;
}

PipelineOptions small_pipeline() {
  PipelineOptions o;
  o.max_cases = 4;
  o.targets_per_case = 3;
  o.methods = {{"constrained", short_run(1.0)}, {"independent", short_run(0.0)}};
  return o;
}

TEST(Evaluation, CasesAreFlippedAndTargetsMatchTheAdversarialLabel) {
  const auto& f = toy();
  const auto o = small_pipeline();
  std::size_t attacked = 0, flipped = 0;
  const auto cases = build_scoring_cases(f.model, f.test, o, &attacked, &flipped);
  ASSERT_EQ(cases.size(), 4U);
  EXPECT_GE(flipped, cases.size());
  EXPECT_LE(flipped, attacked);
  for (const auto& c : cases) {
    EXPECT_NE(c.predicted_label, c.source_label);
    EXPECT_EQ(argmax(forward(f.model, c.adversarial).probabilities), c.predicted_label);
    EXPECT_EQ(argmax(forward(f.model, c.source).probabilities), c.source_label);
    for (std::size_t i = 0; i < c.source.size(); ++i) {
      EXPECT_LE(std::abs(c.adversarial[i] - c.source[i]), o.attack.epsilon + 1e-12);
    }
    ASSERT_EQ(c.targets.size(), 3U);
    for (std::size_t j = 0; j < c.targets.size(); ++j) {
      EXPECT_EQ(argmax(forward(f.model, c.targets[j]).probabilities), c.predicted_label);
      for (std::size_t k = 0; k < j; ++k) EXPECT_NE(c.target_ids[j], c.target_ids[k]);
    }
  }
}

TEST(Evaluation, ScoreCaseMatchesThreeImageChains) {
  const auto& f = toy();
  const auto cases = build_scoring_cases(f.model, f.test, small_pipeline());
  const auto& c = cases.front();
  const auto params = short_run(1.0);
  const auto scored = score_case(f.model, c, params, 8);
  ASSERT_EQ(scored.targets.size(), c.targets.size());
  for (std::size_t j = 0; j < c.targets.size(); ++j) {
    const std::vector<Tensor> chain_images{c.adversarial, c.source, c.targets[j]};
    const auto chain = extract_constrained(f.model, chain_images, params);
    EXPECT_EQ(scored.targets[j].similarity, datapath_similarity(chain[0], chain[2]));
    EXPECT_EQ(scored.targets[j].pattern, detect_pattern(diff_series(f.model, chain[0], chain[1], chain[2]), 8).detected);
    EXPECT_EQ(scored.targets[j].id, c.target_ids[j]);
  }
}

TEST(Evaluation, ThreadCountDoesNotChangeScores) {
  const auto& f = toy();
  auto o = small_pipeline();
  o.max_cases = 3;
  o.targets_per_case = 5;
  o.jobs = 1;
  const auto a = run_topk_pipeline(f.model, f.test, o);
  o.jobs = 3;
  const auto b = run_topk_pipeline(f.model, f.test, o);
  EXPECT_EQ(a.table.scores, b.table.scores);
  EXPECT_EQ(a.table.columns, b.table.columns);
  EXPECT_EQ(a.table.methods, (std::vector<std::string>{"constrained", "independent"}));
  EXPECT_EQ(a.table.ks, (std::vector<std::size_t>{1, 3, 5}));
  EXPECT_EQ(a.table.columns.back(), "average");
}

TEST(Evaluation, ManifestCasesResolveRelativePaths) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "aevis-eval-manifest";
  fs::create_directories(dir / "img");
  const auto& f = toy();
  save_image_file(f.test.images[0], (dir / "img" / "src.json").string());
  save_image_file(f.test.images[1], (dir / "img" / "adv.json").string());
  save_image_file(f.test.images[2], (dir / "img" / "t0.json").string());
  const std::vector<TripletEntry> entries{{"img/src.json", "img/adv.json", {"img/t0.json"}, 0, 1}};
  const auto cases = load_scoring_cases(entries, dir.string());
  ASSERT_EQ(cases.size(), 1U);
  EXPECT_EQ(cases[0].source, f.test.images[0]);
  EXPECT_EQ(cases[0].adversarial, f.test.images[1]);
  EXPECT_EQ(cases[0].targets[0], f.test.images[2]);
  EXPECT_EQ(cases[0].target_ids[0], "img/t0.json");
  EXPECT_EQ(cases[0].predicted_label, 1U);
  fs::remove_all(dir);
  EXPECT_THROW(load_scoring_cases(entries, dir.string()), Error);
}

TEST(Evaluation, RejectsEmptyInputs) {
  const auto& f = toy();
  EXPECT_THROW(score_cases(f.model, {}, default_scoring_methods(), std::vector<std::size_t>{1}), ValidationError);
  auto o = small_pipeline();
  o.ks = {1, 5};
  EXPECT_THROW(run_topk_pipeline(f.model, f.test, o), ValidationError);
  ScoringCase bare{"c", f.test.images[0], f.test.images[1], {}, {}, 0, 1};
  EXPECT_THROW(score_case(f.model, bare, short_run(1.0)), ValidationError);
}

}  // namespace
}  // namespace aevis
