// Runs the aevis binary and compares its files and stdout with direct library
// calls on the same inputs.

#include <array>
#include <cstdio>
#include <filesystem>
#include <random>
#include <string>
#include <chrono>
#include <csignal>
#include <sys/wait.h>
#include <thread>
#include <vector>

#include <gtest/gtest.h>
#include <httplib.h>
#include <json.hpp>

#include "aevis/attack.hpp"
#include "aevis/contribution.hpp"
#include "aevis/datapath.hpp"
#include "aevis/dataset.hpp"
#include "aevis/evaluation.hpp"
#include "aevis/layout.hpp"
#include "aevis/model_io.hpp"
#include "aevis/pattern.hpp"
#include "aevis/train.hpp"

namespace aevis {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliRun {
  int status = -1;
  std::string out;
  std::string err;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

class CliTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    std::mt19937_64 rng{std::random_device{}()};
    dir_ = new fs::path(fs::temp_directory_path() / ("aevis-cli-test-" + std::to_string(rng())));
    fs::create_directories(*dir_);
    fixture_ = new ToyFixture(make_toy_fixture());
    save_model_file(fixture_->model, path("model.json"));
    save_dataset_file(fixture_->test, path("test.json"));
    for (std::size_t i = 0; i < 3; ++i) save_image_file(fixture_->test.images[i], path("x" + std::to_string(i) + ".json"));
  }

  static void TearDownTestSuite() {
    fs::remove_all(*dir_);
    delete dir_;
    delete fixture_;
  }

  static std::string path(const std::string& name) { return (*dir_ / name).string(); }

  static CliRun run(const std::vector<std::string>& args) {
    std::string cmd = quote(AEVIS_CLI);
    for (const auto& a : args) cmd += " " + quote(a);
    const std::string err_path = path("stderr.txt");
    cmd += " 2>" + quote(err_path);
    CliRun r;
    FILE* pipe = popen(cmd.c_str(), "r");
    if (pipe == nullptr) return r;
    std::array<char, 4096> buf{};
    std::size_t n = 0;
    while ((n = fread(buf.data(), 1, buf.size(), pipe)) > 0) r.out.append(buf.data(), n);
    const int st = pclose(pipe);
    r.status = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    r.err = read_file(err_path);
    return r;
  }

  static ExtractionParams short_params(double gamma) {
    ExtractionParams p;
    p.gamma = gamma;
    p.iterations = 80;
    p.seed = 7;
    return p;
  }

  static std::vector<std::string> param_flags(const ExtractionParams& p) {
    return {"--gamma", std::to_string(p.gamma), "--iterations", std::to_string(p.iterations), "--seed",
            std::to_string(p.seed)};
  }

  static std::vector<std::string> concat(std::vector<std::string> a, const std::vector<std::string>& b) {
    a.insert(a.end(), b.begin(), b.end());
    return a;
  }

  static inline fs::path* dir_ = nullptr;
  static inline ToyFixture* fixture_ = nullptr;
};

void expect_one_line_error(const CliRun& r, const std::string& code) {
  ASSERT_FALSE(r.err.empty());
  EXPECT_EQ(r.err.find('\n'), r.err.size() - 1) << r.err;
  const json e = json::parse(r.err);
  EXPECT_EQ(e.at("error").at("code"), code) << r.err;
  EXPECT_TRUE(e.at("error").at("message").is_string());
}

TEST_F(CliTest, TrainToyWritesTheLibraryFixture) {
  const CliRun r = run({"--format", "doc", "train-toy", "--model-out", path("trained.json"), "--test-out",
                     path("trained-test.json")});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(read_file(path("trained.json")), save_model(fixture_->model));
  EXPECT_EQ(read_file(path("trained-test.json")), save_dataset(fixture_->test));
  EXPECT_EQ(json::parse(r.out).at("model_id"), model_id(fixture_->model));
}

TEST_F(CliTest, ExtractIsDeterministicAndMatchesTheLibrary) {
  const auto p = short_params(0.0);
  const auto args = concat({"extract", "--model", path("model.json"), "--image", path("x0.json")}, param_flags(p));
  ASSERT_EQ(run(concat(args, {"--out", path("dp-a.json")})).status, 0);
  ASSERT_EQ(run(concat(args, {"--out", path("dp-b.json")})).status, 0);
  const std::string a = read_file(path("dp-a.json"));
  EXPECT_EQ(a, read_file(path("dp-b.json")));
  EXPECT_EQ(a, save_datapath(extract_datapath(fixture_->model, fixture_->test.images[0], p, path("x0.json"))));
}

TEST_F(CliTest, ExtractChainMatchesConstrainedExtraction) {
  const auto p = short_params(1.0);
  const CliRun r = run(concat({"extract-chain", "--model", path("model.json"), "--image", path("x0.json"), "--image",
                            path("x1.json"), "--image", path("x2.json"), "--out", path("c0.json"), "--out",
                            path("c1.json"), "--out", path("c2.json")},
                           param_flags(p)));
  ASSERT_EQ(r.status, 0) << r.err;
  const std::vector<Tensor> xs(fixture_->test.images.begin(), fixture_->test.images.begin() + 3);
  const std::vector<std::string> refs{path("x0.json"), path("x1.json"), path("x2.json")};
  const auto dps = extract_constrained(fixture_->model, xs, p, refs);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(read_file(path("c" + std::to_string(i) + ".json")), save_datapath(dps[i]));

  const CliRun river = run({"--format", "doc", "layout", "river", "--model", path("model.json"), "--adversarial",
                         path("c0.json"), "--source", path("c1.json"), "--target", path("c2.json")});
  ASSERT_EQ(river.status, 0) << river.err;
  const auto d = group_distances(fixture_->model, dps[0], dps[1], dps[2]);
  const Rect canvas{0, 0, 800, 300};
  EXPECT_EQ(river.out, save_river(river_layout(d.source_target, d.adversarial_source, d.adversarial_target, canvas,
                                               default_river_scale(d.source_target, 300), d.names)) +
                           "\n");

  const CliRun svg = run({"layout", "river", "--model", path("model.json"), "--adversarial", path("c0.json"), "--source",
                       path("c1.json"), "--target", path("c2.json"), "--scale", "10"});
  ASSERT_EQ(svg.status, 0) << svg.err;
  EXPECT_EQ(svg.out, river_svg(river_layout(d.source_target, d.adversarial_source, d.adversarial_target, canvas, 10,
                                            d.names),
                               canvas) +
                         "\n");
}

TEST_F(CliTest, ContributeWithMaskMatchesContributionArea) {
  const auto& m = fixture_->model;
  const std::size_t target = m.gate_count() - 1;
  NeuronMask mask = NeuronMask::full(m, target);
  mask.selected[0] = 0;
  write_file(path("mask.json"), save_mask(mask));
  const auto p = short_params(1.0);
  const CliRun r = run(concat({"contribute", "--model", path("model.json"), "--image", path("x0.json"), "--image",
                            path("x1.json"), "--target-fm", std::to_string(target), "--mask", path("mask.json"),
                            "--out", path("contrib.json")},
                           param_flags(p)));
  ASSERT_EQ(r.status, 0) << r.err;
  const std::vector<Tensor> xs(fixture_->test.images.begin(), fixture_->test.images.begin() + 2);
  EXPECT_EQ(read_file(path("contrib.json")), save_contribution(contribution_area(m, xs, target, mask, p)));
  EXPECT_NE(r.out.find("top contributors"), std::string::npos);
}

TEST_F(CliTest, AttackMatchesMiFgsm) {
  const CliRun r = run({"--format", "doc", "attack", "--model", path("model.json"), "--image", path("x0.json"),
                     "--label", std::to_string(fixture_->test.labels[0]), "--out", path("adv.json")});
  ASSERT_EQ(r.status, 0) << r.err;
  const Tensor adv = mi_fgsm(fixture_->model, fixture_->test.images[0], fixture_->test.labels[0], AttackParams{});
  EXPECT_EQ(read_file(path("adv.json")), save_image(adv));
  const json doc = json::parse(r.out);
  EXPECT_EQ(doc.at("source_label"), fixture_->test.labels[0]);
  EXPECT_EQ(doc.at("adversarial_label"), argmax(forward(fixture_->model, adv).probabilities));
}

TEST_F(CliTest, BatchAttackManifestScoresLikeTheLibrary) {
  const CliRun a = run({"attack", "--model", path("model.json"), "--dataset", path("test.json"), "--out-dir",
                     path("batch"), "--max-cases", "2", "--targets-per-case", "2"});
  ASSERT_EQ(a.status, 0) << a.err;
  PipelineOptions o;
  o.max_cases = 2;
  o.targets_per_case = 2;
  const auto cases = build_scoring_cases(fixture_->model, fixture_->test, o);
  const auto entries = load_manifest(read_file(path("batch/manifest.json")));
  ASSERT_EQ(entries.size(), cases.size());
  const auto loaded = load_scoring_cases(entries, path("batch"));
  for (std::size_t i = 0; i < cases.size(); ++i) {
    EXPECT_EQ(save_image(loaded[i].adversarial), save_image(cases[i].adversarial));
    EXPECT_EQ(loaded[i].predicted_label, cases[i].predicted_label);
  }

  const CliRun s = run({"--format", "doc", "score", "--manifest", path("batch/manifest.json"), "--model",
                     path("model.json"), "--k", "1", "--k", "2", "--iterations", "60"});
  ASSERT_EQ(s.status, 0) << s.err;
  std::vector<ScoringMethod> methods = default_scoring_methods();
  for (auto& m : methods) m.params.iterations = 60;
  const std::vector<std::size_t> ks{1, 2};
  EXPECT_EQ(s.out, save_score_table(score_cases(fixture_->model, loaded, methods, ks)) + "\n");
}

TEST_F(CliTest, ScoreOnPatternLedCasesPrintsOne) {
  const std::vector<TopKCase> cases{{"a", {{"t0", 2.0, true}, {"t1", 1.0, false}}},
                                    {"b", {{"t0", 0.5, false}, {"t1", 3.0, true}}}};
  write_file(path("cases.json"), save_topk_cases(cases));
  const CliRun r = run({"score", "--cases", path("cases.json"), "--k", "1"});
  ASSERT_EQ(r.status, 0) << r.err;
  EXPECT_EQ(r.out, "top-1 1.0000\n");
  const CliRun d = run({"--format", "doc", "score", "--cases", path("cases.json"), "--k", "1", "--k", "2"});
  ASSERT_EQ(d.status, 0) << d.err;
  const json doc = json::parse(d.out);
  EXPECT_EQ(doc.at("scores").at(0).at("score"), 1.0);
  EXPECT_EQ(doc.at("scores").at(1).at("score"), topk_score(cases, 2));
}

TEST_F(CliTest, SingleSetTreemapIsOneCanvasRect) {
  const std::vector<LabeledSet> sets{{"only", {0, 1, 2}}};
  write_file(path("sets.json"), save_labeled_sets(sets));
  const CliRun r = run({"layout", "treemap", "--sets", path("sets.json"), "--width", "120", "--height", "80"});
  ASSERT_EQ(r.status, 0) << r.err;
  std::size_t rects = 0;
  for (auto pos = r.out.find("<rect"); pos != std::string::npos; pos = r.out.find("<rect", pos + 1)) ++rects;
  EXPECT_EQ(rects, 1U);
  const auto rel = set_relations(sets);
  const auto layout = treemap_layout(rel, Rect{0, 0, 120, 80});
  ASSERT_EQ(layout.cells.size(), 1U);
  EXPECT_EQ(layout.cells[0].rect, (Rect{0, 0, 120, 80}));
  EXPECT_EQ(r.out, treemap_svg(layout) + "\n");
}

TEST_F(CliTest, ErrorsAreOneJsonLine) {
  CliRun r = run({"extract", "--model", path("model.json"), "--image", path("x0.json"), "--bogus"});
  EXPECT_EQ(r.status, 2);
  expect_one_line_error(r, "usage_error");

  r = run({"extract", "--model", path("missing.json"), "--image", path("x0.json")});
  EXPECT_EQ(r.status, 2);
  expect_one_line_error(r, "usage_error");

  write_file(path("broken.json"), "{\"shape\": [1,");
  r = run({"extract", "--model", path("model.json"), "--image", path("broken.json")});
  EXPECT_EQ(r.status, 1);
  expect_one_line_error(r, "parse_error");

  r = run({"extract", "--model", path("x0.json"), "--image", path("x0.json")});
  EXPECT_NE(r.status, 0);
  expect_one_line_error(r, "parse_error");

  r = run({"score", "--cases", path("cases.json"), "--manifest", path("cases.json")});
  EXPECT_EQ(r.status, 2);
  expect_one_line_error(r, "usage_error");

  r = run({"contribute", "--model", path("model.json"), "--image", path("x0.json"), "--target-fm", "0"});
  EXPECT_EQ(r.status, 1);
  expect_one_line_error(r, "validation_error");
}

TEST_F(CliTest, ServeAnswersUntilTerminated) {
  const std::string log = path("serve.log");
  const std::string cmd = "AEVIS_DATA_DIR=" + quote(path("serve-data")) + " " + quote(AEVIS_CLI) +
                          " serve --listen 127.0.0.1:0 >" + quote(log) + " 2>&1 & echo $!";
  FILE* pipe = popen(cmd.c_str(), "r");
  ASSERT_NE(pipe, nullptr);
  int pid = 0;
  ASSERT_EQ(fscanf(pipe, "%d", &pid), 1);
  pclose(pipe);

  int port = 0;
  for (int i = 0; i < 100 && port == 0; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    const std::string text = fs::exists(log) ? read_file(log) : "";
    const auto colon = text.rfind(':');
    if (text.find("listening on") != std::string::npos && colon != std::string::npos) {
      port = std::stoi(text.substr(colon + 1));
    }
  }
  ASSERT_GT(port, 0);
  httplib::Client client("127.0.0.1", port);
  auto res = client.Get("/models/none");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 404);
  res = client.Post("/models", read_file(path("model.json")), "application/json");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->status, 201);
  EXPECT_TRUE(fs::exists(path("serve-data")));

  ASSERT_EQ(kill(pid, SIGTERM), 0);
  bool gone = false;
  for (int i = 0; i < 100 && !gone; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    gone = kill(pid, 0) != 0;
  }
  EXPECT_TRUE(gone);
}

}  // namespace
}  // namespace aevis
