// aevis: batch front end over the analysis library.

#include <atomic>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "aevis/attack.hpp"
#include "aevis/contribution.hpp"
#include "aevis/datapath.hpp"
#include "aevis/dataset.hpp"
#include "aevis/error.hpp"
#include "aevis/evaluation.hpp"
#include "aevis/layout.hpp"
#include "aevis/model_io.hpp"
#include "aevis/net.hpp"
#include "aevis/pattern.hpp"
#include "aevis/server.hpp"
#include "aevis/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Globals {
  std::string format = "text";
  std::size_t jobs = 1;
  bool doc() const { return format == "doc"; }
};

void add_extraction_flags(CLI::App* cmd, aevis::ExtractionParams& p) {
  cmd->add_option("--lambda", p.lambda, "sparsity weight")->capture_default_str();
  cmd->add_option("--gamma", p.gamma, "coupling weight to earlier datapaths")->capture_default_str();
  cmd->add_option("--lr", p.learning_rate, "learning rate")->capture_default_str();
  cmd->add_option("--iterations", p.iterations, "optimizer steps")->capture_default_str();
  cmd->add_option("--seed", p.seed, "noise seed")->capture_default_str();
  cmd->add_option("--tau", p.binarize_tau, "binarization threshold")->capture_default_str();
  cmd->add_option("--noise", p.gradient_noise, "initial gradient noise scale")->capture_default_str();
}

void add_attack_flags(CLI::App* cmd, aevis::AttackParams& p) {
  cmd->add_option("--epsilon", p.epsilon, "L-inf budget")->capture_default_str();
  cmd->add_option("--alpha", p.alpha, "step size")->capture_default_str();
  cmd->add_option("--mu", p.mu, "momentum decay")->capture_default_str();
  cmd->add_option("--steps", p.steps, "iterations")->capture_default_str();
  cmd->add_option("--low", p.bounds.low, "pixel lower bound")->capture_default_str();
  cmd->add_option("--high", p.bounds.high, "pixel upper bound")->capture_default_str();
}

void emit(const std::string& bytes, const std::string& out) {
  if (out.empty() || out == "-") {
    std::cout << bytes << "\n";
  } else {
    aevis::write_file(out, bytes);
  }
}

std::vector<aevis::Tensor> load_images(const std::vector<std::string>& paths) {
  std::vector<aevis::Tensor> out;
  for (const auto& p : paths) out.push_back(aevis::load_image_file(p));
  return out;
}

aevis::Datapath load_datapath_file(const std::string& path) { return aevis::load_datapath(aevis::read_file(path)); }

std::string datapath_summary(const aevis::Datapath& dp) {
  const auto active = aevis::binarize(dp, dp.params.binarize_tau);
  char buf[160];
  std::snprintf(buf, sizeof buf, "%s: %zu/%zu maps active, loss %.6g, label %s", dp.example_ref.c_str(),
                active.size(), dp.gates.size(), dp.converged_loss, dp.label_preserved ? "preserved" : "changed");
  return buf;
}

// --- train-toy -------------------------------------------------------------

struct TrainToyArgs {
  aevis::ToyFixtureOptions options;
  std::string model_out, train_out, test_out;
};

void run_train_toy(const TrainToyArgs& a, const Globals& g) {
  const auto fx = aevis::make_toy_fixture(a.options);
  aevis::save_model_file(fx.model, a.model_out);
  if (!a.train_out.empty()) aevis::save_dataset_file(fx.train, a.train_out);
  if (!a.test_out.empty()) aevis::save_dataset_file(fx.test, a.test_out);
  const double train_acc = aevis::accuracy(fx.model, fx.train);
  const double test_acc = aevis::accuracy(fx.model, fx.test);
  if (g.doc()) {
    std::cout << json{{"model_id", aevis::model_id(fx.model)},
                      {"train_accuracy", train_acc},
                      {"test_accuracy", test_acc}}
                     .dump()
              << "\n";
  } else {
    std::printf("model %s\ntrain accuracy %.4f\ntest accuracy %.4f\n", aevis::model_id(fx.model).c_str(), train_acc,
                test_acc);
  }
}

// --- attack ----------------------------------------------------------------

struct AttackArgs {
  std::string model, image, out, dataset, out_dir;
  std::optional<std::size_t> label;
  aevis::PipelineOptions pipeline;
};

void run_attack(const AttackArgs& a, const Globals& g) {
  const auto model = aevis::load_model_file(a.model);
  if (!a.dataset.empty()) {
    if (a.out_dir.empty()) throw CLI::ValidationError("--dataset needs --out-dir");
    const auto test = aevis::load_dataset_file(a.dataset);
    std::size_t attacked = 0, flipped = 0;
    const auto cases = aevis::build_scoring_cases(model, test, a.pipeline, &attacked, &flipped);
    fs::create_directories(a.out_dir);
    std::vector<aevis::TripletEntry> entries;
    for (const auto& c : cases) {
      aevis::TripletEntry e;
      e.source_path = c.id + "-source.json";
      e.adversarial_path = c.id + "-adversarial.json";
      aevis::save_image_file(c.source, (fs::path(a.out_dir) / e.source_path).string());
      aevis::save_image_file(c.adversarial, (fs::path(a.out_dir) / e.adversarial_path).string());
      for (std::size_t j = 0; j < c.targets.size(); ++j) {
        e.target_paths.push_back(c.id + "-target" + std::to_string(j) + ".json");
        aevis::save_image_file(c.targets[j], (fs::path(a.out_dir) / e.target_paths.back()).string());
      }
      e.source_label = c.source_label;
      e.predicted_label = c.predicted_label;
      entries.push_back(std::move(e));
    }
    aevis::write_file((fs::path(a.out_dir) / "manifest.json").string(), aevis::save_manifest(entries));
    if (g.doc()) {
      std::cout << json{{"attacked", attacked}, {"flipped", flipped}, {"cases", cases.size()}}.dump() << "\n";
    } else {
      std::printf("attacked %zu\nflipped %zu\ncases %zu\n", attacked, flipped, cases.size());
    }
    return;
  }
  if (a.image.empty()) throw CLI::ValidationError("attack needs --image or --dataset");
  const auto x = aevis::load_image_file(a.image);
  const std::size_t label = a.label ? *a.label : aevis::argmax(aevis::forward(model, x).probabilities);
  const auto adv = aevis::mi_fgsm(model, x, label, a.pipeline.attack);
  const auto probs = aevis::forward(model, adv).probabilities;
  const std::size_t adv_label = aevis::argmax(probs);
  if (!a.out.empty()) aevis::save_image_file(adv, a.out);
  if (g.doc()) {
    std::cout << json{{"source_label", label},
                      {"adversarial_label", adv_label},
                      {"success", adv_label != label},
                      {"probabilities", probs}}
                     .dump()
              << "\n";
  } else {
    std::printf("source label %zu\nadversarial label %zu\n%s\n", label, adv_label,
                adv_label != label ? "flipped" : "not flipped");
  }
  if (a.out.empty() && !g.doc()) std::cout << aevis::save_image(adv) << "\n";
}

// --- extract / extract-chain -------------------------------------------------

struct ExtractArgs {
  std::string model, out;
  std::vector<std::string> images, outs;
  aevis::ExtractionParams params;
};

void run_extract(const ExtractArgs& a, const Globals& g) {
  const auto model = aevis::load_model_file(a.model);
  const auto x = aevis::load_image_file(a.images.at(0));
  const auto dp = aevis::extract_datapath(model, x, a.params, a.images[0]);
  emit(aevis::save_datapath(dp), a.out);
  if (!a.out.empty() && !g.doc()) std::cout << datapath_summary(dp) << "\n";
}

void run_extract_chain(const ExtractArgs& a, const Globals& g) {
  if (!a.outs.empty() && a.outs.size() != a.images.size()) {
    throw CLI::ValidationError("--out must be given once per --image");
  }
  const auto model = aevis::load_model_file(a.model);
  const auto xs = load_images(a.images);
  const auto dps = aevis::extract_constrained(model, xs, a.params, a.images);
  if (a.outs.empty()) {
    json arr = json::array();
    for (const auto& dp : dps) arr.push_back(json::parse(aevis::save_datapath(dp)));
    std::cout << json{{"datapaths", std::move(arr)}}.dump() << "\n";
    return;
  }
  for (std::size_t i = 0; i < dps.size(); ++i) aevis::write_file(a.outs[i], aevis::save_datapath(dps[i]));
  if (!g.doc()) {
    for (const auto& dp : dps) std::cout << datapath_summary(dp) << "\n";
  }
}

// --- contribute ------------------------------------------------------------

struct ContributeArgs {
  std::string model, mask, out;
  std::vector<std::string> images;
  std::size_t target_fm = 0;
  std::size_t top = 10;
  aevis::ExtractionParams params;
};

void run_contribute(const ContributeArgs& a, const Globals& g) {
  const auto model = aevis::load_model_file(a.model);
  const auto xs = load_images(a.images);
  const auto result = a.mask.empty()
                          ? aevis::contribution_whole(model, xs, a.target_fm, a.params)
                          : aevis::contribution_area(model, xs, a.target_fm,
                                                     aevis::load_mask(aevis::read_file(a.mask)), a.params);
  emit(aevis::save_contribution(result), a.out);
  if (a.out.empty() || g.doc()) return;
  std::printf("top contributors to feature map %zu\n", a.target_fm);
  for (const auto& [fm, value] : aevis::rank_contributions(result, a.top)) {
    std::printf("  fm %zu (layer %zu) %.6f\n", fm, model.feature_map(fm).layer, value);
  }
}

// --- score -----------------------------------------------------------------

struct ScoreArgs {
  std::string cases, manifest, model, dataset, out;
  std::vector<std::size_t> ks{1, 3, 5};
  aevis::PipelineOptions pipeline;
  aevis::ExtractionParams params;
};

void print_table(const aevis::ScoreTable& table, const Globals& g, const std::string& out) {
  const std::string doc = aevis::save_score_table(table);
  if (!out.empty()) aevis::write_file(out, doc);
  std::cout << (g.doc() ? doc + "\n" : aevis::format_score_table(table));
}

std::vector<aevis::ScoringMethod> methods_from(const aevis::ExtractionParams& params) {
  std::vector<aevis::ScoringMethod> out;
  for (auto m : aevis::default_scoring_methods()) {
    const double gamma = m.params.gamma;
    m.params = params;
    m.params.gamma = gamma;
    out.push_back(std::move(m));
  }
  return out;
}

void run_score(const ScoreArgs& a, const Globals& g) {
  const int modes = !a.cases.empty() + !a.manifest.empty() + !a.dataset.empty();
  if (modes != 1) throw CLI::ValidationError("score needs exactly one of --cases, --manifest, --dataset");
  if (!a.cases.empty()) {
    const auto cases = aevis::load_topk_cases(aevis::read_file(a.cases));
    json scores = json::array();
    for (std::size_t k : a.ks) {
      const double v = aevis::topk_score(cases, k);
      scores.push_back({{"k", k}, {"score", v}});
      if (!g.doc()) std::printf("top-%zu %.4f\n", k, v);
    }
    if (g.doc()) std::cout << json{{"cases", cases.size()}, {"scores", std::move(scores)}}.dump() << "\n";
    return;
  }
  if (a.model.empty()) throw CLI::ValidationError("--manifest and --dataset need --model");
  const auto model = aevis::load_model_file(a.model);
  const auto methods = methods_from(a.params);
  if (!a.manifest.empty()) {
    const auto entries = aevis::load_manifest(aevis::read_file(a.manifest));
    const auto cases = aevis::load_scoring_cases(entries, fs::path(a.manifest).parent_path().string());
    print_table(aevis::score_cases(model, cases, methods, a.ks, a.pipeline.window, g.jobs), g, a.out);
    return;
  }
  auto options = a.pipeline;
  options.ks = a.ks;
  options.methods = methods;
  options.jobs = g.jobs;
  const auto report = aevis::run_topk_pipeline(model, aevis::load_dataset_file(a.dataset), options);
  if (!g.doc()) {
    std::printf("attacked %zu, flipped %zu, scored %zu cases\n", report.attacked, report.flipped,
                report.cases.size());
  }
  print_table(report.table, g, a.out);
}

// --- layout ----------------------------------------------------------------

struct LayoutArgs {
  std::string model, adversarial, source, target, sets, out;
  std::size_t group = 0;
  double width = 0.0, height = 0.0;
  std::optional<double> scale;
};

void run_river(const LayoutArgs& a, const Globals& g) {
  const auto model = aevis::load_model_file(a.model);
  const auto d = aevis::group_distances(model, load_datapath_file(a.adversarial), load_datapath_file(a.source),
                                        load_datapath_file(a.target));
  if (d.groups.empty()) throw aevis::ValidationError("model has no layer group with gated feature maps");
  const aevis::Rect canvas{0.0, 0.0, a.width > 0 ? a.width : 800.0, a.height > 0 ? a.height : 300.0};
  const double scale = a.scale ? *a.scale : aevis::default_river_scale(d.source_target, canvas.h);
  const auto layout =
      aevis::river_layout(d.source_target, d.adversarial_source, d.adversarial_target, canvas, scale, d.names);
  emit(g.doc() ? aevis::save_river(layout) : aevis::river_svg(layout, canvas), a.out);
}

void run_treemap(const LayoutArgs& a, const Globals& g) {
  std::vector<aevis::LabeledSet> sets;
  if (!a.sets.empty()) {
    sets = aevis::load_labeled_sets(aevis::read_file(a.sets));
  } else {
    if (a.model.empty() || a.adversarial.empty() || a.source.empty() || a.target.empty()) {
      throw CLI::ValidationError("treemap needs --sets or --model with --adversarial, --source, --target");
    }
    const auto model = aevis::load_model_file(a.model);
    const std::vector<aevis::Datapath> dps{load_datapath_file(a.adversarial), load_datapath_file(a.source),
                                           load_datapath_file(a.target)};
    const std::vector<std::string> ids{"adversarial", "source", "target"};
    sets = aevis::group_sets(model, dps, ids, a.group);
  }
  const auto relation = aevis::set_relations(sets);
  if (relation.regions.empty()) throw aevis::ValidationError("every set is empty; nothing to lay out");
  const aevis::Rect canvas{0.0, 0.0, a.width > 0 ? a.width : 400.0, a.height > 0 ? a.height : 400.0};
  const auto layout = aevis::treemap_layout(relation, canvas);
  emit(g.doc() ? aevis::save_treemap(layout, relation) : aevis::treemap_svg(layout), a.out);
}

// --- serve -----------------------------------------------------------------

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

struct ServeArgs {
  std::string listen = "127.0.0.1:8080";
  std::string data_dir = "aevis-data";
  std::size_t workers = 2;
  std::string cors_origin = "*";
};

void run_serve(const ServeArgs& a) {
  aevis::ServerConfig config;
  const auto colon = a.listen.rfind(':');
  if (colon == std::string::npos) throw CLI::ValidationError("--listen expects host:port");
  config.host = a.listen.substr(0, colon);
  try {
    config.port = std::stoi(a.listen.substr(colon + 1));
  } catch (const std::exception&) {
    throw CLI::ValidationError("--listen expects host:port");
  }
  config.data_dir = a.data_dir;
  config.workers = a.workers;
  config.cors_origin = a.cors_origin;
  aevis::AnalysisServer server(config);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  server.start();
  std::cout << "listening on " << config.host << ":" << server.port() << std::endl;
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  server.stop();
}

void print_error(const std::string& code, const std::string& message) {
  std::cerr << json{{"error", {{"code", code}, {"message", message}}}}.dump() << std::endl;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"aevis: adversarial datapath analysis"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--format", g.format, "text or doc (machine-readable JSON)")
      ->check(CLI::IsMember({"text", "doc"}))
      ->capture_default_str();
  app.add_option("--jobs", g.jobs, "worker threads for batch scoring")->check(CLI::PositiveNumber)->capture_default_str();

  TrainToyArgs train;
  auto* train_cmd = app.add_subcommand("train-toy", "train the toy texture classifier and write its datasets");
  train_cmd->add_option("--model-out", train.model_out, "model document to write")->required();
  train_cmd->add_option("--train-out", train.train_out, "training set document");
  train_cmd->add_option("--test-out", train.test_out, "test set document");
  train_cmd->add_option("--classes", train.options.class_count, "texture classes (2-4)")->capture_default_str();
  train_cmd->add_option("--train-count", train.options.train_count)->capture_default_str();
  train_cmd->add_option("--test-count", train.options.test_count)->capture_default_str();
  train_cmd->add_option("--epochs", train.options.train.epochs)->capture_default_str();
  train_cmd->add_option("--train-lr", train.options.train.learning_rate)->capture_default_str();
  train_cmd->add_option("--seed", train.options.seed, "data seed")->capture_default_str();

  AttackArgs attack;
  auto* attack_cmd = app.add_subcommand("attack", "MI-FGSM on one image, or on a whole test set");
  attack_cmd->add_option("--model", attack.model)->required()->check(CLI::ExistingFile);
  attack_cmd->add_option("--image", attack.image, "image document")->check(CLI::ExistingFile);
  attack_cmd->add_option("--label", attack.label, "true label (default: the model's prediction)");
  attack_cmd->add_option("--out", attack.out, "adversarial image to write");
  attack_cmd->add_option("--dataset", attack.dataset, "test set; writes a triplet manifest")->check(CLI::ExistingFile);
  attack_cmd->add_option("--out-dir", attack.out_dir, "directory for batch images and manifest.json");
  attack_cmd->add_option("--targets-per-case", attack.pipeline.targets_per_case)->capture_default_str();
  attack_cmd->add_option("--max-cases", attack.pipeline.max_cases, "0 keeps all")->capture_default_str();
  attack_cmd->add_option("--seed", attack.pipeline.seed, "target sampling seed")->capture_default_str();
  add_attack_flags(attack_cmd, attack.pipeline.attack);

  ExtractArgs extract;
  auto* extract_cmd = app.add_subcommand("extract", "extract the critical datapath of one image");
  extract_cmd->add_option("--model", extract.model)->required()->check(CLI::ExistingFile);
  extract_cmd->add_option("--image", extract.images)->required()->expected(1)->check(CLI::ExistingFile);
  extract_cmd->add_option("--out", extract.out, "datapath document (default stdout)");
  add_extraction_flags(extract_cmd, extract.params);

  ExtractArgs chain;
  auto* chain_cmd = app.add_subcommand("extract-chain", "constrained extraction over an ordered list of images");
  chain_cmd->add_option("--model", chain.model)->required()->check(CLI::ExistingFile);
  chain_cmd->add_option("--image", chain.images, "repeat in chain order")->required()->check(CLI::ExistingFile);
  chain_cmd->add_option("--out", chain.outs, "one datapath document per image (default: all to stdout)");
  add_extraction_flags(chain_cmd, chain.params);

  ContributeArgs contribute;
  auto* contribute_cmd = app.add_subcommand("contribute", "contribution of earlier feature maps to one map");
  contribute_cmd->add_option("--model", contribute.model)->required()->check(CLI::ExistingFile);
  contribute_cmd->add_option("--image", contribute.images, "repeatable")->required()->check(CLI::ExistingFile);
  contribute_cmd->add_option("--target-fm", contribute.target_fm, "feature map id")->required();
  contribute_cmd->add_option("--mask", contribute.mask, "neuron mask document")->check(CLI::ExistingFile);
  contribute_cmd->add_option("--out", contribute.out, "contribution document");
  contribute_cmd->add_option("--top", contribute.top, "contributors to list")->capture_default_str();
  add_extraction_flags(contribute_cmd, contribute.params);

  ScoreArgs score;
  auto* score_cmd = app.add_subcommand("score", "top-K pattern evaluation");
  score_cmd->add_option("--cases", score.cases, "ranked cases document")->check(CLI::ExistingFile);
  score_cmd->add_option("--manifest", score.manifest, "triplet manifest")->check(CLI::ExistingFile);
  score_cmd->add_option("--dataset", score.dataset, "test set for the full pipeline")->check(CLI::ExistingFile);
  score_cmd->add_option("--model", score.model)->check(CLI::ExistingFile);
  score_cmd->add_option("--k", score.ks, "repeatable")->capture_default_str();
  score_cmd->add_option("--window", score.pipeline.window, "pattern window r")->capture_default_str();
  score_cmd->add_option("--targets-per-case", score.pipeline.targets_per_case)->capture_default_str();
  score_cmd->add_option("--max-cases", score.pipeline.max_cases, "0 keeps all")->capture_default_str();
  score_cmd->add_option("--sample-seed", score.pipeline.seed, "target sampling seed")->capture_default_str();
  score_cmd->add_option("--out", score.out, "also write the table document here");
  add_extraction_flags(score_cmd, score.params);
  add_attack_flags(score_cmd, score.pipeline.attack);

  LayoutArgs layout;
  auto* layout_cmd = app.add_subcommand("layout", "river or treemap layout (SVG, or JSON with --format doc)");
  layout_cmd->require_subcommand(1);
  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--model", layout.model)->check(CLI::ExistingFile);
    cmd->add_option("--adversarial", layout.adversarial, "datapath document")->check(CLI::ExistingFile);
    cmd->add_option("--source", layout.source, "datapath document")->check(CLI::ExistingFile);
    cmd->add_option("--target", layout.target, "datapath document")->check(CLI::ExistingFile);
    cmd->add_option("--width", layout.width);
    cmd->add_option("--height", layout.height);
    cmd->add_option("--out", layout.out, "default stdout");
  };
  auto* river_cmd = layout_cmd->add_subcommand("river", "distance curves over layer groups");
  add_common(river_cmd);
  river_cmd->add_option("--scale", layout.scale, "pixels per unit distance");
  auto* treemap_cmd = layout_cmd->add_subcommand("treemap", "set relations of one layer group");
  add_common(treemap_cmd);
  treemap_cmd->add_option("--group", layout.group, "layer group index")->capture_default_str();
  treemap_cmd->add_option("--sets", layout.sets, "labeled sets document")->check(CLI::ExistingFile);

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "run the analysis server");
  serve_cmd->add_option("--listen", serve.listen, "host:port")->envname("AEVIS_LISTEN")->capture_default_str();
  serve_cmd->add_option("--data-dir", serve.data_dir)->envname("AEVIS_DATA_DIR")->capture_default_str();
  serve_cmd->add_option("--workers", serve.workers)
      ->envname("AEVIS_WORKERS")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  serve_cmd->add_option("--cors-origin", serve.cors_origin)->envname("AEVIS_CORS_ORIGIN")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    print_error("usage_error", e.what());
    return 2;
  }

  try {
    if (*train_cmd) run_train_toy(train, g);
    if (*attack_cmd) run_attack(attack, g);
    if (*extract_cmd) run_extract(extract, g);
    if (*chain_cmd) run_extract_chain(chain, g);
    if (*contribute_cmd) run_contribute(contribute, g);
    if (*score_cmd) run_score(score, g);
    if (*river_cmd) {
      if (layout.model.empty() || layout.adversarial.empty() || layout.source.empty() || layout.target.empty()) {
        throw CLI::ValidationError("river needs --model, --adversarial, --source, --target");
      }
      run_river(layout, g);
    }
    if (*treemap_cmd) run_treemap(layout, g);
    if (*serve_cmd) run_serve(serve);
  } catch (const CLI::Error& e) {
    print_error("usage_error", e.what());
    return 2;
  } catch (const aevis::Error& e) {
    print_error(e.code(), e.what());
    return 1;
  } catch (const std::exception& e) {
    print_error("error", e.what());
    return 1;
  }
  return 0;
}
