#include "aevis/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <filesystem>
#include <mutex>
#include <random>
#include <thread>

#include "aevis/error.hpp"
#include "aevis/net.hpp"

namespace aevis {
namespace {

/// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, std::max<std::size_t>(n, 1));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::size_t predict(const ModelSpec& model, const Tensor& x) { return argmax(forward(model, x).probabilities); }

}  // namespace

TopKCase score_case(const ModelSpec& model, const ScoringCase& c, const ExtractionParams& params, std::size_t window) {
  if (c.targets.empty()) throw ValidationError("case " + c.id + " has no targets");
  if (!c.target_ids.empty() && c.target_ids.size() != c.targets.size()) {
    throw ValidationError("case " + c.id + ": target_ids must match the targets");
  }
  const std::vector<Tensor> head{c.adversarial, c.source};
  const std::vector<std::string> refs{c.id + "/adversarial", c.id + "/source"};
  const auto chain = extract_constrained(model, head, params, refs);
  ExtractionParams last = params;
  last.seed = params.seed + 2;
  TopKCase out{c.id, {}};
  for (std::size_t j = 0; j < c.targets.size(); ++j) {
    const std::string tid = c.target_ids.empty() ? c.id + "/target" + std::to_string(j) : c.target_ids[j];
    const Datapath tar = extract_anchored(model, c.targets[j], chain, last, tid);
    const auto report = detect_pattern(diff_series(model, chain[0], chain[1], tar), window);
    out.targets.push_back({tid, datapath_similarity(chain[0], tar), report.detected});
  }
  return out;
}

ScoreTable score_cases(const ModelSpec& model, std::span<const ScoringCase> cases,
                       std::span<const ScoringMethod> methods, std::span<const std::size_t> ks, std::size_t window,
                       std::size_t jobs) {
  if (cases.empty()) throw ValidationError("no cases to score");
  std::vector<MethodCases> scored;
  for (const auto& m : methods) {
    m.params.validate();
    scored.push_back({m.name, std::vector<TopKCase>(cases.size())});
  }
  parallel_for(cases.size() * methods.size(), jobs, [&](std::size_t task) {
    const std::size_t mi = task / cases.size(), ci = task % cases.size();
    scored[mi].cases[ci] = score_case(model, cases[ci], methods[mi].params, window);
  });
  std::vector<std::string> groups;
  for (const auto& c : cases) groups.push_back("class " + std::to_string(c.predicted_label));
  return build_score_table(ks, scored, groups);
}

std::vector<ScoringMethod> default_scoring_methods() {
  ExtractionParams constrained;
  constrained.gamma = 1.0;
  ExtractionParams independent;
  independent.gamma = 0.0;
  return {{"constrained", constrained}, {"independent", independent}};
}

std::vector<ScoringCase> load_scoring_cases(const std::vector<TripletEntry>& entries, const std::string& base_dir) {
  namespace fs = std::filesystem;
  auto resolve = [&](const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path.string() : (fs::path(base_dir) / path).string();
  };
  std::vector<ScoringCase> cases;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    ScoringCase c;
    c.id = "case" + std::to_string(i);
    c.adversarial = load_image_file(resolve(e.adversarial_path));
    c.source = load_image_file(resolve(e.source_path));
    for (const auto& t : e.target_paths) {
      c.targets.push_back(load_image_file(resolve(t)));
      c.target_ids.push_back(t);
    }
    c.source_label = e.source_label;
    c.predicted_label = e.predicted_label;
    cases.push_back(std::move(c));
  }
  return cases;
}

std::vector<ScoringCase> build_scoring_cases(const ModelSpec& model, const Dataset& test, const PipelineOptions& options,
                                             std::size_t* attacked, std::size_t* flipped) {
  options.attack.validate();
  if (options.targets_per_case < 1) throw ValidationError("targets_per_case must be >= 1");
  std::vector<std::size_t> predicted(test.size());
  std::vector<std::vector<std::size_t>> by_class(model.class_count());
  for (std::size_t i = 0; i < test.size(); ++i) {
    predicted[i] = predict(model, test.images[i]);
    if (predicted[i] == test.labels[i]) by_class[predicted[i]].push_back(i);
  }
  std::vector<std::size_t> correct;
  for (std::size_t i = 0; i < test.size(); ++i) {
    if (predicted[i] == test.labels[i]) correct.push_back(i);
  }
  std::vector<Tensor> adversarial(correct.size());
  std::vector<std::size_t> adv_label(correct.size());
  parallel_for(correct.size(), options.jobs, [&](std::size_t k) {
    const std::size_t i = correct[k];
    adversarial[k] = mi_fgsm(model, test.images[i], test.labels[i], options.attack);
    adv_label[k] = predict(model, adversarial[k]);
  });

  std::vector<ScoringCase> cases;
  std::size_t flips = 0;
  for (std::size_t k = 0; k < correct.size(); ++k) {
    const std::size_t i = correct[k];
    if (adv_label[k] == test.labels[i]) continue;
    ++flips;
    if (options.max_cases > 0 && cases.size() >= options.max_cases) continue;
    auto pool = by_class[adv_label[k]];
    if (pool.size() < options.targets_per_case) continue;
    std::mt19937_64 rng(options.seed + cases.size());
    for (std::size_t n = 0; n < options.targets_per_case; ++n) {
      std::swap(pool[n], pool[n + rng() % (pool.size() - n)]);
    }
    ScoringCase c;
    c.id = "test" + std::to_string(i);
    c.adversarial = adversarial[k];
    c.source = test.images[i];
    c.source_label = test.labels[i];
    c.predicted_label = adv_label[k];
    for (std::size_t n = 0; n < options.targets_per_case; ++n) {
      c.targets.push_back(test.images[pool[n]]);
      c.target_ids.push_back("test" + std::to_string(pool[n]));
    }
    cases.push_back(std::move(c));
  }
  if (attacked) *attacked = correct.size();
  if (flipped) *flipped = flips;
  return cases;
}

PipelineReport run_topk_pipeline(const ModelSpec& model, const Dataset& test, const PipelineOptions& options) {
  for (std::size_t k : options.ks) {
    if (k < 1 || k > options.targets_per_case) {
      throw ValidationError("k = " + std::to_string(k) + " needs 1 <= k <= targets_per_case (" +
                            std::to_string(options.targets_per_case) + ")");
    }
  }
  PipelineReport report;
  report.cases = build_scoring_cases(model, test, options, &report.attacked, &report.flipped);
  if (report.cases.empty()) throw ValidationError("no adversarial example flipped its label; nothing to score");
  report.table = score_cases(model, report.cases, options.methods, options.ks, options.window, options.jobs);
  return report;
}

}  // namespace aevis
