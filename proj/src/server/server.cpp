#include "aevis/server.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "aevis/attack.hpp"
#include "aevis/contribution.hpp"
#include "aevis/datapath.hpp"
#include "aevis/dataset.hpp"
#include "aevis/detail/json_reader.hpp"
#include "aevis/error.hpp"
#include "aevis/layout.hpp"
#include "aevis/model_io.hpp"
#include "aevis/pattern.hpp"
#include "aevis/store.hpp"
#include "aevis/worker_pool.hpp"

namespace aevis {
namespace {

using nlohmann::json;
using detail::JsonReader;

class HttpError : public std::runtime_error {
 public:
  HttpError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status(status), code(std::move(code)) {}
  int status;
  std::string code;
};

[[noreturn]] void not_found(const std::string& resource, const std::string& id) {
  throw HttpError(404, resource + "_not_found", resource + " '" + id + "' not found");
}

[[noreturn]] void conflict(const std::string& code, const std::string& message) {
  throw HttpError(409, code, message);
}

json error_doc(const std::string& code, const std::string& message) {
  return json{{"error", {{"code", code}, {"message", message}}}};
}

void send(httplib::Response& res, int status, const std::string& body) {
  res.status = status;
  res.set_content(body, "application/json");
}

void send(httplib::Response& res, int status, const json& doc) { send(res, status, doc.dump()); }

using Route = std::function<void(const httplib::Request&, httplib::Response&)>;

httplib::Server::Handler guarded(Route fn) {
  return [fn = std::move(fn)](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const HttpError& e) {
      send(res, e.status, error_doc(e.code, e.what()));
    } catch (const LookupError& e) {
      send(res, 404, error_doc(e.code(), e.what()));
    } catch (const Error& e) {
      send(res, e.code() == "io_error" ? 500 : 400, error_doc(e.code(), e.what()));
    } catch (const std::exception& e) {
      send(res, 500, error_doc("internal_error", e.what()));
    }
  };
}

// ---- request parsing ----

json parse_body(const httplib::Request& req) {
  json doc = detail::parse_document(req.body);
  if (!doc.is_object()) throw ParseError("/: expected an object");
  return doc;
}

Tensor read_image(const JsonReader& r) {
  try {
    return load_image(r.node().dump());
  } catch (const ParseError& e) {
    throw ParseError(r.path() + std::string(e.what()).substr(1));
  }
}

void check_input(const ModelSpec& model, const Tensor& x, const std::string& what) {
  if (x.shape() != model.input_shape()) {
    throw ValidationError(what + " has shape " + shape_to_string(x.shape()) + ", model expects " +
                          shape_to_string(model.input_shape()));
  }
}

ExtractionParams read_extraction_params(const JsonReader& body) {
  ExtractionParams p;
  if (!body.has("params")) return p;
  const auto r = body.field("params");
  if (!r.node().is_object()) r.fail("expected an object");
  for (const auto& [key, _] : r.node().items()) {
    const auto f = r.field(key);
    if (key == "lambda") p.lambda = f.number();
    else if (key == "gamma") p.gamma = f.number();
    else if (key == "learning_rate") p.learning_rate = f.number();
    else if (key == "iterations") p.iterations = f.index();
    else if (key == "seed") p.seed = f.index();
    else if (key == "binarize_tau") p.binarize_tau = f.number();
    else if (key == "gradient_noise") p.gradient_noise = f.number();
    else f.fail("unknown field");
  }
  p.validate();
  return p;
}

AttackParams read_attack_params(const JsonReader& body) {
  AttackParams p;
  if (!body.has("params")) return p;
  const auto r = body.field("params");
  if (!r.node().is_object()) r.fail("expected an object");
  for (const auto& [key, _] : r.node().items()) {
    const auto f = r.field(key);
    if (key == "epsilon") p.epsilon = f.number();
    else if (key == "alpha") p.alpha = f.number();
    else if (key == "mu") p.mu = f.number();
    else if (key == "steps") p.steps = f.index();
    else if (key == "low") p.bounds.low = f.number();
    else if (key == "high") p.bounds.high = f.number();
    else f.fail("unknown field");
  }
  p.validate();
  return p;
}

double query_number(const httplib::Request& req, const std::string& key, double fallback) {
  if (!req.has_param(key)) return fallback;
  const std::string v = req.get_param_value(key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used == v.size() && std::isfinite(d)) return d;
  } catch (const std::exception&) {
  }
  throw ValidationError("query parameter " + key + "='" + v + "' is not a number");
}

std::size_t query_index(const httplib::Request& req, const std::string& key, std::size_t fallback) {
  const double d = query_number(req, key, static_cast<double>(fallback));
  if (d < 0 || d != std::floor(d)) throw ValidationError("query parameter " + key + " must be a non-negative integer");
  return static_cast<std::size_t>(d);
}

std::size_t path_index(const std::string& s) { return static_cast<std::size_t>(std::stoull(s)); }

// ---- domain records ----

enum class JobStatus { pending, running, done, failed };

const char* status_name(JobStatus s) {
  switch (s) {
    case JobStatus::pending: return "pending";
    case JobStatus::running: return "running";
    case JobStatus::done: return "done";
    case JobStatus::failed: return "failed";
  }
  return "failed";
}

JobStatus parse_status(const std::string& s) {
  if (s == "pending") return JobStatus::pending;
  if (s == "running") return JobStatus::running;
  if (s == "done") return JobStatus::done;
  if (s == "failed") return JobStatus::failed;
  throw ParseError("/status: unknown job status '" + s + "'");
}

struct Job {
  std::string id;
  std::string kind;
  JobStatus status = JobStatus::pending;
  json params;
  std::optional<std::string> session_id;
  std::string error_code;
  std::string error_message;
};

json job_doc(const Job& job) {
  json doc{{"id", job.id},
           {"kind", job.kind},
           {"status", status_name(job.status)},
           {"params", job.params},
           {"session_id", job.session_id ? json(*job.session_id) : json(nullptr)},
           {"result", nullptr},
           {"error", nullptr}};
  if (job.status == JobStatus::done) doc["result"] = "/jobs/" + job.id + "/result";
  if (job.status == JobStatus::failed) doc["error"] = {{"code", job.error_code}, {"message", job.error_message}};
  return doc;
}

Job read_job(const json& doc) {
  Job job;
  job.id = doc.at("id").get<std::string>();
  job.kind = doc.at("kind").get<std::string>();
  job.status = parse_status(doc.at("status").get<std::string>());
  job.params = doc.at("params");
  if (doc.at("session_id").is_string()) job.session_id = doc.at("session_id").get<std::string>();
  if (doc.at("error").is_object()) {
    job.error_code = doc.at("error").at("code").get<std::string>();
    job.error_message = doc.at("error").at("message").get<std::string>();
  }
  return job;
}

struct Example {
  std::string name;
  Tensor image;
  std::size_t label = 0;
};

struct Session {
  std::mutex mu;
  std::string id;
  std::string model_id;
  std::size_t source_label = 0;
  std::size_t predicted_label = 0;
  std::vector<Example> examples;  // adversarial, source, target0, target1, ...
  std::map<std::string, std::string> datapaths;  // example name -> datapath id
  json pattern;  // null until adversarial, source and target0 are extracted
  std::map<std::size_t, NeuronMask> masks;
  std::vector<std::string> contributions;  // job ids, oldest first
  std::map<std::string, ForwardResult> activations;  // in-memory cache

  const Example* example(const std::string& name) const {
    for (const auto& e : examples) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
};

json session_doc(const Session& s, bool with_images) {
  json examples = json::array();
  for (const auto& e : s.examples) {
    json ex{{"name", e.name}, {"label", e.label}};
    if (with_images) ex["image"] = json::parse(save_image(e.image));
    examples.push_back(std::move(ex));
  }
  json masks = json::array();
  for (const auto& [fm, mask] : s.masks) {
    masks.push_back(with_images ? json::parse(save_mask(mask)) : json(fm));
  }
  return json{{"id", s.id},
              {"model_id", s.model_id},
              {"source_label", s.source_label},
              {"predicted_label", s.predicted_label},
              {"examples", std::move(examples)},
              {"datapaths", s.datapaths},
              {"pattern", s.pattern},
              {"masks", std::move(masks)},
              {"contributions", s.contributions}};
}

std::shared_ptr<Session> read_session(const json& doc) {
  auto s = std::make_shared<Session>();
  s->id = doc.at("id").get<std::string>();
  s->model_id = doc.at("model_id").get<std::string>();
  s->source_label = doc.at("source_label").get<std::size_t>();
  s->predicted_label = doc.at("predicted_label").get<std::size_t>();
  for (const auto& e : doc.at("examples")) {
    s->examples.push_back({e.at("name").get<std::string>(), load_image(e.at("image").dump()),
                           e.at("label").get<std::size_t>()});
  }
  s->datapaths = doc.at("datapaths").get<std::map<std::string, std::string>>();
  s->pattern = doc.at("pattern");
  for (const auto& m : doc.at("masks")) {
    auto mask = load_mask(m.dump());
    s->masks.emplace(mask.feature_map, std::move(mask));
  }
  s->contributions = doc.at("contributions").get<std::vector<std::string>>();
  return s;
}

json model_summary(const std::string& id, const ModelSpec& model) {
  json layers = json::array();
  for (std::size_t i = 0; i < model.layers().size(); ++i) {
    layers.push_back({{"index", i},
                      {"kind", layer_kind_name(model.layers()[i])},
                      {"output_shape", model.output_shape(i)},
                      {"feature_maps", model.layer_feature_maps(i)}});
  }
  json groups = json::array();
  for (std::size_t g = 0; g < model.layer_groups().size(); ++g) {
    const auto& group = model.layer_groups()[g];
    std::vector<std::size_t> fms;
    for (std::size_t l = group.first_layer; l <= group.last_layer; ++l) {
      for (std::size_t fm : model.layer_feature_maps(l)) fms.push_back(fm);
    }
    groups.push_back({{"index", g},
                      {"name", group.name},
                      {"first_layer", group.first_layer},
                      {"last_layer", group.last_layer},
                      {"feature_maps", fms}});
  }
  return json{{"id", id},
              {"input_shape", model.input_shape()},
              {"class_count", model.class_count()},
              {"gate_count", model.gate_count()},
              {"layers", std::move(layers)},
              {"layer_groups", std::move(groups)}};
}

std::vector<std::uint8_t> read_selection(const JsonReader& body, std::size_t size) {
  if (body.has("selected") == body.has("runs")) body.fail("expected exactly one of 'selected' or 'runs'");
  if (body.has("runs")) {
    try {
      return mask_from_runs(body.field("runs").indices(), size);
    } catch (const ValidationError& e) {
      throw ValidationError("/runs: " + std::string(e.what()));
    }
  }
  const auto r = body.field("selected");
  std::vector<std::uint8_t> sel(r.array_size());
  for (std::size_t i = 0; i < sel.size(); ++i) {
    const auto v = r.element(i);
    if (v.node().is_boolean()) {
      sel[i] = v.boolean() ? 1 : 0;
    } else {
      const std::size_t n = v.index();
      if (n > 1) v.fail("expected 0 or 1");
      sel[i] = static_cast<std::uint8_t>(n);
    }
  }
  return sel;
}

std::string random_id(const char* prefix) {
  static std::mutex mu;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mu);
  static const char* digits = "0123456789abcdef";
  std::string id = prefix;
  std::uint64_t v = rng();
  for (int i = 0; i < 16; ++i, v >>= 4) id += digits[v & 15U];
  return id;
}

}  // namespace

struct AnalysisServer::Impl {
  ServerConfig config;
  DocumentStore store;
  WorkerPool pool;
  httplib::Server http;
  std::thread thread;
  int port = -1;
  std::atomic<bool> stopping{false};

  std::mutex models_mu;
  std::map<std::string, std::shared_ptr<const ModelSpec>> models;
  std::mutex jobs_mu;
  std::map<std::string, Job> jobs;
  std::mutex sessions_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;

  explicit Impl(ServerConfig c) : config(std::move(c)), store(config.data_dir), pool(config.workers) {
    reload();
    routes();
  }

  // ---- persistence ----

  void reload() {
    for (const auto& id : store.ids("model")) {
      models[id] = std::make_shared<const ModelSpec>(load_model(*store.get("model", id)));
    }
    for (const auto& id : store.ids("session")) sessions[id] = read_session(json::parse(*store.get("session", id)));
    for (const auto& id : store.ids("job")) {
      Job job = read_job(json::parse(*store.get("job", id)));
      if (job.status == JobStatus::pending || job.status == JobStatus::running) {
        job.status = JobStatus::failed;
        job.error_code = "interrupted";
        job.error_message = "server stopped before the job finished";
        store.put("job", job.id, job_doc(job).dump());
      }
      jobs[id] = std::move(job);
    }
  }

  void persist(const Session& s) { store.put("session", s.id, session_doc(s, true).dump()); }

  // ---- lookups ----

  std::shared_ptr<const ModelSpec> model(const std::string& id) {
    std::lock_guard lock(models_mu);
    auto it = models.find(id);
    if (it == models.end()) not_found("model", id);
    return it->second;
  }

  std::shared_ptr<Session> session(const std::string& id) {
    std::lock_guard lock(sessions_mu);
    auto it = sessions.find(id);
    if (it == sessions.end()) not_found("session", id);
    return it->second;
  }

  Job job(const std::string& id) {
    std::lock_guard lock(jobs_mu);
    auto it = jobs.find(id);
    if (it == jobs.end()) not_found("job", id);
    return it->second;
  }

  Datapath datapath(const std::string& id) {
    auto bytes = store.get("datapath", id);
    if (!bytes) not_found("datapath", id);
    return load_datapath(*bytes);
  }

  // ---- jobs ----

  void set_status(const std::string& id, JobStatus status, const std::string& code = {},
                  const std::string& message = {}) {
    std::lock_guard lock(jobs_mu);
    Job& job = jobs.at(id);
    job.status = status;
    job.error_code = code;
    job.error_message = message;
    store.put("job", id, job_doc(job).dump());
  }

  /// `compute` returns the result document; `commit` applies side effects
  /// (datapath documents, session updates) before the job reports done.
  using Compute = std::function<std::string(const std::string& job_id)>;
  using Commit = std::function<void(const std::string& job_id, const std::string& result)>;

  std::string submit(const std::string& kind, json params, std::optional<std::string> session_id, Compute compute,
                     Commit commit = {}) {
    Job job;
    job.id = random_id("j");
    job.kind = kind;
    job.params = std::move(params);
    job.session_id = std::move(session_id);
    {
      std::lock_guard lock(jobs_mu);
      store.put("job", job.id, job_doc(job).dump());
      jobs[job.id] = job;
    }
    pool.submit([this, id = job.id, compute = std::move(compute), commit = std::move(commit)] {
      set_status(id, JobStatus::running);
      try {
        const std::string result = compute(id);
        store.put("result", id, result);
        if (commit) commit(id, result);
        set_status(id, JobStatus::done);
      } catch (const Error& e) {
        set_status(id, JobStatus::failed, e.code(), e.what());
      } catch (const std::exception& e) {
        set_status(id, JobStatus::failed, "internal_error", e.what());
      }
    });
    return job.id;
  }

  ExtractionObserver cancellation() {
    return [this](std::size_t, std::span<const double>) {
      if (stopping) throw Error("cancelled", "server shutting down");
    };
  }

  void refresh_pattern(Session& s, const ModelSpec& m) {
    s.pattern = nullptr;
    const auto adv = s.datapaths.find("adversarial");
    const auto src = s.datapaths.find("source");
    const auto tar = s.datapaths.find("target0");
    if (adv == s.datapaths.end() || src == s.datapaths.end() || tar == s.datapaths.end()) return;
    const auto series = diff_series(m, datapath(adv->second), datapath(src->second), datapath(tar->second));
    if (series.values.size() < 2) return;
    const std::size_t r = std::min(kDefaultPatternWindow, series.values.size() - 1);
    s.pattern = json::parse(save_pattern_report(detect_pattern(series, r)));
  }

  void attach_datapaths(const std::string& session_id, const std::vector<std::string>& names,
                        const std::vector<std::string>& ids) {
    auto s = session(session_id);
    auto m = model(s->model_id);
    std::lock_guard lock(s->mu);
    for (std::size_t i = 0; i < names.size(); ++i) s->datapaths[names[i]] = ids[i];
    refresh_pattern(*s, *m);
    persist(*s);
  }

  // ---- routes ----

  void routes() {
    http.set_default_headers({{"Access-Control-Allow-Origin", config.cors_origin}});
    http.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
      res.status = 204;
    });
    http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) {
        send(res, res.status, error_doc(res.status == 404 ? "no_route" : "http_error", "no such route"));
      }
    });

    http.Post("/models", guarded([this](const auto& req, auto& res) { post_model(req, res); }));
    http.Get(R"(/models/([^/]+))", guarded([this](const auto& req, auto& res) {
               const std::string id = req.matches[1];
               send(res, 200, model_summary(id, *model(id)));
             }));

    http.Post("/sessions", guarded([this](const auto& req, auto& res) { post_session(req, res); }));
    http.Get(R"(/sessions/([^/]+))", guarded([this](const auto& req, auto& res) {
               auto s = session(req.matches[1]);
               std::lock_guard lock(s->mu);
               send(res, 200, session_doc(*s, false));
             }));
    http.Get(R"(/sessions/([^/]+)/river)", guarded([this](const auto& req, auto& res) { get_river(req, res); }));
    http.Get(R"(/sessions/([^/]+)/layers/(\d+)/treemap)",
             guarded([this](const auto& req, auto& res) { get_treemap(req, res); }));
    http.Get(R"(/sessions/([^/]+)/layers/(\d+)/feature-maps)",
             guarded([this](const auto& req, auto& res) { get_feature_maps(req, res); }));
    http.Put(R"(/sessions/([^/]+)/masks/(\d+))", guarded([this](const auto& req, auto& res) { put_mask(req, res); }));
    http.Get(R"(/sessions/([^/]+)/masks/(\d+))", guarded([this](const auto& req, auto& res) { get_mask(req, res); }));
    http.Get(R"(/activations/([^/]+)/([^/]+)/(\d+))",
             guarded([this](const auto& req, auto& res) { get_activation(req, res); }));
    http.Get(R"(/datapaths/([^/]+))", guarded([this](const auto& req, auto& res) {
               const std::string id = req.matches[1];
               auto bytes = store.get("datapath", id);
               if (!bytes) not_found("datapath", id);
               send(res, 200, *bytes);
             }));

    http.Post("/jobs/extract", guarded([this](const auto& req, auto& res) { post_extract(req, res); }));
    http.Post("/jobs/extract-constrained",
              guarded([this](const auto& req, auto& res) { post_extract_constrained(req, res); }));
    http.Post("/jobs/contribution", guarded([this](const auto& req, auto& res) { post_contribution(req, res); }));
    http.Post("/jobs/attack", guarded([this](const auto& req, auto& res) { post_attack(req, res); }));
    http.Get(R"(/jobs/([^/]+))", guarded([this](const auto& req, auto& res) {
               send(res, 200, job_doc(job(req.matches[1])));
             }));
    http.Get(R"(/jobs/([^/]+)/result)", guarded([this](const auto& req, auto& res) {
               const Job j = job(req.matches[1]);
               if (j.status == JobStatus::failed) {
                 conflict("job_failed", "job " + j.id + " failed: " + j.error_message);
               }
               if (j.status != JobStatus::done) {
                 conflict("job_not_done", "job " + j.id + " is " + status_name(j.status));
               }
               send(res, 200, *store.get("result", j.id));
             }));
  }

  void post_model(const httplib::Request& req, httplib::Response& res) {
    auto m = std::make_shared<const ModelSpec>(load_model(req.body));
    const std::string id = model_id(*m);
    bool created = false;
    {
      std::lock_guard lock(models_mu);
      if (!models.contains(id)) {
        store.put("model", id, save_model(*m));
        models[id] = m;
        created = true;
      }
    }
    send(res, created ? 201 : 200, model_summary(id, *m));
  }

  void post_session(const httplib::Request& req, httplib::Response& res) {
    const json doc = parse_body(req);
    const JsonReader body(doc, "");
    const std::string mid = body.field("model_id").string();
    auto m = model(mid);
    auto s = std::make_shared<Session>();
    s->id = random_id("s");
    s->model_id = mid;
    auto add = [&](const std::string& name, const JsonReader& r) {
      Tensor x = read_image(r);
      check_input(*m, x, r.path());
      const std::size_t label = argmax(forward(*m, x).probabilities);
      s->examples.push_back({name, std::move(x), label});
    };
    add("adversarial", body.field("adversarial"));
    add("source", body.field("source"));
    const auto targets = body.field("targets");
    if (targets.array_size() == 0) targets.fail("expected at least one target");
    for (std::size_t i = 0; i < targets.array_size(); ++i) add("target" + std::to_string(i), targets.element(i));
    s->predicted_label = s->examples[0].label;
    s->source_label = s->examples[1].label;
    if (body.has("source_label")) {
      s->source_label = body.field("source_label").index();
      if (s->source_label >= m->class_count()) body.field("source_label").fail("label out of range");
    }
    {
      std::lock_guard lock(sessions_mu);
      persist(*s);
      sessions[s->id] = s;
    }
    send(res, 201, session_doc(*s, false));
  }


  void post_extract(const httplib::Request& req, httplib::Response& res) {
    const json doc = parse_body(req);
    const JsonReader body(doc, "");
    const ExtractionParams params = read_extraction_params(body);
    std::shared_ptr<const ModelSpec> m;
    Tensor x;
    std::string ref;
    std::optional<std::string> sid;
    if (body.has("session_id")) {
      sid = body.field("session_id").string();
      auto s = session(*sid);
      m = model(s->model_id);
      ref = body.has("example") ? body.field("example").string() : "adversarial";
      std::lock_guard lock(s->mu);
      const Example* e = s->example(ref);
      if (!e) not_found("example", ref);
      x = e->image;
    } else {
      m = model(body.field("model_id").string());
      x = read_image(body.field("image"));
      check_input(*m, x, "/image");
      if (body.has("example_ref")) ref = body.field("example_ref").string();
    }
    const std::string id = submit(
        "extract", doc, sid,
        [this, m, x, params, ref](const std::string&) {
          return save_datapath(extract_datapath(*m, x, params, ref, cancellation()));
        },
        [this, sid, ref](const std::string& job_id, const std::string& result) {
          store.put("datapath", job_id, result);
          if (sid) attach_datapaths(*sid, {ref}, {job_id});
        });
    send(res, 202, job_doc(job(id)));
  }

  void post_extract_constrained(const httplib::Request& req, httplib::Response& res) {
    const json doc = parse_body(req);
    const JsonReader body(doc, "");
    const ExtractionParams params = read_extraction_params(body);
    std::shared_ptr<const ModelSpec> m;
    std::vector<Tensor> images;
    std::vector<std::string> refs;
    std::optional<std::string> sid;
    if (body.has("session_id")) {
      sid = body.field("session_id").string();
      auto s = session(*sid);
      m = model(s->model_id);
      std::lock_guard lock(s->mu);
      for (const auto& e : s->examples) {
        images.push_back(e.image);
        refs.push_back(e.name);
      }
    } else {
      m = model(body.field("model_id").string());
      const auto ex = body.field("examples");
      if (ex.array_size() == 0) ex.fail("expected at least one example");
      for (std::size_t i = 0; i < ex.array_size(); ++i) {
        images.push_back(read_image(ex.element(i)));
        check_input(*m, images.back(), ex.element(i).path());
      }
      if (body.has("example_refs")) {
        const auto r = body.field("example_refs");
        if (r.array_size() != images.size()) r.fail("expected one ref per example");
        for (std::size_t i = 0; i < images.size(); ++i) refs.push_back(r.element(i).string());
      } else {
        refs.assign(images.size(), "");
      }
    }
    const std::string id = submit(
        "extract_constrained", doc, sid,
        [m, images, params, refs](const std::string& job_id) {
          const auto dps = extract_constrained(*m, images, params, refs);
          json out{{"datapath_ids", json::array()}, {"datapaths", json::array()}};
          for (std::size_t i = 0; i < dps.size(); ++i) {
            out["datapath_ids"].push_back(job_id + "-" + std::to_string(i));
            out["datapaths"].push_back(json::parse(save_datapath(dps[i])));
          }
          return out.dump();
        },
        [this, sid, refs](const std::string&, const std::string& result) {
          const json out = json::parse(result);
          std::vector<std::string> ids;
          for (std::size_t i = 0; i < out["datapaths"].size(); ++i) {
            ids.push_back(out["datapath_ids"][i].get<std::string>());
            store.put("datapath", ids.back(), out["datapaths"][i].dump());
          }
          if (sid) attach_datapaths(*sid, refs, ids);
        });
    send(res, 202, job_doc(job(id)));
  }

  void post_contribution(const httplib::Request& req, httplib::Response& res) {
    const json doc = parse_body(req);
    const JsonReader body(doc, "");
    const ExtractionParams params = read_extraction_params(body);
    const std::string sid = body.field("session_id").string();
    auto s = session(sid);
    auto m = model(s->model_id);
    const auto target_field = body.field("target_feature_map");
    const std::size_t target = target_field.index();
    if (target >= m->gate_count()) target_field.fail("feature map out of range");
    const std::size_t target_layer = m->feature_map(target).layer;
    if (std::none_of(m->gated_layers().begin(), m->gated_layers().end(),
                     [&](std::size_t l) { return l < target_layer; })) {
      throw ValidationError("feature map " + std::to_string(target) + " has no predecessors");
    }
    std::optional<NeuronMask> mask;
    if (body.has("mask")) {
      mask = NeuronMask{target, m->feature_map_shape(target), {}};
      mask->selected = read_selection(body.field("mask"), shape_size(mask->shape));
      mask->validate(*m);
    }
    std::vector<Tensor> images;
    {
      std::lock_guard lock(s->mu);
      if (!mask && body.has("area") && body.field("area").boolean()) {
        auto it = s->masks.find(target);
        if (it == s->masks.end()) throw ValidationError("no mask stored for feature map " + std::to_string(target));
        mask = it->second;
      }
      if (body.has("examples")) {
        const auto ex = body.field("examples");
        if (ex.array_size() == 0) ex.fail("expected at least one example");
        for (std::size_t i = 0; i < ex.array_size(); ++i) {
          const std::string name = ex.element(i).string();
          const Example* e = s->example(name);
          if (!e) not_found("example", name);
          images.push_back(e->image);
        }
      } else {
        for (const auto& e : s->examples) images.push_back(e.image);
      }
    }
    const std::string id = submit(
        "contribution", doc, sid,
        [m, images, target, mask, params](const std::string&) {
          return save_contribution(mask ? contribution_area(*m, images, target, *mask, params)
                                        : contribution_whole(*m, images, target, params));
        },
        [this, s](const std::string& job_id, const std::string&) {
          std::lock_guard lock(s->mu);
          s->contributions.push_back(job_id);
          persist(*s);
        });
    send(res, 202, job_doc(job(id)));
  }

  void post_attack(const httplib::Request& req, httplib::Response& res) {
    const json doc = parse_body(req);
    const JsonReader body(doc, "");
    const AttackParams params = read_attack_params(body);
    auto m = model(body.field("model_id").string());
    Tensor x = read_image(body.field("image"));
    check_input(*m, x, "/image");
    const auto label_field = body.field("label");
    const std::size_t label = label_field.index();
    if (label >= m->class_count()) label_field.fail("label out of range");
    const std::string id = submit("attack", doc, std::nullopt, [this, m, x, label, params](const std::string&) {
      const Tensor adv = mi_fgsm(*m, x, label, params, [this](const Tensor&) {
        if (stopping) throw Error("cancelled", "server shutting down");
      });
      const auto probs = forward(*m, adv).probabilities;
      const std::size_t adv_label = argmax(probs);
      return json{{"image", json::parse(save_image(adv))},
                  {"source_label", label},
                  {"adversarial_label", adv_label},
                  {"success", adv_label != label},
                  {"probabilities", probs}}
          .dump();
    });
    send(res, 202, job_doc(job(id)));
  }

  /// Ungated forward pass of one session example; caller holds the session
  /// lock.
  const ForwardResult& activations(Session& s, const ModelSpec& m, const std::string& name) {
    auto it = s.activations.find(name);
    if (it != s.activations.end()) return it->second;
    const Example* e = s.example(name);
    if (!e) not_found("example", name);
    return s.activations.emplace(name, forward(m, e->image)).first->second;
  }

  /// Adversarial, source and target datapaths; caller holds the session lock.
  std::array<Datapath, 3> triplet_datapaths(const Session& s, const std::string& target) {
    if (!s.example(target)) not_found("example", target);
    std::array<Datapath, 3> out;
    const std::string names[] = {"adversarial", "source", target};
    for (std::size_t i = 0; i < 3; ++i) {
      auto it = s.datapaths.find(names[i]);
      if (it == s.datapaths.end()) {
        conflict("missing_datapaths",
                 "session " + s.id + " has no datapath for example '" + names[i] + "'; run an extraction job first");
      }
      out[i] = datapath(it->second);
    }
    return out;
  }

  std::size_t group_index(const ModelSpec& m, const std::string& text) {
    const std::size_t g = path_index(text);
    if (g >= m.layer_groups().size()) not_found("layer_group", text);
    return g;
  }

  void get_river(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    auto m = model(s->model_id);
    const std::string target = "target" + std::to_string(query_index(req, "target", 0));
    const double width = query_number(req, "width", 800.0);
    const double height = query_number(req, "height", 300.0);
    std::lock_guard lock(s->mu);
    const auto [adv, src, tar] = triplet_datapaths(*s, target);
    const GroupDistances d = group_distances(*m, adv, src, tar);
    if (d.groups.empty()) throw ValidationError("model has no layer group with gated feature maps");
    const double scale = query_number(req, "scale", default_river_scale(d.source_target, height));
    const Rect canvas{0.0, 0.0, width, height};
    json doc = json::parse(save_river(
        river_layout(d.source_target, d.adversarial_source, d.adversarial_target, canvas, scale, d.names)));
    doc["session_id"] = s->id;
    doc["target_example"] = target;
    doc["groups"] = d.groups;
    doc["canvas"] = {{"x", 0.0}, {"y", 0.0}, {"w", width}, {"h", height}};
    doc["scale"] = scale;
    doc["distances"] = {{"source_target", d.source_target},
                        {"adversarial_source", d.adversarial_source},
                        {"adversarial_target", d.adversarial_target}};
    doc["pattern"] = s->pattern;
    send(res, 200, doc);
  }

  void get_treemap(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    auto m = model(s->model_id);
    const std::size_t g = group_index(*m, req.matches[2]);
    const auto fms = group_feature_maps(*m, g);
    if (fms.empty()) throw ValidationError("layer group " + std::to_string(g) + " has no gated feature maps");
    const std::string target = "target" + std::to_string(query_index(req, "target", 0));
    const Rect canvas{0.0, 0.0, query_number(req, "width", 400.0), query_number(req, "height", 400.0)};
    std::lock_guard lock(s->mu);
    const auto dps = triplet_datapaths(*s, target);
    const std::vector<std::string> names{"adversarial", "source", "target"};
    const auto sets = group_sets(*m, dps, names, g);
    const SetRelation rel = set_relations(sets);
    json doc;
    if (rel.regions.empty()) {
      doc = {{"canvas", {{"x", canvas.x}, {"y", canvas.y}, {"w", canvas.w}, {"h", canvas.h}}},
             {"cells", json::array()},
             {"objective", 0.0}};
    } else {
      doc = json::parse(save_treemap(treemap_layout(rel, canvas), rel));
    }
    doc["session_id"] = s->id;
    doc["group"] = g;
    doc["target_example"] = target;
    doc["set_ids"] = rel.set_ids;
    doc["feature_maps"] = fms;
    send(res, 200, doc);
  }

  void get_feature_maps(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    auto m = model(s->model_id);
    const std::size_t g = group_index(*m, req.matches[2]);
    const auto fms = group_feature_maps(*m, g);
    const std::string encoding = req.has_param("encoding") ? req.get_param_value("encoding") : "activation_diff";
    json entries = json::array();
    json doc{{"session_id", s->id}, {"group", g}, {"encoding", encoding}};
    std::lock_guard lock(s->mu);
    if (encoding == "activation_diff") {
      const std::string target = "target" + std::to_string(query_index(req, "target", 0));
      const auto& a = activations(*s, *m, "adversarial");
      const auto& b = activations(*s, *m, "source");
      const auto& c = activations(*s, *m, target);
      std::map<std::string, Datapath> dps;
      for (const auto& [name, id] : s->datapaths) dps.emplace(name, datapath(id));
      for (std::size_t fm : fms) {
        const double va = activation_stats(a, fm), vb = activation_stats(b, fm), vc = activation_stats(c, fm);
        json gates = json::object();
        for (const auto& [name, dp] : dps) gates[name] = dp.gates[fm];
        entries.push_back({{"id", fm},
                           {"layer", m->feature_map(fm).layer},
                           {"channel", m->feature_map(fm).channel},
                           {"adversarial", va},
                           {"source", vb},
                           {"target", vc},
                           {"diff_source", activation_diff(va, vb)},
                           {"diff_target", activation_diff(va, vc)},
                           {"gates", std::move(gates)}});
      }
      doc["target_example"] = target;
    } else if (encoding == "contribution") {
      std::string jid;
      if (req.has_param("job")) {
        jid = req.get_param_value("job");
        if (std::find(s->contributions.begin(), s->contributions.end(), jid) == s->contributions.end()) {
          not_found("contribution", jid);
        }
      } else {
        if (s->contributions.empty()) conflict("no_contribution", "session " + s->id + " has no contribution result");
        jid = s->contributions.back();
      }
      const ContributionResult result = load_contribution(*store.get("result", jid));
      for (std::size_t fm : fms) {
        json entry{{"id", fm}, {"layer", m->feature_map(fm).layer}, {"channel", m->feature_map(fm).channel},
                   {"value", nullptr}, {"per_example", nullptr}};
        auto it = std::find(result.feature_maps.begin(), result.feature_maps.end(), fm);
        if (it != result.feature_maps.end()) {
          const std::size_t k = static_cast<std::size_t>(it - result.feature_maps.begin());
          entry["value"] = result.values[k];
          json per = json::array();
          for (const auto& v : result.per_example) per.push_back(v[k]);
          entry["per_example"] = std::move(per);
        }
        entries.push_back(std::move(entry));
      }
      doc["job_id"] = jid;
      doc["target_feature_map"] = result.target_feature_map;
      doc["area"] = result.mask.has_value();
    } else {
      throw ValidationError("unknown encoding '" + encoding + "' (expected activation_diff or contribution)");
    }
    doc["feature_maps"] = std::move(entries);
    send(res, 200, doc);
  }

  std::size_t feature_map_index(const ModelSpec& m, const std::string& text) {
    const std::size_t fm = path_index(text);
    if (fm >= m.gate_count()) not_found("feature_map", text);
    return fm;
  }

  static json mask_response(const NeuronMask& mask) {
    json out = json::parse(save_mask(mask));
    out["count"] = mask.count();
    return out;
  }

  void put_mask(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    auto m = model(s->model_id);
    const std::size_t fm = feature_map_index(*m, req.matches[2]);
    const json doc = parse_body(req);
    const JsonReader body(doc, "");
    NeuronMask mask{fm, m->feature_map_shape(fm), {}};
    if (body.has("shape") && body.field("shape").indices() != mask.shape) {
      throw ValidationError("mask shape does not match feature map shape " + shape_to_string(mask.shape));
    }
    mask.selected = read_selection(body, shape_size(mask.shape));
    mask.validate(*m);
    std::lock_guard lock(s->mu);
    s->masks[fm] = mask;
    persist(*s);
    send(res, 200, mask_response(mask));
  }

  void get_mask(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    std::lock_guard lock(s->mu);
    auto it = s->masks.find(path_index(req.matches[2]));
    if (it == s->masks.end()) not_found("mask", req.matches[2]);
    send(res, 200, mask_response(it->second));
  }

  void get_activation(const httplib::Request& req, httplib::Response& res) {
    auto s = session(req.matches[1]);
    auto m = model(s->model_id);
    const std::string name = req.matches[2];
    const std::size_t fm = feature_map_index(*m, req.matches[3]);
    std::lock_guard lock(s->mu);
    const Tensor& grid = activations(*s, *m, name).activations[fm];
    send(res, 200,
         json{{"session_id", s->id},
              {"example", name},
              {"feature_map", fm},
              {"shape", grid.shape()},
              {"data", grid.values()},
              {"max", activation_stats(activations(*s, *m, name), fm)}});
  }
};

AnalysisServer::AnalysisServer(ServerConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

AnalysisServer::~AnalysisServer() { stop(); }

int AnalysisServer::bind() {
  if (impl_->port >= 0) return impl_->port;
  const auto& c = impl_->config;
  if (c.port == 0) {
    impl_->port = impl_->http.bind_to_any_port(c.host);
  } else if (impl_->http.bind_to_port(c.host, c.port)) {
    impl_->port = c.port;
  }
  if (impl_->port < 0) throw Error("io_error", "cannot listen on " + c.host + ":" + std::to_string(c.port));
  return impl_->port;
}

void AnalysisServer::run() {
  bind();
  impl_->http.listen_after_bind();
}

void AnalysisServer::start() {
  bind();
  impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
  impl_->http.wait_until_ready();
}

void AnalysisServer::stop() {
  impl_->stopping = true;
  impl_->http.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
  impl_->pool.shutdown();
}

int AnalysisServer::port() const { return impl_->port; }

}  // namespace aevis
