#include "attnwb/service.hpp"

#include "attnwb/importance.hpp"
#include "attnwb/json_io.hpp"
#include "attnwb/patterns.hpp"

#include <httplib.h>

#include <atomic>
#include <map>
#include <mutex>
#include <thread>

namespace attnwb {

namespace {

struct Job {
  std::string id;
  std::string pattern;
  std::string status = "running";
  json result;
  std::string error;
};

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void fail(httplib::Response& res, int status, const std::string& message) {
  send(res, status, json{{"error", message}});
}

int int_param(const httplib::Request& req, const char* name) {
  if (!req.has_param(name)) throw std::invalid_argument(std::string("missing parameter '") + name + "'");
  const std::string v = req.get_param_value(name);
  std::size_t used = 0;
  const int out = std::stoi(v, &used);
  if (used != v.size()) throw std::invalid_argument(std::string("parameter '") + name + "' must be an integer");
  return out;
}

}  // namespace

struct Service::Impl {
  RunConfig config;
  Model model;
  Splits splits;
  const Dataset* split = nullptr;
  httplib::Server server;
  std::thread server_thread;

  std::mutex mutex;  // guards everything below
  std::map<std::string, ForwardTrace> traces;
  std::map<std::string, json> importance_cache;
  std::vector<PatternSpec> patterns;
  json injection = json{{"patterns", {{"specs", json::array()}, {"assignments", json::array()}}}};
  std::map<std::string, Job> jobs;
  std::thread job_thread;
  bool job_running = false;
  int job_counter = 0;

  explicit Impl(RunConfig c) : config(std::move(c)) {
    if (config.service.checkpoint.empty()) throw Error("service.checkpoint is not set");
    model = model::load_checkpoint(config.service.checkpoint);
    splits = config::load_data(config);
    split = &splits.get(config.service.split);
    if (split->docs.empty()) throw Error("split '" + config.service.split + "' is empty");
    if (static_cast<int>(splits.vocab->size()) != model.config.vocab_size)
      throw Error("dataset vocabulary does not match the checkpoint");
    patterns = config.pattern_specs;
    if (patterns.empty()) patterns = trainer::injection_patterns();
    if (std::filesystem::exists(config.service.injection_path))
      injection = config::read_json(config.service.injection_path);
    routes();
  }

  ~Impl() {
    server.stop();
    if (server_thread.joinable()) server_thread.join();
    if (job_thread.joinable()) job_thread.join();
  }

  const PatternSpec* find_pattern(const std::string& name) {
    for (const auto& p : patterns)
      if (p.name == name) return &p;
    return nullptr;
  }

  const Document* find_doc(const std::string& id) {
    for (const Dataset* ds : std::initializer_list<const Dataset*>{split, &splits.valid, &splits.test, &splits.train})
      for (const auto& d : ds->docs)
        if (d.id == id) return &d;
    return nullptr;
  }

  json head_list() const {
    json out = json::array();
    for (const auto& h : model.heads()) out.push_back(h);
    return out;
  }

  void routes() {
    auto guard = [](auto fn) {
      return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
          fn(req, res);
        } catch (const json::exception& e) {
          fail(res, 400, e.what());
        } catch (const std::invalid_argument& e) {
          fail(res, 400, e.what());
        } catch (const std::out_of_range& e) {
          fail(res, 400, e.what());
        } catch (const ConfigError& e) {
          fail(res, 400, e.what());
        } catch (const Error& e) {
          fail(res, 400, e.what());
        }
      };
    };

    server.Get("/api/info", guard([this](const httplib::Request&, httplib::Response& res) {
      send(res, 200, json{{"checkpoint", config.service.checkpoint},
                          {"model", model.config},
                          {"pal", model.pal ? json(*model.pal) : json(nullptr)},
                          {"assignments", model.assignments},
                          {"heads", head_list()},
                          {"split", split->split},
                          {"n_docs", split->docs.size()},
                          {"vocab_size", splits.vocab->size()},
                          {"importance_methods", {"leave_one_out", "sensitivity", "taylor"}}});
    }));

    server.Get("/api/docs", guard([this](const httplib::Request& req, httplib::Response& res) {
      const std::string name = req.has_param("split") ? req.get_param_value("split") : split->split;
      const Dataset& ds = splits.get(name);
      json docs = json::array();
      for (const auto& d : ds.docs)
        docs.push_back({{"id", d.id}, {"n_sentences", d.sentences.size()}, {"length", d.length()}});
      send(res, 200, json{{"split", name}, {"docs", docs}});
    }));

    server.Get(R"(/api/doc/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      const Document* d = find_doc(req.matches[1]);
      if (!d) return fail(res, 404, "unknown document '" + std::string(req.matches[1]) + "'");
      const Vocab& v = *splits.vocab;
      json tokens = json::array();
      for (int i = 0; i < d->length(); ++i) tokens.push_back(v.token(d->flat[static_cast<std::size_t>(i)]));
      json spans = json::array();
      for (const auto& s : d->spans) spans.push_back({s.start, s.end});
      json sentences = json::array();
      for (const auto& s : d->sentences) sentences.push_back(corpus::decode(s, v));
      json summary = json::array();
      for (const auto& s : d->gold_summary) summary.push_back(corpus::decode(s, v));
      const ForwardTrace& tr = trace(*d);
      json scores = json::array();
      for (double z : tr.logits) scores.push_back(1.0 / (1.0 + std::exp(-z)));
      send(res, 200, json{{"id", d->id}, {"tokens", tokens}, {"spans", spans}, {"sentences", sentences},
                          {"summary", summary}, {"oracle_labels", d->oracle_labels}, {"scores", scores}});
    }));

    server.Get("/api/importance", guard([this](const httplib::Request& req, httplib::Response& res) {
      const auto method = importance::method_from_string(
          req.has_param("method") ? req.get_param_value("method") : config.service.importance_method);
      const std::string key = importance::to_string(method);
      std::unique_lock lock(mutex);
      auto it = importance_cache.find(key);
      if (it == importance_cache.end()) {
        lock.unlock();
        const auto rep = importance::estimate(model, *split, method, config.train.workers);
        json body = importance::report_json(rep);
        const int L = model.config.n_layers;
        json enc = json::array(), pal = json::array();
        for (int l = 0; l < L; ++l) {
          json er = json::array(), pr = json::array();
          for (const auto& h : rep.heads) {
            if (h.head.layer != l) continue;
            (h.head.family == HeadFamily::encoder ? er : pr).push_back(h.normalized);
          }
          enc.push_back(er);
          pal.push_back(pr);
        }
        body["matrix"] = {{"encoder", enc}, {"pal", model.pal ? pal : json::array()}};
        lock.lock();
        it = importance_cache.emplace(key, std::move(body)).first;
      }
      send(res, 200, it->second);
    }));

    server.Get("/api/attention", guard([this](const httplib::Request& req, httplib::Response& res) {
      if (!req.has_param("doc")) return fail(res, 400, "missing parameter 'doc'");
      const Document* d = find_doc(req.get_param_value("doc"));
      if (!d) return fail(res, 404, "unknown document");
      HeadId id{int_param(req, "layer"), int_param(req, "head"),
                req.has_param("family") ? family_from_string(req.get_param_value("family")) : HeadFamily::encoder};
      if (!model.has_head(id)) return fail(res, 404, "unknown head " + to_string(id));
      const ForwardTrace& tr = trace(*d);
      const Mat& a = tr.attention(id);
      json rows = json::array();
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        json r = json::array();
        for (Eigen::Index j = 0; j < a.cols(); ++j) r.push_back(a(i, j));
        rows.push_back(std::move(r));
      }
      json tokens = json::array();
      for (int i = 0; i < tr.length; ++i) tokens.push_back(splits.vocab->token(tr.tokens[static_cast<std::size_t>(i)]));
      json head = id;
      send(res, 200, json{{"doc", d->id}, {"head", head}, {"tokens", tokens}, {"alpha", rows}});
    }));

    server.Get("/api/patterns", guard([this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mutex);
      send(res, 200, json{{"patterns", patterns}});
    }));

    server.Post("/api/patterns", guard([this](const httplib::Request& req, httplib::Response& res) {
      const PatternSpec spec = json::parse(req.body).get<PatternSpec>();
      std::lock_guard lock(mutex);
      if (const PatternSpec* existing = find_pattern(spec.name)) {
        if (*existing == spec) return send(res, 200, json{{"pattern", spec}});
        return fail(res, 409, "pattern '" + spec.name + "' already registered with a different definition");
      }
      patterns.push_back(spec);
      send(res, 201, json{{"pattern", spec}});
    }));

    server.Post(R"(/api/patterns/([^/]+)/evaluate)", guard([this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex);
      const PatternSpec* p = find_pattern(req.matches[1]);
      if (!p) return fail(res, 404, "unknown pattern '" + std::string(req.matches[1]) + "'");
      if (job_running) return fail(res, 409, "an evaluation job is already running");
      if (job_thread.joinable()) job_thread.join();
      const std::string id = "job-" + std::to_string(++job_counter);
      jobs[id] = Job{id, p->name, "running", nullptr, ""};
      job_running = true;
      job_thread = std::thread([this, id, spec = *p] { run_job(id, spec); });
      send(res, 202, json{{"job", id}});
    }));

    server.Get(R"(/api/jobs/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mutex);
      auto it = jobs.find(req.matches[1]);
      if (it == jobs.end()) return fail(res, 404, "unknown job");
      const Job& j = it->second;
      json body = {{"id", j.id}, {"pattern", j.pattern}, {"status", j.status}};
      if (j.status == "done") body["result"] = j.result;
      if (j.status == "failed") body["error"] = j.error;
      send(res, 200, body);
    }));

    server.Get("/api/injection-config", guard([this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard lock(mutex);
      send(res, 200, json{{"path", config.service.injection_path}, {"config", injection}});
    }));

    server.Post("/api/injection-config", guard([this](const httplib::Request& req, httplib::Response& res) {
      const json body = json::parse(req.body);
      require_keys(body, {"assignments"}, "injection config");
      std::lock_guard lock(mutex);
      std::vector<HeadAssignment> assignments;
      std::vector<PatternSpec> used;
      for (const auto& a : body.at("assignments")) {
        require_keys(a, {"layer", "head", "family", "pattern"}, "assignment");
        HeadAssignment ha;
        ha.head = json{{"layer", a.at("layer")}, {"head", a.at("head")}, {"family", a.value("family", "encoder")}}.get<HeadId>();
        const json& p = a.at("pattern");
        const std::string name = p.is_string() ? p.get<std::string>() : p.at("name").get<std::string>();
        const PatternSpec* spec = find_pattern(name);
        if (!spec) return fail(res, 400, "pattern '" + name + "' is not registered");
        if (!p.is_string() && p.get<PatternSpec>() != *spec)
          return fail(res, 400, "pattern '" + name + "' differs from the registered definition");
        if (ha.head.family != HeadFamily::encoder || ha.head.layer < 0 || ha.head.layer >= model.config.n_layers ||
            ha.head.head < 0 || ha.head.head >= model.config.n_heads)
          return fail(res, 400, "invalid head " + to_string(ha.head));
        ha.pattern = *spec;
        assignments.push_back(ha);
        if (std::find(used.begin(), used.end(), *spec) == used.end()) used.push_back(*spec);
      }
      Model probe;
      probe.config = model.config;
      probe.assignments = assignments;
      probe.validate_assignments();
      injection = json{{"patterns", {{"specs", used}, {"assignments", assignments}}}};
      config::write_json(config.service.injection_path, injection);
      send(res, 200, json{{"path", config.service.injection_path}, {"config", injection}});
    }));

    server.Get("/api/runs", guard([this](const httplib::Request&, httplib::Response& res) {
      json runs = json::array();
      const auto& dir = config.service.runs_dir;
      if (!dir.empty() && std::filesystem::is_directory(dir)) {
        std::vector<std::string> ids;
        for (const auto& e : std::filesystem::directory_iterator(dir))
          if (std::filesystem::exists(e.path() / "run.json")) ids.push_back(e.path().filename().string());
        std::sort(ids.begin(), ids.end());
        for (const auto& id : ids) {
          const json run = config::read_json(std::filesystem::path(dir) / id / "run.json");
          runs.push_back({{"id", id}, {"best_step", run.value("best_step", 0)}, {"n_points", run.value("points", json::array()).size()}});
        }
      }
      send(res, 200, json{{"runs", runs}});
    }));

    server.Get(R"(/api/runs/([^/]+))", guard([this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto& dir = config.service.runs_dir;
      const auto path = std::filesystem::path(dir) / id / "run.json";
      if (dir.empty() || id == ".." || id == "." || !std::filesystem::exists(path)) return fail(res, 404, "unknown run");
      send(res, 200, config::read_json(path));
    }));
  }

  const ForwardTrace& trace(const Document& d) {
    {
      std::lock_guard lock(mutex);
      auto it = traces.find(d.id);
      if (it != traces.end()) return it->second;
    }
    ForwardTrace tr = model::forward(model, d, patterns::constraints_for(model, d), HeadGates::ones(model));
    std::lock_guard lock(mutex);
    return traces.emplace(d.id, std::move(tr)).first->second;
  }

  void run_job(const std::string& id, const PatternSpec& spec) {
    json result;
    std::string error;
    try {
      result = patterns::report_json(patterns::gr_dataset(model, *split, spec, patterns::kDefaultAlpha, config.train.workers));
    } catch (const std::exception& e) {
      error = e.what();
    }
    std::lock_guard lock(mutex);
    Job& j = jobs[id];
    if (error.empty()) {
      j.status = "done";
      j.result = std::move(result);
    } else {
      j.status = "failed";
      j.error = error;
    }
    job_running = false;
  }
};

Service::Service(RunConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Service::~Service() = default;

void Service::listen(const std::string& host, int port) {
  if (!impl_->server.listen(host, port)) throw Error("cannot listen on " + host + ":" + std::to_string(port));
}

int Service::start_background(const std::string& host) {
  const int port = impl_->server.bind_to_any_port(host);
  if (port <= 0) throw Error("cannot bind " + host);
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return port;
}

void Service::stop() {
  impl_->server.stop();
  if (impl_->server_thread.joinable()) impl_->server_thread.join();
}

}  // namespace attnwb
