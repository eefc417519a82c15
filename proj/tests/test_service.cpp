#include "doctest.h"
#include "helpers.hpp"

#include "attnwb/config.hpp"
#include "attnwb/importance.hpp"
#include "attnwb/json_io.hpp"
#include "attnwb/patterns.hpp"
#include "attnwb/service.hpp"

#include <httplib.h>

#include <chrono>
#include <fstream>
#include <sstream>
#include <thread>
#include <unistd.h>

using namespace attnwb;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Fixture {
  fs::path dir;
  RunConfig rc;
  Model model;
  Splits splits;

  Fixture() {
    dir = fs::temp_directory_path() / ("attnwb_svc_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    fs::create_directories(dir / "runs" / "r1");
    rc.seed = 3;
    rc.data.synth = SynthConfig{10, 4, 5, 40, true, 2, 128, 3};
    rc.data.synth_valid = 5;
    rc.data.synth_test = 3;
    splits = config::load_data(rc);
    rc.model = testutil::tiny_config(2, 2, 8, int(splits.vocab->size()));
    model = model::init_model(rc.model, 5);
    testutil::jitter(model, 6);
    model.assignments = {{{0, 0, HeadFamily::encoder}, patterns::matching_token()},
                         {{1, 1, HeadFamily::encoder}, patterns::relative(-1)}};
    model::save_checkpoint(model, dir / "model.ckpt");
    rc.service.checkpoint = (dir / "model.ckpt").string();
    rc.service.injection_path = (dir / "injection.json").string();
    rc.service.runs_dir = (dir / "runs").string();
    rc.train.steps = 10;
    rc.train.validate_every = 5;
    config::write_json(dir / "config.json", config::to_json(rc));
    RunLog log;
    log.points = {ValidationPoint{5, 0.7, 0.6, 0.3, 0.1, 0.2}};
    log.checkpoints = {{5, 0.6, ""}};
    log.best_step = 5;
    config::write_json(dir / "runs" / "r1" / "run.json", trainer::run_json(log));
  }
  ~Fixture() { fs::remove_all(dir); }
};

json get(httplib::Client& c, const std::string& path, int expect = 200) {
  auto r = c.Get(path);
  REQUIRE(r);
  CHECK_MESSAGE(r->status == expect, path);
  return json::parse(r->body);
}

json post(httplib::Client& c, const std::string& path, const json& body, int expect) {
  auto r = c.Post(path, body.dump(), "application/json");
  REQUIRE(r);
  CHECK_MESSAGE(r->status == expect, path);
  return json::parse(r->body);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json wait_job(httplib::Client& c, const std::string& id) {
  for (int i = 0; i < 2000; ++i) {
    json j = get(c, "/api/jobs/" + id);
    if (j.at("status") != "running") return j;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  FAIL("job did not finish");
  return {};
}

}  // namespace

TEST_CASE("service endpoints") {
  Fixture fx;
  Service svc(fx.rc);
  const int port = svc.start_background();
  httplib::Client c("127.0.0.1", port);
  const Dataset& valid = fx.splits.valid;

  SUBCASE("info and documents") {
    const json info = get(c, "/api/info");
    CHECK(info.at("heads").size() == 4);
    CHECK(info.at("n_docs") == valid.docs.size());
    CHECK(info.at("assignments").size() == 2);
    const json docs = get(c, "/api/docs");
    REQUIRE(docs.at("docs").size() == valid.docs.size());
    CHECK(get(c, "/api/docs?split=test").at("docs").size() == 3);
    get(c, "/api/docs?split=dev", 400);

    const Document& d = valid.docs[1];
    const json doc = get(c, "/api/doc/" + d.id);
    CHECK(doc.at("tokens").size() == std::size_t(d.length()));
    CHECK(doc.at("oracle_labels").get<std::vector<int>>() == d.oracle_labels);
    const auto logits = model::forward(fx.model, d, patterns::constraints_for(fx.model, d), HeadGates::ones(fx.model)).logits;
    for (std::size_t s = 0; s < logits.size(); ++s)
      CHECK(doc.at("scores")[s].get<double>() == doctest::Approx(1.0 / (1.0 + std::exp(-logits[s]))).epsilon(1e-12));
    get(c, "/api/doc/nope", 404);
  }

  SUBCASE("attention view equals the model's constrained attention") {
    const Document& d = valid.docs[0];
    const auto tr = model::forward(fx.model, d, patterns::constraints_for(fx.model, d), HeadGates::ones(fx.model));
    for (const auto& h : fx.model.heads()) {
      const json a = get(c, "/api/attention?doc=" + d.id + "&layer=" + std::to_string(h.layer) +
                                "&head=" + std::to_string(h.head) + "&family=encoder");
      const Mat& alpha = tr.attention(h);
      REQUIRE(a.at("alpha").size() == std::size_t(alpha.rows()));
      double diff = 0.0;
      for (Eigen::Index i = 0; i < alpha.rows(); ++i)
        for (Eigen::Index j = 0; j < alpha.cols(); ++j) diff = std::max(diff, std::abs(a["alpha"][i][j].get<double>() - alpha(i, j)));
      CHECK(diff == 0.0);
    }
    get(c, "/api/attention?doc=" + d.id + "&layer=5&head=0", 404);
    get(c, "/api/attention?doc=" + d.id + "&layer=x&head=0", 400);
    get(c, "/api/attention?layer=0&head=0", 400);
  }

  SUBCASE("importance") {
    for (const char* method : {"loo", "sensitivity", "taylor"}) {
      const json body = get(c, std::string("/api/importance?method=") + method);
      const auto rep = importance::estimate(fx.model, valid, importance::method_from_string(method));
      json expect = importance::report_json(rep);
      for (const char* k : {"method", "dataset", "heads"}) CHECK(body.at(k) == expect.at(k));
      CHECK(body.at("matrix").at("encoder").size() == 2);
      CHECK(body.at("matrix").at("encoder")[1][0] == expect.at("heads")[2].at("normalized"));
      CHECK(get(c, std::string("/api/importance?method=") + method).dump() == body.dump());
    }
    get(c, "/api/importance?method=lrp", 400);
  }

  SUBCASE("patterns and evaluation jobs") {
    CHECK(get(c, "/api/patterns").at("patterns").size() == 4);
    const json spec = {{"name", "prev2"}, {"kind", "relative_position"}, {"offset", -2}};
    post(c, "/api/patterns", spec, 201);
    post(c, "/api/patterns", spec, 200);
    post(c, "/api/patterns", json{{"name", "prev2"}, {"kind", "relative_position"}, {"offset", 2}}, 409);
    post(c, "/api/patterns", json{{"name", "bad"}, {"kind", "diagonal"}}, 400);
    post(c, "/api/patterns", json{{"name", "bad"}, {"kind", "matching_token"}, {"colour", 1}}, 400);
    CHECK(get(c, "/api/patterns").at("patterns").size() == 5);
    post(c, "/api/patterns/missing/evaluate", json::object(), 404);
    get(c, "/api/jobs/job-99", 404);

    const json started = post(c, "/api/patterns/matching_token/evaluate", json::object(), 202);
    const json done = wait_job(c, started.at("job"));
    REQUIRE(done.at("status") == "done");
    const auto rep = patterns::gr_dataset(fx.model, valid, patterns::matching_token());
    CHECK(done.at("result").dump() == patterns::report_json(rep).dump());

    const fs::path pfile = fx.dir / "matching_token.json";
    std::ofstream(pfile) << R"({"name": "matching_token", "kind": "matching_token"})";
    const std::string cmd = std::string(ATTNWB_CLI_PATH) + " gr -c " + (fx.dir / "config.json").string() +
                            " --checkpoint " + fx.rc.service.checkpoint + " --split valid --pattern " +
                            pfile.string() + " -o " + (fx.dir / "gr").string() + " >/dev/null 2>&1";
    REQUIRE(std::system(cmd.c_str()) == 0);
    CHECK(done.at("result").dump(2) + "\n" == slurp(fx.dir / "gr" / "relevance.json"));
  }

  SUBCASE("injection config round trip") {
    CHECK(get(c, "/api/injection-config").at("config").at("patterns").at("assignments").empty());
    const json body = {{"assignments",
                        {{{"layer", 0}, {"head", 0}, {"family", "encoder"}, {"pattern", "matching_token"}},
                         {{"layer", 1}, {"head", 1}, {"family", "encoder"},
                          {"pattern", {{"name", "intra_sentence"}, {"kind", "intra_sentence"}}}}}}};
    const json saved = post(c, "/api/injection-config", body, 200);
    CHECK(saved.at("config").at("patterns").at("assignments").size() == 2);
    CHECK(get(c, "/api/injection-config").at("config") == saved.at("config"));
    const RunConfig loaded = config::load({fx.dir / "config.json", fx.rc.service.injection_path}, {});
    REQUIRE(loaded.assignments.size() == 2);
    CHECK(loaded.assignments[0].pattern == patterns::matching_token());
    CHECK(loaded.assignments[1].head == HeadId{1, 1, HeadFamily::encoder});
    CHECK(loaded.pattern_specs.size() == 2);

    post(c, "/api/injection-config",
         json{{"assignments", {{{"layer", 0}, {"head", 0}, {"family", "encoder"}, {"pattern", "unknown"}}}}}, 400);
    post(c, "/api/injection-config",
         json{{"assignments", {{{"layer", 9}, {"head", 0}, {"family", "encoder"}, {"pattern", "matching_token"}}}}}, 400);
    post(c, "/api/injection-config",
         json{{"assignments", {{{"layer", 0}, {"head", 0}, {"family", "encoder"}, {"pattern", "matching_token"}},
                               {{"layer", 0}, {"head", 0}, {"family", "encoder"}, {"pattern", "intra_sentence"}}}}},
         400);
    CHECK(get(c, "/api/injection-config").at("config") == saved.at("config"));
  }

  SUBCASE("runs") {
    const json runs = get(c, "/api/runs");
    REQUIRE(runs.at("runs").size() == 1);
    CHECK(runs["runs"][0].at("id") == "r1");
    CHECK(runs["runs"][0].at("best_step") == 5);
    CHECK(get(c, "/api/runs/r1") == json::parse(slurp(fx.dir / "runs" / "r1" / "run.json")));
    get(c, "/api/runs/r2", 404);
  }

  svc.stop();
}

TEST_CASE("service startup errors") {
  Fixture fx;
  RunConfig rc = fx.rc;
  rc.service.checkpoint.clear();
  CHECK_THROWS(Service{rc});
  rc.service.checkpoint = (fx.dir / "missing.ckpt").string();
  CHECK_THROWS(Service{rc});
  rc = fx.rc;
  rc.data.synth.vocab_size = 30;
  CHECK_THROWS_WITH(Service{rc}, doctest::Contains("vocabulary"));
}
