#include "doctest.h"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>
#include <unistd.h>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

const fs::path& scratch() {
  static const fs::path dir = [] {
    const fs::path p = fs::temp_directory_path() / ("attnwb_cli_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
  }();
  return dir;
}

struct Outcome {
  int code = -1;
  std::string err;
};

Outcome cli(const std::string& args) {
  const fs::path err = scratch() / "stderr.txt";
  const std::string cmd = std::string(ATTNWB_CLI_PATH) + " " + args + " >/dev/null 2>" + err.string();
  const int status = std::system(cmd.c_str());
  std::ifstream in(err);
  std::stringstream ss;
  ss << in.rdbuf();
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, ss.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A small but complete run: synthetic data, 1-layer model, a few steps.
fs::path tiny_config() {
  const fs::path p = scratch() / "tiny.json";
  if (!fs::exists(p)) {
    json c = {{"seed", 4},
              {"model", {{"n_layers", 1}, {"n_heads", 2}, {"d_model", 8}, {"d_ff", 16}, {"dropout", 0.1}}},
              {"data", {{"synth", {{"n_docs", 24}, {"sents_per_doc", 4}, {"tokens_per_sent", 5}, {"vocab_size", 40}}},
                        {"synth_valid", 6},
                        {"synth_test", 6}}},
              {"train", {{"steps", 12}, {"validate_every", 4}, {"batch_size", 4}, {"peak_lr", 0.05}}}};
    std::ofstream(p) << c.dump(2);
  }
  return p;
}

std::string base_args(const std::string& sub, const std::string& out) {
  return sub + " -c " + tiny_config().string() + " -o " + (scratch() / out).string();
}

}  // namespace

TEST_CASE("exit codes") {
  CHECK(cli("").code != 0);
  CHECK(cli("frobnicate").code == 2);
  const auto bad_key = cli(base_args("train", "bad") + " --set train.stepz=3");
  CHECK(bad_key.code == 2);
  CHECK(bad_key.err.find("train.stepz") != std::string::npos);
  const auto bad_model = cli(base_args("train", "bad2") + " --set model.d_model=7");
  CHECK(bad_model.code == 2);
  CHECK(bad_model.err.find("model.") != std::string::npos);
  const auto missing = cli(base_args("eval", "bad3") + " --checkpoint " + (scratch() / "nope.ckpt").string());
  CHECK(missing.code == 1);
  CHECK(missing.err.find('\n') == missing.err.size() - 1);
  CHECK(cli(base_args("importance", "bad4") + " --checkpoint x --method lrp").code != 0);
}

TEST_CASE("pipeline and determinism") {
  REQUIRE(cli(base_args("train", "run_a")).code == 0);
  REQUIRE(cli(base_args("train", "run_b")).code == 0);
  const fs::path a = scratch() / "run_a", b = scratch() / "run_b";
  for (const char* f : {"run.json", "best.ckpt", "config.json"}) CHECK(slurp(a / f) == slurp(b / f));
  CHECK(fs::exists(a / "timing.json"));
  const json run = json::parse(slurp(a / "run.json"));
  CHECK(run.at("points").size() == 3);

  const std::string ckpt = " --checkpoint " + (a / "best.ckpt").string();
  for (const char* method : {"loo", "sensitivity", "taylor"}) {
    const std::string m = std::string(" --method ") + method;
    REQUIRE(cli(base_args("importance", std::string("imp1_") + method) + ckpt + m).code == 0);
    REQUIRE(cli(base_args("importance", std::string("imp2_") + method) + ckpt + m).code == 0);
    const std::string x = slurp(scratch() / (std::string("imp1_") + method) / "importance.json");
    CHECK(x == slurp(scratch() / (std::string("imp2_") + method) / "importance.json"));
    CHECK(json::parse(x).at("heads").size() == 2);
  }

  const fs::path pattern = scratch() / "matching_token.json";
  std::ofstream(pattern) << R"({"name": "matching_token", "kind": "matching_token"})";
  const std::string pat = " --pattern " + pattern.string();
  REQUIRE(cli(base_args("gr", "gr1") + ckpt + pat).code == 0);
  REQUIRE(cli(base_args("gr", "gr2") + ckpt + pat).code == 0);
  const std::string rel = slurp(scratch() / "gr1" / "relevance.json");
  CHECK(rel == slurp(scratch() / "gr2" / "relevance.json"));
  for (const auto& h : json::parse(rel).at("heads"))
    for (const char* k : {"gr", "t", "df", "p", "reject"}) CHECK(h.contains(k));

  REQUIRE(cli(base_args("select", "sel") + " --report " + (scratch() / "gr1" / "relevance.json").string()).code == 0);
  CHECK(json::parse(slurp(scratch() / "sel" / "selection.json")).contains("kept"));

  for (const char* blk : {"", " --blocking"}) {
    REQUIRE(cli(base_args("eval", "ev1") + ckpt + blk).code == 0);
    REQUIRE(cli(base_args("eval", "ev2") + ckpt + blk).code == 0);
    CHECK(slurp(scratch() / "ev1" / "eval.json") == slurp(scratch() / "ev2" / "eval.json"));
    CHECK(slurp(scratch() / "ev1" / "predictions.jsonl") == slurp(scratch() / "ev2" / "predictions.jsonl"));
  }
  CHECK(json::parse(slurp(scratch() / "ev1" / "eval.json")).at("blocking") == true);

  REQUIRE(cli(base_args("inject-pal", "pal") + ckpt + " --set pal.d_pal=4 --set pal.n_heads=2").code == 0);
  CHECK(json::parse(slurp(scratch() / "pal" / "pal_importance.json")).at("heads").size() == 4);

  REQUIRE(cli(base_args("synth", "data")).code == 0);
  for (const char* f : {"train.jsonl", "valid.jsonl", "test.jsonl", "vocab.json", "config.json"})
    CHECK(fs::exists(scratch() / "data" / f));
  const std::string file_args = " --set data.train=" + (scratch() / "data" / "train.jsonl").string() +
                                " --set data.valid=" + (scratch() / "data" / "valid.jsonl").string() +
                                " --set data.test=" + (scratch() / "data" / "test.jsonl").string() +
                                " --set data.vocab=" + (scratch() / "data" / "vocab.json").string();
  REQUIRE(cli(base_args("train", "from_files") + file_args).code == 0);
  CHECK(slurp(scratch() / "from_files" / "run.json") == slurp(a / "run.json"));
}

TEST_CASE("experiment suites") {
  const std::string quick = " --set train.steps=4 --set train.validate_every=4 --set model.n_heads=4";
  REQUIRE(cli(base_args("ablate", "abl") + quick).code == 0);
  const json abl = json::parse(slurp(scratch() / "abl" / "ablation.json"));
  CHECK(abl.at("rows").size() == 8);
  REQUIRE(cli(base_args("compare", "cmp") + quick + " --set pal.d_pal=4 --set pal.n_heads=2").code == 0);
  const json cmp = json::parse(slurp(scratch() / "cmp" / "comparison.json"));
  REQUIRE(cmp.at("rows").size() == 3);
  for (const auto& r : cmp.at("rows")) {
    CHECK(r.contains("no_blocking"));
    CHECK(r.contains("trigram_blocking"));
  }
}
