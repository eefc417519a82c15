#include "attnwb/cli.hpp"

#include "attnwb/config.hpp"
#include "attnwb/importance.hpp"
#include "attnwb/inference.hpp"
#include "attnwb/json_io.hpp"
#include "attnwb/pal.hpp"
#include "attnwb/patterns.hpp"
#include "attnwb/service.hpp"
#include "attnwb/trainer.hpp"

#include <CLI11.hpp>

#include <fstream>
#include <iostream>

namespace attnwb::cli {
namespace {

namespace fs = std::filesystem;

struct Common {
  std::vector<std::string> configs;
  std::vector<std::string> overrides;
  std::string out = ".";
  std::string checkpoint;
  std::string split;
};

void add_common(CLI::App* cmd, Common& c, bool needs_checkpoint) {
  cmd->add_option("-c,--config", c.configs, "run configuration file (repeatable, merged in order)");
  cmd->add_option("-s,--set", c.overrides, "dotted override key=value (repeatable)");
  cmd->add_option("-o,--out", c.out, "output directory");
  if (needs_checkpoint) {
    cmd->add_option("--checkpoint", c.checkpoint, "model checkpoint")->required();
    cmd->add_option("--split", c.split, "dataset split (default: eval.split)");
  }
}

RunConfig resolve(const Common& c) {
  std::vector<fs::path> files(c.configs.begin(), c.configs.end());
  return config::load(files, c.overrides);
}

fs::path prepare_out(const Common& c, const RunConfig& rc) {
  const fs::path out = c.out;
  fs::create_directories(out);
  config::write_json(out / "config.json", config::to_json(rc));
  return out;
}

ModelConfig model_config_for(const RunConfig& rc, const Splits& s) {
  ModelConfig mc = rc.model;
  if (mc.vocab_size == 0) mc.vocab_size = static_cast<int>(s.vocab->size());
  try {
    mc.validate();
  } catch (const Error& e) {
    const std::string msg = e.what();
    throw ConfigError(msg.substr(0, msg.find(':')), msg.substr(msg.find(':') + 2));
  }
  return mc;
}

const Dataset& pick_split(const Common& c, const RunConfig& rc, const Splits& s) {
  const Dataset& ds = s.get(c.split.empty() ? rc.eval.split : c.split);
  if (ds.docs.empty()) throw Error("split '" + ds.split + "' has no documents");
  return ds;
}

Model load_model(const Common& c, const Splits& s) {
  Model m = model::load_checkpoint(c.checkpoint);
  if (static_cast<int>(s.vocab->size()) != m.config.vocab_size)
    throw Error("dataset vocabulary size " + std::to_string(s.vocab->size()) + " does not match the checkpoint's " +
                std::to_string(m.config.vocab_size));
  return m;
}

void write_run(const fs::path& out, TrainResult& r) {
  for (std::size_t i = 0; i < r.kept.size(); ++i) {
    const std::string name = "ckpt-step" + std::to_string(r.kept[i].step) + ".ckpt";
    model::save_checkpoint(r.kept[i].model, out / name);
    r.log.checkpoints[i].path = name;
  }
  model::save_checkpoint(r.best(), out / "best.ckpt");
  config::write_json(out / "run.json", trainer::run_json(r.log));
  config::write_json(out / "timing.json", json{{"seconds", r.log.seconds}});
}

Experiment experiment(const RunConfig& rc, const Splits& s) {
  Experiment e;
  e.model = model_config_for(rc, s);
  e.train = rc.train;
  e.train_data = &s.train;
  e.valid_data = &s.valid;
  e.eval_data = &s.get(rc.eval.split);
  if (e.eval_data->docs.empty()) e.eval_data = &s.valid;
  return e;
}

std::vector<PatternSpec> chosen_patterns(const RunConfig& rc) {
  return rc.pattern_specs.empty() ? trainer::injection_patterns() : rc.pattern_specs;
}

PalConfig pal_config(const RunConfig& rc, const ModelConfig& mc) {
  PalConfig pc = rc.pal ? *rc.pal : pal::default_config(mc);
  if (pc.head_patterns.empty()) {
    const auto pats = chosen_patterns(rc);
    pc.head_patterns.assign(static_cast<std::size_t>(pc.n_heads), std::nullopt);
    for (std::size_t h = 0; h < pats.size() && h < pc.head_patterns.size(); ++h) pc.head_patterns[h] = pats[h];
  }
  return pc;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Attention-pattern workbench: train, analyse and inject attention patterns"};
  app.require_subcommand(1);
  Common c;
  std::string method = "sensitivity", pattern_file, report_file, host;
  bool blocking = false;
  int port = 0;

  auto* synth = app.add_subcommand("synth", "generate the synthetic corpus splits");
  add_common(synth, c, false);
  auto* train = app.add_subcommand("train", "train a model from scratch");
  add_common(train, c, false);
  auto* imp = app.add_subcommand("importance", "estimate head importance");
  add_common(imp, c, true);
  imp->add_option("--method", method, "loo | sensitivity | taylor")->required();
  auto* gr = app.add_subcommand("gr", "global relevance of a pattern with t-test verdicts");
  add_common(gr, c, true);
  gr->add_option("--pattern", pattern_file, "pattern JSON file")->required();
  auto* select = app.add_subcommand("select", "decide whether a pattern is kept");
  add_common(select, c, false);
  select->add_option("--report", report_file, "relevance report JSON")->required();
  auto* inject = app.add_subcommand("inject-pal", "attach pattern PALs to a checkpoint and fine-tune");
  add_common(inject, c, true);
  inject->add_option("--method", method, "importance method for the PAL report");
  auto* ablate = app.add_subcommand("ablate", "pattern subset ablation grid");
  add_common(ablate, c, false);
  auto* compare = app.add_subcommand("compare", "baseline vs pattern-injected vs PAL");
  add_common(compare, c, false);
  auto* eval = app.add_subcommand("eval", "ROUGE of a checkpoint");
  add_common(eval, c, true);
  eval->add_flag("--blocking", blocking, "enable trigram blocking");
  auto* serve = app.add_subcommand("serve", "start the HTTP service");
  add_common(serve, c, false);
  serve->add_option("--checkpoint", c.checkpoint, "model checkpoint");
  serve->add_option("--host", host, "bind address");
  serve->add_option("--port", port, "port");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    RunConfig rc = resolve(c);

    if (synth->parsed()) {
      const fs::path out = prepare_out(c, rc);
      rc.data.train.clear();
      const Splits s = config::load_data(rc);
      for (const Dataset* ds : {&s.train, &s.valid, &s.test}) {
        std::vector<RawDocument> raw;
        for (const auto& d : ds->docs) raw.push_back(corpus::decode_document(d, *s.vocab));
        corpus::write_jsonl(out / (ds->split + ".jsonl"), raw);
      }
      corpus::write_vocab(out / "vocab.json", *s.vocab);
      return 0;
    }

    if (serve->parsed()) {
      if (!c.checkpoint.empty()) rc.service.checkpoint = c.checkpoint;
      if (!host.empty()) rc.service.host = host;
      if (port != 0) rc.service.port = port;
      Service service(rc);
      std::cerr << "serving on http://" << rc.service.host << ":" << rc.service.port << "\n";
      service.listen(rc.service.host, rc.service.port);
      return 0;
    }

    if (select->parsed()) {
      const fs::path out = prepare_out(c, rc);
      const json report = config::read_json(report_file);
      json significant = json::array();
      for (const auto& h : report.at("heads"))
        if (h.at("reject").get<bool>()) significant.push_back({{"layer", h.at("layer")}, {"head", h.at("head")}, {"family", h.at("family")}});
      config::write_json(out / "selection.json",
                         json{{"pattern", report.at("pattern")}, {"kept", !significant.empty()}, {"significant", significant}});
      return 0;
    }

    const Splits s = config::load_data(rc);
    const fs::path out = prepare_out(c, rc);

    if (train->parsed()) {
      Model m = model::init_model(model_config_for(rc, s), derive_seed(rc.seed, "init"));
      TrainResult r = trainer::train_run(std::move(m), s.train, s.valid, rc.train);
      write_run(out, r);
      return 0;
    }
    if (ablate->parsed()) {
      config::write_json(out / "ablation.json", trainer::ablation_json(trainer::ablation_suite(experiment(rc, s))));
      return 0;
    }
    if (compare->parsed()) {
      const Experiment e = experiment(rc, s);
      const auto rows = trainer::distill_compare(e, chosen_patterns(rc), pal_config(rc, e.model));
      config::write_json(out / "comparison.json", trainer::comparison_json(rows));
      return 0;
    }

    Model m = load_model(c, s);
    const Dataset& ds = pick_split(c, rc, s);
    if (imp->parsed()) {
      const auto rep = importance::estimate(m, ds, importance::method_from_string(method), rc.train.workers);
      config::write_json(out / "importance.json", importance::report_json(rep));
    } else if (gr->parsed()) {
      const auto rep = patterns::gr_dataset(m, ds, patterns::read_pattern(pattern_file), patterns::kDefaultAlpha, rc.train.workers);
      config::write_json(out / "relevance.json", patterns::report_json(rep));
    } else if (eval->parsed()) {
      const auto res = inference::evaluate(m, ds, rc.train.summary_k, blocking || rc.eval.blocking, rc.train.workers);
      config::write_json(out / "eval.json", inference::eval_json(res));
      inference::write_predictions(out / "predictions.jsonl", res.predictions);
    } else if (inject->parsed()) {
      const PalConfig pc = pal_config(rc, m.config);
      Model augmented = pal::attach_pals(std::move(m), pc, derive_seed(rc.seed, "pal"));
      TrainResult r = trainer::train_run(std::move(augmented), s.train, s.valid, rc.train);
      write_run(out, r);
      const auto rep = pal::pal_head_importance(r.best(), ds, importance::method_from_string(method), rc.train.workers);
      config::write_json(out / "pal_importance.json", importance::report_json(rep));
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "attnwb: config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "attnwb: error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace attnwb::cli
