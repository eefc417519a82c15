#include "attnwb/config.hpp"

#include "attnwb/json_io.hpp"

#include <fstream>
#include <sstream>

namespace attnwb {

const Dataset& Splits::get(const std::string& name) const {
  if (name == "train") return train;
  if (name == "valid") return valid;
  if (name == "test") return test;
  throw Error("unknown split '" + name + "'");
}

namespace config {
namespace {

json synth_json(const SynthConfig& s) {
  return json{{"n_docs", s.n_docs},
              {"sents_per_doc", s.sents_per_doc},
              {"tokens_per_sent", s.tokens_per_sent},
              {"vocab_size", s.vocab_size},
              {"repeat_signal", s.repeat_signal},
              {"summary_sents", s.summary_sents}};
}

// Reads field `key` of object `j` into `out` when present, naming the dotted
// path on a type mismatch.
template <class T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(where + "." + key, "wrong type");
  }
}

void strict(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where, "expected an object");
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : keys) ok = ok || key == k;
    if (!ok) throw ConfigError(where.empty() ? key : where + "." + key, "unknown key");
  }
}

}  // namespace

json to_json(const RunConfig& c) {
  const auto& d = c.data;
  const auto& t = c.train;
  return json{
      {"seed", c.seed},
      {"model", c.model},
      {"data",
       {{"train", d.train},
        {"valid", d.valid},
        {"test", d.test},
        {"vocab", d.vocab},
        {"max_vocab", d.max_vocab},
        {"truncation", d.truncation},
        {"oracle_max_sents", d.oracle_max_sents},
        {"synth", synth_json(d.synth)},
        {"synth_valid", d.synth_valid},
        {"synth_test", d.synth_test}}},
      {"train",
       {{"steps", t.steps},
        {"validate_every", t.validate_every},
        {"batch_size", t.batch_size},
        {"accumulation", t.accumulation},
        {"warmup", t.warmup},
        {"peak_lr", t.peak_lr},
        {"beta1", t.beta1},
        {"beta2", t.beta2},
        {"eps", t.eps},
        {"top_k", t.top_k},
        {"summary_k", t.summary_k},
        {"workers", t.workers}}},
      {"patterns", {{"specs", c.pattern_specs}, {"assignments", c.assignments}}},
      {"pal", c.pal ? json(*c.pal) : json(nullptr)},
      {"eval", {{"blocking", c.eval.blocking}, {"split", c.eval.split}}},
      {"service",
       {{"host", c.service.host},
        {"port", c.service.port},
        {"checkpoint", c.service.checkpoint},
        {"split", c.service.split},
        {"runs_dir", c.service.runs_dir},
        {"injection_path", c.service.injection_path},
        {"importance_method", c.service.importance_method}}}};
}

RunConfig from_json(const json& j) {
  RunConfig c;
  strict(j, {"seed", "model", "data", "train", "patterns", "pal", "eval", "service"}, "");
  get(j, "seed", c.seed, "");
  if (j.contains("model")) {
    const auto& m = j.at("model");
    strict(m, {"n_layers", "n_heads", "d_model", "d_ff", "max_len", "vocab_size", "dropout"}, "model");
    get(m, "n_layers", c.model.n_layers, "model");
    get(m, "n_heads", c.model.n_heads, "model");
    get(m, "d_model", c.model.d_model, "model");
    get(m, "d_ff", c.model.d_ff, "model");
    get(m, "max_len", c.model.max_len, "model");
    get(m, "vocab_size", c.model.vocab_size, "model");
    get(m, "dropout", c.model.dropout, "model");
  }
  if (j.contains("data")) {
    const auto& d = j.at("data");
    strict(d, {"train", "valid", "test", "vocab", "max_vocab", "truncation", "oracle_max_sents", "synth",
               "synth_valid", "synth_test"}, "data");
    get(d, "train", c.data.train, "data");
    get(d, "valid", c.data.valid, "data");
    get(d, "test", c.data.test, "data");
    get(d, "vocab", c.data.vocab, "data");
    get(d, "max_vocab", c.data.max_vocab, "data");
    get(d, "truncation", c.data.truncation, "data");
    get(d, "oracle_max_sents", c.data.oracle_max_sents, "data");
    get(d, "synth_valid", c.data.synth_valid, "data");
    get(d, "synth_test", c.data.synth_test, "data");
    if (d.contains("synth")) {
      const auto& s = d.at("synth");
      strict(s, {"n_docs", "sents_per_doc", "tokens_per_sent", "vocab_size", "repeat_signal", "summary_sents"}, "data.synth");
      get(s, "n_docs", c.data.synth.n_docs, "data.synth");
      get(s, "sents_per_doc", c.data.synth.sents_per_doc, "data.synth");
      get(s, "tokens_per_sent", c.data.synth.tokens_per_sent, "data.synth");
      get(s, "vocab_size", c.data.synth.vocab_size, "data.synth");
      get(s, "repeat_signal", c.data.synth.repeat_signal, "data.synth");
      get(s, "summary_sents", c.data.synth.summary_sents, "data.synth");
    }
    c.data.synth.truncation = c.data.truncation;
    c.data.synth.oracle_max_sents = c.data.oracle_max_sents;
  }
  if (j.contains("train")) {
    const auto& t = j.at("train");
    strict(t, {"steps", "validate_every", "batch_size", "accumulation", "warmup", "peak_lr", "beta1", "beta2", "eps",
               "top_k", "summary_k", "workers"}, "train");
    get(t, "steps", c.train.steps, "train");
    get(t, "validate_every", c.train.validate_every, "train");
    get(t, "batch_size", c.train.batch_size, "train");
    get(t, "accumulation", c.train.accumulation, "train");
    get(t, "warmup", c.train.warmup, "train");
    get(t, "peak_lr", c.train.peak_lr, "train");
    get(t, "beta1", c.train.beta1, "train");
    get(t, "beta2", c.train.beta2, "train");
    get(t, "eps", c.train.eps, "train");
    get(t, "top_k", c.train.top_k, "train");
    get(t, "summary_k", c.train.summary_k, "train");
    get(t, "workers", c.train.workers, "train");
  }
  if (j.contains("patterns")) {
    const auto& p = j.at("patterns");
    strict(p, {"specs", "assignments"}, "patterns");
    try {
      if (p.contains("specs")) c.pattern_specs = p.at("specs").get<std::vector<PatternSpec>>();
    } catch (const std::exception& e) {
      throw ConfigError("patterns.specs", e.what());
    }
    try {
      if (p.contains("assignments")) c.assignments = p.at("assignments").get<std::vector<HeadAssignment>>();
    } catch (const std::exception& e) {
      throw ConfigError("patterns.assignments", e.what());
    }
  }
  if (j.contains("pal") && !j.at("pal").is_null()) {
    try {
      c.pal = j.at("pal").get<PalConfig>();
    } catch (const std::exception& e) {
      throw ConfigError("pal", e.what());
    }
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    strict(e, {"blocking", "split"}, "eval");
    get(e, "blocking", c.eval.blocking, "eval");
    get(e, "split", c.eval.split, "eval");
  }
  if (j.contains("service")) {
    const auto& s = j.at("service");
    strict(s, {"host", "port", "checkpoint", "split", "runs_dir", "injection_path", "importance_method"}, "service");
    get(s, "host", c.service.host, "service");
    get(s, "port", c.service.port, "service");
    get(s, "checkpoint", c.service.checkpoint, "service");
    get(s, "split", c.service.split, "service");
    get(s, "runs_dir", c.service.runs_dir, "service");
    get(s, "injection_path", c.service.injection_path, "service");
    get(s, "importance_method", c.service.importance_method, "service");
  }
  c.train.seed = c.seed;
  c.train.assignments = c.assignments;

  auto wrap = [](const std::string& section, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError&) {
      throw;
    } catch (const Error& e) {
      std::string msg = e.what();
      const auto dot = msg.find(':');
      throw ConfigError(dot != std::string::npos && msg.starts_with(section) ? msg.substr(0, dot) : section,
                        dot != std::string::npos ? msg.substr(dot + 2) : msg);
    }
  };
  if (c.model.vocab_size != 0) wrap("model", [&] { c.model.validate(); });
  wrap("train", [&] { c.train.validate(); });
  if (c.pal) {
    ModelConfig probe = c.model;
    if (probe.vocab_size == 0) probe.vocab_size = static_cast<int>(kNumReserved);
    wrap("pal", [&] { c.pal->validate(probe); });
  }
  if (c.eval.split != "train" && c.eval.split != "valid" && c.eval.split != "test")
    throw ConfigError("eval.split", "must be train, valid or test");
  return c;
}

void merge(json& base, const json& overlay, const std::string& prefix) {
  if (!overlay.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  for (const auto& [key, value] : overlay.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!base.contains(key)) throw ConfigError(path, "unknown key");
    json& slot = base[key];
    if (slot.is_object() && value.is_object() && key != "pal") {
      merge(slot, value, path);
    } else if (key == "pal" && prefix.empty() && slot.is_object() && value.is_object()) {
      for (const auto& [k, v] : value.items()) slot[k] = v;
    } else {
      slot = value;
    }
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::exception&) {
    value = text;
  }
  json* node = &j;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(key, "unknown key");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    if (node->is_null() && part == "pal") *node = json(PalConfig{});
    start = dot + 1;
  }
  *node = value;
}

RunConfig load(const std::vector<std::filesystem::path>& files, const std::vector<std::string>& overrides) {
  json j = to_json(RunConfig{});
  for (const auto& f : files) {
    json overlay;
    try {
      overlay = read_json(f);
    } catch (const Error& e) {
      throw ConfigError(f.string(), e.what());
    }
    merge(j, overlay);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return from_json(j);
}

Splits load_data(const RunConfig& c) {
  Splits s;
  const auto& d = c.data;
  if (d.train.empty()) {
    SynthConfig sc = d.synth;
    sc.truncation = d.truncation;
    sc.oracle_max_sents = d.oracle_max_sents;
    auto make = [&](const std::string& split, int n) {
      SynthConfig part = sc;
      part.n_docs = n;
      SynthCorpus corpus = corpus::synth_raw(part, derive_seed(c.seed, "synth/" + split));
      if (!s.vocab) s.vocab = std::make_shared<const Vocab>(corpus.vocab);
      for (auto& r : corpus.docs) r.id = split + "-" + r.id;
      return corpus::make_dataset(split, corpus.docs, s.vocab, d.truncation, d.oracle_max_sents);
    };
    s.train = make("train", sc.n_docs);
    s.valid = make("valid", d.synth_valid);
    s.test = make("test", d.synth_test);
    return s;
  }
  const auto train_raw = corpus::read_jsonl(d.train);
  if (!d.vocab.empty() && std::filesystem::exists(d.vocab)) {
    s.vocab = std::make_shared<const Vocab>(corpus::read_vocab(d.vocab));
  } else {
    const std::size_t max = d.max_vocab > 0 ? static_cast<std::size_t>(d.max_vocab) : std::numeric_limits<std::size_t>::max();
    s.vocab = std::make_shared<const Vocab>(corpus::build_vocab(train_raw, max));
  }
  s.train = corpus::make_dataset("train", train_raw, s.vocab, d.truncation, d.oracle_max_sents);
  if (!d.valid.empty())
    s.valid = corpus::make_dataset("valid", corpus::read_jsonl(d.valid), s.vocab, d.truncation, d.oracle_max_sents);
  if (!d.test.empty())
    s.test = corpus::make_dataset("test", corpus::read_jsonl(d.test), s.vocab, d.truncation, d.oracle_max_sents);
  return s;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

}  // namespace config
}  // namespace attnwb
