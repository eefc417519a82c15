#pragma once

#include "attnwb/corpus.hpp"
#include "attnwb/model.hpp"
#include "attnwb/trainer.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace attnwb {

// Bad configuration; key is the dotted path of the offending entry.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& message)
      : Error(key + ": " + message), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

struct DataConfig {
  // Empty train path means: generate the splits from `synth`.
  std::string train, valid, test, vocab;
  int max_vocab = 0;  // 0 keeps every token when building a vocab
  int truncation = 128;
  int oracle_max_sents = 3;
  SynthConfig synth{2000, 6, 8, 500, true, 2, 128, 3};
  int synth_valid = 200;
  int synth_test = 200;
};

struct EvalConfig {
  bool blocking = false;
  std::string split = "valid";
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string checkpoint;
  std::string split = "valid";
  std::string runs_dir;
  std::string injection_path = "injection.json";
  std::string importance_method = "sensitivity";
};

struct RunConfig {
  std::uint64_t seed = 1;
  ModelConfig model;
  DataConfig data;
  TrainConfig train;
  std::vector<PatternSpec> pattern_specs;
  std::vector<HeadAssignment> assignments;
  std::optional<PalConfig> pal;
  EvalConfig eval;
  ServiceConfig service;
};

struct Splits {
  std::shared_ptr<const Vocab> vocab;
  Dataset train, valid, test;

  const Dataset& get(const std::string& name) const;
};

namespace config {

nlohmann::json to_json(const RunConfig& c);
// Strict: every key must be known.
RunConfig from_json(const nlohmann::json& j);

// Merges `overlay` into `base`; objects merge key by key, everything else
// replaces. Keys absent from `base` are rejected.
void merge(nlohmann::json& base, const nlohmann::json& overlay, const std::string& prefix = "");

// "a.b.c=value"; value is parsed as JSON when possible, else taken as a string.
void apply_override(nlohmann::json& j, const std::string& assignment);

RunConfig load(const std::vector<std::filesystem::path>& files, const std::vector<std::string>& overrides);

// Reads or generates the splits named by the data section.
Splits load_data(const RunConfig& c);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace config
}  // namespace attnwb
