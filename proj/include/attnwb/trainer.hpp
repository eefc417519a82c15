#pragma once

#include "attnwb/inference.hpp"
#include "attnwb/model.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace attnwb {

struct TrainConfig {
  int steps = 2000;
  int validate_every = 200;
  int batch_size = 8;
  int accumulation = 1;
  int warmup = 0;  // 0 means 10% of steps
  double peak_lr = 2e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  int top_k = 3;
  int summary_k = inference::kDefaultK;
  unsigned workers = 0;
  std::vector<HeadAssignment> assignments;

  int effective_warmup() const { return warmup > 0 ? warmup : std::max(1, steps / 10); }
  void validate() const;
};

struct OptimizerState {
  Params m, v;
  long step = 0;

  static OptimizerState for_params(const Params& p);
};

struct ValidationPoint {
  int step = 0;
  double train_loss = 0.0;  // mean over the steps since the previous point
  double valid_loss = 0.0;
  double rouge1 = 0.0, rouge2 = 0.0, rouge_l = 0.0;  // F1, no blocking
};

struct CheckpointRecord {
  int step = 0;
  double valid_loss = 0.0;
  std::string path;  // set once written to disk
};

struct RunLog {
  nlohmann::json config;
  std::vector<ValidationPoint> points;
  std::vector<CheckpointRecord> checkpoints;  // ascending validation loss
  int best_step = 0;
  double seconds = 0.0;  // wall clock, kept out of run_json
};

struct KeptCheckpoint {
  int step = 0;
  double valid_loss = 0.0;
  Model model;
};

struct TrainResult {
  RunLog log;
  std::vector<KeptCheckpoint> kept;  // ascending validation loss
  const Model& best() const { return kept.front().model; }
};

// One trained and evaluated variant.
struct VariantResult {
  std::string name;
  std::vector<PatternSpec> patterns;
  EvalResult plain, blocked;
  RunLog log;
};

// Everything a seeded run needs besides its pattern choice.
struct Experiment {
  ModelConfig model;
  TrainConfig train;
  const Dataset* train_data = nullptr;
  const Dataset* valid_data = nullptr;
  const Dataset* eval_data = nullptr;  // defaults to valid_data
};

namespace trainer {

double lr_at(long step, int warmup, double peak);

void adam_step(Params& params, const Params& grads, OptimizerState& state, double lr, double beta1,
               double beta2, double eps, bool pal_only = false);

// Summed per-sentence gradient over the documents, divided by their total
// sentence count.
Gradients batch_gradients(const Model& model, const Dataset& data, std::span<const std::size_t> docs,
                          const std::vector<std::uint64_t>& dropout_seeds, bool training, unsigned workers = 0);

TrainResult train_run(Model model, const Dataset& train, const Dataset& valid, const TrainConfig& config);

// Mean per-document loss and ROUGE of the selections, one forward per document.
ValidationPoint validate(const Model& model, const Dataset& data, int k, unsigned workers = 0);

// Packs patterns onto heads 0, 1, ... of every layer.
std::vector<HeadAssignment> assign_patterns(const ModelConfig& config, const std::vector<PatternSpec>& patterns);

// Canonical injection patterns (m, i, -1, +1).
std::vector<PatternSpec> injection_patterns();
// Subset bits: 1 matching token, 2 intra-sentence, 4 positional pair.
std::vector<PatternSpec> subset_patterns(unsigned bits);
std::string subset_name(unsigned bits);

VariantResult run_variant(const Experiment& exp, const std::string& name, const std::vector<PatternSpec>& patterns);

// Runs the requested subsets (all eight by default); the first row is the
// empty subset.
std::vector<VariantResult> ablation_suite(const Experiment& exp, std::vector<unsigned> subsets = {});
nlohmann::json ablation_json(const std::vector<VariantResult>& rows);

// Baseline, pattern-injected, and pattern PALs fine-tuned from the baseline.
std::vector<VariantResult> distill_compare(const Experiment& exp, const std::vector<PatternSpec>& patterns,
                                           const std::optional<PalConfig>& pal);
nlohmann::json comparison_json(const std::vector<VariantResult>& rows);

nlohmann::json run_json(const RunLog& log);
nlohmann::json train_config_json(const TrainConfig& c);

}  // namespace trainer
}  // namespace attnwb
