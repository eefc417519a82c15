#pragma once

#include "attnwb/model.hpp"
#include "attnwb/rouge.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace attnwb {

struct SummaryPrediction {
  std::string id;
  std::vector<int> selected;  // document order
  std::vector<double> scores;
  bool blocking = false;
};

struct EvalResult {
  RougeScore rouge1, rouge2, rouge_l;  // unweighted means over documents
  std::vector<SummaryPrediction> predictions;
};

namespace inference {

inline constexpr int kDefaultK = 3;

// Token trigrams of one sentence.
std::vector<std::array<TokenId, 3>> trigrams(std::span<const TokenId> tokens);

SummaryPrediction select_summary(std::span<const double> scores, const Document& doc, int k, bool blocking);

// Sigmoid of the sentence logits, under the model's own pattern constraints.
std::vector<double> sentence_scores(const Model& model, const Document& doc);

EvalResult evaluate(const Model& model, const Dataset& data, int k, bool blocking, unsigned workers = 0);

nlohmann::json eval_json(const EvalResult& result);
void write_predictions(const std::filesystem::path& path, std::span<const SummaryPrediction> preds);

}  // namespace inference
}  // namespace attnwb
