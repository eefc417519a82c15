#pragma once

#include "attnwb/model.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace attnwb {

struct TTestResult {
  double t = 0.0;
  int df = 0;
  double p = 0.5;
  bool reject = false;
};

struct HeadRelevance {
  HeadId head;
  double gr = 0.0;
  std::vector<double> samples;  // one per document, dataset order
  TTestResult test;
};

struct RelevanceReport {
  PatternSpec pattern;
  std::string dataset;
  double alpha = 0.01;
  double mean_gr = 0.0;  // over all heads
  std::vector<HeadRelevance> heads;
};

struct PatternSelection {
  bool kept = false;
  std::vector<HeadId> significant;
};

namespace patterns {

inline constexpr double kDefaultAlpha = 0.01;

// Document-local counts of each position's token over non-special tokens.
// Special positions get 0.
std::vector<int> token_frequencies(const Document& doc);

// 0/1 matrix over the non-PAD positions.
Mat indicator(const PatternSpec& pattern, const Document& doc);

AttentionConstraint build_constraint(const PatternSpec& pattern, const Document& doc);

// Constraints for every head the model has a pattern for: its assignments
// plus any PAL head patterns.
ConstraintSet constraints_for(const Model& model, const Document& doc);

// Σ α_ij · ind_ij / len.
double gr_example(const Mat& alpha, const Mat& ind, int len);

TTestResult t_test_head(std::span<const double> samples, double mu0, double alpha = kDefaultAlpha);

RelevanceReport gr_dataset(const Model& model, const Dataset& data, const PatternSpec& pattern,
                           double alpha = kDefaultAlpha, unsigned workers = 0);

PatternSelection select_pattern(const RelevanceReport& report);

nlohmann::json report_json(const RelevanceReport& report);

PatternSpec read_pattern(const std::filesystem::path& path);

// The four patterns used for injection: matching token, intra-sentence and
// the preceding/following positional pair.
PatternSpec matching_token();
PatternSpec intra_sentence();
PatternSpec relative(int offset);

}  // namespace patterns
}  // namespace attnwb
