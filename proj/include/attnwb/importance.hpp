#pragma once

#include "attnwb/model.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace attnwb {

struct HeadScore {
  HeadId head;
  double raw = 0.0;
  double normalized = 0.0;
};

struct ImportanceReport {
  std::string method;
  std::string dataset;
  double baseline_loss = 0.0;  // Σ_x L(x) with every gate at 1
  std::vector<HeadScore> heads;  // Model::heads() order
};

namespace importance {

enum class Method { leave_one_out, sensitivity, taylor };

std::string to_string(Method m);
// Accepts "loo", "leave_one_out", "sensitivity" and "taylor".
Method method_from_string(const std::string& name);

// Σ_x L(x) under the given gates and the model's own pattern constraints.
double dataset_loss(const Model& model, const Dataset& data, const HeadGates& gates, unsigned workers = 0);

ImportanceReport leave_one_out(const Model& model, const Dataset& data, unsigned workers = 0);
ImportanceReport sensitivity(const Model& model, const Dataset& data, unsigned workers = 0);
ImportanceReport taylor(const Model& model, const Dataset& data, unsigned workers = 0);
ImportanceReport estimate(const Model& model, const Dataset& data, Method method, unsigned workers = 0);

// Global min-max over all heads; all zeros when every raw score is equal.
ImportanceReport normalize(ImportanceReport report);

// Cosine of the raw score vectors.
double compare(const ImportanceReport& a, const ImportanceReport& b);

// Σ θ·g over the parameters that belong to one head: its Q/K/V columns and
// bias entries and its output-projection rows.
double head_dot(const Params& theta, const Params& grad, const HeadId& id, const Model& model);

nlohmann::json report_json(const ImportanceReport& report);

}  // namespace importance
}  // namespace attnwb
