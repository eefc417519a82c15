#include "attnwb/importance.hpp"

#include "attnwb/json_io.hpp"
#include "attnwb/patterns.hpp"

#include <algorithm>
#include <cmath>

namespace attnwb::importance {
namespace {

void require_docs(const Dataset& data) {
  if (data.docs.empty()) throw Error("importance: empty dataset");
}

double doc_loss(const Model& model, const Document& doc, const HeadGates& gates) {
  const ForwardTrace tr = model::forward(model, doc, patterns::constraints_for(model, doc), gates);
  return model::loss(tr, doc.oracle_labels);
}

ImportanceReport make_report(const Model& model, const Dataset& data, Method m, double baseline,
                             const std::vector<double>& raw) {
  ImportanceReport rep;
  rep.method = to_string(m);
  rep.dataset = data.split;
  rep.baseline_loss = baseline;
  const auto heads = model.heads();
  for (std::size_t h = 0; h < heads.size(); ++h) rep.heads.push_back({heads[h], raw[h], 0.0});
  return normalize(std::move(rep));
}

// Sums per-document vectors in document order.
std::vector<double> reduce(const std::vector<std::vector<double>>& per_doc, std::size_t width) {
  std::vector<double> out(width, 0.0);
  for (const auto& row : per_doc)
    for (std::size_t h = 0; h < width; ++h) out[h] += row[h];
  return out;
}

}  // namespace

std::string to_string(Method m) {
  switch (m) {
    case Method::leave_one_out: return "leave_one_out";
    case Method::sensitivity: return "sensitivity";
    case Method::taylor: return "taylor";
  }
  return "?";
}

Method method_from_string(const std::string& name) {
  if (name == "loo" || name == "leave_one_out") return Method::leave_one_out;
  if (name == "sensitivity") return Method::sensitivity;
  if (name == "taylor") return Method::taylor;
  throw Error("unknown importance method '" + name + "'");
}

double dataset_loss(const Model& model, const Dataset& data, const HeadGates& gates, unsigned workers) {
  std::vector<double> losses(data.docs.size());
  parallel_for(data.docs.size(), [&](std::size_t d) { losses[d] = doc_loss(model, data.docs[d], gates); }, workers);
  double total = 0.0;
  for (double l : losses) total += l;
  return total;
}

ImportanceReport leave_one_out(const Model& model, const Dataset& data, unsigned workers) {
  require_docs(data);
  const auto heads = model.heads();
  const HeadGates ones = HeadGates::ones(model);
  std::vector<double> base(data.docs.size());
  std::vector<std::vector<double>> per_doc(data.docs.size());
  parallel_for(data.docs.size(), [&](std::size_t d) {
    const Document& doc = data.docs[d];
    base[d] = doc_loss(model, doc, ones);
    auto& row = per_doc[d];
    for (const auto& h : heads) {
      HeadGates g = ones;
      g.at(h) = 0.0;
      row.push_back(doc_loss(model, doc, g) - base[d]);
    }
  }, workers);
  double baseline = 0.0;
  for (double b : base) baseline += b;
  return make_report(model, data, Method::leave_one_out, baseline, reduce(per_doc, heads.size()));
}

ImportanceReport sensitivity(const Model& model, const Dataset& data, unsigned workers) {
  require_docs(data);
  const auto heads = model.heads();
  const HeadGates ones = HeadGates::ones(model);
  std::vector<double> base(data.docs.size());
  std::vector<std::vector<double>> per_doc(data.docs.size());
  parallel_for(data.docs.size(), [&](std::size_t d) {
    const Document& doc = data.docs[d];
    const Gradients g = model::gradients(model, doc, patterns::constraints_for(model, doc), ones, doc.oracle_labels);
    base[d] = g.loss;
    for (const auto& h : heads) per_doc[d].push_back(std::abs(g.gates.at(h)));
  }, workers);
  double baseline = 0.0;
  for (double b : base) baseline += b;
  return make_report(model, data, Method::sensitivity, baseline, reduce(per_doc, heads.size()));
}

double head_dot(const Params& theta, const Params& grad, const HeadId& id, const Model& model) {
  auto dot = [](const auto& a, const auto& b) { return (a.array() * b.array()).sum(); };
  const auto l = static_cast<std::size_t>(id.layer);
  if (id.family == HeadFamily::encoder) {
    const int dh = model.config.head_dim();
    const int c0 = id.head * dh;
    const LayerParams& T = theta.layers[l];
    const LayerParams& G = grad.layers[l];
    double s = 0.0;
    for (auto [t, g] : {std::pair{&T.wq, &G.wq}, {&T.wk, &G.wk}, {&T.wv, &G.wv}, {&T.bq, &G.bq}, {&T.bk, &G.bk}, {&T.bv, &G.bv}})
      s += dot(t->middleCols(c0, dh), g->middleCols(c0, dh));
    s += dot(T.wo.middleRows(c0, dh), G.wo.middleRows(c0, dh));
    return s;
  }
  const int dh = model.pal->head_dim();
  const int c0 = id.head * dh;
  const PalParams& T = theta.pals[l];
  const PalParams& G = grad.pals[l];
  double s = 0.0;
  for (auto [t, g] : {std::pair{&T.wq, &G.wq}, {&T.wk, &G.wk}, {&T.wv, &G.wv}})
    s += dot(t->middleCols(c0, dh), g->middleCols(c0, dh));
  s += dot(T.wo.middleRows(c0, dh), G.wo.middleRows(c0, dh));
  return s;
}

ImportanceReport taylor(const Model& model, const Dataset& data, unsigned workers) {
  require_docs(data);
  const auto heads = model.heads();
  const HeadGates ones = HeadGates::ones(model);
  std::vector<double> base(data.docs.size());
  std::vector<std::vector<double>> per_doc(data.docs.size());
  parallel_for(data.docs.size(), [&](std::size_t d) {
    const Document& doc = data.docs[d];
    const Gradients g = model::gradients(model, doc, patterns::constraints_for(model, doc), ones, doc.oracle_labels);
    base[d] = g.loss;
    for (const auto& h : heads) per_doc[d].push_back(head_dot(model.params, g.params, h, model));
  }, workers);
  auto raw = reduce(per_doc, heads.size());
  for (double& r : raw) r *= r;
  double baseline = 0.0;
  for (double b : base) baseline += b;
  return make_report(model, data, Method::taylor, baseline, raw);
}

ImportanceReport estimate(const Model& model, const Dataset& data, Method method, unsigned workers) {
  switch (method) {
    case Method::leave_one_out: return leave_one_out(model, data, workers);
    case Method::sensitivity: return sensitivity(model, data, workers);
    case Method::taylor: return taylor(model, data, workers);
  }
  throw Error("unknown importance method");
}

ImportanceReport normalize(ImportanceReport report) {
  if (report.heads.empty()) return report;
  const auto [lo, hi] = std::minmax_element(report.heads.begin(), report.heads.end(),
                                            [](const HeadScore& a, const HeadScore& b) { return a.raw < b.raw; });
  const double min = lo->raw, range = hi->raw - lo->raw;
  for (auto& h : report.heads) h.normalized = range > 0.0 ? (h.raw - min) / range : 0.0;
  return report;
}

double compare(const ImportanceReport& a, const ImportanceReport& b) {
  if (a.heads.size() != b.heads.size()) throw Error("compare: reports cover different heads");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t i = 0; i < a.heads.size(); ++i) {
    if (a.heads[i].head != b.heads[i].head) throw Error("compare: reports cover different heads");
    ab += a.heads[i].raw * b.heads[i].raw;
    aa += a.heads[i].raw * a.heads[i].raw;
    bb += b.heads[i].raw * b.heads[i].raw;
  }
  if (aa == 0.0 || bb == 0.0) throw Error("undefined cosine");
  return ab / std::sqrt(aa * bb);
}

nlohmann::json report_json(const ImportanceReport& report) {
  json heads = json::array();
  for (const auto& h : report.heads) {
    json e = h.head;
    e["raw"] = number_or_null(h.raw);
    e["normalized"] = number_or_null(h.normalized);
    heads.push_back(std::move(e));
  }
  return json{{"method", report.method}, {"dataset", report.dataset},
              {"baseline_loss", number_or_null(report.baseline_loss)}, {"heads", heads}};
}

}  // namespace attnwb::importance
