#include "attnwb/inference.hpp"

#include "attnwb/json_io.hpp"
#include "attnwb/patterns.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

namespace attnwb::inference {

std::vector<std::array<TokenId, 3>> trigrams(std::span<const TokenId> tokens) {
  std::vector<TokenId> plain;
  for (TokenId t : tokens)
    if (!is_special(t)) plain.push_back(t);
  std::vector<std::array<TokenId, 3>> out;
  for (std::size_t i = 0; i + 3 <= plain.size(); ++i) out.push_back({plain[i], plain[i + 1], plain[i + 2]});
  return out;
}

SummaryPrediction select_summary(std::span<const double> scores, const Document& doc, int k, bool blocking) {
  if (scores.size() != doc.sentences.size()) throw Error("select_summary: one score per sentence required");
  if (k < 1) throw Error("select_summary: k must be at least 1");
  std::vector<int> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<std::size_t>(a)] > scores[static_cast<std::size_t>(b)];
  });
  SummaryPrediction pred;
  pred.id = doc.id;
  pred.scores.assign(scores.begin(), scores.end());
  pred.blocking = blocking;
  std::set<std::array<TokenId, 3>> seen;
  for (int s : order) {
    if (static_cast<int>(pred.selected.size()) >= k) break;
    const auto tri = trigrams(doc.sentences[static_cast<std::size_t>(s)]);
    if (blocking && std::any_of(tri.begin(), tri.end(), [&](const auto& t) { return seen.contains(t); })) continue;
    seen.insert(tri.begin(), tri.end());
    pred.selected.push_back(s);
  }
  std::sort(pred.selected.begin(), pred.selected.end());
  return pred;
}

std::vector<double> sentence_scores(const Model& model, const Document& doc) {
  const ForwardTrace tr = model::forward(model, doc, patterns::constraints_for(model, doc), HeadGates::ones(model));
  std::vector<double> out;
  out.reserve(tr.logits.size());
  for (double z : tr.logits) out.push_back(1.0 / (1.0 + std::exp(-z)));
  return out;
}

EvalResult evaluate(const Model& model, const Dataset& data, int k, bool blocking, unsigned workers) {
  if (data.docs.empty()) throw Error("evaluate: empty dataset");
  const std::size_t n = data.docs.size();
  EvalResult res;
  res.predictions.resize(n);
  std::vector<std::array<RougeScore, 3>> scores(n);
  parallel_for(n, [&](std::size_t d) {
    const Document& doc = data.docs[d];
    res.predictions[d] = select_summary(sentence_scores(model, doc), doc, k, blocking);
    const auto cand = rouge::concat_sentences(doc, res.predictions[d].selected);
    const auto gold = doc.gold_tokens();
    scores[d] = {rouge::rouge_n(cand, gold, 1), rouge::rouge_n(cand, gold, 2), rouge::rouge_l(cand, gold)};
  }, workers);
  RougeScore* out[3] = {&res.rouge1, &res.rouge2, &res.rouge_l};
  for (const auto& s : scores)
    for (int m = 0; m < 3; ++m) {
      out[m]->precision += s[static_cast<std::size_t>(m)].precision;
      out[m]->recall += s[static_cast<std::size_t>(m)].recall;
      out[m]->f1 += s[static_cast<std::size_t>(m)].f1;
    }
  for (RougeScore* r : out) {
    r->precision /= static_cast<double>(n);
    r->recall /= static_cast<double>(n);
    r->f1 /= static_cast<double>(n);
  }
  return res;
}

namespace {

json score_json(const RougeScore& s) {
  return json{{"precision", number_or_null(s.precision)}, {"recall", number_or_null(s.recall)}, {"f1", number_or_null(s.f1)}};
}

json prediction_json(const SummaryPrediction& p) {
  json scores = json::array();
  for (double v : p.scores) scores.push_back(number_or_null(v));
  return json{{"id", p.id}, {"selected", p.selected}, {"scores", scores}};
}

}  // namespace

nlohmann::json eval_json(const EvalResult& r) {
  return json{{"rouge1", score_json(r.rouge1)}, {"rouge2", score_json(r.rouge2)},
              {"rougeL", score_json(r.rouge_l)}, {"n_docs", r.predictions.size()},
              {"blocking", !r.predictions.empty() && r.predictions.front().blocking}};
}

void write_predictions(const std::filesystem::path& path, std::span<const SummaryPrediction> preds) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& p : preds) out << prediction_json(p).dump() << '\n';
}

}  // namespace attnwb::inference
