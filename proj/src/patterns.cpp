#include "attnwb/patterns.hpp"

#include "attnwb/json_io.hpp"

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>

namespace attnwb::patterns {

std::vector<int> token_frequencies(const Document& doc) {
  const int n = doc.length();
  std::map<TokenId, int> counts;
  for (int i = 0; i < n; ++i)
    if (!is_special(doc.flat[static_cast<std::size_t>(i)])) ++counts[doc.flat[static_cast<std::size_t>(i)]];
  std::vector<int> freq(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) {
    const TokenId t = doc.flat[static_cast<std::size_t>(i)];
    if (!is_special(t)) freq[static_cast<std::size_t>(i)] = counts[t];
  }
  return freq;
}

namespace {

std::vector<int> sentence_of(const Document& doc) {
  std::vector<int> owner(static_cast<std::size_t>(doc.length()), -1);
  for (std::size_t s = 0; s < doc.spans.size(); ++s)
    for (int i = doc.spans[s].start; i < doc.spans[s].end; ++i) owner[static_cast<std::size_t>(i)] = static_cast<int>(s);
  return owner;
}

}  // namespace

Mat indicator(const PatternSpec& pattern, const Document& doc) {
  pattern.validate();
  const int n = doc.length();
  Mat ind = Mat::Zero(n, n);
  const auto& x = doc.flat;
  switch (pattern.kind) {
    case PatternKind::matching_token: {
      const auto freq = token_frequencies(doc);
      for (int i = 0; i < n; ++i) {
        if (freq[static_cast<std::size_t>(i)] <= 1) continue;
        for (int j = 0; j < n; ++j)
          if (x[static_cast<std::size_t>(i)] == x[static_cast<std::size_t>(j)]) ind(i, j) = 1.0;
      }
      break;
    }
    case PatternKind::intra_sentence: {
      const auto owner = sentence_of(doc);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j)
          if (owner[static_cast<std::size_t>(i)] == owner[static_cast<std::size_t>(j)]) ind(i, j) = 1.0;
      break;
    }
    case PatternKind::relative_position:
      for (int i = 0; i < n; ++i) {
        const int j = i + pattern.offset;
        if (j >= 0 && j < n) ind(i, j) = 1.0;
      }
      break;
  }
  return ind;
}

AttentionConstraint build_constraint(const PatternSpec& pattern, const Document& doc) {
  pattern.validate();
  const int n = doc.length();
  if (pattern.kind == PatternKind::relative_position) {
    std::vector<int> targets(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const int j = i + pattern.offset;
      targets[static_cast<std::size_t>(i)] = (j >= 0 && j < n) ? j : i;
    }
    return AttentionConstraint::fixed(std::move(targets));
  }
  std::vector<std::uint8_t> allowed(static_cast<std::size_t>(n) * static_cast<std::size_t>(n), 0);
  auto cell = [&](int i, int j) -> std::uint8_t& {
    return allowed[static_cast<std::size_t>(i) * static_cast<std::size_t>(n) + static_cast<std::size_t>(j)];
  };
  if (pattern.kind == PatternKind::matching_token) {
    const auto freq = token_frequencies(doc);
    const auto& x = doc.flat;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        cell(i, j) = freq[static_cast<std::size_t>(i)] == 1 || x[static_cast<std::size_t>(i)] == x[static_cast<std::size_t>(j)];
  } else {
    const auto owner = sentence_of(doc);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) cell(i, j) = owner[static_cast<std::size_t>(i)] == owner[static_cast<std::size_t>(j)];
  }
  return AttentionConstraint::mask(n, std::move(allowed));
}

ConstraintSet constraints_for(const Model& model, const Document& doc) {
  ConstraintSet out;
  auto add = [&](const HeadId& id, const PatternSpec& p) {
    if (!out.emplace(id, build_constraint(p, doc)).second)
      throw Error("head " + to_string(id) + " has two patterns");
  };
  for (const auto& a : model.assignments) add(a.head, a.pattern);
  if (model.pal)
    for (int l = 0; l < model.config.n_layers; ++l)
      for (std::size_t h = 0; h < model.pal->head_patterns.size(); ++h)
        if (const auto& p = model.pal->head_patterns[h]) add({l, static_cast<int>(h), HeadFamily::pal}, *p);
  return out;
}

double gr_example(const Mat& alpha, const Mat& ind, int len) {
  if (len < 1 || alpha.rows() != len || alpha.cols() != len || ind.rows() != len || ind.cols() != len)
    throw Error("gr_example: shape mismatch");
  return (alpha.array() * ind.array()).sum() / static_cast<double>(len);
}

TTestResult t_test_head(std::span<const double> samples, double mu0, double alpha) {
  const std::size_t n = samples.size();
  if (n < 2) throw Error("insufficient samples");
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(n);
  TTestResult r;
  r.df = static_cast<int>(n) - 1;
  const auto [lo, hi] = std::minmax_element(samples.begin(), samples.end());
  if (*lo == *hi) {
    const double tol = 1e-12 * std::max(1.0, std::abs(mu0));
    if (std::abs(mean - mu0) <= tol) {
      r.t = 0.0;
      r.p = 0.5;
    } else if (mean > mu0) {
      r.t = std::numeric_limits<double>::infinity();
      r.p = 0.0;
    } else {
      r.t = -std::numeric_limits<double>::infinity();
      r.p = 1.0;
    }
  } else {
    double ss = 0.0;
    for (double v : samples) ss += (v - mean) * (v - mean);
    const double s = std::sqrt(ss / static_cast<double>(n - 1));
    r.t = (mean - mu0) / (s / std::sqrt(static_cast<double>(n)));
    const boost::math::students_t dist(static_cast<double>(r.df));
    r.p = boost::math::cdf(boost::math::complement(dist, r.t));
  }
  r.reject = r.p < alpha;
  return r;
}

RelevanceReport gr_dataset(const Model& model, const Dataset& data, const PatternSpec& pattern,
                           double alpha, unsigned workers) {
  if (data.docs.empty()) throw Error("gr_dataset: empty dataset");
  pattern.validate();
  const auto heads = model.heads();
  const HeadGates gates = HeadGates::ones(model);
  std::vector<std::vector<double>> per_doc(data.docs.size());
  parallel_for(data.docs.size(), [&](std::size_t d) {
    const Document& doc = data.docs[d];
    const ForwardTrace tr = model::forward(model, doc, {}, gates);
    const Mat ind = indicator(pattern, doc);
    auto& row = per_doc[d];
    row.reserve(heads.size());
    for (const auto& h : heads) row.push_back(gr_example(tr.attention(h), ind, tr.length));
  }, workers);

  RelevanceReport rep;
  rep.pattern = pattern;
  rep.dataset = data.split;
  rep.alpha = alpha;
  rep.heads.resize(heads.size());
  double total = 0.0;
  for (std::size_t h = 0; h < heads.size(); ++h) {
    auto& hr = rep.heads[h];
    hr.head = heads[h];
    hr.samples.reserve(per_doc.size());
    for (const auto& row : per_doc) hr.samples.push_back(row[h]);
    hr.gr = std::accumulate(hr.samples.begin(), hr.samples.end(), 0.0) / static_cast<double>(hr.samples.size());
    total += hr.gr;
  }
  rep.mean_gr = total / static_cast<double>(heads.size());
  if (data.docs.size() >= 2)
    for (auto& hr : rep.heads) hr.test = t_test_head(hr.samples, rep.mean_gr, alpha);
  else
    for (auto& hr : rep.heads) hr.test = {0.0, 0, std::numeric_limits<double>::quiet_NaN(), false};
  return rep;
}

PatternSelection select_pattern(const RelevanceReport& report) {
  PatternSelection sel;
  for (const auto& hr : report.heads)
    if (hr.test.reject) sel.significant.push_back(hr.head);
  sel.kept = !sel.significant.empty();
  return sel;
}

nlohmann::json report_json(const RelevanceReport& report) {
  const auto sel = select_pattern(report);
  json heads = json::array();
  for (const auto& hr : report.heads) {
    json h = hr.head;
    h["gr"] = number_or_null(hr.gr);
    json samples = json::array();
    for (double v : hr.samples) samples.push_back(number_or_null(v));
    h["samples"] = samples;
    h["t"] = number_or_null(hr.test.t);
    h["df"] = hr.test.df;
    h["p"] = number_or_null(hr.test.p);
    h["reject"] = hr.test.reject;
    heads.push_back(std::move(h));
  }
  return json{{"pattern", report.pattern},   {"dataset", report.dataset},
              {"alpha", report.alpha},       {"mean_gr", number_or_null(report.mean_gr)},
              {"kept", sel.kept},            {"significant", sel.significant},
              {"heads", heads}};
}

PatternSpec read_pattern(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read " + path.string());
  try {
    return json::parse(in).get<PatternSpec>();
  } catch (const json::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
}

PatternSpec matching_token() { return {"matching_token", PatternKind::matching_token, 0}; }
PatternSpec intra_sentence() { return {"intra_sentence", PatternKind::intra_sentence, 0}; }
PatternSpec relative(int offset) {
  return {offset < 0 ? "preceding_" + std::to_string(-offset) : "following_" + std::to_string(offset),
          PatternKind::relative_position, offset};
}

}  // namespace attnwb::patterns
