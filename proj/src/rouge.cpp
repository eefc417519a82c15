#include "attnwb/rouge.hpp"

#include <algorithm>
#include <map>

namespace attnwb {

double f_measure(double precision, double recall) {
  const double denom = precision + recall;
  return denom > 0.0 ? 2.0 * precision * recall / denom : 0.0;
}

namespace rouge {
namespace {

using NgramCounts = std::map<std::vector<TokenId>, int>;

NgramCounts count_ngrams(std::span<const TokenId> seq, int n, int& total) {
  NgramCounts counts;
  total = 0;
  if (static_cast<int>(seq.size()) < n) return counts;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
    ++counts[std::vector<TokenId>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                  seq.begin() + static_cast<std::ptrdiff_t>(i) + n)];
    ++total;
  }
  return counts;
}

RougeScore from_overlap(double overlap, double cand_total, double ref_total) {
  RougeScore s;
  s.precision = cand_total > 0 ? overlap / cand_total : 0.0;
  s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
  s.f1 = f_measure(s.precision, s.recall);
  return s;
}

}  // namespace

RougeScore rouge_n(std::span<const TokenId> candidate, std::span<const TokenId> reference, int n) {
  if (n < 1) throw Error("rouge_n: order must be at least 1");
  int cand_total = 0, ref_total = 0;
  const NgramCounts cand = count_ngrams(candidate, n, cand_total);
  const NgramCounts ref = count_ngrams(reference, n, ref_total);
  int overlap = 0;
  for (const auto& [gram, c] : cand) {
    auto it = ref.find(gram);
    if (it != ref.end()) overlap += std::min(c, it->second);
  }
  return from_overlap(overlap, cand_total, ref_total);
}

RougeScore rouge_l(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  const std::size_t m = candidate.size(), n = reference.size();
  std::vector<int> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return from_overlap(prev[n], static_cast<double>(m), static_cast<double>(n));
}

double oracle_objective(std::span<const TokenId> candidate, std::span<const TokenId> reference) {
  return 0.5 * (rouge_n(candidate, reference, 1).f1 + rouge_n(candidate, reference, 2).f1);
}

std::vector<TokenId> concat_sentences(const Document& doc, std::span<const int> selected) {
  std::vector<int> order(selected.begin(), selected.end());
  std::sort(order.begin(), order.end());
  std::vector<TokenId> out;
  for (int s : order) {
    const auto& sent = doc.sentences.at(static_cast<std::size_t>(s));
    out.insert(out.end(), sent.begin(), sent.end());
  }
  return out;
}

std::vector<int> greedy_oracle(const Document& doc, int max_sents) {
  const std::size_t n = doc.sentences.size();
  std::vector<int> labels(n, 0);
  const std::vector<TokenId> gold = doc.gold_tokens();
  std::vector<int> selected;
  double best = 0.0;
  while (static_cast<int>(selected.size()) < max_sents) {
    int pick = -1;
    double pick_score = best;
    for (std::size_t s = 0; s < n; ++s) {
      if (labels[s]) continue;
      std::vector<int> trial = selected;
      trial.push_back(static_cast<int>(s));
      const double score = oracle_objective(concat_sentences(doc, trial), gold);
      if (score > pick_score) {
        pick_score = score;
        pick = static_cast<int>(s);
      }
    }
    if (pick < 0) break;
    labels[static_cast<std::size_t>(pick)] = 1;
    selected.push_back(pick);
    best = pick_score;
  }
  return labels;
}

}  // namespace rouge
}  // namespace attnwb
