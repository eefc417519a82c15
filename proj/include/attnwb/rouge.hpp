#pragma once

#include "attnwb/corpus.hpp"

#include <span>
#include <vector>

namespace attnwb {

struct RougeScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

// F1 of a precision/recall pair, 0 when both are 0.
double f_measure(double precision, double recall);

namespace rouge {

// Clipped n-gram overlap. Empty n-gram sets score 0.
RougeScore rouge_n(std::span<const TokenId> candidate, std::span<const TokenId> reference, int n);

// Longest common subsequence over the whole sequences.
RougeScore rouge_l(std::span<const TokenId> candidate, std::span<const TokenId> reference);

// Objective maximized by the greedy oracle: mean of ROUGE-1 F and ROUGE-2 F.
double oracle_objective(std::span<const TokenId> candidate, std::span<const TokenId> reference);

// Concatenation of the selected sentences in document order.
std::vector<TokenId> concat_sentences(const Document& doc, std::span<const int> selected);

// Greedy sentence selection against doc.gold_summary. One bit per sentence.
std::vector<int> greedy_oracle(const Document& doc, int max_sents);

}  // namespace rouge
}  // namespace attnwb
