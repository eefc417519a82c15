#pragma once

#include "attnwb/corpus.hpp"
#include "attnwb/model.hpp"
#include "attnwb/pal.hpp"
#include "attnwb/rouge.hpp"

#include <memory>
#include <string>
#include <vector>

namespace testutil {

using namespace attnwb;

// Vocabulary holding every whitespace token of the given texts.
inline std::shared_ptr<const Vocab> vocab_of(const std::vector<std::string>& texts) {
  RawDocument raw;
  raw.id = "v";
  raw.sentences = texts;
  return std::make_shared<const Vocab>(corpus::build_vocab(std::span<const RawDocument>(&raw, 1), 1000));
}

inline Document doc_of(const std::vector<std::string>& sentences, const std::vector<std::string>& summary,
                       const Vocab& vocab, int max_len = 128) {
  RawDocument raw{"doc", sentences, summary};
  Document d = corpus::encode_document(raw, vocab, max_len);
  d.oracle_labels = rouge::greedy_oracle(d, 3);
  return d;
}

inline Dataset synth(int n_docs, std::uint64_t seed, int sents = 4, int toks = 5, int vocab = 40) {
  SynthConfig c;
  c.n_docs = n_docs;
  c.sents_per_doc = sents;
  c.tokens_per_sent = toks;
  c.vocab_size = vocab;
  return corpus::synth_generate(c, seed);
}

inline ModelConfig tiny_config(int layers, int heads, int d_model, int vocab) {
  ModelConfig c;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_model = d_model;
  c.d_ff = 2 * d_model;
  c.max_len = 64;
  c.vocab_size = vocab;
  c.dropout = 0.0;
  return c;
}

// Adds noise to every parameter so biases, gammas and the up-projection are
// not at their special initial values.
inline void jitter(Model& m, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  visit_params(m.params, [&](const std::string&, Mat& a) {
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] += scale * rng.normal();
  });
}

inline Model tiny_model(int layers, int heads, int d_model, int vocab, std::uint64_t seed, bool jittered = true) {
  Model m = model::init_model(tiny_config(layers, heads, d_model, vocab), seed);
  if (jittered) jitter(m, seed + 1);
  return m;
}

inline Mat random_mat(int rows, int cols, Rng& rng) {
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
  return m;
}

}  // namespace testutil
