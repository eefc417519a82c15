#pragma once

#include "attnwb/attention.hpp"
#include "attnwb/corpus.hpp"

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace attnwb {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 4;
  int d_model = 32;
  int d_ff = 64;
  int max_len = 128;
  int vocab_size = 0;
  double dropout = 0.1;

  int head_dim() const { return d_model / n_heads; }
  // Throws naming the first invalid field.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

// Projected attention layer settings. head_patterns is either empty (all
// heads free) or has one entry per PAL head.
struct PalConfig {
  int d_pal = 16;
  int n_heads = 4;
  std::vector<std::optional<PatternSpec>> head_patterns;
  bool freeze_base = false;

  int head_dim() const { return d_pal / n_heads; }
  void validate(const ModelConfig& base) const;
  bool operator==(const PalConfig&) const = default;
};

struct LayerParams {
  Mat wq, bq, wk, bk, wv, bv;  // d_model x d_model, 1 x d_model
  Mat wo, bo;
  Mat ln1_g, ln1_b;
  Mat w1, b1;  // d_model x d_ff
  Mat w2, b2;  // d_ff x d_model
  Mat ln2_g, ln2_b;
};

// Bias-free adapter: down-projection, attention in the reduced space, output
// and up-projection back to d_model.
struct PalParams {
  Mat down;        // d_model x d_pal
  Mat wq, wk, wv;  // d_pal x d_pal
  Mat wo;          // d_pal x d_pal
  Mat up;          // d_pal x d_model
};

struct Params {
  Mat tok_emb;  // vocab x d_model
  Mat pos_emb;  // max_len x d_model
  Mat emb_ln_g, emb_ln_b;
  std::vector<LayerParams> layers;
  Mat cls_w;  // d_model x 1
  Mat cls_b;  // 1 x 1
  std::vector<PalParams> pals;  // empty unless PALs are attached

  // Same shapes, all zeros.
  Params zeros_like() const;
  std::size_t count() const;
};

// Visits every parameter array in checkpoint order: embeddings, encoder
// layers, classifier, then PAL arrays.
template <class P, class F>
void visit_params(P& p, F&& f) {
  f(std::string("tok_emb"), p.tok_emb);
  f(std::string("pos_emb"), p.pos_emb);
  f(std::string("emb_ln.gamma"), p.emb_ln_g);
  f(std::string("emb_ln.beta"), p.emb_ln_b);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "wq", L.wq);
    f(pre + "bq", L.bq);
    f(pre + "wk", L.wk);
    f(pre + "bk", L.bk);
    f(pre + "wv", L.wv);
    f(pre + "bv", L.bv);
    f(pre + "wo", L.wo);
    f(pre + "bo", L.bo);
    f(pre + "ln1.gamma", L.ln1_g);
    f(pre + "ln1.beta", L.ln1_b);
    f(pre + "w1", L.w1);
    f(pre + "b1", L.b1);
    f(pre + "w2", L.w2);
    f(pre + "b2", L.b2);
    f(pre + "ln2.gamma", L.ln2_g);
    f(pre + "ln2.beta", L.ln2_b);
  }
  f(std::string("cls.w"), p.cls_w);
  f(std::string("cls.b"), p.cls_b);
  for (std::size_t l = 0; l < p.pals.size(); ++l) {
    auto& A = p.pals[l];
    const std::string pre = "pal." + std::to_string(l) + ".";
    f(pre + "down", A.down);
    f(pre + "wq", A.wq);
    f(pre + "wk", A.wk);
    f(pre + "wv", A.wv);
    f(pre + "wo", A.wo);
    f(pre + "up", A.up);
  }
}

struct Model {
  ModelConfig config;
  std::optional<PalConfig> pal;
  // Patterns enforced on specific heads; rebuilt per document.
  std::vector<HeadAssignment> assignments;
  Params params;

  // Encoder heads layer-major, then PAL heads layer-major.
  std::vector<HeadId> heads() const;
  bool has_head(const HeadId& id) const;
  void validate_assignments() const;
};

// One gate per head, 1 by default.
struct HeadGates {
  std::vector<std::vector<double>> encoder;
  std::vector<std::vector<double>> pal;

  static HeadGates ones(const Model& model);
  double& at(const HeadId& id);
  double at(const HeadId& id) const;
};

struct HeadCache {
  Mat alpha;    // n x n
  Mat context;  // alpha * V_h before gating, n x head_dim
  bool fixed = false;
};

struct LnCache {
  Mat xhat;
  Eigen::VectorXd rstd;
};

struct LayerCache {
  Mat input;
  Mat q, k, v;
  std::vector<HeadCache> heads;
  Mat gated;  // concatenated gated head outputs
  Mat drop_attn;
  LnCache ln1;
  Mat h1;
  Mat ff_pre, ff_act;
  Mat drop_ff;
  LnCache ln2;
  Mat h2;
  // PAL branch, empty without adapters.
  Mat pal_x, pal_q, pal_k, pal_v;
  std::vector<HeadCache> pal_heads;
  Mat pal_gated, pal_proj;
  Mat output;
};

struct ForwardTrace {
  int length = 0;
  std::vector<int> bos;
  std::vector<TokenId> tokens;
  HeadGates gates;
  LnCache emb_ln;
  Mat drop_emb;
  std::vector<LayerCache> layers;
  std::vector<double> logits;

  const Mat& final_hidden() const { return layers.back().output; }
  // Attention matrix of a head over the non-PAD positions.
  const Mat& attention(const HeadId& id) const;
};

struct ForwardOptions {
  bool training = false;  // enables dropout
  Rng* rng = nullptr;     // required when training with dropout > 0
};

struct Gradients {
  Params params;
  HeadGates gates;
  double loss = 0.0;
};

struct AttentionOutput {
  Mat output;
  Mat alpha;
};

namespace model {

inline constexpr double kMaskValue = -1e9;

// Fills one array by its visit_params name: small normal for embeddings,
// ones for gamma, zeros for biases and PAL up-projections, Xavier normal
// otherwise.
void init_param(const std::string& name, Mat& m, Rng& rng);

Model init_model(const ModelConfig& config, std::uint64_t seed);

// Single-head attention under a constraint, scaled by 1/sqrt(head_dim).
AttentionOutput constrained_attention(const Mat& q, const Mat& k, const Mat& v,
                                      const AttentionConstraint& constraint);

ForwardTrace forward(const Model& model, const Document& doc, const ConstraintSet& constraints,
                     const HeadGates& gates, const ForwardOptions& options = {});

// Mean binary cross-entropy over sentences, computed from logits.
double loss(const ForwardTrace& trace, std::span<const int> labels);
double loss(std::span<const double> logits, std::span<const int> labels);

// Reverse-mode gradients of loss(trace, labels) with respect to every
// parameter and every gate.
Gradients backward(const Model& model, const ForwardTrace& trace, std::span<const int> labels);

Gradients gradients(const Model& model, const Document& doc, const ConstraintSet& constraints,
                    const HeadGates& gates, std::span<const int> labels,
                    const ForwardOptions& options = {});

// Checkpoint: magic, version, JSON header (config, PAL config, assignments,
// parameter names and shapes), then each array in visit_params order as
// row-major little-endian float64.
std::string serialize(const Model& model);
Model deserialize(const std::string& bytes);
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace model
}  // namespace attnwb
