#include "attnwb/model.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace attnwb {

std::string to_string(HeadFamily family) { return family == HeadFamily::pal ? "pal" : "encoder"; }

HeadFamily family_from_string(const std::string& name) {
  if (name == "encoder") return HeadFamily::encoder;
  if (name == "pal") return HeadFamily::pal;
  throw Error("unknown head family '" + name + "'");
}

std::string to_string(const HeadId& id) {
  return to_string(id.family) + "[" + std::to_string(id.layer) + "," + std::to_string(id.head) + "]";
}

AttentionConstraint AttentionConstraint::mask(int size, std::vector<std::uint8_t> allowed) {
  if (size < 1 || allowed.size() != static_cast<std::size_t>(size) * static_cast<std::size_t>(size))
    throw Error("mask must be size x size");
  for (int i = 0; i < size; ++i) {
    const auto row = allowed.begin() + static_cast<std::ptrdiff_t>(i) * size;
    if (std::none_of(row, row + size, [](std::uint8_t b) { return b != 0; }))
      throw Error("empty attention row");
  }
  AttentionConstraint c;
  c.kind = Kind::mask;
  c.size = size;
  c.allowed = std::move(allowed);
  return c;
}

AttentionConstraint AttentionConstraint::fixed(std::vector<int> targets) {
  const int n = static_cast<int>(targets.size());
  if (n < 1) throw Error("fixed attention needs at least one row");
  for (int t : targets)
    if (t < 0 || t >= n) throw Error("fixed attention target out of range");
  AttentionConstraint c;
  c.kind = Kind::fixed;
  c.size = n;
  c.targets = std::move(targets);
  return c;
}

bool AttentionConstraint::allows(int i, int j) const {
  switch (kind) {
    case Kind::free: return true;
    case Kind::mask: return allowed[static_cast<std::size_t>(i) * static_cast<std::size_t>(size) + static_cast<std::size_t>(j)] != 0;
    case Kind::fixed: return targets[static_cast<std::size_t>(i)] == j;
  }
  return false;
}

Mat AttentionConstraint::allowed_matrix(int n) const {
  if (kind != Kind::free && n != size) throw Error("constraint size mismatch");
  Mat m(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) m(i, j) = allows(i, j) ? 1.0 : 0.0;
  return m;
}

void PatternSpec::validate() const {
  if (name.empty()) throw Error("pattern name must not be empty");
  if (kind == PatternKind::relative_position && offset == 0)
    throw Error("relative_position pattern needs a nonzero offset");
}

std::string to_string(PatternKind kind) {
  switch (kind) {
    case PatternKind::matching_token: return "matching_token";
    case PatternKind::intra_sentence: return "intra_sentence";
    case PatternKind::relative_position: return "relative_position";
  }
  return "?";
}

PatternKind pattern_kind_from_string(const std::string& name) {
  if (name == "matching_token") return PatternKind::matching_token;
  if (name == "intra_sentence") return PatternKind::intra_sentence;
  if (name == "relative_position") return PatternKind::relative_position;
  throw Error("unknown pattern kind '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) {
    throw Error("model." + field + ": " + why);
  };
  if (n_layers < 1) fail("n_layers", "must be at least 1");
  if (n_heads < 1) fail("n_heads", "must be at least 1");
  if (d_model < 1) fail("d_model", "must be at least 1");
  if (d_model % n_heads != 0) fail("n_heads", "must divide d_model");
  if (d_ff < 1) fail("d_ff", "must be at least 1");
  if (max_len < 1) fail("max_len", "must be at least 1");
  if (vocab_size < static_cast<int>(kNumReserved)) fail("vocab_size", "must cover the reserved tokens");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout", "must lie in [0, 1)");
}

void PalConfig::validate(const ModelConfig& base) const {
  if (n_heads < 1) throw Error("pal.n_heads: must be at least 1");
  if (d_pal < 1 || d_pal % n_heads != 0) throw Error("pal.d_pal: must be a positive multiple of pal.n_heads");
  if (d_pal > base.d_model) throw Error("pal.d_pal: incompatible with d_model " + std::to_string(base.d_model));
  if (!head_patterns.empty() && static_cast<int>(head_patterns.size()) != n_heads)
    throw Error("pal.heads: need one entry per PAL head");
  for (const auto& p : head_patterns)
    if (p) p->validate();
}

Params Params::zeros_like() const {
  Params z = *this;
  visit_params(z, [](const std::string&, Mat& m) { m.setZero(); });
  return z;
}

std::size_t Params::count() const {
  std::size_t n = 0;
  visit_params(*this, [&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

std::vector<HeadId> Model::heads() const {
  std::vector<HeadId> out;
  for (int l = 0; l < config.n_layers; ++l)
    for (int h = 0; h < config.n_heads; ++h) out.push_back({l, h, HeadFamily::encoder});
  if (pal)
    for (int l = 0; l < config.n_layers; ++l)
      for (int h = 0; h < pal->n_heads; ++h) out.push_back({l, h, HeadFamily::pal});
  return out;
}

bool Model::has_head(const HeadId& id) const {
  if (id.layer < 0 || id.layer >= config.n_layers || id.head < 0) return false;
  if (id.family == HeadFamily::encoder) return id.head < config.n_heads;
  return pal && id.head < pal->n_heads;
}

void Model::validate_assignments() const {
  std::vector<HeadId> seen;
  for (const auto& a : assignments) {
    if (!has_head(a.head)) throw Error("assignment to unknown head " + to_string(a.head));
    if (std::find(seen.begin(), seen.end(), a.head) != seen.end())
      throw Error("head " + to_string(a.head) + " assigned twice");
    seen.push_back(a.head);
    a.pattern.validate();
  }
}

HeadGates HeadGates::ones(const Model& model) {
  HeadGates g;
  g.encoder.assign(static_cast<std::size_t>(model.config.n_layers),
                   std::vector<double>(static_cast<std::size_t>(model.config.n_heads), 1.0));
  if (model.pal)
    g.pal.assign(static_cast<std::size_t>(model.config.n_layers),
                 std::vector<double>(static_cast<std::size_t>(model.pal->n_heads), 1.0));
  return g;
}

double& HeadGates::at(const HeadId& id) {
  auto& fam = id.family == HeadFamily::encoder ? encoder : pal;
  return fam.at(static_cast<std::size_t>(id.layer)).at(static_cast<std::size_t>(id.head));
}

double HeadGates::at(const HeadId& id) const {
  const auto& fam = id.family == HeadFamily::encoder ? encoder : pal;
  return fam.at(static_cast<std::size_t>(id.layer)).at(static_cast<std::size_t>(id.head));
}

const Mat& ForwardTrace::attention(const HeadId& id) const {
  const auto& layer = layers.at(static_cast<std::size_t>(id.layer));
  const auto& heads = id.family == HeadFamily::encoder ? layer.heads : layer.pal_heads;
  return heads.at(static_cast<std::size_t>(id.head)).alpha;
}

namespace model {
namespace {

constexpr double kLnEps = 1e-5;

void add_bias(Mat& x, const Mat& b) { x.rowwise() += b.row(0); }

Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, LnCache& cache) {
  const auto n = x.rows();
  cache.xhat.resize(n, x.cols());
  cache.rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mu = x.row(i).mean();
    const auto centered = (x.row(i).array() - mu).eval();
    const double r = 1.0 / std::sqrt(centered.square().mean() + kLnEps);
    cache.xhat.row(i) = centered * r;
    cache.rstd(i) = r;
  }
  Mat y = cache.xhat.array().rowwise() * g.row(0).array();
  add_bias(y, b);
  return y;
}

Mat layer_norm_backward(const Mat& dy, const Mat& g, const LnCache& cache, Mat& dg, Mat& db) {
  dg.row(0) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Mat dxhat = dy.array().rowwise() * g.row(0).array();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).mean();
    const double m2 = (dxhat.row(i).array() * cache.xhat.row(i).array()).mean();
    dx.row(i) = cache.rstd(i) * (dxhat.row(i).array() - m1 - cache.xhat.row(i).array() * m2);
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}

Mat dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, Rng& rng) {
  Mat m(rows, cols);
  const double keep = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform() >= p ? keep : 0.0;
  return m;
}

void check_constraint(const AttentionConstraint& c, int n) {
  if (c.kind == AttentionConstraint::Kind::free) return;
  if (c.size != n) throw Error("constraint size " + std::to_string(c.size) + " does not match sequence length " + std::to_string(n));
  if (c.kind == AttentionConstraint::Kind::mask) {
    if (c.allowed.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(n))
      throw Error("mask must be size x size");
    for (int i = 0; i < n; ++i) {
      bool any = false;
      for (int j = 0; j < n && !any; ++j) any = c.allows(i, j);
      if (!any) throw Error("empty attention row");
    }
  } else {
    if (c.targets.size() != static_cast<std::size_t>(n)) throw Error("fixed attention needs one target per row");
    for (int t : c.targets)
      if (t < 0 || t >= n) throw Error("fixed attention target out of range");
  }
}

void head_forward(const Mat& qh, const Mat& kh, const Mat& vh, const AttentionConstraint* c,
                  HeadCache& out) {
  const auto n = qh.rows();
  if (c && c->kind == AttentionConstraint::Kind::fixed) {
    out.fixed = true;
    out.alpha = Mat::Zero(n, n);
    out.context.resize(n, vh.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const int t = c->targets[static_cast<std::size_t>(i)];
      out.alpha(i, t) = 1.0;
      out.context.row(i) = vh.row(t);
    }
    return;
  }
  out.fixed = false;
  const double scale = 1.0 / std::sqrt(static_cast<double>(qh.cols()));
  Mat s = (qh * kh.transpose()) * scale;
  const bool masked = c && c->kind == AttentionConstraint::Kind::mask;
  if (masked) {
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < n; ++j)
        if (!c->allows(static_cast<int>(i), static_cast<int>(j))) s(i, j) += kMaskValue;
  }
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    // The vectorized exp clamps its argument and leaves denormals behind.
    if (masked)
      for (Eigen::Index j = 0; j < n; ++j)
        if (!c->allows(static_cast<int>(i), static_cast<int>(j))) s(i, j) = 0.0;
    s.row(i) /= s.row(i).sum();
  }
  out.alpha = std::move(s);
  out.context = out.alpha * vh;
}

// Gradients of one head given d(context).
void head_backward(const HeadCache& hc, const Mat& qh, const Mat& kh, const Mat& vh,
                   const Mat& dctx, Mat& dq, Mat& dk, Mat& dv) {
  dv = hc.alpha.transpose() * dctx;
  if (hc.fixed) {
    dq = Mat::Zero(qh.rows(), qh.cols());
    dk = Mat::Zero(kh.rows(), kh.cols());
    return;
  }
  const double scale = 1.0 / std::sqrt(static_cast<double>(qh.cols()));
  const Mat da = dctx * vh.transpose();
  Mat ds(da.rows(), da.cols());
  for (Eigen::Index i = 0; i < da.rows(); ++i) {
    const double dot = (da.row(i).array() * hc.alpha.row(i).array()).sum();
    ds.row(i) = hc.alpha.row(i).array() * (da.row(i).array() - dot);
  }
  ds *= scale;
  dq = ds * kh;
  dk = ds.transpose() * qh;
}

// Multi-head attention over projected q/k/v; returns the concatenated gated output.
Mat multi_head(const Mat& q, const Mat& k, const Mat& v, int n_heads,
               const std::vector<const AttentionConstraint*>& constraints,
               const std::vector<double>& gates, std::vector<HeadCache>& caches) {
  const auto n = q.rows();
  const auto dh = q.cols() / n_heads;
  caches.assign(static_cast<std::size_t>(n_heads), {});
  Mat gated(n, q.cols());
  for (int h = 0; h < n_heads; ++h) {
    const Mat qh = q.middleCols(h * dh, dh);
    const Mat kh = k.middleCols(h * dh, dh);
    const Mat vh = v.middleCols(h * dh, dh);
    auto& hc = caches[static_cast<std::size_t>(h)];
    head_forward(qh, kh, vh, constraints[static_cast<std::size_t>(h)], hc);
    gated.middleCols(h * dh, dh) = gates[static_cast<std::size_t>(h)] * hc.context;
  }
  return gated;
}

// Backward through multi_head. Accumulates gate gradients and returns dq/dk/dv.
void multi_head_backward(const Mat& q, const Mat& k, const Mat& v, int n_heads,
                         const std::vector<HeadCache>& caches, const std::vector<double>& gates,
                         const Mat& dgated, std::vector<double>& dgates, Mat& dq, Mat& dk, Mat& dv) {
  const auto dh = q.cols() / n_heads;
  dq.resize(q.rows(), q.cols());
  dk.resize(k.rows(), k.cols());
  dv.resize(v.rows(), v.cols());
  for (int h = 0; h < n_heads; ++h) {
    const auto& hc = caches[static_cast<std::size_t>(h)];
    const Mat dg_h = dgated.middleCols(h * dh, dh);
    dgates[static_cast<std::size_t>(h)] += (dg_h.array() * hc.context.array()).sum();
    const Mat dctx = gates[static_cast<std::size_t>(h)] * dg_h;
    Mat dqh, dkh, dvh;
    head_backward(hc, q.middleCols(h * dh, dh), k.middleCols(h * dh, dh), v.middleCols(h * dh, dh),
                  dctx, dqh, dkh, dvh);
    dq.middleCols(h * dh, dh) = dqh;
    dk.middleCols(h * dh, dh) = dkh;
    dv.middleCols(h * dh, dh) = dvh;
  }
}

void check_gates(const Model& m, const HeadGates& g) {
  auto bad = [] { throw Error("gate vector does not match the model's heads"); };
  if (g.encoder.size() != static_cast<std::size_t>(m.config.n_layers)) bad();
  for (const auto& row : g.encoder)
    if (row.size() != static_cast<std::size_t>(m.config.n_heads)) bad();
  if (m.pal) {
    if (g.pal.size() != static_cast<std::size_t>(m.config.n_layers)) bad();
    for (const auto& row : g.pal)
      if (row.size() != static_cast<std::size_t>(m.pal->n_heads)) bad();
  } else if (!g.pal.empty()) {
    bad();
  }
}

}  // namespace

void init_param(const std::string& name, Mat& m, Rng& rng) {
  auto ends_with = [&](std::string_view suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  const auto leaf = name.substr(name.rfind('.') == std::string::npos ? 0 : name.rfind('.') + 1);
  if (name == "tok_emb" || name == "pos_emb") {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = 0.02 * rng.normal();
  } else if (ends_with("gamma")) {
    m.setOnes();
  } else if (ends_with("beta") || leaf == "b" || (leaf.size() == 2 && leaf[0] == 'b') ||
             (name.starts_with("pal.") && leaf == "up")) {
    m.setZero();
  } else {
    const double std = std::sqrt(2.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * rng.normal();
  }
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model model;
  model.config = config;
  const int d = config.d_model;
  Params& p = model.params;
  p.tok_emb.resize(config.vocab_size, d);
  p.pos_emb.resize(config.max_len, d);
  p.emb_ln_g.resize(1, d);
  p.emb_ln_b.resize(1, d);
  p.layers.resize(static_cast<std::size_t>(config.n_layers));
  for (auto& L : p.layers) {
    for (Mat* w : {&L.wq, &L.wk, &L.wv, &L.wo}) w->resize(d, d);
    for (Mat* b : {&L.bq, &L.bk, &L.bv, &L.bo, &L.ln1_g, &L.ln1_b, &L.b2, &L.ln2_g, &L.ln2_b}) b->resize(1, d);
    L.w1.resize(d, config.d_ff);
    L.b1.resize(1, config.d_ff);
    L.w2.resize(config.d_ff, d);
  }
  p.cls_w.resize(d, 1);
  p.cls_b.resize(1, 1);
  Rng rng(seed);
  visit_params(p, [&](const std::string& name, Mat& m) { init_param(name, m, rng); });
  return model;
}

AttentionOutput constrained_attention(const Mat& q, const Mat& k, const Mat& v,
                                      const AttentionConstraint& constraint) {
  if (q.rows() != k.rows() || k.rows() != v.rows() || q.cols() != k.cols())
    throw Error("constrained_attention: shape mismatch");
  check_constraint(constraint, static_cast<int>(q.rows()));
  HeadCache hc;
  head_forward(q, k, v, &constraint, hc);
  return {std::move(hc.context), std::move(hc.alpha)};
}

ForwardTrace forward(const Model& model, const Document& doc, const ConstraintSet& constraints,
                     const HeadGates& gates, const ForwardOptions& options) {
  const ModelConfig& cfg = model.config;
  const Params& P = model.params;
  const int n = doc.length();
  if (n < 1) throw Error("forward: empty document");
  if (n > cfg.max_len) throw Error("forward: document length " + std::to_string(n) + " exceeds max_len");
  check_gates(model, gates);

  const auto L = static_cast<std::size_t>(cfg.n_layers);
  std::vector<std::vector<const AttentionConstraint*>> enc_c(L, std::vector<const AttentionConstraint*>(static_cast<std::size_t>(cfg.n_heads), nullptr));
  std::vector<std::vector<const AttentionConstraint*>> pal_c(L, std::vector<const AttentionConstraint*>(model.pal ? static_cast<std::size_t>(model.pal->n_heads) : 0, nullptr));
  for (const auto& [id, c] : constraints) {
    if (!model.has_head(id)) throw Error("constraint for unknown head " + to_string(id));
    check_constraint(c, n);
    auto& slot = id.family == HeadFamily::encoder ? enc_c : pal_c;
    slot[static_cast<std::size_t>(id.layer)][static_cast<std::size_t>(id.head)] = &c;
  }

  const bool drop = options.training && cfg.dropout > 0.0;
  if (drop && !options.rng) throw Error("forward: dropout needs an rng");

  ForwardTrace tr;
  tr.length = n;
  tr.bos = doc.bos_positions();
  tr.tokens.assign(doc.flat.begin(), doc.flat.begin() + n);
  tr.gates = gates;

  const int d = cfg.d_model;
  Mat x(n, d);
  for (int i = 0; i < n; ++i) {
    const TokenId t = tr.tokens[static_cast<std::size_t>(i)];
    if (t < 0 || t >= cfg.vocab_size) throw Error("forward: token id outside vocab");
    x.row(i) = P.tok_emb.row(t) + P.pos_emb.row(i);
  }
  x = layer_norm(x, P.emb_ln_g, P.emb_ln_b, tr.emb_ln);
  if (drop) {
    tr.drop_emb = dropout_mask(n, d, cfg.dropout, *options.rng);
    x.array() *= tr.drop_emb.array();
  }

  tr.layers.resize(L);
  for (std::size_t l = 0; l < L; ++l) {
    const LayerParams& W = P.layers[l];
    LayerCache& c = tr.layers[l];
    c.input = x;
    c.q = x * W.wq;
    add_bias(c.q, W.bq);
    c.k = x * W.wk;
    add_bias(c.k, W.bk);
    c.v = x * W.wv;
    add_bias(c.v, W.bv);
    c.gated = multi_head(c.q, c.k, c.v, cfg.n_heads, enc_c[l], gates.encoder[l], c.heads);
    Mat attn = c.gated * W.wo;
    add_bias(attn, W.bo);
    if (drop) {
      c.drop_attn = dropout_mask(n, d, cfg.dropout, *options.rng);
      attn.array() *= c.drop_attn.array();
    }
    c.h1 = layer_norm(x + attn, W.ln1_g, W.ln1_b, c.ln1);
    c.ff_pre = c.h1 * W.w1;
    add_bias(c.ff_pre, W.b1);
    c.ff_act = c.ff_pre.unaryExpr([](double v) { return gelu(v); });
    Mat ff = c.ff_act * W.w2;
    add_bias(ff, W.b2);
    if (drop) {
      c.drop_ff = dropout_mask(n, d, cfg.dropout, *options.rng);
      ff.array() *= c.drop_ff.array();
    }
    c.h2 = layer_norm(c.h1 + ff, W.ln2_g, W.ln2_b, c.ln2);
    c.output = c.h2;
    if (model.pal) {
      const PalParams& A = P.pals[l];
      c.pal_x = x * A.down;
      c.pal_q = c.pal_x * A.wq;
      c.pal_k = c.pal_x * A.wk;
      c.pal_v = c.pal_x * A.wv;
      c.pal_gated = multi_head(c.pal_q, c.pal_k, c.pal_v, model.pal->n_heads, pal_c[l], gates.pal[l], c.pal_heads);
      c.pal_proj = c.pal_gated * A.wo;
      c.output += c.pal_proj * A.up;
    }
    x = c.output;
  }

  tr.logits.reserve(tr.bos.size());
  for (int b : tr.bos) tr.logits.push_back(x.row(b).dot(P.cls_w.col(0)) + P.cls_b(0, 0));
  return tr;
}

double loss(std::span<const double> logits, std::span<const int> labels) {
  if (logits.size() != labels.size()) throw Error("loss: label count does not match sentence count");
  if (logits.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t s = 0; s < logits.size(); ++s) {
    const double z = logits[s];
    const double softplus = z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
    total += softplus - (labels[s] ? z : 0.0);
  }
  return total / static_cast<double>(logits.size());
}

double loss(const ForwardTrace& trace, std::span<const int> labels) { return loss(trace.logits, labels); }

Gradients backward(const Model& model, const ForwardTrace& tr, std::span<const int> labels) {
  const ModelConfig& cfg = model.config;
  const Params& P = model.params;
  Gradients g;
  g.loss = loss(tr, labels);
  g.params = P.zeros_like();
  g.gates = tr.gates;
  for (auto& row : g.gates.encoder) std::fill(row.begin(), row.end(), 0.0);
  for (auto& row : g.gates.pal) std::fill(row.begin(), row.end(), 0.0);
  Params& G = g.params;

  const int n = tr.length;
  const double inv_s = 1.0 / static_cast<double>(tr.logits.size());
  Mat dx = Mat::Zero(n, cfg.d_model);
  const Mat& xl = tr.final_hidden();
  for (std::size_t s = 0; s < tr.logits.size(); ++s) {
    const double z = tr.logits[s];
    const double dz = (1.0 / (1.0 + std::exp(-z)) - (labels[s] ? 1.0 : 0.0)) * inv_s;
    const int b = tr.bos[s];
    dx.row(b) += dz * P.cls_w.col(0).transpose();
    G.cls_w.col(0) += dz * xl.row(b).transpose();
    G.cls_b(0, 0) += dz;
  }

  for (std::size_t li = tr.layers.size(); li-- > 0;) {
    const LayerParams& W = P.layers[li];
    LayerParams& GW = G.layers[li];
    const LayerCache& c = tr.layers[li];
    Mat dinput_pal;
    if (model.pal) {
      const PalParams& A = P.pals[li];
      PalParams& GA = G.pals[li];
      GA.up += c.pal_proj.transpose() * dx;
      const Mat dproj = dx * A.up.transpose();
      GA.wo += c.pal_gated.transpose() * dproj;
      const Mat dgated = dproj * A.wo.transpose();
      Mat dq, dk, dv;
      multi_head_backward(c.pal_q, c.pal_k, c.pal_v, model.pal->n_heads, c.pal_heads,
                          tr.gates.pal[li], dgated, g.gates.pal[li], dq, dk, dv);
      GA.wq += c.pal_x.transpose() * dq;
      GA.wk += c.pal_x.transpose() * dk;
      GA.wv += c.pal_x.transpose() * dv;
      const Mat dpx = dq * A.wq.transpose() + dk * A.wk.transpose() + dv * A.wv.transpose();
      GA.down += c.input.transpose() * dpx;
      dinput_pal = dpx * A.down.transpose();
    }

    // dx is the gradient at h2 (plus the PAL residual handled above).
    const Mat dr2 = layer_norm_backward(dx, W.ln2_g, c.ln2, GW.ln2_g, GW.ln2_b);
    Mat dff = dr2;
    if (c.drop_ff.size() > 0) dff.array() *= c.drop_ff.array();
    GW.w2 += c.ff_act.transpose() * dff;
    GW.b2.row(0) += dff.colwise().sum();
    Mat dpre = dff * W.w2.transpose();
    dpre.array() *= c.ff_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    GW.w1 += c.h1.transpose() * dpre;
    GW.b1.row(0) += dpre.colwise().sum();
    const Mat dh1 = dr2 + dpre * W.w1.transpose();

    const Mat dr1 = layer_norm_backward(dh1, W.ln1_g, c.ln1, GW.ln1_g, GW.ln1_b);
    Mat dattn = dr1;
    if (c.drop_attn.size() > 0) dattn.array() *= c.drop_attn.array();
    GW.wo += c.gated.transpose() * dattn;
    GW.bo.row(0) += dattn.colwise().sum();
    const Mat dgated = dattn * W.wo.transpose();
    Mat dq, dk, dv;
    multi_head_backward(c.q, c.k, c.v, cfg.n_heads, c.heads, tr.gates.encoder[li], dgated,
                        g.gates.encoder[li], dq, dk, dv);
    GW.wq += c.input.transpose() * dq;
    GW.bq.row(0) += dq.colwise().sum();
    GW.wk += c.input.transpose() * dk;
    GW.bk.row(0) += dk.colwise().sum();
    GW.wv += c.input.transpose() * dv;
    GW.bv.row(0) += dv.colwise().sum();

    Mat dinput = dr1 + dq * W.wq.transpose() + dk * W.wk.transpose() + dv * W.wv.transpose();
    if (model.pal) dinput += dinput_pal;
    dx = std::move(dinput);
  }

  if (tr.drop_emb.size() > 0) dx.array() *= tr.drop_emb.array();
  const Mat de = layer_norm_backward(dx, P.emb_ln_g, tr.emb_ln, G.emb_ln_g, G.emb_ln_b);
  for (int i = 0; i < n; ++i) {
    G.tok_emb.row(tr.tokens[static_cast<std::size_t>(i)]) += de.row(i);
    G.pos_emb.row(i) += de.row(i);
  }
  return g;
}

Gradients gradients(const Model& model, const Document& doc, const ConstraintSet& constraints,
                    const HeadGates& gates, std::span<const int> labels, const ForwardOptions& options) {
  const ForwardTrace tr = forward(model, doc, constraints, gates, options);
  return backward(model, tr, labels);
}

}  // namespace model
}  // namespace attnwb
