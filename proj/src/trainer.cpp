#include "attnwb/trainer.hpp"

#include "attnwb/json_io.hpp"
#include "attnwb/pal.hpp"
#include "attnwb/patterns.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

namespace attnwb {

void TrainConfig::validate() const {
  auto fail = [](const std::string& field, const std::string& why) { throw Error("train." + field + ": " + why); };
  if (steps < 1) fail("steps", "must be at least 1");
  if (validate_every < 1 || validate_every > steps) fail("validate_every", "must lie in [1, steps]");
  if (batch_size < 1) fail("batch_size", "must be at least 1");
  if (accumulation < 1 || batch_size % accumulation != 0) fail("accumulation", "must divide batch_size");
  if (warmup < 0) fail("warmup", "must be nonnegative");
  if (!(peak_lr > 0.0)) fail("peak_lr", "must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0)) fail("beta1", "must lie in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) fail("beta2", "must lie in (0, 1)");
  if (!(eps > 0.0)) fail("eps", "must be positive");
  if (top_k < 1) fail("top_k", "must be at least 1");
  if (summary_k < 1) fail("summary_k", "must be at least 1");
}

OptimizerState OptimizerState::for_params(const Params& p) {
  OptimizerState s;
  s.m = p.zeros_like();
  s.v = p.zeros_like();
  return s;
}

namespace trainer {

double lr_at(long step, int warmup, double peak) {
  if (step < 1) throw Error("lr_at: step must be at least 1");
  if (warmup < 1) throw Error("lr_at: warmup must be at least 1");
  const double s = static_cast<double>(step), w = static_cast<double>(warmup);
  return peak * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

void adam_step(Params& params, const Params& grads, OptimizerState& state, double lr, double beta1,
               double beta2, double eps, bool pal_only) {
  std::vector<const Mat*> g_list;
  visit_params(grads, [&](const std::string&, const Mat& g) { g_list.push_back(&g); });
  for (const Mat* g : g_list)
    if (!g->allFinite()) throw Error("non-finite gradient");

  ++state.step;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  std::vector<Mat*> m_list, v_list;
  visit_params(state.m, [&](const std::string&, Mat& m) { m_list.push_back(&m); });
  visit_params(state.v, [&](const std::string&, Mat& v) { v_list.push_back(&v); });
  if (m_list.size() != g_list.size() || v_list.size() != g_list.size())
    throw Error("adam_step: optimizer state does not match parameters");
  std::size_t i = 0;
  visit_params(params, [&](const std::string& name, Mat& p) {
    const Mat& g = *g_list[i];
    Mat& m = *m_list[i];
    Mat& v = *v_list[i];
    ++i;
    if (g.rows() != p.rows() || g.cols() != p.cols()) throw Error("adam_step: shape mismatch at " + name);
    if (pal_only && !name.starts_with("pal.")) return;
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g.cwiseAbs2();
    p.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  });
}

Gradients batch_gradients(const Model& model, const Dataset& data, std::span<const std::size_t> docs,
                          const std::vector<std::uint64_t>& dropout_seeds, bool training, unsigned workers) {
  std::vector<Gradients> per(docs.size());
  const HeadGates ones = HeadGates::ones(model);
  parallel_for(docs.size(), [&](std::size_t b) {
    const Document& doc = data.docs.at(docs[b]);
    if (doc.oracle_labels.size() != doc.sentences.size())
      throw Error("document " + doc.id + " has no oracle labels");
    Rng rng(dropout_seeds.empty() ? 0 : dropout_seeds[b]);
    ForwardOptions opts;
    opts.training = training;
    opts.rng = &rng;
    per[b] = model::gradients(model, doc, patterns::constraints_for(model, doc), ones, doc.oracle_labels, opts);
  }, workers);

  Gradients total;
  total.params = model.params.zeros_like();
  total.gates = ones;
  double sentences = 0.0;
  for (std::size_t b = 0; b < per.size(); ++b) {
    const double s = static_cast<double>(data.docs[docs[b]].sentences.size());
    sentences += s;
    total.loss += s * per[b].loss;
    std::vector<const Mat*> src;
    visit_params(per[b].params, [&](const std::string&, const Mat& g) { src.push_back(&g); });
    std::size_t i = 0;
    visit_params(total.params, [&](const std::string&, Mat& g) { g += s * *src[i++]; });
  }
  if (sentences > 0.0) {
    total.loss /= sentences;
    visit_params(total.params, [&](const std::string&, Mat& g) { g /= sentences; });
  }
  return total;
}

ValidationPoint validate(const Model& model, const Dataset& data, int k, unsigned workers) {
  if (data.docs.empty()) throw Error("validate: empty dataset");
  const std::size_t n = data.docs.size();
  std::vector<std::array<double, 4>> per(n);
  const HeadGates ones = HeadGates::ones(model);
  parallel_for(n, [&](std::size_t d) {
    const Document& doc = data.docs[d];
    const ForwardTrace tr = model::forward(model, doc, patterns::constraints_for(model, doc), ones);
    const auto pred = inference::select_summary(tr.logits, doc, k, false);
    const auto cand = rouge::concat_sentences(doc, pred.selected);
    const auto gold = doc.gold_tokens();
    per[d] = {model::loss(tr, doc.oracle_labels), rouge::rouge_n(cand, gold, 1).f1,
              rouge::rouge_n(cand, gold, 2).f1, rouge::rouge_l(cand, gold).f1};
  }, workers);
  std::array<double, 4> sum{};
  for (const auto& row : per)
    for (std::size_t i = 0; i < 4; ++i) sum[i] += row[i];
  ValidationPoint p;
  p.valid_loss = sum[0] / static_cast<double>(n);
  p.rouge1 = sum[1] / static_cast<double>(n);
  p.rouge2 = sum[2] / static_cast<double>(n);
  p.rouge_l = sum[3] / static_cast<double>(n);
  return p;
}

json train_config_json(const TrainConfig& c) {
  return json{{"steps", c.steps},
              {"validate_every", c.validate_every},
              {"batch_size", c.batch_size},
              {"accumulation", c.accumulation},
              {"warmup", c.effective_warmup()},
              {"peak_lr", c.peak_lr},
              {"beta1", c.beta1},
              {"beta2", c.beta2},
              {"eps", c.eps},
              {"seed", c.seed},
              {"top_k", c.top_k},
              {"summary_k", c.summary_k},
              {"assignments", c.assignments}};
}

TrainResult train_run(Model model, const Dataset& train, const Dataset& valid, const TrainConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  config.validate();
  if (train.docs.empty()) throw Error("train_run: empty training set");
  if (valid.docs.empty()) throw Error("train_run: empty validation set");
  for (const auto* ds : {&train, &valid})
    for (const auto& doc : ds->docs)
      if (doc.oracle_labels.size() != doc.sentences.size())
        throw Error("document " + doc.id + " in split '" + ds->split + "' has no oracle labels");
  if (!config.assignments.empty()) model.assignments = config.assignments;
  model.validate_assignments();
  const bool pal_only = model.pal && model.pal->freeze_base;

  TrainResult result;
  result.log.config = json{{"model", model.config},
                           {"pal", model.pal ? json(*model.pal) : json(nullptr)},
                           {"assignments", model.assignments},
                           {"train", train_config_json(config)},
                           {"train_docs", train.docs.size()},
                           {"valid_docs", valid.docs.size()}};

  OptimizerState opt = OptimizerState::for_params(model.params);
  Rng order_rng(derive_seed(config.seed, "shuffle"));
  std::vector<std::size_t> order(train.docs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  shuffle(order, order_rng);
  std::size_t cursor = 0;

  const int warmup = config.effective_warmup();
  const int micro = config.batch_size / config.accumulation;
  double loss_sum = 0.0;
  int loss_steps = 0;
  for (int step = 1; step <= config.steps; ++step) {
    Gradients acc;
    acc.params = model.params.zeros_like();
    double sentences = 0.0;
    for (int a = 0; a < config.accumulation; ++a) {
      std::vector<std::size_t> batch;
      std::vector<std::uint64_t> seeds;
      for (int b = 0; b < micro; ++b) {
        if (cursor == order.size()) {
          shuffle(order, order_rng);
          cursor = 0;
        }
        batch.push_back(order[cursor++]);
        seeds.push_back(derive_seed(config.seed, "dropout/" + std::to_string(step) + "/" +
                                                     std::to_string(a * micro + b)));
      }
      const Gradients g = batch_gradients(model, train, batch, seeds, true, config.workers);
      double s = 0.0;
      for (std::size_t d : batch) s += static_cast<double>(train.docs[d].sentences.size());
      sentences += s;
      acc.loss += s * g.loss;
      std::vector<const Mat*> src;
      visit_params(g.params, [&](const std::string&, const Mat& m) { src.push_back(&m); });
      std::size_t i = 0;
      visit_params(acc.params, [&](const std::string&, Mat& m) { m += s * *src[i++]; });
    }
    visit_params(acc.params, [&](const std::string&, Mat& m) { m /= sentences; });
    loss_sum += acc.loss / sentences;
    ++loss_steps;
    adam_step(model.params, acc.params, opt, lr_at(step, warmup, config.peak_lr), config.beta1,
              config.beta2, config.eps, pal_only);

    if (step % config.validate_every == 0 || step == config.steps) {
      ValidationPoint p = validate(model, valid, config.summary_k, config.workers);
      p.step = step;
      p.train_loss = loss_sum / loss_steps;
      loss_sum = 0.0;
      loss_steps = 0;
      result.log.points.push_back(p);
      auto& kept = result.kept;
      const auto pos = std::find_if(kept.begin(), kept.end(),
                                    [&](const KeptCheckpoint& c) { return p.valid_loss < c.valid_loss; });
      if (pos - kept.begin() < config.top_k) {
        kept.insert(pos, KeptCheckpoint{step, p.valid_loss, model});
        if (static_cast<int>(kept.size()) > config.top_k) kept.pop_back();
      }
    }
  }

  for (const auto& c : result.kept) result.log.checkpoints.push_back({c.step, c.valid_loss, ""});
  result.log.best_step = result.kept.front().step;
  result.log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return result;
}

std::vector<HeadAssignment> assign_patterns(const ModelConfig& config, const std::vector<PatternSpec>& patterns) {
  if (static_cast<int>(patterns.size()) > config.n_heads)
    throw Error(std::to_string(patterns.size()) + " patterns but only " + std::to_string(config.n_heads) +
                " heads per layer");
  std::vector<HeadAssignment> out;
  for (int l = 0; l < config.n_layers; ++l)
    for (std::size_t h = 0; h < patterns.size(); ++h) out.push_back({{l, static_cast<int>(h), HeadFamily::encoder}, patterns[h]});
  return out;
}

std::vector<PatternSpec> injection_patterns() {
  return {patterns::matching_token(), patterns::intra_sentence(), patterns::relative(-1), patterns::relative(1)};
}

std::vector<PatternSpec> subset_patterns(unsigned bits) {
  if (bits > 7) throw Error("pattern subset out of range");
  std::vector<PatternSpec> out;
  if (bits & 1u) out.push_back(patterns::matching_token());
  if (bits & 2u) out.push_back(patterns::intra_sentence());
  if (bits & 4u) {
    out.push_back(patterns::relative(-1));
    out.push_back(patterns::relative(1));
  }
  return out;
}

std::string subset_name(unsigned bits) {
  if (bits == 0) return "none";
  std::string name;
  auto add = [&](const char* part) { name += name.empty() ? part : std::string("+") + part; };
  if (bits & 1u) add("m");
  if (bits & 2u) add("i");
  if (bits & 4u) add("p");
  return name;
}

namespace {

void check_experiment(const Experiment& exp) {
  if (!exp.train_data || !exp.valid_data) throw Error("experiment needs train and validation data");
}

VariantResult finish_variant(const std::string& name, const std::vector<PatternSpec>& pats, TrainResult&& r,
                             const Experiment& exp) {
  const Dataset& eval = exp.eval_data ? *exp.eval_data : *exp.valid_data;
  VariantResult v;
  v.name = name;
  v.patterns = pats;
  v.plain = inference::evaluate(r.best(), eval, exp.train.summary_k, false, exp.train.workers);
  v.blocked = inference::evaluate(r.best(), eval, exp.train.summary_k, true, exp.train.workers);
  v.log = std::move(r.log);
  return v;
}

Model fresh_model(const Experiment& exp) {
  return model::init_model(exp.model, derive_seed(exp.train.seed, "init"));
}

json rouge_triple(const EvalResult& e) {
  return json{{"rouge1", e.rouge1.f1}, {"rouge2", e.rouge2.f1}, {"rougeL", e.rouge_l.f1}};
}

}  // namespace

VariantResult run_variant(const Experiment& exp, const std::string& name, const std::vector<PatternSpec>& pats) {
  check_experiment(exp);
  TrainConfig cfg = exp.train;
  cfg.assignments = assign_patterns(exp.model, pats);
  return finish_variant(name, pats, train_run(fresh_model(exp), *exp.train_data, *exp.valid_data, cfg), exp);
}

std::vector<VariantResult> ablation_suite(const Experiment& exp, std::vector<unsigned> subsets) {
  if (subsets.empty()) subsets = {0, 1, 2, 4, 3, 5, 6, 7};
  for (unsigned bits : subsets) {
    const auto pats = subset_patterns(bits);
    if (static_cast<int>(pats.size()) > exp.model.n_heads)
      throw Error("subset " + subset_name(bits) + " needs more heads than the model has");
  }
  std::vector<VariantResult> rows;
  for (unsigned bits : subsets) rows.push_back(run_variant(exp, subset_name(bits), subset_patterns(bits)));
  return rows;
}

json ablation_json(const std::vector<VariantResult>& rows) {
  const VariantResult* base = nullptr;
  for (const auto& r : rows)
    if (r.patterns.empty()) base = &r;
  json out = json::array();
  for (const auto& r : rows) {
    json row = {{"subset", r.name}, {"patterns", r.patterns}, {"scores", rouge_triple(r.plain)}};
    if (base) {
      row["delta"] = {{"rouge1", r.plain.rouge1.f1 - base->plain.rouge1.f1},
                      {"rouge2", r.plain.rouge2.f1 - base->plain.rouge2.f1},
                      {"rougeL", r.plain.rouge_l.f1 - base->plain.rouge_l.f1}};
    }
    out.push_back(std::move(row));
  }
  return json{{"rows", out}};
}

std::vector<VariantResult> distill_compare(const Experiment& exp, const std::vector<PatternSpec>& pats,
                                           const std::optional<PalConfig>& pal) {
  check_experiment(exp);
  std::vector<VariantResult> rows;
  TrainConfig base_cfg = exp.train;
  base_cfg.assignments.clear();
  TrainResult base = train_run(fresh_model(exp), *exp.train_data, *exp.valid_data, base_cfg);
  const Model baseline = base.best();
  rows.push_back(finish_variant("baseline", {}, std::move(base), exp));
  rows.push_back(run_variant(exp, "pattern", pats));
  if (pal) {
    PalConfig pc = *pal;
    pc.head_patterns.assign(static_cast<std::size_t>(pc.n_heads), std::nullopt);
    for (std::size_t h = 0; h < pats.size() && h < pc.head_patterns.size(); ++h) pc.head_patterns[h] = pats[h];
    Model augmented = pal::attach_pals(baseline, pc, derive_seed(exp.train.seed, "pal"));
    TrainConfig cfg = exp.train;
    cfg.assignments.clear();
    rows.push_back(finish_variant("pal", pats, train_run(std::move(augmented), *exp.train_data, *exp.valid_data, cfg), exp));
  }
  return rows;
}

json comparison_json(const std::vector<VariantResult>& rows) {
  json out = json::array();
  for (const auto& r : rows)
    out.push_back({{"variant", r.name},
                   {"patterns", r.patterns},
                   {"no_blocking", rouge_triple(r.plain)},
                   {"trigram_blocking", rouge_triple(r.blocked)}});
  return json{{"rows", out}};
}

json run_json(const RunLog& log) {
  json points = json::array();
  for (const auto& p : log.points)
    points.push_back({{"step", p.step},
                      {"train_loss", number_or_null(p.train_loss)},
                      {"valid_loss", number_or_null(p.valid_loss)},
                      {"rouge1", p.rouge1},
                      {"rouge2", p.rouge2},
                      {"rougeL", p.rouge_l}});
  json ckpts = json::array();
  for (const auto& c : log.checkpoints)
    ckpts.push_back({{"step", c.step}, {"valid_loss", number_or_null(c.valid_loss)}, {"path", c.path}});
  return json{{"config", log.config}, {"points", points}, {"checkpoints", ckpts}, {"best_step", log.best_step}};
}

}  // namespace trainer
}  // namespace attnwb
