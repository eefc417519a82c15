#include "attnwb/pal.hpp"

namespace attnwb::pal {

PalConfig default_config(const ModelConfig& base) {
  PalConfig c;
  c.n_heads = 4;
  c.d_pal = base.d_model / 2;
  return c;
}

Model attach_pals(Model base, const PalConfig& config, std::uint64_t seed) {
  if (base.pal) throw Error("model already has PAL adapters");
  config.validate(base.config);
  const int d = base.config.d_model, p = config.d_pal;
  Rng rng(seed);
  base.params.pals.resize(static_cast<std::size_t>(base.config.n_layers));
  for (std::size_t l = 0; l < base.params.pals.size(); ++l) {
    PalParams& A = base.params.pals[l];
    A.down.resize(d, p);
    for (Mat* m : {&A.wq, &A.wk, &A.wv, &A.wo}) m->resize(p, p);
    A.up.resize(p, d);
  }
  base.pal = config;
  // Only the PAL arrays are drawn; base parameters keep their values.
  visit_params(base.params, [&](const std::string& name, Mat& m) {
    if (name.starts_with("pal.")) model::init_param(name, m, rng);
  });
  base.validate_assignments();
  return base;
}

std::size_t params_per_layer(const ModelConfig& base, const PalConfig& config) {
  const auto d = static_cast<std::size_t>(base.d_model);
  const auto p = static_cast<std::size_t>(config.d_pal);
  return d * p + 4 * p * p + p * d;
}

ImportanceReport pal_head_importance(const Model& model, const Dataset& data,
                                     importance::Method method, unsigned workers) {
  if (!model.pal) throw Error("model has no PAL adapters");
  return importance::estimate(model, data, method, workers);
}

}  // namespace attnwb::pal
