#pragma once

#include "attnwb/importance.hpp"
#include "attnwb/model.hpp"

namespace attnwb::pal {

// d_pal = d_model / 2 with four heads.
PalConfig default_config(const ModelConfig& base);

// Adds one adapter per encoder layer. The up-projection starts at zero, so the
// result computes exactly what the base model did.
Model attach_pals(Model base, const PalConfig& config, std::uint64_t seed);

// Adapter parameters added to one layer.
std::size_t params_per_layer(const ModelConfig& base, const PalConfig& config);

// Importance over encoder and PAL heads together.
ImportanceReport pal_head_importance(const Model& model, const Dataset& data,
                                     importance::Method method, unsigned workers = 0);

}  // namespace attnwb::pal
