#pragma once

#include "attnwb/model.hpp"

#include <nlohmann/json.hpp>

#include <initializer_list>
#include <string>

namespace attnwb {

using nlohmann::json;

void to_json(json& j, const HeadId& id);
void from_json(const json& j, HeadId& id);
void to_json(json& j, const PatternSpec& p);
void from_json(const json& j, PatternSpec& p);
void to_json(json& j, const HeadAssignment& a);
void from_json(const json& j, HeadAssignment& a);
void to_json(json& j, const ModelConfig& c);
void from_json(const json& j, ModelConfig& c);
void to_json(json& j, const PalConfig& c);
void from_json(const json& j, PalConfig& c);

// Throws naming the first key of `j` that is not in `allowed`.
void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where);

// Non-finite numbers become null.
json number_or_null(double v);

}  // namespace attnwb
