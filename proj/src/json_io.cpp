#include "attnwb/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace attnwb {

void require_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw Error(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    const bool ok = std::any_of(allowed.begin(), allowed.end(),
                                [&](const char* a) { return key == a; });
    if (!ok) throw Error(where + ": unknown key '" + key + "'");
  }
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

void to_json(json& j, const HeadId& id) {
  j = json{{"layer", id.layer}, {"head", id.head}, {"family", to_string(id.family)}};
}

void from_json(const json& j, HeadId& id) {
  require_keys(j, {"layer", "head", "family"}, "head");
  id.layer = j.at("layer").get<int>();
  id.head = j.at("head").get<int>();
  id.family = j.contains("family") ? family_from_string(j.at("family").get<std::string>()) : HeadFamily::encoder;
}

void to_json(json& j, const PatternSpec& p) {
  j = json{{"name", p.name}, {"kind", to_string(p.kind)}};
  if (p.kind == PatternKind::relative_position) j["offset"] = p.offset;
}

void from_json(const json& j, PatternSpec& p) {
  require_keys(j, {"name", "kind", "offset"}, "pattern");
  p.name = j.at("name").get<std::string>();
  p.kind = pattern_kind_from_string(j.at("kind").get<std::string>());
  p.offset = j.value("offset", 0);
  p.validate();
}

void to_json(json& j, const HeadAssignment& a) {
  j = a.head;
  j["pattern"] = a.pattern;
}

void from_json(const json& j, HeadAssignment& a) {
  require_keys(j, {"layer", "head", "family", "pattern"}, "assignment");
  a.head.layer = j.at("layer").get<int>();
  a.head.head = j.at("head").get<int>();
  a.head.family = j.contains("family") ? family_from_string(j.at("family").get<std::string>()) : HeadFamily::encoder;
  a.pattern = j.at("pattern").get<PatternSpec>();
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"n_layers", c.n_layers}, {"n_heads", c.n_heads}, {"d_model", c.d_model},
           {"d_ff", c.d_ff},         {"max_len", c.max_len}, {"vocab_size", c.vocab_size},
           {"dropout", c.dropout}};
}

void from_json(const json& j, ModelConfig& c) {
  require_keys(j, {"n_layers", "n_heads", "d_model", "d_ff", "max_len", "vocab_size", "dropout"}, "model");
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.d_ff = j.value("d_ff", c.d_ff);
  c.max_len = j.value("max_len", c.max_len);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.dropout = j.value("dropout", c.dropout);
}

void to_json(json& j, const PalConfig& c) {
  json heads = json::array();
  for (const auto& p : c.head_patterns) heads.push_back(p ? json(*p) : json(nullptr));
  j = json{{"d_pal", c.d_pal}, {"n_heads", c.n_heads}, {"heads", heads}, {"freeze_base", c.freeze_base}};
}

void from_json(const json& j, PalConfig& c) {
  require_keys(j, {"d_pal", "n_heads", "heads", "freeze_base"}, "pal");
  c.d_pal = j.value("d_pal", c.d_pal);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.freeze_base = j.value("freeze_base", c.freeze_base);
  c.head_patterns.clear();
  if (j.contains("heads"))
    for (const auto& h : j.at("heads"))
      c.head_patterns.push_back(h.is_null() ? std::nullopt : std::optional<PatternSpec>(h.get<PatternSpec>()));
}

}  // namespace attnwb
