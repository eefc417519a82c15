#pragma once

#include "attnwb/common.hpp"

#include <compare>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace attnwb {

enum class HeadFamily { encoder, pal };

struct HeadId {
  int layer = 0;
  int head = 0;
  HeadFamily family = HeadFamily::encoder;

  auto operator<=>(const HeadId&) const = default;
};

std::string to_string(HeadFamily family);
HeadFamily family_from_string(const std::string& name);
std::string to_string(const HeadId& id);

// Per-head restriction of an attention matrix over the non-PAD positions.
//   free  - ordinary softmax attention
//   mask  - softmax restricted to allowed (i, j) pairs
//   fixed - row i puts all of its weight on targets[i]
struct AttentionConstraint {
  enum class Kind { free, mask, fixed };

  Kind kind = Kind::free;
  int size = 0;
  std::vector<std::uint8_t> allowed;  // size*size, row-major; mask only
  std::vector<int> targets;           // one per row; fixed only

  static AttentionConstraint free_attention() { return {}; }
  // Throws "empty attention row" if a row allows nothing.
  static AttentionConstraint mask(int size, std::vector<std::uint8_t> allowed);
  static AttentionConstraint fixed(std::vector<int> targets);

  bool allows(int i, int j) const;
  // Dense 0/1 matrix of the pairs this constraint lets through.
  Mat allowed_matrix(int n) const;
};

using ConstraintSet = std::map<HeadId, AttentionConstraint>;

enum class PatternKind { matching_token, intra_sentence, relative_position };

struct PatternSpec {
  std::string name;
  PatternKind kind = PatternKind::matching_token;
  int offset = 0;  // relative_position only

  void validate() const;
  bool operator==(const PatternSpec&) const = default;
};

std::string to_string(PatternKind kind);
PatternKind pattern_kind_from_string(const std::string& name);

// A pattern enforced on one head of a model.
struct HeadAssignment {
  HeadId head;
  PatternSpec pattern;

  bool operator==(const HeadAssignment&) const = default;
};

}  // namespace attnwb
