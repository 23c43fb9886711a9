#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dahar/common.hpp"

namespace dahar {

// Tri-state attribute annotation. Unknown entries are excluded from
// losses and metrics when ignore mode is on; with ignore off they are
// treated as negatives (the older literature convention).
enum class Label : uint8_t { negative = 0, positive = 1, unknown = 2 };

inline char label_to_char(Label l) {
  switch (l) {
    case Label::positive: return '1';
    case Label::negative: return '0';
    default: return 'u';
  }
}

inline Label label_from_char(char c) {
  switch (c) {
    case '1': return Label::positive;
    case '0': return Label::negative;
    case 'u': return Label::unknown;
    default: throw ParseError(std::string("invalid label character '") + c + "'");
  }
}

struct AttributeLabels {
  std::vector<Label> values;

  std::string to_bits() const {
    std::string s;
    s.reserve(values.size());
    for (Label l : values) s.push_back(label_to_char(l));
    return s;
  }

  static AttributeLabels from_bits(const std::string& bits) {
    AttributeLabels out;
    out.values.reserve(bits.size());
    for (char c : bits) out.values.push_back(label_from_char(c));
    return out;
  }
};

using LabelBatch = std::vector<AttributeLabels>;

}  // namespace dahar
