#pragma once

#include <cstddef>
#include <string>

#include "semcom/data.hpp"
#include "semcom/error.hpp"

namespace semcom {

// How an attacker picks the target class for the k-th intercepted latent.
// `rotate` never picks the clean class: target = (clean + 1 + k mod 5) mod 6.
struct TargetRule {
  enum class Mode { fixed, rotate };
  Mode mode = Mode::rotate;
  int fixed_class = 0;
};

inline int choose_target(const TargetRule& rule, int clean_class, std::size_t index) {
  if (rule.mode == TargetRule::Mode::fixed) {
    if (rule.fixed_class < 0 || rule.fixed_class >= kNumClasses) throw ContractError("target class out of range");
    return rule.fixed_class;
  }
  return (clean_class + 1 + int(index % (kNumClasses - 1))) % kNumClasses;
}

inline TargetRule parse_target_rule(const std::string& s) {
  if (s == "rotate") return {};
  try {
    std::size_t used = 0;
    const int c = std::stoi(s, &used);
    if (used == s.size() && c >= 0 && c < kNumClasses) return {TargetRule::Mode::fixed, c};
  } catch (const std::exception&) {
  }
  throw ContractError("target must be 'rotate' or a class index 0..5, got '" + s + "'");
}

inline std::string target_rule_name(const TargetRule& rule) {
  return rule.mode == TargetRule::Mode::rotate ? "rotate" : std::to_string(rule.fixed_class);
}

}  // namespace semcom
