#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "tsgp/expr.hpp"

namespace tsgp {

/// A local rewrite applied at an operator node whose children are already simplified.
/// Returns the replacement subtree, or nullopt when the rule does not match.
struct RewriteRule {
  std::string name;
  std::function<std::optional<Expr>(OpKind, const Expr& left, const Expr& right)> apply;
};

/// Ordered rule list. Every rule is exact under protected evaluation and only synthesizes
/// the constants 0.0 and the integers -5..5.
struct RewriteRuleSet {
  std::vector<RewriteRule> rules;
  int max_passes = 4;

  static const RewriteRuleSet& standard();
};

/// Bottom-up canonicalization: constant folding onto vocabulary integers, algebraic
/// identities, and ordering of add/mul operands.
Expr simplify(const Expr& e, const RewriteRuleSet& rules = RewriteRuleSet::standard());

/// Prefix string of simplify(e); equal keys iff equal canonical forms.
std::string canonical_key(const Expr& e);

/// Fixed total order on subtrees used for commutative operands.
bool canonical_less(const Expr& a, const Expr& b);

}  // namespace tsgp
