#include "tsgp/simplify.hpp"

#include <algorithm>
#include <cmath>

#include "tsgp/semantics.hpp"

namespace tsgp {

namespace {

bool is_const(const Expr& e, double v) {
  return e.is_leaf() && vocab().kind(e.root()) == TokenKind::constant &&
         vocab().constant_value(e.root()) == v;
}

bool is_any_const(const Expr& e) { return e.is_leaf() && vocab().kind(e.root()) == TokenKind::constant; }

double protected_apply(OpKind k, double a, double b) {
  double r = 0.0;
  switch (k) {
    case OpKind::add: r = a + b; break;
    case OpKind::sub: r = a - b; break;
    case OpKind::mul: r = a * b; break;
    case OpKind::div: r = b == 0.0 ? 1.0 : a / b; break;
    case OpKind::pow: r = std::pow(std::abs(a), b); break;
  }
  if (!std::isfinite(r) || std::abs(r) > kEvalCap) r = 1.0;
  return r;
}

// Folds only onto 0.0 and the integers -5..5; other results keep the original constants.
std::optional<Expr> fold_constants(OpKind k, const Expr& l, const Expr& r) {
  if (!is_any_const(l) || !is_any_const(r)) return std::nullopt;
  const double v = protected_apply(k, vocab().constant_value(l.root()), vocab().constant_value(r.root()));
  if (v != std::round(v) || std::abs(v) > 5.0) return std::nullopt;
  return Expr::constant(v);
}

std::optional<Expr> additive_identity(OpKind k, const Expr& l, const Expr& r) {
  if (k == OpKind::add && is_const(l, 0.0)) return r;
  if ((k == OpKind::add || k == OpKind::sub) && is_const(r, 0.0)) return l;
  return std::nullopt;
}

std::optional<Expr> self_cancel(OpKind k, const Expr& l, const Expr& r) {
  if (k == OpKind::sub && l == r) return Expr::constant(0.0);
  // Protected division returns 1 at a zero denominator, so x/x = 1 everywhere.
  if (k == OpKind::div && l == r) return Expr::constant(1.0);
  return std::nullopt;
}

std::optional<Expr> multiplicative(OpKind k, const Expr& l, const Expr& r) {
  if (k == OpKind::mul) {
    if (is_const(l, 0.0) || is_const(r, 0.0)) return Expr::constant(0.0);
    if (is_const(l, 1.0)) return r;
    if (is_const(r, 1.0)) return l;
  }
  if (k == OpKind::div && is_const(r, 1.0)) return l;
  return std::nullopt;
}

// pow(x, 1) = |x| under protected pow, so only the zero exponent is rewritten.
std::optional<Expr> power(OpKind k, const Expr&, const Expr& r) {
  if (k == OpKind::pow && is_const(r, 0.0)) return Expr::constant(1.0);
  return std::nullopt;
}

std::optional<Expr> commutative_order(OpKind k, const Expr& l, const Expr& r) {
  if ((k == OpKind::add || k == OpKind::mul) && canonical_less(r, l)) return Expr::op(k, r, l);
  return std::nullopt;
}

Expr simplify_node(const Expr& e, const RewriteRuleSet& rules) {
  if (e.is_leaf()) return e;
  const OpKind k = vocab().op_kind(e.root());
  Expr l = simplify_node(e.left(), rules);
  Expr r = simplify_node(e.right(), rules);
  for (const auto& rule : rules.rules) {
    if (auto out = rule.apply(k, l, r)) {
      // Replacement is either a simplified child, a constant, or the reordered node.
      if (out->is_leaf() || *out == l || *out == r) return *out;
      return simplify_node(*out, rules);
    }
  }
  return Expr::op(k, l, r);
}

}  // namespace

bool canonical_less(const Expr& a, const Expr& b) { return a.tokens() < b.tokens(); }

const RewriteRuleSet& RewriteRuleSet::standard() {
  static const RewriteRuleSet set{{
      {"fold-constants", fold_constants},
      {"additive-identity", additive_identity},
      {"self-cancel", self_cancel},
      {"multiplicative", multiplicative},
      {"power", power},
      {"commutative-order", commutative_order},
  }};
  return set;
}

Expr simplify(const Expr& e, const RewriteRuleSet& rules) {
  Expr cur = e;
  for (int pass = 0; pass < rules.max_passes; ++pass) {
    Expr next = simplify_node(cur, rules);
    if (next == cur) break;
    cur = std::move(next);
  }
  return cur;
}

std::string canonical_key(const Expr& e) { return to_string(simplify(e)); }

}  // namespace tsgp
