#include <algorithm>

#include "doctest.h"
#include "test_util.hpp"
#include "tsgp/semantics.hpp"
#include "tsgp/simplify.hpp"

using namespace tsgp;

namespace {

Expr P(const char* s) { return parse_prefix(std::string(s)); }

// Randomly swaps operands of add/mul nodes; semantics are unchanged.
Expr shuffle_commutative(const Expr& e, tsgp::Rng& rng) {
  if (e.is_leaf()) return e;
  const OpKind k = vocab().op_kind(e.root());
  Expr l = shuffle_commutative(e.left(), rng);
  Expr r = shuffle_commutative(e.right(), rng);
  if ((k == OpKind::add || k == OpKind::mul) && (rng() & 1u)) std::swap(l, r);
  return Expr::op(k, l, r);
}

}  // namespace

TEST_CASE("identity rules") {
  CHECK(simplify(P("mul x1 1")) == P("x1"));
  CHECK(simplify(P("mul 1 x1")) == P("x1"));
  CHECK(simplify(P("sub x2 x2")) == P("0.0"));
  CHECK(simplify(P("add mul x1 x2 0.0")) == P("mul x1 x2"));
  CHECK(simplify(P("sub x3 0.0")) == P("x3"));
  CHECK(simplify(P("mul x3 0.0")) == P("0.0"));
  CHECK(simplify(P("div x3 1")) == P("x3"));
  CHECK(simplify(P("div add x1 x2 add x2 x1")) == P("1"));
  CHECK(simplify(P("pow x3 0.0")) == P("1"));
  // pow(x, 1) = |x| under protected pow; left alone.
  CHECK(simplify(P("pow x3 1")) == P("pow x3 1"));
}

TEST_CASE("constant folding stays inside the vocabulary") {
  CHECK(simplify(P("add 2 3")) == P("5"));
  CHECK(simplify(P("add 0.5 0.5")) == P("1"));
  CHECK(simplify(P("sub 0.3 0.3")) == P("0.0"));
  CHECK(simplify(P("mul -2 2")) == P("-4"));
  CHECK(simplify(P("div 1 0.0")) == P("1"));
  // 0.1 + 0.2 is not an integer; the original constants are kept.
  CHECK(simplify(P("add 0.1 0.2")) == P("add 0.1 0.2"));
  CHECK(simplify(P("mul 3 4")) == P("mul 3 4"));
}

TEST_CASE("commutative operands are ordered") {
  CHECK(canonical_key(P("add x2 x1")) == canonical_key(P("add x1 x2")));
  CHECK(canonical_key(P("x1")) == canonical_key(P("mul x1 1")));
  CHECK(canonical_key(P("sub x2 x1")) != canonical_key(P("sub x1 x2")));
  CHECK(canonical_key(P("mul add x3 x1 x2")) == canonical_key(P("mul x2 add x1 x3")));
}

TEST_CASE("canonical keys are invariant to commutative shuffles") {
  tsgp::Rng rng(99);
  for (int i = 0; i < 10000; ++i) {
    const Expr e = test_util::random_expr(rng, 4, 6);
    REQUIRE(canonical_key(e) == canonical_key(shuffle_commutative(e, rng)));
  }
}

TEST_CASE("simplify preserves semantics, never grows, and is idempotent") {
  tsgp::Rng rng(2024);
  const ProbeSet probe = ProbeSet::make(17, 500, 3);
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const Expr e = test_util::random_expr(rng, 3, 7);
    const Expr s = simplify(e);
    CHECK(node_count(s) <= node_count(e));
    CHECK(simplify(s) == s);
    const Eigen::ArrayXd a = eval(e, probe.points).array();
    const Eigen::ArrayXd b = eval(s, probe.points).array();
    const Eigen::ArrayXd rel = (a - b).abs() / a.abs().max(1.0);
    worst = std::max(worst, rel.maxCoeff());
  }
  CHECK(worst <= 1e-9);
}
