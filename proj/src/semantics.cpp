#include "tsgp/semantics.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <vector>

namespace tsgp {

ProbeSet ProbeSet::make(std::uint64_t seed, Eigen::Index m, int d) {
  if (m <= 0 || d <= 0) throw Error("probe set needs m > 0 and d > 0");
  ProbeSet p;
  p.d = d;
  p.seed = seed;
  p.points.resize(m, d);
  Rng rng(derive_seed(seed, m, d));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < m; ++i)
    for (int j = 0; j < d; ++j) p.points(i, j) = normal(rng);
  return p;
}

namespace {

inline void protect(Eigen::ArrayXd& v) {
  v = (v.isFinite() && v.abs() <= kEvalCap).select(v, 1.0);
}

}  // namespace

Eigen::VectorXd eval(const Expr& e, const Eigen::Ref<const Eigen::MatrixXd>& X) {
  if (e.empty()) throw Error("cannot evaluate an empty expression");
  const Vocab& v = vocab();
  if (e.max_variable() > X.cols())
    throw Error("expression uses x" + std::to_string(e.max_variable()) + " but data has " +
                std::to_string(X.cols()) + " columns");
  const Eigen::Index m = X.rows();

  // Reverse prefix scan. Slots are reused so memory is bounded by tree depth.
  std::vector<Eigen::ArrayXd> stack;
  stack.reserve(static_cast<std::size_t>(depth(e)) + 1);
  std::size_t top = 0;
  auto push = [&]() -> Eigen::ArrayXd& {
    if (top == stack.size()) stack.emplace_back(m);
    return stack[top++];
  };

  for (std::size_t i = e.size(); i-- > 0;) {
    const TokenId t = e.token(i);
    switch (v.kind(t)) {
      case TokenKind::variable:
        push() = X.col(v.variable_index(t) - 1).array();
        break;
      case TokenKind::constant:
        push().setConstant(v.constant_value(t));
        break;
      case TokenKind::op: {
        // a is the left operand (pushed last), b the right.
        Eigen::ArrayXd& a = stack[top - 1];
        Eigen::ArrayXd& b = stack[top - 2];
        switch (v.op_kind(t)) {
          case OpKind::add: b = a + b; break;
          case OpKind::sub: b = a - b; break;
          case OpKind::mul: b = a * b; break;
          case OpKind::div: b = (b == 0.0).select(1.0, a / b); break;
          case OpKind::pow: b = a.abs().pow(b); break;
        }
        protect(b);
        --top;
        break;
      }
      default:
        throw Error("non-expression token in expression");
    }
  }
  return stack[0].matrix();
}

SemanticVector semantic_vector(const Expr& e, const ProbeSet& probe) {
  SemanticVector s;
  s.values = eval(e, probe.points);
  s.finite = s.values.allFinite();
  return s;
}

double sd(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b) {
  if (a.size() != b.size())
    throw Error("semantic vectors differ in length (" + std::to_string(a.size()) + " vs " +
                std::to_string(b.size()) + ")");
  if (!a.allFinite() || !b.allFinite()) throw Error("semantic distance of non-finite vector");
  return (a - b).norm();
}

double sd(const SemanticVector& a, const SemanticVector& b) {
  if (!a.finite || !b.finite) throw Error("semantic distance of non-finite vector");
  return sd(a.values, b.values);
}

ColumnScaler standardize_fit(const Eigen::Ref<const Eigen::VectorXd>& column) {
  if (column.size() == 0) throw Error("cannot standardize an empty column");
  ColumnScaler s;
  s.mean = column.mean();
  s.std = std::sqrt((column.array() - s.mean).square().mean());
  return s;
}

Eigen::VectorXd standardize_apply(const Eigen::Ref<const Eigen::VectorXd>& column, const ColumnScaler& s) {
  if (column.size() == 0) throw Error("cannot standardize an empty column");
  if (s.std == 0.0) return Eigen::VectorXd::Zero(column.size());
  return (column.array() - s.mean) / s.std;
}

double rmse(const Eigen::Ref<const Eigen::VectorXd>& pred, const Eigen::Ref<const Eigen::VectorXd>& target) {
  if (pred.size() != target.size())
    throw Error("rmse length mismatch (" + std::to_string(pred.size()) + " vs " +
                std::to_string(target.size()) + ")");
  if (pred.size() == 0) throw Error("rmse of empty vectors");
  if (!pred.allFinite()) return std::numeric_limits<double>::infinity();
  return std::sqrt((pred - target).squaredNorm() / static_cast<double>(pred.size()));
}

}  // namespace tsgp
