#pragma once

#include <Eigen/Dense>
#include <cstdint>

#include "tsgp/expr.hpp"

namespace tsgp {

/// Values outside [-kEvalCap, kEvalCap] or non-finite are replaced by 1 at every node.
inline constexpr double kEvalCap = 1e12;

/// Fixed set of m evaluation points in d dimensions, i.i.d. standard normal.
struct ProbeSet {
  Eigen::MatrixXd points;  // m x d
  int d = 0;
  std::uint64_t seed = 0;

  static ProbeSet make(std::uint64_t seed, Eigen::Index m, int d);
  Eigen::Index m() const { return points.rows(); }
};

struct SemanticVector {
  Eigen::VectorXd values;
  bool finite = true;

  Eigen::Index size() const { return values.size(); }
};

/// Protected evaluation of `e` at every row of X (m x d).
/// div(a, 0) = 1; pow(a, b) = |a|^b; any non-finite or |v| > 1e12 node value becomes 1.
/// Throws if `e` uses a variable index greater than X.cols().
Eigen::VectorXd eval(const Expr& e, const Eigen::Ref<const Eigen::MatrixXd>& X);

SemanticVector semantic_vector(const Expr& e, const ProbeSet& probe);

/// Euclidean semantic distance; throws on length mismatch or non-finite input.
double sd(const SemanticVector& a, const SemanticVector& b);
double sd(const Eigen::Ref<const Eigen::VectorXd>& a, const Eigen::Ref<const Eigen::VectorXd>& b);

struct ColumnScaler {
  double mean = 0.0;
  double std = 0.0;  // population standard deviation
};

ColumnScaler standardize_fit(const Eigen::Ref<const Eigen::VectorXd>& column);
/// Zero-variance columns map to all zeros.
Eigen::VectorXd standardize_apply(const Eigen::Ref<const Eigen::VectorXd>& column, const ColumnScaler& s);
inline Eigen::VectorXd standardize_apply(const Eigen::Ref<const Eigen::VectorXd>& column, double mean,
                                         double std) {
  return standardize_apply(column, ColumnScaler{mean, std});
}

/// Root mean squared error; +inf when any prediction is non-finite.
double rmse(const Eigen::Ref<const Eigen::VectorXd>& pred, const Eigen::Ref<const Eigen::VectorXd>& target);

}  // namespace tsgp
