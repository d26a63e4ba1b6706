#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

namespace tsgp {

struct MannWhitney {
  double u = 0.0;  // U of the first sample: #(x > y) + 0.5 #(x == y)
  double p = 1.0;  // two-sided
  bool exact = false;
};

inline constexpr std::size_t kExactMannWhitneyMax = 20;

/// Exact enumeration when n1 + n2 <= 20, normal approximation with tie and continuity correction otherwise.
MannWhitney mann_whitney_u(std::span<const double> x, std::span<const double> y);
/// Permutation p-value over all C(n1+n2, n1) labelings of the pooled sample (ties keep their midranks).
MannWhitney mann_whitney_exact(std::span<const double> x, std::span<const double> y);
MannWhitney mann_whitney_normal(std::span<const double> x, std::span<const double> y);

/// flags[i] = p[i] < alpha / m.
std::vector<bool> bonferroni(std::span<const double> p_values, double alpha = 0.05);

/// 1-based ranks, ascending; ties share the average rank.
std::vector<double> average_ranks(std::span<const double> values);

struct RankSummary {
  std::vector<double> mean, std;  // per method; std is the population standard deviation
};

/// table(method, dataset) = score (lower is better). Ranks within each dataset column, then averages.
RankSummary mean_ranks(const Eigen::MatrixXd& table);

/// Linear-interpolation quantile (numpy's default) of a non-empty sample; NaNs are ignored. q in [0, 1].
double quantile(std::vector<double> v, double q);

struct Quartiles {
  double q25 = 0.0, median = 0.0, q75 = 0.0;
};
Quartiles quartiles(std::vector<double> v);

}  // namespace tsgp
