#include "tsgp/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "tsgp/common.hpp"

namespace tsgp {

namespace {

void require_samples(std::span<const double> x, std::span<const double> y) {
  if (x.empty() || y.empty()) throw Error("Mann-Whitney U needs two non-empty samples");
  for (double v : x)
    if (std::isnan(v)) throw Error("Mann-Whitney U sample contains NaN");
  for (double v : y)
    if (std::isnan(v)) throw Error("Mann-Whitney U sample contains NaN");
}

double u_statistic(std::span<const double> x, std::span<const double> y) {
  double u = 0.0;
  for (double a : x)
    for (double b : y) u += a > b ? 1.0 : (a == b ? 0.5 : 0.0);
  return u;
}

}  // namespace

MannWhitney mann_whitney_exact(std::span<const double> x, std::span<const double> y) {
  require_samples(x, y);
  const std::size_t n1 = x.size(), n = x.size() + y.size();
  if (n > 24) throw Error("exact Mann-Whitney enumeration limited to 24 pooled values");
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  const auto ranks = average_ranks(pooled);

  // U of the first group from its rank sum: U = R1 - n1(n1+1)/2.
  const double mu = static_cast<double>(n1) * static_cast<double>(n - n1) / 2.0;
  const double u_obs = u_statistic(x, y);
  const double dev = std::abs(u_obs - mu) - 1e-9;
  const double offset = static_cast<double>(n1) * static_cast<double>(n1 + 1) / 2.0;

  std::vector<char> pick(n, 0);
  std::fill(pick.begin(), pick.begin() + static_cast<std::ptrdiff_t>(n1), 1);
  std::uint64_t total = 0, extreme = 0;
  do {
    double r = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      if (pick[i]) r += ranks[i];
    ++total;
    if (std::abs(r - offset - mu) >= dev) ++extreme;
  } while (std::prev_permutation(pick.begin(), pick.end()));
  return {u_obs, static_cast<double>(extreme) / static_cast<double>(total), true};
}

MannWhitney mann_whitney_normal(std::span<const double> x, std::span<const double> y) {
  require_samples(x, y);
  const double n1 = static_cast<double>(x.size()), n2 = static_cast<double>(y.size()), n = n1 + n2;
  std::vector<double> pooled(x.begin(), x.end());
  pooled.insert(pooled.end(), y.begin(), y.end());
  std::sort(pooled.begin(), pooled.end());
  double ties = 0.0;
  for (std::size_t i = 0; i < pooled.size();) {
    std::size_t j = i;
    while (j < pooled.size() && pooled[j] == pooled[i]) ++j;
    const double t = static_cast<double>(j - i);
    ties += t * t * t - t;
    i = j;
  }
  const double u = u_statistic(x, y);
  const double mu = n1 * n2 / 2.0;
  const double var = n1 * n2 / 12.0 * ((n + 1.0) - ties / (n * (n - 1.0)));
  if (!(var > 0.0)) return {u, 1.0, false};
  const double z = std::max(0.0, std::abs(u - mu) - 0.5) / std::sqrt(var);
  return {u, std::min(1.0, std::erfc(z / std::sqrt(2.0))), false};
}

MannWhitney mann_whitney_u(std::span<const double> x, std::span<const double> y) {
  if (x.size() + y.size() <= kExactMannWhitneyMax) return mann_whitney_exact(x, y);
  return mann_whitney_normal(x, y);
}

std::vector<bool> bonferroni(std::span<const double> p_values, double alpha) {
  if (p_values.empty()) throw Error("Bonferroni correction needs at least one comparison");
  const double thr = alpha / static_cast<double>(p_values.size());
  std::vector<bool> out;
  out.reserve(p_values.size());
  for (double p : p_values) out.push_back(p < thr);
  return out;
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && values[idx[j]] == values[idx[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t k = i; k < j; ++k) ranks[idx[k]] = r;
    i = j;
  }
  return ranks;
}

RankSummary mean_ranks(const Eigen::MatrixXd& table) {
  if (table.rows() == 0 || table.cols() == 0) throw Error("rank table is empty");
  if (table.hasNaN()) throw Error("rank table has missing entries");
  const auto m = static_cast<std::size_t>(table.rows());
  Eigen::MatrixXd ranks(table.rows(), table.cols());
  for (Eigen::Index c = 0; c < table.cols(); ++c) {
    const Eigen::VectorXd col = table.col(c);
    const auto r = average_ranks(std::span<const double>(col.data(), m));
    for (std::size_t i = 0; i < m; ++i) ranks(static_cast<Eigen::Index>(i), c) = r[i];
  }
  RankSummary s;
  for (Eigen::Index i = 0; i < table.rows(); ++i) {
    const double mean = ranks.row(i).mean();
    s.mean.push_back(mean);
    s.std.push_back(std::sqrt((ranks.row(i).array() - mean).square().mean()));
  }
  return s;
}

double quantile(std::vector<double> v, double q) {
  std::erase_if(v, [](double a) { return std::isnan(a); });
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const double pos = std::clamp(q, 0.0, 1.0) * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0 || v[lo] == v[hi]) return v[lo];
  return v[lo] + frac * (v[hi] - v[lo]);
}

Quartiles quartiles(std::vector<double> v) {
  return {quantile(v, 0.25), quantile(v, 0.5), quantile(std::move(v), 0.75)};
}

}  // namespace tsgp
