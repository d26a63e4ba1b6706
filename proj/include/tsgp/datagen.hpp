#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>
#include <unordered_set>
#include <vector>

#include "tsgp/engine.hpp"
#include "tsgp/semantics.hpp"

namespace tsgp {

/// y = w.x + eps with standard normal features; features and target standardized afterwards.
struct SyntheticProblem {
  int d = 0;
  Eigen::VectorXd weights;
  double noise_sigma = 0.0;
  int n_samples = 0;
  std::uint64_t seed = 0;
  Eigen::MatrixXd X;  // standardized, n x d
  Eigen::VectorXd y;  // standardized

  RegressionProblem as_problem() const;
};

inline constexpr int kDefaultSyntheticSamples = 200;

/// Weights uniform in [-1, 1], noise sigma uniform in [0.05, 0.3].
SyntheticProblem gen_problem(int d, std::uint64_t seed, int n_samples = kDefaultSyntheticSamples);
SyntheticProblem make_problem(int d, const Eigen::VectorXd& weights, double noise_sigma, int n_samples,
                              std::uint64_t seed);

struct ArchiveEntry {
  Expr expr;  // canonical (simplified) form
  SemanticVector semantics;
};

struct Archive {
  int d = 0;
  std::uint64_t probe_seed = 0;
  Eigen::Index probe_m = 0;
  std::vector<ArchiveEntry> entries;
  std::unordered_set<std::string> keys;

  // Harvest metadata.
  std::uint64_t seed = 0;
  int runs = 0;
  std::size_t evaluations = 0;

  std::size_t size() const { return entries.size(); }
  /// Inserts the canonical form of `e` if it is new, short enough, uses only x1..xd, and has
  /// finite semantics. Returns whether it was inserted.
  bool try_insert(const Expr& e, const ProbeSet& probe, std::size_t max_tokens = 100);
  /// Semantic vectors as rows of an N x m matrix.
  Eigen::MatrixXd semantic_matrix() const;
};

struct HarvestConfig {
  SearchConfig search;
  int samples_per_problem = kDefaultSyntheticSamples;
  std::size_t max_tokens = 100;
  std::uint64_t seed = 0;

  /// Population 2,000, double tournament (fitness 5, parsimony 0.7), otherwise stdGP defaults.
  static HarvestConfig defaults();
};

/// Runs stdGP on synthetic problems and collects unique canonical programs until n_target.
/// Each run collects up to ceil(n_target / n_problems) locally unique programs; runs are merged
/// in run order. Extra problems are drawn if cross-run duplicates leave the archive short.
/// Throws if more than 100 x max(n_target, pop_size) evaluations (10x an expected 10 evaluations per
/// unique program) pass without reaching n_target.
Archive harvest_archive(int d, std::size_t n_target, int n_problems, const ProbeSet& probe,
                        const HarvestConfig& cfg);

/// Archive file: "<prefix tokens>\t<d>" per line; metadata in "<path>.meta.json".
void save_archive(const Archive& archive, const std::filesystem::path& path);
/// Recomputes semantics on the probe recorded in the metadata.
Archive load_archive(const std::filesystem::path& path);
std::filesystem::path archive_meta_path(const std::filesystem::path& path);

}  // namespace tsgp
