#pragma once

#include <Eigen/Dense>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "tsgp/expr.hpp"
#include "tsgp/semantics.hpp"

namespace tsgp {

enum class VariationKind { stdgp, gsm, tsgp };
enum class SelectionKind { tournament, double_tournament };

std::string to_string(VariationKind k);
VariationKind parse_variation(const std::string& name);

inline constexpr std::uint64_t kDefaultProbeSeed = 500;
inline constexpr Eigen::Index kDefaultProbeSize = 500;

struct SearchConfig {
  int pop_size = 100;
  int generations = 100;
  int tournament_k = 5;
  int max_depth = 17;
  int init_min_depth = 2;
  int init_max_depth = 5;
  VariationKind variation = VariationKind::stdgp;
  std::uint64_t seed = 0;
  bool elitism = false;

  double crossover_prob = 0.9;    // stdGP; mutation otherwise
  double terminal_bias = 0.1;     // crossover point is a terminal with this probability
  int mutation_min_depth = 1;     // inserted subtree depth range, leaf = 1
  int mutation_max_depth = 3;

  SelectionKind selection = SelectionKind::tournament;
  int double_fitness_k = 5;
  double parsimony_p = 0.7;

  // Realized parent-offspring SD is measured on this fixed probe (per problem d).
  bool track_step_sd = true;
  std::uint64_t analysis_probe_seed = kDefaultProbeSeed;
  Eigen::Index analysis_probe_size = kDefaultProbeSize;

  int workers = 1;
};

struct GsmConfig {
  double ms = 0.1;  // must be a vocabulary constant so the child stays in the vocabulary
  int random_tree_min_depth = 2;
  int random_tree_max_depth = 4;
};

struct Individual {
  Expr expr;
  double fitness = std::numeric_limits<double>::infinity();
  std::size_t size = 0;
};

using Population = std::vector<Individual>;

/// Standardized train/test matrices for one symbolic-regression task.
struct RegressionProblem {
  std::string name;
  int d = 0;
  Eigen::MatrixXd X_train, X_test;
  Eigen::VectorXd y_train, y_test;
};

struct GenerationRecord {
  int generation = 0;
  double population_best_rmse = 0.0;
  double best_rmse = 0.0;  // best-of-run so far
  std::size_t best_size = 0;
  double mean_size = 0.0;
  double median_step_sd = std::numeric_limits<double>::quiet_NaN();  // NaN at generation 0
  bool improved = false;
  int generations_without_improvement = 0;
  int passthrough = 0;  // slots whose offspring is the unchanged parent due to a guard
  double seconds = 0.0;
};

struct RunLog {
  std::string method;
  std::string dataset;
  std::uint64_t seed = 0;
  double sd_target = std::numeric_limits<double>::quiet_NaN();
  std::vector<GenerationRecord> generations;
  Expr best;
  double best_train_rmse = std::numeric_limits<double>::infinity();
  double test_rmse = std::numeric_limits<double>::infinity();
  bool stopped_early = false;
};

/// Per-slot random streams for one generation; independent of worker count.
struct SlotStreams {
  std::uint64_t seed = 0;
  int generation = 0;

  Rng slot(std::size_t i) const { return Rng(derive_seed(seed, generation, i, 1u)); }
  Rng batch() const { return Rng(derive_seed(seed, generation, 0xba7c4u)); }
};

class VariationOperator {
 public:
  virtual ~VariationOperator() = default;
  virtual std::string name() const = 0;
  /// One offspring per slot; parents[i] and mates[i] were selected for slot i.
  virtual std::vector<Expr> vary(std::span<const Expr> parents, std::span<const Expr> mates,
                                 const SlotStreams& streams) = 0;
  /// Guard passthroughs in the most recent vary() call.
  virtual int last_passthrough() const { return 0; }
};

// ---- tree generation ----

/// Grow (full = false) or full tree with depth in [min_depth, max_depth], variables <= d.
Expr random_tree(Rng& rng, int d, int min_depth, int max_depth, bool full);

Population rhh_init(const SearchConfig& cfg, int d, Rng& rng);

// ---- selection ----

/// Index of the tournament winner among k uniform draws with replacement.
std::size_t tournament_select(std::span<const Individual> pop, int k, Rng& rng);
std::size_t double_tournament_select(std::span<const Individual> pop, int fitness_k, double parsimony_p,
                                     Rng& rng);

// ---- variation ----

Expr subtree_crossover(const Expr& p1, const Expr& p2, Rng& rng, int max_depth = 17,
                       double terminal_bias = 0.1);
/// Crossover at fixed points: node i of p1 receives the subtree at node j of p2.
Expr subtree_crossover_at(const Expr& p1, std::size_t i, const Expr& p2, std::size_t j, int max_depth = 17);
Expr subtree_mutation(const Expr& p, int d, Rng& rng, int max_depth = 17, int min_depth = 1,
                      int max_sub_depth = 3);
/// add(parent, mul(ms, sub(R1, R2))) with fresh grow trees R1, R2.
Expr gsm(const Expr& parent, const GsmConfig& cfg, int d, Rng& rng);
Expr gsm_with(const Expr& parent, double ms, const Expr& r1, const Expr& r2);

class StdGpVariation final : public VariationOperator {
 public:
  StdGpVariation(const SearchConfig& cfg, int d) : cfg_(cfg), d_(d) {}
  std::string name() const override { return "stdgp"; }
  std::vector<Expr> vary(std::span<const Expr> parents, std::span<const Expr> mates,
                         const SlotStreams& streams) override;

 private:
  SearchConfig cfg_;
  int d_;
};

class GsmVariation final : public VariationOperator {
 public:
  GsmVariation(GsmConfig cfg, int d);
  std::string name() const override { return "gsm"; }
  std::vector<Expr> vary(std::span<const Expr> parents, std::span<const Expr> mates,
                         const SlotStreams& streams) override;

 private:
  GsmConfig cfg_;
  int d_;
};

// ---- evolution ----

/// Called for every evaluated program in slot order; return false to stop the run.
using EvaluationHook = std::function<bool(const Individual&)>;

/// Evaluates fitness (training RMSE) for each individual; deterministic for any worker count.
void evaluate(std::span<Individual> inds, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int workers);

RunLog evolve(const SearchConfig& cfg, const RegressionProblem& problem, VariationOperator& variation,
              const EvaluationHook& hook = {});
/// Builds the stdgp or gsm operator from cfg.variation.
RunLog evolve(const SearchConfig& cfg, const RegressionProblem& problem, const GsmConfig& gsm_cfg = {});

void validate(const SearchConfig& cfg, int d);

/// Runs fn(i) for i in [0, n) on up to `workers` threads.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

double median(std::vector<double> v);

}  // namespace tsgp
