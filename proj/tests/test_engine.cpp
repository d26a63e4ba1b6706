#include <algorithm>
#include <map>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "tsgp/engine.hpp"

using namespace tsgp;

namespace {

Expr P(const char* s) { return parse_prefix(std::string(s)); }

Individual make(const char* s, double fitness) {
  Individual ind;
  ind.expr = P(s);
  ind.size = ind.expr.size();
  ind.fitness = fitness;
  return ind;
}

RegressionProblem sum_problem(std::uint64_t seed, int n = 200) {
  RegressionProblem p;
  p.name = "x1+x2";
  p.d = 2;
  tsgp::Rng rng(seed);
  std::normal_distribution<double> normal(0, 1);
  Eigen::MatrixXd X(n, 2);
  for (auto& x : X.reshaped()) x = normal(rng);
  // Standardized features; the target x1 + x2 is then exactly expressible.
  for (int j = 0; j < 2; ++j) X.col(j) = standardize_apply(X.col(j), standardize_fit(X.col(j)));
  const Eigen::VectorXd y = X.col(0) + X.col(1);
  p.X_train = X;
  p.y_train = y;
  p.X_test = X.topRows(20);
  p.y_test = y.head(20);
  return p;
}

bool same_records(const RunLog& a, const RunLog& b) {
  if (a.generations.size() != b.generations.size() || !(a.best == b.best)) return false;
  for (std::size_t i = 0; i < a.generations.size(); ++i) {
    const auto& x = a.generations[i];
    const auto& y = b.generations[i];
    const bool step_eq = (std::isnan(x.median_step_sd) && std::isnan(y.median_step_sd)) ||
                         x.median_step_sd == y.median_step_sd;
    if (x.best_rmse != y.best_rmse || x.population_best_rmse != y.population_best_rmse ||
        x.best_size != y.best_size || x.mean_size != y.mean_size || !step_eq || x.improved != y.improved)
      return false;
  }
  return a.test_rmse == b.test_rmse;
}

}  // namespace

TEST_CASE("ramped half-and-half initialization") {
  SearchConfig cfg;
  cfg.pop_size = 100;
  tsgp::Rng rng(1);
  const Population pop = rhh_init(cfg, 2, rng);
  REQUIRE(pop.size() == 100);
  for (const auto& ind : pop) {
    CHECK(depth(ind.expr) >= 2);
    CHECK(depth(ind.expr) <= 5);
    CHECK(ind.expr.max_variable() <= 2);
  }
  tsgp::Rng rng2(1);
  const Population again = rhh_init(cfg, 2, rng2);
  for (std::size_t i = 0; i < pop.size(); ++i) CHECK(pop[i].expr == again[i].expr);

  cfg.pop_size = 1000;
  tsgp::Rng rng3(3);
  std::map<int, int> hist;
  for (const auto& ind : rhh_init(cfg, 3, rng3)) ++hist[depth(ind.expr)];
  for (int level = 2; level <= 5; ++level) CHECK(hist[level] > 0);
}

TEST_CASE("tournament selection") {
  Population pop{make("x1", 5), make("x2", 3), make("x1", 9)};
  tsgp::Rng rng(4);
  // k large enough that every member is sampled with overwhelming probability.
  CHECK(tournament_select(pop, 60, rng) == 1);

  const double inf = std::numeric_limits<double>::infinity();
  Population infs{make("add x1 x2", inf), make("x1", inf), make("mul x1 x2", inf)};
  CHECK(tournament_select(infs, 60, rng) == 1);

  Population empty;
  CHECK_THROWS_AS(tournament_select(empty, 2, rng), Error);
}

TEST_CASE("tournament selection pressure") {
  Population pop;
  for (int i = 0; i < 50; ++i) pop.push_back(make("x1", static_cast<double>(i)));
  tsgp::Rng rng(8);
  double sel = 0.0;
  for (int i = 0; i < 10000; ++i) sel += pop[tournament_select(pop, 5, rng)].fitness;
  CHECK(sel / 10000.0 <= 24.5);
}

TEST_CASE("double tournament") {
  // Equal fitness, sizes 1 and 3 alternating.
  Population pop;
  for (int i = 0; i < 40; ++i) pop.push_back(make(i % 2 ? "add x1 x2" : "x1", 1.0));
  tsgp::Rng rng(21);
  const int n = 20000;

  auto mean_size = [&](auto&& pick) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += static_cast<double>(pop[pick()].size);
    return s / n;
  };
  const double plain = mean_size([&] { return tournament_select(pop, 5, rng); });
  const double dt07 = mean_size([&] { return double_tournament_select(pop, 5, 0.7, rng); });
  CHECK(dt07 < plain);

  // Distinct fitness with sizes alternating: finalist sizes are independent of each other,
  // so with q = P(plain winner has size 3) the size stage gives q^2 at p = 1 and q at p = 0.5.
  Population mixed;
  for (int i = 0; i < 40; ++i) mixed.push_back(make(i % 2 ? "add x1 x2" : "x1", static_cast<double>(i)));
  auto big_rate = [&](auto&& pick) {
    int big = 0;
    for (int i = 0; i < n; ++i) big += mixed[pick()].size == 3;
    return static_cast<double>(big) / n;
  };
  const double q = big_rate([&] { return tournament_select(mixed, 5, rng); });
  CHECK(big_rate([&] { return double_tournament_select(mixed, 5, 1.0, rng); }) ==
        doctest::Approx(q * q).epsilon(0.1));
  CHECK(big_rate([&] { return double_tournament_select(mixed, 5, 0.5, rng); }) ==
        doctest::Approx(q).epsilon(0.05));

  CHECK_THROWS_AS(double_tournament_select(pop, 5, 0.3, rng), Error);
}

TEST_CASE("subtree crossover") {
  const Expr p = P("add x1 mul x2 0.3");
  CHECK(subtree_crossover_at(p, 0, p, 0) == p);
  CHECK(subtree_crossover_at(p, 1, P("sub x2 x1"), 0) == P("add sub x2 x1 mul x2 0.3"));

  // Depth guard: a child deeper than 17 returns the first parent.
  const Expr deep = test_util::full_tree(9);  // depth 10
  CHECK(subtree_crossover_at(deep, 9, deep, 0) == deep);

  tsgp::Rng rng(31);
  for (int i = 0; i < 10000; ++i) {
    const Expr a = test_util::random_expr(rng, 3, 9);
    const Expr b = test_util::random_expr(rng, 3, 9);
    const Expr c = subtree_crossover(a, b, rng);
    REQUIRE(parse_prefix(to_prefix(c)) == c);
    CHECK(depth(c) <= 17);
  }
}

TEST_CASE("subtree mutation") {
  tsgp::Rng rng(41);
  std::map<int, int> inserted;
  for (int i = 0; i < 10000; ++i) {
    const Expr leaf = Expr::variable(1);
    const Expr m = subtree_mutation(leaf, 2, rng);
    ++inserted[depth(m)];  // single-node parent: the replacement is the whole tree
    CHECK(m.max_variable() <= 2);
  }
  CHECK(inserted.size() == 3);
  for (int dpt = 1; dpt <= 3; ++dpt) CHECK(inserted[dpt] > 0);

  for (int i = 0; i < 10000; ++i) {
    const Expr a = test_util::random_expr(rng, 3, 10);
    const Expr c = subtree_mutation(a, 3, rng);
    REQUIRE(parse_prefix(to_prefix(c)) == c);
    CHECK(depth(c) <= std::max(17, depth(a)));
    CHECK(c.max_variable() <= 3);
  }
}

TEST_CASE("geometric semantic mutation") {
  const ProbeSet probe = ProbeSet::make(9, 200, 3);
  tsgp::Rng rng(51);
  const Expr r = P("mul x1 sub x2 0.4");
  const Expr parent = P("add x3 0.2");
  const Expr cancel = gsm_with(parent, 0.1, r, r);
  CHECK(eval(cancel, probe.points) == eval(parent, probe.points));
  CHECK_THROWS_AS(gsm_with(parent, 0.0, r, r), Error);
  CHECK_THROWS_AS(GsmVariation(GsmConfig{0.0, 2, 4}, 3), Error);

  GsmConfig cfg;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Expr p = test_util::random_expr(rng, 3, 5);
    const Expr r1 = random_tree(rng, 3, cfg.random_tree_min_depth, cfg.random_tree_max_depth, false);
    const Expr r2 = random_tree(rng, 3, cfg.random_tree_min_depth, cfg.random_tree_max_depth, false);
    const Expr child = gsm_with(p, cfg.ms, r1, r2);
    const Eigen::VectorXd expected =
        eval(p, probe.points) + cfg.ms * (eval(r1, probe.points) - eval(r2, probe.points));
    worst = std::max(worst, (eval(child, probe.points) - expected).cwiseAbs().maxCoeff());
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("evolve basics") {
  const RegressionProblem prob = sum_problem(1);
  SearchConfig cfg;
  cfg.generations = 0;
  cfg.seed = 3;
  const RunLog zero = evolve(cfg, prob);
  REQUIRE(zero.generations.size() == 1);
  CHECK(zero.best_train_rmse == zero.generations[0].best_rmse);

  cfg.generations = 10;
  const RunLog a = evolve(cfg, prob);
  const RunLog b = evolve(cfg, prob);
  CHECK(same_records(a, b));
  CHECK(a.generations.size() == 11);
  for (std::size_t g = 1; g < a.generations.size(); ++g) {
    CHECK(a.generations[g].best_rmse <= a.generations[g - 1].best_rmse);
    CHECK(a.generations[g].improved == (a.generations[g].best_rmse < a.generations[g - 1].best_rmse));
    CHECK(std::isfinite(a.generations[g].median_step_sd));
  }

  cfg.workers = 3;
  CHECK(same_records(a, evolve(cfg, prob)));

  cfg.tournament_k = 0;
  CHECK_THROWS_AS(evolve(cfg, prob), Error);
}

TEST_CASE("evolve keeps the population valid") {
  const RegressionProblem prob = sum_problem(2);
  SearchConfig cfg;
  cfg.generations = 15;
  cfg.seed = 12;
  std::size_t seen = 0;
  StdGpVariation op(cfg, prob.d);
  evolve(cfg, prob, op, [&](const Individual& ind) {
    ++seen;
    CHECK(depth(ind.expr) <= 17);
    CHECK(ind.expr.max_variable() <= 2);
    CHECK(ind.size == ind.expr.size());
    return true;
  });
  CHECK(seen == 100u * 16u);

  std::size_t stopped = 0;
  const RunLog log = evolve(cfg, prob, op, [&](const Individual&) { return ++stopped < 150; });
  CHECK(log.stopped_early);
  CHECK(log.generations.size() == 2);
}

TEST_CASE("gsm search runs without depth limits") {
  const RegressionProblem prob = sum_problem(3);
  SearchConfig cfg;
  cfg.variation = VariationKind::gsm;
  cfg.generations = 5;
  const RunLog log = evolve(cfg, prob);
  CHECK(log.generations.size() == 6);
  CHECK(log.generations.back().mean_size > log.generations.front().mean_size);
}

TEST_CASE("stdgp solves x1 + x2") {
  std::vector<double> finals;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SearchConfig cfg;
    cfg.generations = 50;
    cfg.seed = seed;
    cfg.track_step_sd = false;
    finals.push_back(evolve(cfg, sum_problem(100 + seed)).best_train_rmse);
  }
  CHECK(median(finals) <= 0.1);
}
