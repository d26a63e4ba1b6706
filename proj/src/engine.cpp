#include "tsgp/engine.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <thread>

namespace tsgp {

std::string to_string(VariationKind k) {
  switch (k) {
    case VariationKind::stdgp: return "stdgp";
    case VariationKind::gsm: return "gsm";
    case VariationKind::tsgp: return "tsgp";
  }
  return "?";
}

VariationKind parse_variation(const std::string& name) {
  if (name == "stdgp") return VariationKind::stdgp;
  if (name == "gsm") return VariationKind::gsm;
  if (name == "tsgp") return VariationKind::tsgp;
  throw Error("unknown variation '" + name + "' (expected stdgp, gsm or tsgp)");
}

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  const std::size_t w = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers)));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  threads.reserve(w);
  for (std::size_t t = 0; t < w; ++t)
    threads.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += w) fn(i);
    });
  for (auto& th : threads) th.join();
}

double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- tree generation ----

namespace {

TokenId random_terminal(Rng& rng, int d) {
  const Vocab& v = vocab();
  // d variables plus one ephemeral-constant slot, chosen uniformly.
  const std::size_t pick = uniform_index(rng, static_cast<std::size_t>(d) + 1);
  if (pick < static_cast<std::size_t>(d)) return v.variable(static_cast<int>(pick) + 1);
  const auto ercs = v.erc_constants();
  return ercs[uniform_index(rng, ercs.size())];
}

TokenId random_operator(Rng& rng) {
  const auto ops = vocab().operators();
  return ops[uniform_index(rng, ops.size())];
}

void build_tree(TokenSeq& out, Rng& rng, int d, int level, int min_depth, int height, bool full) {
  const double terminal_ratio = static_cast<double>(d + 1) / static_cast<double>(d + 1 + 5);
  bool terminal = level == height;
  if (!terminal && !full && level >= min_depth) terminal = uniform01(rng) < terminal_ratio;
  if (terminal) {
    out.push_back(random_terminal(rng, d));
    return;
  }
  out.push_back(random_operator(rng));
  build_tree(out, rng, d, level + 1, min_depth, height, full);
  build_tree(out, rng, d, level + 1, min_depth, height, full);
}

}  // namespace

Expr random_tree(Rng& rng, int d, int min_depth, int max_depth, bool full) {
  if (d < 1 || d > kMaxVariables) throw Error("random_tree: d out of range");
  if (min_depth < 1 || max_depth < min_depth) throw Error("random_tree: invalid depth range");
  const int height = min_depth + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(max_depth - min_depth + 1)));
  TokenSeq seq;
  build_tree(seq, rng, d, 1, min_depth, height, full);
  return parse_prefix(seq);
}

Population rhh_init(const SearchConfig& cfg, int d, Rng& rng) {
  const int levels = cfg.init_max_depth - cfg.init_min_depth + 1;
  Population pop(static_cast<std::size_t>(cfg.pop_size));
  for (int i = 0; i < cfg.pop_size; ++i) {
    const bool full = i % 2 == 1;
    const int target = cfg.init_min_depth + (i / 2) % levels;
    // Grow: depth in [min, target]; full: exactly target.
    Expr e = full ? random_tree(rng, d, target, target, true)
                  : random_tree(rng, d, cfg.init_min_depth, target, false);
    pop[static_cast<std::size_t>(i)].size = e.size();
    pop[static_cast<std::size_t>(i)].expr = std::move(e);
  }
  return pop;
}

// ---- selection ----

namespace {

bool better(const Individual& a, std::size_t ia, const Individual& b, std::size_t ib) {
  if (a.fitness != b.fitness) return a.fitness < b.fitness;
  if (a.size != b.size) return a.size < b.size;
  return ia < ib;
}

}  // namespace

std::size_t tournament_select(std::span<const Individual> pop, int k, Rng& rng) {
  if (pop.empty()) throw Error("tournament on empty population");
  if (k < 1) throw Error("tournament size must be >= 1");
  std::size_t best = uniform_index(rng, pop.size());
  for (int t = 1; t < k; ++t) {
    const std::size_t c = uniform_index(rng, pop.size());
    if (better(pop[c], c, pop[best], best)) best = c;
  }
  return best;
}

std::size_t double_tournament_select(std::span<const Individual> pop, int fitness_k, double parsimony_p,
                                     Rng& rng) {
  if (parsimony_p < 0.5 || parsimony_p > 1.0) throw Error("parsimony_p must lie in [0.5, 1]");
  const std::size_t a = tournament_select(pop, fitness_k, rng);
  const std::size_t b = tournament_select(pop, fitness_k, rng);
  const double u = uniform01(rng);
  if (pop[a].size == pop[b].size) return u < 0.5 ? a : b;
  const std::size_t smaller = pop[a].size < pop[b].size ? a : b;
  const std::size_t larger = smaller == a ? b : a;
  return u < parsimony_p ? smaller : larger;
}

// ---- variation ----

namespace {

std::size_t biased_point(const Expr& e, double terminal_bias, Rng& rng) {
  const Vocab& v = vocab();
  std::vector<std::size_t> terminals, ops;
  for (std::size_t i = 0; i < e.size(); ++i) (v.arity(e.token(i)) == 0 ? terminals : ops).push_back(i);
  const bool want_terminal = uniform01(rng) < terminal_bias;
  const auto& pool = (want_terminal || ops.empty()) ? terminals : ops;
  return pool[uniform_index(rng, pool.size())];
}

}  // namespace

Expr subtree_crossover_at(const Expr& p1, std::size_t i, const Expr& p2, std::size_t j, int max_depth) {
  Expr child = p1.replace_subtree(i, p2.subtree(j));
  return depth(child) > max_depth ? p1 : child;
}

Expr subtree_crossover(const Expr& p1, const Expr& p2, Rng& rng, int max_depth, double terminal_bias) {
  const std::size_t i = biased_point(p1, terminal_bias, rng);
  const std::size_t j = biased_point(p2, terminal_bias, rng);
  return subtree_crossover_at(p1, i, p2, j, max_depth);
}

Expr subtree_mutation(const Expr& p, int d, Rng& rng, int max_depth, int min_depth, int max_sub_depth) {
  const std::size_t i = uniform_index(rng, p.size());
  Expr sub = random_tree(rng, d, min_depth, max_sub_depth, false);
  Expr child = p.replace_subtree(i, sub);
  return depth(child) > max_depth ? p : child;
}

Expr gsm_with(const Expr& parent, double ms, const Expr& r1, const Expr& r2) {
  if (!(ms > 0.0)) throw Error("GSM mutation step must be positive");
  return Expr::add(parent, Expr::mul(Expr::constant(ms), Expr::sub(r1, r2)));
}

Expr gsm(const Expr& parent, const GsmConfig& cfg, int d, Rng& rng) {
  Expr r1 = random_tree(rng, d, cfg.random_tree_min_depth, cfg.random_tree_max_depth, false);
  Expr r2 = random_tree(rng, d, cfg.random_tree_min_depth, cfg.random_tree_max_depth, false);
  return gsm_with(parent, cfg.ms, r1, r2);
}

std::vector<Expr> StdGpVariation::vary(std::span<const Expr> parents, std::span<const Expr> mates,
                                       const SlotStreams& streams) {
  std::vector<Expr> out(parents.size());
  parallel_for(parents.size(), cfg_.workers, [&](std::size_t i) {
    Rng rng = streams.slot(i);
    if (uniform01(rng) < cfg_.crossover_prob)
      out[i] = subtree_crossover(parents[i], mates[i], rng, cfg_.max_depth, cfg_.terminal_bias);
    else
      out[i] = subtree_mutation(parents[i], d_, rng, cfg_.max_depth, cfg_.mutation_min_depth,
                                cfg_.mutation_max_depth);
  });
  return out;
}

GsmVariation::GsmVariation(GsmConfig cfg, int d) : cfg_(cfg), d_(d) {
  if (!(cfg_.ms > 0.0)) throw Error("GSM mutation step must be positive");
  if (!vocab().constant_token(cfg_.ms)) throw Error("GSM mutation step must be a vocabulary constant");
}

std::vector<Expr> GsmVariation::vary(std::span<const Expr> parents, std::span<const Expr>,
                                     const SlotStreams& streams) {
  std::vector<Expr> out(parents.size());
  for (std::size_t i = 0; i < parents.size(); ++i) {
    Rng rng = streams.slot(i);
    out[i] = gsm(parents[i], cfg_, d_, rng);
  }
  return out;
}

// ---- evolution ----

void evaluate(std::span<Individual> inds, const Eigen::MatrixXd& X, const Eigen::VectorXd& y, int workers) {
  parallel_for(inds.size(), workers, [&](std::size_t i) {
    inds[i].size = inds[i].expr.size();
    inds[i].fitness = rmse(eval(inds[i].expr, X), y);
  });
}

void validate(const SearchConfig& cfg, int d) {
  if (d < 1 || d > kMaxVariables) throw Error("problem dimensionality must be in 1..5");
  if (cfg.pop_size < 1) throw Error("pop_size must be >= 1");
  if (cfg.generations < 0) throw Error("generations must be >= 0");
  if (cfg.tournament_k < 1 || cfg.tournament_k > cfg.pop_size)
    throw Error("tournament_k must be in 1..pop_size");
  if (cfg.init_min_depth < 1 || cfg.init_max_depth < cfg.init_min_depth)
    throw Error("invalid initialization depth range");
  if (cfg.max_depth < cfg.init_max_depth) throw Error("max_depth below initialization depth");
  if (cfg.crossover_prob < 0.0 || cfg.crossover_prob > 1.0) throw Error("crossover_prob outside [0,1]");
  if (cfg.mutation_min_depth < 1 || cfg.mutation_max_depth < cfg.mutation_min_depth)
    throw Error("invalid mutation depth range");
  if (cfg.selection == SelectionKind::double_tournament &&
      (cfg.parsimony_p < 0.5 || cfg.parsimony_p > 1.0 || cfg.double_fitness_k < 1))
    throw Error("invalid double tournament parameters");
}

RunLog evolve(const SearchConfig& cfg, const RegressionProblem& problem, VariationOperator& variation,
              const EvaluationHook& hook) {
  validate(cfg, problem.d);
  if (problem.X_train.cols() != problem.d || problem.X_train.rows() != problem.y_train.size() ||
      problem.X_train.rows() == 0)
    throw Error("problem '" + problem.name + "' has inconsistent training data");

  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  RunLog log;
  log.method = variation.name();
  log.dataset = problem.name;
  log.seed = cfg.seed;

  ProbeSet probe;
  if (cfg.track_step_sd) probe = ProbeSet::make(cfg.analysis_probe_seed, cfg.analysis_probe_size, problem.d);

  Rng init_rng(derive_seed(cfg.seed, 0xc0ffeeu));
  Population pop = rhh_init(cfg, problem.d, init_rng);
  evaluate(pop, problem.X_train, problem.y_train, cfg.workers);

  bool stop = false;
  auto run_hook = [&](const Population& p) {
    if (!hook) return;
    for (const auto& ind : p)
      if (!hook(ind)) {
        stop = true;
        return;
      }
  };
  run_hook(pop);

  auto population_best = [](const Population& p) {
    std::size_t b = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (better(p[i], i, p[b], b)) b = i;
    return b;
  };

  Individual best = pop[population_best(pop)];
  int stale = 0;
  auto record = [&](int gen, const Population& p, double step_sd, int passthrough) {
    const Individual& pb = p[population_best(p)];
    const bool improved = gen == 0 || pb.fitness < best.fitness;
    if (gen > 0 && improved) best = pb;
    stale = improved ? 0 : stale + 1;
    GenerationRecord r;
    r.generation = gen;
    r.population_best_rmse = pb.fitness;
    r.best_rmse = best.fitness;
    r.best_size = best.size;
    double total = 0.0;
    for (const auto& ind : p) total += static_cast<double>(ind.size);
    r.mean_size = total / static_cast<double>(p.size());
    r.median_step_sd = step_sd;
    r.improved = improved;
    r.generations_without_improvement = stale;
    r.passthrough = passthrough;
    r.seconds = std::chrono::duration<double>(clock::now() - t0).count();
    log.generations.push_back(r);
  };
  record(0, pop, std::numeric_limits<double>::quiet_NaN(), 0);

  std::vector<Eigen::VectorXd> probe_sem;
  auto compute_probe = [&](const std::vector<Expr>& exprs) {
    std::vector<Eigen::VectorXd> s(exprs.size());
    parallel_for(exprs.size(), cfg.workers, [&](std::size_t i) { s[i] = eval(exprs[i], probe.points); });
    return s;
  };
  if (cfg.track_step_sd) {
    std::vector<Expr> exprs;
    for (const auto& ind : pop) exprs.push_back(ind.expr);
    probe_sem = compute_probe(exprs);
  }

  for (int gen = 1; gen <= cfg.generations && !stop; ++gen) {
    const SlotStreams streams{cfg.seed, gen};
    const std::size_t n = pop.size();
    std::vector<std::size_t> parent_idx(n), mate_idx(n);
    for (std::size_t i = 0; i < n; ++i) {
      Rng rng(derive_seed(cfg.seed, gen, i, 0u));
      if (cfg.selection == SelectionKind::double_tournament) {
        parent_idx[i] = double_tournament_select(pop, cfg.double_fitness_k, cfg.parsimony_p, rng);
        mate_idx[i] = double_tournament_select(pop, cfg.double_fitness_k, cfg.parsimony_p, rng);
      } else {
        parent_idx[i] = tournament_select(pop, cfg.tournament_k, rng);
        mate_idx[i] = tournament_select(pop, cfg.tournament_k, rng);
      }
    }
    std::vector<Expr> parents(n), mates(n);
    for (std::size_t i = 0; i < n; ++i) {
      parents[i] = pop[parent_idx[i]].expr;
      mates[i] = pop[mate_idx[i]].expr;
    }

    std::vector<Expr> children = variation.vary(parents, mates, streams);
    if (children.size() != n) throw Error("variation operator changed the population size");

    Population next(n);
    for (std::size_t i = 0; i < n; ++i) next[i].expr = std::move(children[i]);
    evaluate(next, problem.X_train, problem.y_train, cfg.workers);

    double step = std::numeric_limits<double>::quiet_NaN();
    std::vector<Eigen::VectorXd> next_sem;
    if (cfg.track_step_sd) {
      std::vector<Expr> exprs;
      for (const auto& ind : next) exprs.push_back(ind.expr);
      next_sem = compute_probe(exprs);
      std::vector<double> dists(n);
      for (std::size_t i = 0; i < n; ++i) dists[i] = sd(probe_sem[parent_idx[i]], next_sem[i]);
      step = median(std::move(dists));
    }

    if (cfg.elitism) {
      const std::size_t elite = population_best(pop);
      std::size_t worst = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (better(next[worst], worst, next[i], i)) worst = i;
      next[worst] = pop[elite];
      if (cfg.track_step_sd) next_sem[worst] = probe_sem[elite];
    }

    run_hook(next);
    pop = std::move(next);
    probe_sem = std::move(next_sem);
    record(gen, pop, step, variation.last_passthrough());
  }

  log.stopped_early = stop;
  log.best = best.expr;
  log.best_train_rmse = best.fitness;
  if (problem.X_test.rows() > 0) log.test_rmse = rmse(eval(best.expr, problem.X_test), problem.y_test);
  return log;
}

RunLog evolve(const SearchConfig& cfg, const RegressionProblem& problem, const GsmConfig& gsm_cfg) {
  switch (cfg.variation) {
    case VariationKind::stdgp: {
      StdGpVariation op(cfg, problem.d);
      return evolve(cfg, problem, op);
    }
    case VariationKind::gsm: {
      GsmVariation op(gsm_cfg, problem.d);
      return evolve(cfg, problem, op);
    }
    case VariationKind::tsgp: break;
  }
  throw Error("tsgp variation needs a model; use tsgp_search");
}

}  // namespace tsgp
