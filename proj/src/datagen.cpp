#include "tsgp/datagen.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "tsgp/simplify.hpp"

namespace tsgp {

using nlohmann::json;

RegressionProblem SyntheticProblem::as_problem() const {
  RegressionProblem p;
  p.name = "synthetic-d" + std::to_string(d) + "-" + std::to_string(seed);
  p.d = d;
  p.X_train = X;
  p.y_train = y;
  return p;
}

SyntheticProblem make_problem(int d, const Eigen::VectorXd& weights, double noise_sigma, int n_samples,
                              std::uint64_t seed) {
  if (d < kMinDim || d > kMaxDim) throw Error("synthetic problem dimensionality must be in 2..5");
  if (weights.size() != d) throw Error("weight vector length must equal d");
  if (n_samples < 2) throw Error("synthetic problem needs at least 2 samples");
  SyntheticProblem p;
  p.d = d;
  p.weights = weights;
  p.noise_sigma = noise_sigma;
  p.n_samples = n_samples;
  p.seed = seed;

  Rng rng(derive_seed(seed, 0xda7au));
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd X(n_samples, d);
  for (Eigen::Index i = 0; i < n_samples; ++i)
    for (int j = 0; j < d; ++j) X(i, j) = normal(rng);
  Eigen::VectorXd y = X * weights;
  for (Eigen::Index i = 0; i < n_samples; ++i) y(i) += noise_sigma * normal(rng);

  p.X.resize(n_samples, d);
  for (int j = 0; j < d; ++j) p.X.col(j) = standardize_apply(X.col(j), standardize_fit(X.col(j)));
  p.y = standardize_apply(y, standardize_fit(y));
  return p;
}

SyntheticProblem gen_problem(int d, std::uint64_t seed, int n_samples) {
  Rng rng(derive_seed(seed, 0x9e11u));
  std::uniform_real_distribution<double> w(-1.0, 1.0);
  std::uniform_real_distribution<double> noise(0.05, 0.3);
  Eigen::VectorXd weights(d > 0 ? d : 0);
  for (auto& x : weights) x = w(rng);
  const double sigma = noise(rng);
  return make_problem(d, weights, sigma, n_samples, seed);
}

bool Archive::try_insert(const Expr& e, const ProbeSet& probe, std::size_t max_tokens) {
  Expr canon = simplify(e);
  if (canon.size() > max_tokens || canon.max_variable() > d) return false;
  std::string key = to_string(canon);
  if (keys.contains(key)) return false;
  SemanticVector s = semantic_vector(canon, probe);
  if (!s.finite) return false;
  keys.insert(std::move(key));
  entries.push_back({std::move(canon), std::move(s)});
  return true;
}

Eigen::MatrixXd Archive::semantic_matrix() const {
  Eigen::MatrixXd S(static_cast<Eigen::Index>(entries.size()), probe_m);
  for (std::size_t i = 0; i < entries.size(); ++i) S.row(static_cast<Eigen::Index>(i)) = entries[i].semantics.values.transpose();
  return S;
}

HarvestConfig HarvestConfig::defaults() {
  HarvestConfig c;
  c.search.pop_size = 2000;
  c.search.generations = 100000;  // runs end by quota, not by generation count
  c.search.selection = SelectionKind::double_tournament;
  c.search.double_fitness_k = 5;
  c.search.parsimony_p = 0.7;
  c.search.track_step_sd = false;
  return c;
}

namespace {

struct RunHarvest {
  std::vector<Expr> programs;  // locally unique canonical forms in evaluation order
  std::size_t evaluations = 0;
};

RunHarvest harvest_run(int d, std::uint64_t problem_seed, std::size_t quota, std::size_t eval_budget,
                       const HarvestConfig& cfg) {
  RunHarvest out;
  const SyntheticProblem sp = gen_problem(d, problem_seed, cfg.samples_per_problem);
  const RegressionProblem problem = sp.as_problem();
  SearchConfig search = cfg.search;
  search.seed = derive_seed(problem_seed, 0x6a7u);
  StdGpVariation op(search, d);
  std::unordered_set<std::string> seen;
  evolve(search, problem, op, [&](const Individual& ind) {
    ++out.evaluations;
    Expr canon = simplify(ind.expr);
    if (canon.size() <= cfg.max_tokens && seen.insert(to_string(canon)).second)
      out.programs.push_back(std::move(canon));
    return out.programs.size() < quota && out.evaluations < eval_budget;
  });
  return out;
}

}  // namespace

Archive harvest_archive(int d, std::size_t n_target, int n_problems, const ProbeSet& probe,
                        const HarvestConfig& cfg) {
  if (n_target < 1) throw Error("harvest target must be >= 1");
  if (n_problems < 1) throw Error("harvest needs at least one problem");
  if (probe.d != d) throw Error("probe dimensionality does not match archive dimensionality");

  Archive archive;
  archive.d = d;
  archive.probe_seed = probe.seed;
  archive.probe_m = probe.m();
  archive.seed = cfg.seed;

  // Expected cost is taken as 10 evaluations per unique program; the guard allows 10x that.
  const std::size_t budget = 100 * std::max<std::size_t>(n_target, static_cast<std::size_t>(cfg.search.pop_size));
  std::size_t evaluations = 0;
  int next_problem = 0;
  // Every run contributes at most the same quota; cross-run duplicates are topped up by further runs.
  const std::size_t quota = (n_target + static_cast<std::size_t>(n_problems) - 1) / static_cast<std::size_t>(n_problems);
  int batch = n_problems;
  while (archive.size() < n_target) {
    std::vector<RunHarvest> runs(static_cast<std::size_t>(batch));
    parallel_for(runs.size(), cfg.search.workers, [&](std::size_t r) {
      const auto problem_seed = derive_seed(cfg.seed, d, next_problem + static_cast<int>(r));
      runs[r] = harvest_run(d, problem_seed, quota, budget, cfg);
    });
    next_problem += batch;
    for (const auto& run : runs) {
      evaluations += run.evaluations;
      for (const auto& e : run.programs) {
        if (archive.size() >= n_target) break;
        archive.try_insert(e, probe, cfg.max_tokens);
      }
    }
    archive.runs = next_problem;
    archive.evaluations = evaluations;
    if (archive.size() < n_target && evaluations > budget) {
      std::ostringstream msg;
      msg << "archive harvest for d=" << d << " stalled: " << archive.size() << " of " << n_target
          << " unique programs after " << evaluations << " evaluations over " << next_problem << " runs";
      throw Error(msg.str());
    }
    batch = static_cast<int>((n_target - std::min(n_target, archive.size()) + quota - 1) / quota);
  }
  return archive;
}

std::filesystem::path archive_meta_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".meta.json");
}

void save_archive(const Archive& archive, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write archive " + path.string());
  for (const auto& e : archive.entries) out << to_string(e.expr) << '\t' << archive.d << '\n';
  json meta = {{"format", "tsgp-archive"},
               {"version", 1},
               {"d", archive.d},
               {"count", archive.entries.size()},
               {"seed", archive.seed},
               {"probe_seed", archive.probe_seed},
               {"probe_m", archive.probe_m},
               {"runs", archive.runs},
               {"evaluations", archive.evaluations}};
  std::ofstream m(archive_meta_path(path), std::ios::binary);
  if (!m) throw Error("cannot write archive metadata for " + path.string());
  m << meta.dump(2) << '\n';
}

Archive load_archive(const std::filesystem::path& path) {
  std::ifstream m(archive_meta_path(path));
  if (!m) throw Error("missing archive metadata " + archive_meta_path(path).string());
  const json meta = json::parse(m);
  if (meta.at("format") != "tsgp-archive") throw Error("not an archive metadata file");
  Archive a;
  a.d = meta.at("d");
  a.seed = meta.at("seed");
  a.probe_seed = meta.at("probe_seed");
  a.probe_m = meta.at("probe_m");
  a.runs = meta.at("runs");
  a.evaluations = meta.at("evaluations");
  const ProbeSet probe = ProbeSet::make(a.probe_seed, a.probe_m, a.d);

  std::ifstream in(path);
  if (!in) throw Error("cannot read archive " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw Error(path.string() + ":" + std::to_string(lineno) + ": missing d field");
    if (std::stoi(line.substr(tab + 1)) != a.d)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": d differs from metadata");
    Expr e = parse_prefix(line.substr(0, tab));
    std::string key = to_string(e);
    if (!a.keys.insert(key).second)
      throw Error(path.string() + ":" + std::to_string(lineno) + ": duplicate entry");
    a.entries.push_back({e, semantic_vector(e, probe)});
  }
  if (a.entries.size() != meta.at("count").get<std::size_t>()) throw Error("archive count differs from metadata");
  return a;
}

}  // namespace tsgp
