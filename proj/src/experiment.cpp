#include "tsgp/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "tsgp/common.hpp"
#include "tsgp/stats.hpp"

namespace tsgp {

using nlohmann::json;

std::string MethodSpec::label() const {
  if (kind != VariationKind::tsgp) return to_string(kind);
  char buf[48];
  std::snprintf(buf, sizeof buf, "tsgp-sd%g", sd_target);
  return buf;
}

MethodSpec parse_method(const std::string& s, double fallback_sd) {
  MethodSpec m;
  const auto colon = s.find(':');
  m.kind = parse_variation(s.substr(0, colon));
  m.sd_target = fallback_sd;
  if (colon != std::string::npos) {
    if (m.kind != VariationKind::tsgp) throw Error("only tsgp takes a target SD: '" + s + "'");
    try {
      std::size_t used = 0;
      m.sd_target = std::stod(s.substr(colon + 1), &used);
      if (used != s.size() - colon - 1) throw Error("");
    } catch (const std::exception&) {
      throw Error("bad target SD in method '" + s + "'");
    }
  }
  if (m.kind == VariationKind::tsgp && !(m.sd_target > 0.0 && std::isfinite(m.sd_target)))
    throw Error("target SD must be positive: '" + s + "'");
  return m;
}

std::uint64_t run_seed(std::uint64_t base, const std::string& dataset, int run) {
  return derive_seed(base, fnv1a64(dataset.data(), dataset.size()), static_cast<std::uint64_t>(run));
}

std::vector<ExperimentResult> run_experiment(std::span<const MethodSpec> methods, std::span<const Dataset> datasets,
                                             const ExperimentConfig& cfg) {
  if (methods.empty() || datasets.empty()) throw Error("experiment needs at least one method and one dataset");
  if (cfg.runs < 1) throw Error("experiment needs at least one run");
  for (std::size_t i = 0; i < methods.size(); ++i)
    for (std::size_t j = 0; j < i; ++j)
      if (methods[i].label() == methods[j].label()) throw Error("duplicate method " + methods[i].label());
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    validate(datasets[i], 2);
    for (std::size_t j = 0; j < i; ++j)
      if (datasets[i].name == datasets[j].name) throw Error("duplicate dataset " + datasets[i].name);
  }
  for (const auto& m : methods)
    if (m.kind == VariationKind::tsgp && cfg.model == nullptr) throw Error("tsgp method requires a trained model");

  const std::size_t runs = static_cast<std::size_t>(cfg.runs);
  const std::size_t n_cells = methods.size() * datasets.size() * runs;
  std::vector<RunRecord> cells(n_cells);
  parallel_for(n_cells, cfg.workers, [&](std::size_t c) {
    const std::size_t mi = c / (datasets.size() * runs);
    const std::size_t di = (c / runs) % datasets.size();
    const int r = static_cast<int>(c % runs);
    const MethodSpec& m = methods[mi];
    const Dataset& ds = datasets[di];
    RunRecord& rec = cells[c];
    rec.method = m.label();
    rec.dataset = ds.name;
    rec.run = r;
    rec.seed = run_seed(cfg.seed, ds.name, r);
    try {
      const RegressionProblem prob = to_problem(ds, split_standardize(ds, cfg.train_ratio, rec.seed, cfg.fit));
      SearchConfig sc = cfg.search;
      sc.seed = rec.seed;
      sc.workers = 1;
      sc.variation = m.kind;
      if (m.kind == VariationKind::tsgp) {
        TsgpConfig tc = cfg.tsgp;
        tc.sd_target = m.sd_target;
        rec.log = tsgp_search(sc, tc, *cfg.model, prob);
      } else {
        rec.log = evolve(sc, prob, cfg.gsm);
      }
      rec.log.method = m.label();
      rec.ok = true;
    } catch (const std::exception& e) {
      rec.ok = false;
      rec.error = e.what();
    }
  });

  std::vector<ExperimentResult> out;
  for (std::size_t mi = 0; mi < methods.size(); ++mi)
    for (std::size_t di = 0; di < datasets.size(); ++di) {
      ExperimentResult res;
      res.method = methods[mi].label();
      res.dataset = datasets[di].name;
      for (std::size_t r = 0; r < runs; ++r) res.runs.push_back(std::move(cells[(mi * datasets.size() + di) * runs + r]));
      if (!cfg.out_dir.empty()) write_runlogs(res, cfg.out_dir);
      out.push_back(std::move(res));
    }
  return out;
}

// ---- persistence ----

namespace {

json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double get_num(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) {
    const auto s = j.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw Error("expected a number, got " + j.dump());
}

}  // namespace

json to_json(const RunLog& log) {
  json gens = json::array();
  for (const auto& g : log.generations)
    gens.push_back({{"generation", g.generation},
                    {"population_best_rmse", num(g.population_best_rmse)},
                    {"best_rmse", num(g.best_rmse)},
                    {"best_size", g.best_size},
                    {"mean_size", num(g.mean_size)},
                    {"median_step_sd", num(g.median_step_sd)},
                    {"improved", g.improved},
                    {"generations_without_improvement", g.generations_without_improvement},
                    {"passthrough", g.passthrough},
                    {"seconds", num(g.seconds)}});
  return {{"method", log.method},
          {"dataset", log.dataset},
          {"seed", log.seed},
          {"sd_target", num(log.sd_target)},
          {"best", log.best.size() ? to_string(log.best) : std::string()},
          {"best_train_rmse", num(log.best_train_rmse)},
          {"test_rmse", num(log.test_rmse)},
          {"stopped_early", log.stopped_early},
          {"generations", gens}};
}

RunLog runlog_from_json(const json& j) {
  RunLog log;
  log.method = j.at("method").get<std::string>();
  log.dataset = j.at("dataset").get<std::string>();
  log.seed = j.at("seed").get<std::uint64_t>();
  log.sd_target = get_num(j.at("sd_target"));
  const auto best = j.at("best").get<std::string>();
  if (!best.empty()) log.best = parse_prefix(best);
  log.best_train_rmse = get_num(j.at("best_train_rmse"));
  log.test_rmse = get_num(j.at("test_rmse"));
  log.stopped_early = j.at("stopped_early").get<bool>();
  for (const auto& g : j.at("generations")) {
    GenerationRecord r;
    r.generation = g.at("generation").get<int>();
    r.population_best_rmse = get_num(g.at("population_best_rmse"));
    r.best_rmse = get_num(g.at("best_rmse"));
    r.best_size = g.at("best_size").get<std::size_t>();
    r.mean_size = get_num(g.at("mean_size"));
    r.median_step_sd = get_num(g.at("median_step_sd"));
    r.improved = g.at("improved").get<bool>();
    r.generations_without_improvement = g.at("generations_without_improvement").get<int>();
    r.passthrough = g.at("passthrough").get<int>();
    r.seconds = get_num(g.at("seconds"));
    log.generations.push_back(r);
  }
  return log;
}

json to_json(const RunRecord& r) {
  json j = {{"method", r.method}, {"dataset", r.dataset}, {"run", r.run},
            {"seed", r.seed},     {"ok", r.ok},           {"error", r.error}};
  j["log"] = r.ok ? to_json(r.log) : json(nullptr);
  return j;
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.method = j.at("method").get<std::string>();
  r.dataset = j.at("dataset").get<std::string>();
  r.run = j.at("run").get<int>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.ok = j.at("ok").get<bool>();
  r.error = j.at("error").get<std::string>();
  if (r.ok) r.log = runlog_from_json(j.at("log"));
  return r;
}

std::filesystem::path runlog_path(const std::filesystem::path& out_dir, const std::string& method,
                                  const std::string& dataset) {
  return out_dir / "runlogs" / (method + "__" + dataset + ".jsonl");
}

void write_runlogs(const ExperimentResult& res, const std::filesystem::path& out_dir) {
  const auto path = runlog_path(out_dir, res.method, res.dataset);
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : res.runs) out << to_json(r).dump() << '\n';
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<ExperimentResult> load_runlogs(const std::filesystem::path& out_dir) {
  const auto dir = out_dir / "runlogs";
  if (!std::filesystem::is_directory(dir)) throw Error("no runlogs directory in " + out_dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".jsonl") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::vector<ExperimentResult> out;
  for (const auto& f : files) {
    std::ifstream in(f);
    ExperimentResult res;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      try {
        res.runs.push_back(run_record_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        throw Error(f.string() + ":" + std::to_string(lineno) + ": " + e.what());
      }
      const auto& r = res.runs.back();
      if (res.runs.size() == 1) {
        res.method = r.method;
        res.dataset = r.dataset;
      } else if (r.method != res.method || r.dataset != res.dataset) {
        throw Error(f.string() + ":" + std::to_string(lineno) + ": mixed method/dataset records");
      }
    }
    if (!res.runs.empty()) out.push_back(std::move(res));
  }
  return out;
}

// ---- report ----

namespace {

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed: " + path.string());
}

template <typename F>
std::vector<double> collect(const ExperimentResult& res, F&& f) {
  std::vector<double> v;
  for (const auto& r : res.runs)
    if (r.ok) v.push_back(f(r.log));
  return v;
}

std::string letter(std::size_t i) { return std::string(1, static_cast<char>('a' + i % 26)); }

}  // namespace

void report(std::span<const ExperimentResult> results, const std::filesystem::path& out_dir,
            const ReportOptions& opt) {
  std::vector<std::string> methods, datasets;
  for (const auto& r : results) {
    if (std::find(methods.begin(), methods.end(), r.method) == methods.end()) methods.push_back(r.method);
    if (std::find(datasets.begin(), datasets.end(), r.dataset) == datasets.end()) datasets.push_back(r.dataset);
  }
  const std::size_t M = methods.size(), D = datasets.size();
  std::vector<const ExperimentResult*> cell(M * D, nullptr);
  for (const auto& r : results) {
    const auto mi = static_cast<std::size_t>(std::find(methods.begin(), methods.end(), r.method) - methods.begin());
    const auto di = static_cast<std::size_t>(std::find(datasets.begin(), datasets.end(), r.dataset) - datasets.begin());
    if (cell[mi * D + di]) throw Error("duplicate results for " + r.method + " on " + r.dataset);
    cell[mi * D + di] = &r;
  }
  const double nan = std::numeric_limits<double>::quiet_NaN();

  // Per-cell medians.
  Eigen::MatrixXd med_test = Eigen::MatrixXd::Constant(static_cast<Eigen::Index>(M), static_cast<Eigen::Index>(D), nan);
  std::vector<std::vector<double>> test_rmse(M * D);
  for (std::size_t i = 0; i < M * D; ++i) {
    if (!cell[i]) continue;
    test_rmse[i] = collect(*cell[i], [](const RunLog& l) { return l.test_rmse; });
    if (!test_rmse[i].empty())
      med_test(static_cast<Eigen::Index>(i / D), static_cast<Eigen::Index>(i % D)) = quantile(test_rmse[i], 0.5);
  }

  // Ranks per dataset over the methods with results there.
  Eigen::MatrixXd rank = Eigen::MatrixXd::Constant(med_test.rows(), med_test.cols(), nan);
  for (std::size_t d = 0; d < D; ++d) {
    std::vector<double> vals;
    std::vector<std::size_t> who;
    for (std::size_t m = 0; m < M; ++m)
      if (!std::isnan(med_test(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d)))) {
        vals.push_back(med_test(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d)));
        who.push_back(m);
      }
    const auto rk = average_ranks(vals);
    for (std::size_t k = 0; k < who.size(); ++k)
      rank(static_cast<Eigen::Index>(who[k]), static_cast<Eigen::Index>(d)) = rk[k];
  }
  const bool complete = !med_test.hasNaN();
  RankSummary ranks;
  if (complete) ranks = mean_ranks(med_test);

  // Best method per dataset tested against every other method, Bonferroni over the comparisons.
  std::string sig_csv = "dataset,best,other,u,p,exact,threshold,significant\n";
  std::vector<std::string> labels(M * D);
  json sig_json = json::array();
  for (std::size_t d = 0; d < D; ++d) {
    std::size_t best = M;
    for (std::size_t m = 0; m < M; ++m) {
      const double v = med_test(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
      if (!std::isnan(v) && (best == M || v < med_test(static_cast<Eigen::Index>(best), static_cast<Eigen::Index>(d))))
        best = m;
    }
    if (best == M) continue;
    std::vector<std::size_t> others;
    std::vector<double> ps;
    std::vector<MannWhitney> tests;
    for (std::size_t m = 0; m < M; ++m) {
      if (m == best || test_rmse[m * D + d].empty()) continue;
      tests.push_back(mann_whitney_u(test_rmse[best * D + d], test_rmse[m * D + d]));
      ps.push_back(tests.back().p);
      others.push_back(m);
    }
    if (others.empty()) continue;
    const auto flags = bonferroni(ps, opt.alpha);
    const double thr = opt.alpha / static_cast<double>(ps.size());
    for (std::size_t k = 0; k < others.size(); ++k) {
      if (flags[k]) labels[best * D + d] += letter(others[k]);
      sig_csv += datasets[d] + "," + methods[best] + "," + methods[others[k]] + "," + fmt(tests[k].u) + "," +
                 fmt(tests[k].p) + "," + (tests[k].exact ? "1" : "0") + "," + fmt(thr) + "," + (flags[k] ? "1" : "0") + "\n";
      sig_json.push_back({{"dataset", datasets[d]}, {"best", methods[best]}, {"other", methods[others[k]]},
                          {"u", num(tests[k].u)}, {"p", num(tests[k].p)}, {"exact", tests[k].exact},
                          {"threshold", num(thr)}, {"significant", static_cast<bool>(flags[k])}});
    }
  }

  std::string summary_csv =
      "dataset,method,letter,runs,failed,median_test_rmse,q25_test_rmse,q75_test_rmse,median_train_rmse,median_size,"
      "rank,significance\n";
  std::string fail_csv = "method,dataset,run,seed,error\n";
  json cells = json::array(), failures = json::array();
  for (std::size_t d = 0; d < D; ++d)
    for (std::size_t m = 0; m < M; ++m) {
      const ExperimentResult* res = cell[m * D + d];
      if (!res) continue;
      std::size_t failed = 0;
      for (const auto& r : res->runs)
        if (!r.ok) {
          ++failed;
          std::string err = r.error;
          std::replace(err.begin(), err.end(), ',', ';');
          std::replace(err.begin(), err.end(), '\n', ' ');
          fail_csv += r.method + "," + r.dataset + "," + std::to_string(r.run) + "," + std::to_string(r.seed) + "," + err + "\n";
          failures.push_back({{"method", r.method}, {"dataset", r.dataset}, {"run", r.run}, {"seed", r.seed},
                              {"error", r.error}});
        }
      const Quartiles t = quartiles(test_rmse[m * D + d]);
      const double train = quantile(collect(*res, [](const RunLog& l) { return l.best_train_rmse; }), 0.5);
      const double size = quantile(collect(*res, [](const RunLog& l) { return static_cast<double>(l.best.size()); }), 0.5);
      const double rk = rank(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d));
      summary_csv += datasets[d] + "," + methods[m] + "," + letter(m) + "," + std::to_string(res->runs.size()) + "," +
                     std::to_string(failed) + "," + fmt(t.median) + "," + fmt(t.q25) + "," + fmt(t.q75) + "," +
                     fmt(train) + "," + fmt(size) + "," + fmt(rk) + "," + labels[m * D + d] + "\n";
      cells.push_back({{"dataset", datasets[d]}, {"method", methods[m]}, {"runs", res->runs.size()}, {"failed", failed},
                       {"median_test_rmse", num(t.median)}, {"q25_test_rmse", num(t.q25)}, {"q75_test_rmse", num(t.q75)},
                       {"median_train_rmse", num(train)}, {"median_size", num(size)}, {"rank", num(rk)},
                       {"significance", labels[m * D + d]}});
    }

  std::string ranks_csv = "method,letter,mean_rank,std_rank,datasets\n";
  json ranks_json = json::array();
  if (complete)
    for (std::size_t m = 0; m < M; ++m) {
      ranks_csv += methods[m] + "," + letter(m) + "," + fmt(ranks.mean[m]) + "," + fmt(ranks.std[m]) + "," +
                   std::to_string(D) + "\n";
      ranks_json.push_back({{"method", methods[m]}, {"mean", num(ranks.mean[m])}, {"std", num(ranks.std[m])}});
    }

  // Per-generation median and IQR across runs.
  struct Series {
    const char* name;
    double (*get)(const GenerationRecord&);
  };
  const Series series[] = {
      {"train_rmse", [](const GenerationRecord& g) { return g.best_rmse; }},
      {"size", [](const GenerationRecord& g) { return static_cast<double>(g.best_size); }},
      {"step_sd", [](const GenerationRecord& g) { return g.median_step_sd; }},
      {"stagnation", [](const GenerationRecord& g) { return static_cast<double>(g.generations_without_improvement); }},
  };
  for (const auto& s : series) {
    std::string csv = "dataset,method,generation,runs,q25,median,q75\n";
    for (std::size_t d = 0; d < D; ++d)
      for (std::size_t m = 0; m < M; ++m) {
        const ExperimentResult* res = cell[m * D + d];
        if (!res) continue;
        std::size_t gens = 0;
        for (const auto& r : res->runs)
          if (r.ok) gens = std::max(gens, r.log.generations.size());
        for (std::size_t g = 0; g < gens; ++g) {
          std::vector<double> v;
          for (const auto& r : res->runs)
            if (r.ok && g < r.log.generations.size()) v.push_back(s.get(r.log.generations[g]));
          const Quartiles q = quartiles(v);
          csv += datasets[d] + "," + methods[m] + "," + std::to_string(g) + "," + std::to_string(v.size()) + "," +
                 fmt(q.q25) + "," + fmt(q.median) + "," + fmt(q.q75) + "\n";
        }
      }
    write_file(out_dir / "tables" / (std::string("series_") + s.name + ".csv"), csv);
  }

  write_file(out_dir / "tables" / "summary.csv", summary_csv);
  write_file(out_dir / "tables" / "ranks.csv", ranks_csv);
  write_file(out_dir / "tables" / "significance.csv", sig_csv);
  write_file(out_dir / "tables" / "failures.csv", fail_csv);

  json methods_json = json::array();
  for (std::size_t m = 0; m < M; ++m) methods_json.push_back({{"method", methods[m]}, {"letter", letter(m)}});
  const json summary = {{"alpha", opt.alpha},
                        {"methods", methods_json},
                        {"datasets", datasets},
                        {"cells", cells},
                        {"ranks", complete ? ranks_json : json(nullptr)},
                        {"significance", sig_json},
                        {"failures", failures}};
  write_file(out_dir / "summary.json", summary.dump(2) + "\n");
}

std::vector<Dataset> load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const std::exception& e) {
    throw Error(path.string() + ": " + e.what());
  }
  if (!j.contains("datasets") || !j["datasets"].is_array()) throw Error(path.string() + ": missing \"datasets\" array");
  std::vector<Dataset> out;
  for (const auto& e : j["datasets"]) {
    if (e.contains("csv")) {
      std::filesystem::path p = e["csv"].get<std::string>();
      if (p.is_relative()) p = path.parent_path() / p;
      const auto prov = parse_provenance(e.value("provenance", std::string("real-world")));
      out.push_back(load_csv(p, e.value("name", std::string()), prov));
    } else if (e.contains("feynman")) {
      out.push_back(make_feynman(e["feynman"].get<std::string>(), e.value("samples", Eigen::Index{10000}),
                                 e.value("seed", std::uint64_t{0})));
    } else {
      throw Error(path.string() + ": dataset entry needs \"csv\" or \"feynman\": " + e.dump());
    }
  }
  return out;
}

}  // namespace tsgp
