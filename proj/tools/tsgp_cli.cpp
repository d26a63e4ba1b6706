// Command-line front end: archive harvesting, pair mining, training, search and benchmarking.

#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"
#include "tsgp/datagen.hpp"
#include "tsgp/decode.hpp"
#include "tsgp/experiment.hpp"
#include "tsgp/pairs.hpp"
#include "tsgp/train.hpp"

using namespace tsgp;

namespace {

struct Common {
  std::uint64_t seed = 0;
  int d = 2;
  std::string out;
};

void add_common(CLI::App* app, Common& c, bool with_d) {
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  if (with_d) app->add_option("--d", c.d, "Problem dimensionality (2..5)")->check(CLI::Range(2, 5))->capture_default_str();
  app->add_option("--out", c.out, "Output path")->required();
}

void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  if (!p.parent_path().empty()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p);
  out << j.dump(2) << '\n';
  if (!out) throw Error("cannot write " + p.string());
}

Dataset dataset_from_flags(const std::string& csv, const std::string& feynman_name, Eigen::Index samples,
                           std::uint64_t seed) {
  if (!csv.empty() == !feynman_name.empty()) throw Error("give exactly one of --dataset and --feynman");
  if (!csv.empty()) return load_csv(csv);
  return make_feynman(feynman_name, samples, seed);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic GP with a transformer variation operator"};
  app.require_subcommand(1);

  // gen-archive
  Common ga;
  std::size_t ga_n = 20000;
  int ga_problems = 50, ga_pop = 2000;
  Eigen::Index probe_m = kDefaultProbeSize;
  std::uint64_t probe_seed = kDefaultProbeSeed;
  auto* gen = app.add_subcommand("gen-archive", "Harvest unique canonical programs with stdGP");
  add_common(gen, ga, true);
  gen->add_option("--n", ga_n, "Unique functions to collect")->capture_default_str();
  gen->add_option("--problems", ga_problems, "Synthetic problems")->capture_default_str();
  gen->add_option("--pop", ga_pop, "Population size")->capture_default_str();
  gen->add_option("--probe-size", probe_m, "Probe points for semantics")->capture_default_str();
  gen->add_option("--probe-seed", probe_seed, "Probe seed")->capture_default_str();

  // build-pairs
  Common bp;
  std::vector<std::string> bp_archives;
  PairConfig pcfg;
  auto* pairs = app.add_subcommand("build-pairs", "Mine semantically close training pairs from archives");
  add_common(pairs, bp, false);
  pairs->add_option("--archive", bp_archives, "Archive files")->required();
  pairs->add_option("--k", pcfg.k, "Neighbours per program")->capture_default_str();
  pairs->add_option("--max-sd", pcfg.max_sd, "Exclusive upper SD bound")->capture_default_str();
  pairs->add_option("--clusters", pcfg.clusters, "IVF clusters (0 = sqrt(N))")->capture_default_str();
  pairs->add_option("--nprobe", pcfg.nprobe, "IVF cells probed")->capture_default_str();

  // train
  Common tr;
  std::string tr_pairs, preset = "desk";
  TrainConfig tcfg;
  bool resume = false;
  auto* train = app.add_subcommand("train", "Train the seq2seq model on mined pairs");
  add_common(train, tr, false);
  train->add_option("--pairs", tr_pairs, "Pairs JSONL")->required();
  train->add_option("--preset", preset, "Model size")->check(CLI::IsMember({"desk", "full"}))->capture_default_str();
  train->add_option("--epochs", tcfg.epochs)->capture_default_str();
  train->add_option("--batch", tcfg.batch_size)->capture_default_str();
  train->add_option("--lr", tcfg.lr)->capture_default_str();
  train->add_option("--val-fraction", tcfg.val_fraction)->capture_default_str();
  train->add_flag("--resume", resume, "Continue from the checkpoint in --out");

  // search
  Common se;
  std::string se_method = "stdgp", se_model, se_csv, se_feynman, standardize = "train";
  double se_sd = 1.0, se_ms = 0.1;
  SearchConfig scfg;
  Eigen::Index samples = 10000;
  auto* search = app.add_subcommand("search", "One GP run on one dataset");
  add_common(search, se, false);
  search->add_option("--method", se_method)->check(CLI::IsMember({"stdgp", "gsm", "tsgp"}))->capture_default_str();
  search->add_option("--sd-target", se_sd, "TSGP target semantic distance")->capture_default_str();
  search->add_option("--ms", se_ms, "GSM mutation step")->capture_default_str();
  search->add_option("--pop", scfg.pop_size)->capture_default_str();
  search->add_option("--gens", scfg.generations)->capture_default_str();
  search->add_option("--model", se_model, "Trained model directory or model.ckpt");
  search->add_option("--dataset", se_csv, "CSV dataset");
  search->add_option("--feynman", se_feynman, "Registered Feynman dataset");
  search->add_option("--samples", samples, "Feynman samples")->capture_default_str();
  search->add_option("--standardize", standardize, "Scaler fit set")->check(CLI::IsMember({"train", "full"}))->capture_default_str();
  search->add_option("--workers", scfg.workers)->capture_default_str();

  // bench
  Common be;
  std::string manifest, be_model;
  std::vector<std::string> be_methods{"stdgp", "gsm", "tsgp"};
  ExperimentConfig ecfg;
  double be_sd = 1.0;
  auto* bench = app.add_subcommand("bench", "Methods x datasets x runs with report");
  add_common(bench, be, false);
  bench->add_option("--datasets", manifest, "Dataset manifest (JSON)")->required();
  bench->add_option("--methods", be_methods, "stdgp, gsm, tsgp or tsgp:<sd>")->capture_default_str();
  bench->add_option("--sd-target", be_sd, "Default TSGP target SD")->capture_default_str();
  bench->add_option("--runs", ecfg.runs)->capture_default_str();
  bench->add_option("--pop", ecfg.search.pop_size)->capture_default_str();
  bench->add_option("--gens", ecfg.search.generations)->capture_default_str();
  bench->add_option("--model", be_model, "Trained model directory or model.ckpt");
  bench->add_option("--workers", ecfg.workers, "Parallel cells")->capture_default_str();
  bench->add_option("--standardize", standardize)->check(CLI::IsMember({"train", "full"}))->capture_default_str();

  // report
  std::string rp_out;
  double alpha = 0.05;
  auto* rep = app.add_subcommand("report", "Rebuild tables and summary.json from runlogs");
  rep->add_option("--out", rp_out, "Directory holding runlogs/")->required();
  rep->add_option("--alpha", alpha)->capture_default_str();

  // gradcheck
  GradCheckConfig gcfg;
  double tol = 1e-5;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the model gradients");
  gc->add_option("--seed", gcfg.seed)->capture_default_str();
  gc->add_option("--coords", gcfg.coordinates)->capture_default_str();
  gc->add_option("--tol", tol)->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  auto model_path = [](const std::string& p) {
    std::filesystem::path path = p;
    if (std::filesystem::is_directory(path)) path /= "model.ckpt";
    return path;
  };

  try {
    if (*gen) {
      HarvestConfig hc = HarvestConfig::defaults();
      hc.search.pop_size = ga_pop;
      hc.seed = ga.seed;
      const ProbeSet probe = ProbeSet::make(probe_seed, probe_m, ga.d);
      const Archive a = harvest_archive(ga.d, ga_n, ga_problems, probe, hc);
      save_archive(a, ga.out);
      std::printf("archive d=%d: %zu unique programs from %d runs (%zu evaluations) -> %s\n", a.d, a.size(), a.runs,
                  a.evaluations, ga.out.c_str());
    } else if (*pairs) {
      pcfg.seed = bp.seed;
      std::vector<TrainingPair> all;
      nlohmann::json stats = nlohmann::json::array();
      for (const auto& path : bp_archives) {
        const Archive a = load_archive(path);
        PairStats st;
        auto p = assemble_pairs(a, pcfg, &st);
        std::printf("%s (d=%d, %zu programs): %zu candidates, %zu pairs; dropped %zu zero-SD, %zu far, %zu long\n",
                    path.c_str(), a.d, a.size(), st.candidates, st.emitted, st.dropped_zero, st.dropped_far, st.dropped_long);
        stats.push_back({{"archive", path}, {"d", a.d}, {"programs", a.size()}, {"candidates", st.candidates},
                         {"emitted", st.emitted}, {"dropped_zero", st.dropped_zero}, {"dropped_far", st.dropped_far},
                         {"dropped_long", st.dropped_long}});
        all.insert(all.end(), p.begin(), p.end());
      }
      shuffle_pairs(all, bp.seed);
      write_pairs(bp.out, all);
      write_json(bp.out + ".stats.json", {{"pairs", all.size()}, {"k", pcfg.k}, {"archives", stats}});
      std::printf("%zu pairs -> %s\n", all.size(), bp.out.c_str());
    } else if (*train) {
      tcfg.model = preset == "full" ? ModelConfig::full_scale() : ModelConfig::desk();
      tcfg.model.seed = tr.seed;
      tcfg.seed = tr.seed;
      tcfg.verbose = true;
      Trainer t(tcfg, read_pairs(tr_pairs));
      if (resume) t.resume(tr.out);
      std::fprintf(stderr, "%zu train / %zu val examples, %lld steps\n", t.train_examples().size(),
                   t.validation_examples().size(), static_cast<long long>(t.total_steps()));
      TrainReport r;
      try {
        r = t.run();
      } catch (const Error& e) {
        t.save(tr.out);  // parameters were restored to the last finite state
        std::fprintf(stderr, "training aborted: %s; last good checkpoint saved to %s\n", e.what(), tr.out.c_str());
        return 2;
      }
      t.save(tr.out);
      nlohmann::json epochs = nlohmann::json::array();
      for (const auto& e : r.epochs)
        epochs.push_back({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"val_loss", e.val_loss},
                          {"first_batch_loss", e.first_batch_loss}, {"last_batch_loss", e.last_batch_loss},
                          {"seconds", e.seconds}});
      write_json(std::filesystem::path(tr.out) / "train_report.json",
                 {{"train_pairs", r.train_pairs}, {"val_pairs", r.val_pairs}, {"parameters", r.parameters},
                  {"steps", r.steps}, {"initial_val_loss", r.initial_val_loss}, {"dims", r.dims}, {"epochs", epochs}});
    } else if (*search) {
      const Dataset ds = dataset_from_flags(se_csv, se_feynman, samples, se.seed);
      const Split split = split_standardize(ds, 0.75, se.seed, standardize == "full" ? StandardizeFit::full : StandardizeFit::train);
      const RegressionProblem prob = to_problem(ds, split);
      scfg.seed = se.seed;
      scfg.variation = parse_variation(se_method);
      RunRecord rec;
      rec.dataset = ds.name;
      rec.seed = se.seed;
      if (scfg.variation == VariationKind::tsgp) {
        if (se_model.empty()) throw Error("--method tsgp needs --model");
        const Checkpoint ck = load_checkpoint(model_path(se_model));
        TsgpConfig tc;
        tc.sd_target = se_sd;
        rec.log = tsgp_search(scfg, tc, ck, prob);
        rec.method = MethodSpec{VariationKind::tsgp, se_sd}.label();
      } else {
        GsmConfig g;
        g.ms = se_ms;
        rec.log = evolve(scfg, prob, g);
        rec.method = se_method;
      }
      rec.log.method = rec.method;
      rec.ok = true;
      ExperimentResult res{rec.method, rec.dataset, {rec}};
      write_runlogs(res, se.out);
      report(std::vector<ExperimentResult>{res}, se.out);
      std::printf("%s on %s: train RMSE %.6g, test RMSE %.6g, size %zu\n%s\n", rec.method.c_str(), ds.name.c_str(),
                  rec.log.best_train_rmse, rec.log.test_rmse, rec.log.best.size(), to_string(rec.log.best).c_str());
    } else if (*bench) {
      const auto datasets = load_manifest(manifest);
      std::vector<MethodSpec> methods;
      for (const auto& m : be_methods) methods.push_back(parse_method(m, be_sd));
      Checkpoint ck;
      if (!be_model.empty()) {
        ck = load_checkpoint(model_path(be_model));
        ecfg.model = &ck;
      }
      ecfg.seed = be.seed;
      ecfg.fit = standardize == "full" ? StandardizeFit::full : StandardizeFit::train;
      ecfg.out_dir = be.out;
      const auto results = run_experiment(methods, datasets, ecfg);
      report(results, be.out);
      std::size_t failed = 0;
      for (const auto& r : results)
        for (const auto& run : r.runs) failed += !run.ok;
      std::printf("%zu methods x %zu datasets x %d runs -> %s (%zu failed cells)\n", methods.size(), datasets.size(),
                  ecfg.runs, be.out.c_str(), failed);
      return failed ? 3 : 0;
    } else if (*rep) {
      const auto results = load_runlogs(rp_out);
      report(results, rp_out, ReportOptions{alpha});
      std::printf("report over %zu method/dataset cells -> %s\n", results.size(), rp_out.c_str());
    } else if (*gc) {
      const GradCheckResult r = gradcheck(gcfg);
      std::printf("checked %d coordinates: max relative error %.3g at %s (analytic %.6g, numeric %.6g); key-bias |grad| %.3g\n",
                  r.checked, r.max_rel_error, r.worst.c_str(), r.worst_analytic, r.worst_numeric, r.max_key_bias_grad);
      return r.max_rel_error <= tol ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
