#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tsgp/dataset.hpp"
#include "tsgp/decode.hpp"
#include "tsgp/engine.hpp"

namespace tsgp {

struct MethodSpec {
  VariationKind kind = VariationKind::stdgp;
  double sd_target = 1.0;  // tsgp only

  /// "stdgp", "gsm", "tsgp-sd1" ...; used in file names.
  std::string label() const;
};
/// Accepts "stdgp", "gsm", "tsgp" (SD_t = fallback) and "tsgp:<sd>".
MethodSpec parse_method(const std::string& s, double fallback_sd = 1.0);

struct ExperimentConfig {
  SearchConfig search;  // seed and workers are set per cell
  GsmConfig gsm;
  TsgpConfig tsgp;      // sd_target comes from the method
  int runs = 30;
  std::uint64_t seed = 0;
  double train_ratio = 0.75;
  StandardizeFit fit = StandardizeFit::train;
  int workers = 1;                    // cells in parallel
  const Checkpoint* model = nullptr;  // required for tsgp methods
  std::filesystem::path out_dir;      // runlogs/*.jsonl are written here when set
};

struct RunRecord {
  std::string method, dataset;
  int run = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  RunLog log;
};

struct ExperimentResult {
  std::string method, dataset;
  std::vector<RunRecord> runs;  // all attempted runs, failed ones included
};

/// Seed of run r on a dataset; shared by all methods so runs are paired by split and initial population.
std::uint64_t run_seed(std::uint64_t base, const std::string& dataset, int run);

/// (method, dataset, run) cells in parallel. A cell that throws is recorded with its error; the
/// others are unaffected.
std::vector<ExperimentResult> run_experiment(std::span<const MethodSpec> methods, std::span<const Dataset> datasets,
                                             const ExperimentConfig& cfg);

nlohmann::json to_json(const RunLog& log);
RunLog runlog_from_json(const nlohmann::json& j);
nlohmann::json to_json(const RunRecord& r);
RunRecord run_record_from_json(const nlohmann::json& j);

std::filesystem::path runlog_path(const std::filesystem::path& out_dir, const std::string& method,
                                  const std::string& dataset);
void write_runlogs(const ExperimentResult& res, const std::filesystem::path& out_dir);
/// Every runlogs/*.jsonl under out_dir, ordered by file name.
std::vector<ExperimentResult> load_runlogs(const std::filesystem::path& out_dir);

struct ReportOptions {
  double alpha = 0.05;
};

/// tables/summary.csv, tables/ranks.csv, tables/significance.csv, tables/failures.csv,
/// tables/series_{train_rmse,size,step_sd,stagnation}.csv and summary.json. Pure function of the
/// results; method and dataset order follow first appearance.
void report(std::span<const ExperimentResult> results, const std::filesystem::path& out_dir,
            const ReportOptions& opt = {});

/// Bench manifest: {"datasets": [{"csv": path, "name"?, "provenance"?} | {"feynman": name, "samples"?, "seed"?}]}.
/// Relative csv paths resolve against the manifest's directory.
std::vector<Dataset> load_manifest(const std::filesystem::path& path);

}  // namespace tsgp
