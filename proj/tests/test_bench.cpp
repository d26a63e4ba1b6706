#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tsgp/experiment.hpp"
#include "tsgp/stats.hpp"

using namespace tsgp;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

std::vector<std::vector<std::string>> read_table(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    rows.push_back(cells);
  }
  return rows;
}

void write_text(const std::filesystem::path& p, const std::string& s) {
  std::ofstream out(p);
  out << s;
}

// Brute-force oracle: p over all labelings, U by direct pair counting.
double brute_mwu_p(const std::vector<double>& x, const std::vector<double>& y) {
  std::vector<double> pool(x);
  pool.insert(pool.end(), y.begin(), y.end());
  const std::size_t n = pool.size(), n1 = x.size();
  auto u_of = [&](unsigned mask) {
    double u = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if ((mask >> i & 1u) && !(mask >> j & 1u)) u += pool[i] > pool[j] ? 1 : pool[i] == pool[j] ? 0.5 : 0;
    return u;
  };
  const double mu = static_cast<double>(n1 * (n - n1)) / 2.0;
  const double obs = std::abs(u_of((1u << n1) - 1) - mu);
  int total = 0, extreme = 0;
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    if (static_cast<std::size_t>(__builtin_popcount(mask)) != n1) continue;
    ++total;
    extreme += std::abs(u_of(mask) - mu) >= obs - 1e-9;
  }
  return static_cast<double>(extreme) / total;
}

double brute_rank(const std::vector<double>& v, std::size_t i) {
  double less = 0, eq = 0;
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j] < v[i]) ++less;
    if (j != i && v[j] == v[i]) ++eq;
  }
  return 1 + less + eq / 2;
}

Dataset toy_dataset(int d, Eigen::Index n, std::uint64_t seed) {
  Dataset ds;
  ds.name = "toy" + std::to_string(d);
  ds.d = d;
  Rng rng(seed);
  std::normal_distribution<double> normal(3.0, 2.0);
  ds.X.resize(n, d);
  for (auto& x : ds.X.reshaped()) x = normal(rng);
  ds.y = ds.X.rowwise().sum();
  for (int j = 0; j < d; ++j) ds.columns.push_back("x" + std::to_string(j + 1));
  ds.columns.push_back("y");
  return ds;
}

}  // namespace

// ---- statistics ----

TEST_CASE("Mann-Whitney U examples") {
  const std::vector<double> x{1, 2, 3}, y{4, 5, 6};
  const auto r = mann_whitney_u(x, y);
  CHECK(r.exact);
  CHECK(r.u == 0.0);
  CHECK(r.p == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(mann_whitney_u(y, x).u == 9.0);
  CHECK(mann_whitney_u(x, x).p == 1.0);
  CHECK(mann_whitney_u(std::vector<double>{1, 1, 1}, std::vector<double>{1, 1}).p == 1.0);
  CHECK_THROWS_AS(mann_whitney_u(std::vector<double>{}, y), Error);

  // Reference value of the tie- and continuity-corrected asymptotic test.
  const std::vector<double> a{1, 2, 2, 3, 5, 8, 8, 9, 10, 12, 13, 13, 14};
  const std::vector<double> b{2, 4, 6, 6, 7, 8, 11, 15, 16, 16, 17, 18, 20, 21};
  const auto big = mann_whitney_u(a, b);
  CHECK_FALSE(big.exact);
  CHECK(big.u == 55.0);
  CHECK(big.p == doctest::Approx(0.08442334219389806).epsilon(1e-10));
}

TEST_CASE("exact Mann-Whitney matches brute force and the complement identity") {
  Rng rng(4);
  for (int t = 0; t < 60; ++t) {
    const std::size_t n1 = 1 + uniform_index(rng, 7), n2 = 1 + uniform_index(rng, 7);
    std::vector<double> x(n1), y(n2);
    // Small integer support so ties are common.
    for (auto& v : x) v = static_cast<double>(uniform_index(rng, 5));
    for (auto& v : y) v = static_cast<double>(uniform_index(rng, 5));
    const auto r = mann_whitney_exact(x, y);
    const auto rev = mann_whitney_exact(y, x);
    CHECK(r.u + rev.u == static_cast<double>(n1 * n2));
    CHECK(r.p == doctest::Approx(rev.p).epsilon(1e-12));
    CHECK(r.p == doctest::Approx(brute_mwu_p(x, y)).epsilon(1e-12));
    CHECK(r.p <= 1.0);
  }
}

TEST_CASE("normal approximation agrees with exact at n=10 per group") {
  Rng rng(8);
  std::normal_distribution<double> normal(0, 1);
  double worst = 0.0;
  for (int t = 0; t < 40; ++t) {
    std::vector<double> x(10), y(10);
    const double shift = 0.1 * t / 4.0;
    for (auto& v : x) v = normal(rng);
    for (auto& v : y) v = normal(rng) + shift;
    worst = std::max(worst, std::abs(mann_whitney_exact(x, y).p - mann_whitney_normal(x, y).p));
  }
  MESSAGE("max |exact - normal| = " << worst);
  CHECK(worst <= 0.02);
}

TEST_CASE("Bonferroni thresholds") {
  CHECK(bonferroni(std::vector<double>{0.01}, 0.05) == std::vector<bool>{true});
  CHECK(bonferroni(std::vector<double>{0.02, 0.02}, 0.05) == std::vector<bool>{true, true});
  CHECK(bonferroni(std::vector<double>{0.03, 0.03}, 0.05) == std::vector<bool>{false, false});
  CHECK(bonferroni(std::vector<double>{0.025, 0.0249}, 0.05) == std::vector<bool>{false, true});
  CHECK_THROWS_AS(bonferroni(std::vector<double>{}, 0.05), Error);
  Rng rng(1);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p(1 + uniform_index(rng, 6));
    for (auto& v : p) v = uniform01(rng) * 0.1;
    const auto f = bonferroni(p, 0.05);
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(f[i] == (p[i] * static_cast<double>(p.size()) < 0.05));
  }
}

TEST_CASE("ranks with average ties") {
  CHECK(average_ranks(std::vector<double>{3, 1, 3}) == std::vector<double>{2.5, 1, 2.5});
  Eigen::MatrixXd best(3, 4);
  best << 0.1, 0.2, 0.1, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 0.9, 0.9, 0.9;
  const auto s = mean_ranks(best);
  CHECK(s.mean[0] == 1.0);
  CHECK(s.std[0] == 0.0);
  Eigen::MatrixXd tie(2, 1);
  tie << 0.4, 0.4;
  CHECK(mean_ranks(tie).mean == std::vector<double>{1.5, 1.5});

  Rng rng(3);
  for (int t = 0; t < 100; ++t) {
    const auto m = static_cast<Eigen::Index>(2 + uniform_index(rng, 4)), d = static_cast<Eigen::Index>(1 + uniform_index(rng, 6));
    Eigen::MatrixXd tab(m, d);
    for (auto& v : tab.reshaped()) v = static_cast<double>(uniform_index(rng, 4)) / 4.0;
    const auto got = mean_ranks(tab);
    for (Eigen::Index i = 0; i < m; ++i) {
      std::vector<double> r;
      for (Eigen::Index c = 0; c < d; ++c) {
        std::vector<double> col(tab.col(c).data(), tab.col(c).data() + m);
        r.push_back(brute_rank(col, static_cast<std::size_t>(i)));
      }
      double mean = 0, var = 0;
      for (double v : r) mean += v / static_cast<double>(d);
      for (double v : r) var += (v - mean) * (v - mean) / static_cast<double>(d);
      CHECK(got.mean[static_cast<std::size_t>(i)] == doctest::Approx(mean).epsilon(1e-12));
      CHECK(got.std[static_cast<std::size_t>(i)] == doctest::Approx(std::sqrt(var)).epsilon(1e-12));
    }
  }
}

TEST_CASE("quantiles") {
  CHECK(quantile({1, 2, 3, 4}, 0.25) == 1.75);
  CHECK(quantile({4, 1, 3, 2}, 0.5) == 2.5);
  CHECK(quantile({7}, 0.75) == 7);
  CHECK(std::isnan(quantile({}, 0.5)));
  CHECK(quantile({1, std::nan(""), 3}, 0.5) == 2);
  const auto q = quartiles({1, 5, std::numeric_limits<double>::infinity()});
  CHECK(q.median == 5);
  CHECK(std::isinf(q.q75));
}

// ---- datasets ----

TEST_CASE("CSV loading and errors") {
  const auto dir = test_util::temp_dir("csv");
  Dataset ds = toy_dataset(3, 120, 1);
  write_csv(ds, dir / "a.csv");
  CHECK(slurp(dir / "a.csv").rfind("x1,x2,x3,y\n", 0) == 0);
  const Dataset back = load_csv(dir / "a.csv");
  CHECK(back.d == 3);
  CHECK(back.name == "a");
  CHECK(back.X == ds.X);
  CHECK(back.y == ds.y);

  write_text(dir / "nan.csv", "x1,x2,y\n1,2,3\n4,NaN,6\n");
  try {
    load_csv(dir / "nan.csv", "", Provenance::real_world, 1);
    FAIL("expected an error");
  } catch (const Error& e) {
    const std::string msg = e.what();
    CHECK(msg.find("row 3") != std::string::npos);
    CHECK(msg.find("column 2 (x2)") != std::string::npos);
  }
  write_text(dir / "text.csv", "x1,x2,y\n1,abc,3\n");
  CHECK_THROWS_WITH_AS(load_csv(dir / "text.csv", "", Provenance::real_world, 1), doctest::Contains("non-numeric"), Error);
  write_text(dir / "hole.csv", "x1,x2,y\n1,,3\n");
  CHECK_THROWS_WITH_AS(load_csv(dir / "hole.csv", "", Provenance::real_world, 1), doctest::Contains("missing"), Error);
  write_text(dir / "ragged.csv", "x1,x2,y\n1,2\n");
  CHECK_THROWS_AS(load_csv(dir / "ragged.csv", "", Provenance::real_world, 1), Error);
  write_text(dir / "d1.csv", "x1,y\n1,2\n");
  CHECK_THROWS_AS(load_csv(dir / "d1.csv", "", Provenance::real_world, 1), Error);
  write_text(dir / "d6.csv", "a,b,c,d,e,f,y\n1,2,3,4,5,6,7\n");
  CHECK_THROWS_AS(load_csv(dir / "d6.csv", "", Provenance::real_world, 1), Error);
  write_text(dir / "few.csv", "x1,x2,y\n1,2,3\n");
  CHECK_THROWS_AS(load_csv(dir / "few.csv"), Error);  // fewer than 100 rows
  CHECK_THROWS_AS(load_csv(dir / "absent.csv"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("CSV round trip is bit-exact") {
  const auto dir = test_util::temp_dir("csvrt");
  Dataset ds = toy_dataset(2, 100, 2);
  ds.X(0, 0) = 0.1 + 0.2;
  ds.X(1, 1) = 1e-300;
  ds.y(2) = -123456789.123456789;
  ds.y(3) = std::nextafter(1.0, 2.0);
  write_csv(ds, dir / "b.csv");
  const Dataset back = load_csv(dir / "b.csv");
  for (Eigen::Index i = 0; i < ds.rows(); ++i) {
    for (int j = 0; j < ds.d; ++j) REQUIRE(std::memcmp(&ds.X(i, j), &back.X(i, j), sizeof(double)) == 0);
    REQUIRE(std::memcmp(&ds.y(i), &back.y(i), sizeof(double)) == 0);
  }
  std::filesystem::remove_all(dir);
}

TEST_CASE("split and standardize") {
  const Dataset ds = toy_dataset(3, 100, 3);
  const Split s = split_standardize(ds, 0.75, 9);
  CHECK(s.X_train.rows() == 75);
  CHECK(s.X_test.rows() == 25);
  for (int j = 0; j < 3; ++j) {
    const double mean = s.X_train.col(j).mean();
    const double var = (s.X_train.col(j).array() - mean).square().mean();
    CHECK(std::abs(mean) <= 1e-9);
    CHECK(std::abs(var - 1.0) <= 1e-9);
  }
  CHECK(std::abs(s.y_train.mean()) <= 1e-9);
  // Test rows use the training scaler.
  const Eigen::Index r0 = s.test_rows[0];
  CHECK(s.X_test(0, 1) == doctest::Approx((ds.X(r0, 1) - s.feature_scalers[1].mean) / s.feature_scalers[1].std));

  std::vector<Eigen::Index> all = s.train_rows;
  all.insert(all.end(), s.test_rows.begin(), s.test_rows.end());
  std::sort(all.begin(), all.end());
  for (Eigen::Index i = 0; i < 100; ++i) CHECK(all[static_cast<std::size_t>(i)] == i);

  const Split again = split_standardize(ds, 0.75, 9);
  CHECK(again.train_rows == s.train_rows);
  CHECK(again.X_train == s.X_train);
  CHECK(split_standardize(ds, 0.75, 10).train_rows != s.train_rows);

  const Split full = split_standardize(ds, 0.75, 9, StandardizeFit::full);
  Eigen::MatrixXd stacked(100, 3);
  stacked << full.X_train, full.X_test;
  CHECK(std::abs(stacked.col(0).mean()) <= 1e-9);
  CHECK_THROWS_AS(split_standardize(ds, 1.0, 1), Error);
  CHECK_THROWS_AS(split_standardize(ds, 0.0, 1), Error);
}

TEST_CASE("Feynman registry") {
  REQUIRE(feynman_registry().size() >= 9);
  const std::map<std::string, int> dims{{"Feynman_I_18_4", 4}, {"Feynman_I_24_6", 4},  {"Feynman_I_25_13", 2},
                                        {"Feynman_I_29_4", 2}, {"Feynman_I_43_43", 4}, {"Feynman_II_34_2", 3},
                                        {"Feynman_II_38_3", 4}, {"Feynman_II_4_23", 3}, {"Feynman_III_14_14", 5}};
  for (const auto& [name, d] : dims) {
    const Dataset ds = make_feynman(name);
    CHECK(ds.d == d);
    CHECK(ds.rows() == 10000);
    CHECK(ds.provenance == Provenance::synthetic);
    CHECK_NOTHROW(validate(ds));
  }
  const Dataset v = make_feynman("Feynman_I_25_13", 200, 1);
  for (Eigen::Index i = 0; i < v.rows(); ++i) CHECK(v.y(i) == v.X(i, 0) / v.X(i, 1));
  CHECK(make_feynman("Feynman_I_25_13", 200, 1).X == v.X);
  CHECK(make_feynman("Feynman_I_25_13", 200, 2).X != v.X);
  CHECK_THROWS_AS(make_feynman("Feynman_nope"), Error);
}

TEST_CASE("manifest") {
  const auto dir = test_util::temp_dir("manifest");
  write_csv(toy_dataset(2, 150, 4), dir / "real.csv");
  write_text(dir / "m.json",
             R"({"datasets": [{"csv": "real.csv", "name": "r"}, {"feynman": "Feynman_II_34_2", "samples": 300}]})");
  const auto ds = load_manifest(dir / "m.json");
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].name == "r");
  CHECK(ds[0].rows() == 150);
  CHECK(ds[1].d == 3);
  CHECK(ds[1].rows() == 300);
  write_text(dir / "bad.json", R"({"datasets": [{"url": "x"}]})");
  CHECK_THROWS_AS(load_manifest(dir / "bad.json"), Error);
  std::filesystem::remove_all(dir);
}

// ---- experiments ----

TEST_CASE("method labels") {
  CHECK(parse_method("stdgp").label() == "stdgp");
  CHECK(parse_method("gsm").label() == "gsm");
  CHECK(parse_method("tsgp:0.1").label() == "tsgp-sd0.1");
  CHECK(parse_method("tsgp", 5.0).label() == "tsgp-sd5");
  CHECK_THROWS_AS(parse_method("gsm:1"), Error);
  CHECK_THROWS_AS(parse_method("tsgp:-1"), Error);
  CHECK_THROWS_AS(parse_method("tsgp:x"), Error);
  CHECK_THROWS_AS(parse_method("slim"), Error);
}

TEST_CASE("experiment, persistence and report") {
  const auto dir = test_util::temp_dir("bench");
  const std::vector<Dataset> datasets{make_feynman("Feynman_I_25_13", 200, 1), make_feynman("Feynman_II_34_2", 200, 1)};
  ModelConfig mc;
  mc.d_model = 16;
  mc.n_heads = 2;
  mc.d_ff = 32;
  mc.n_layers = 1;
  const Checkpoint model{init_model<float>(mc), CheckpointMeta{0, {3}, 0}};  // no d=2: those cells must fail

  const std::vector<MethodSpec> methods{parse_method("stdgp"), parse_method("gsm"), parse_method("tsgp:1")};
  ExperimentConfig cfg;
  cfg.search.pop_size = 20;
  cfg.search.generations = 6;
  cfg.runs = 3;
  cfg.seed = 5;
  cfg.workers = 2;
  cfg.model = &model;
  cfg.out_dir = dir / "a";
  const auto results = run_experiment(methods, datasets, cfg);
  REQUIRE(results.size() == 6);

  int failed = 0;
  for (const auto& res : results) {
    CHECK(res.runs.size() == 3);
    for (const auto& r : res.runs) {
      CHECK(r.seed == run_seed(5, r.dataset, r.run));
      if (!r.ok) {
        ++failed;
        CHECK(r.method == "tsgp-sd1");
        CHECK(r.dataset == "Feynman_I_25_13");
        CHECK(r.error.find("d=2") != std::string::npos);
        continue;
      }
      CHECK(r.log.generations.size() == 7);
      CHECK(r.log.method == r.method);
      for (std::size_t g = 1; g < r.log.generations.size(); ++g) {
        const auto& cur = r.log.generations[g];
        if (cur.improved) CHECK(cur.generations_without_improvement == 0);
        else CHECK(cur.generations_without_improvement == r.log.generations[g - 1].generations_without_improvement + 1);
      }
    }
  }
  CHECK(failed == 3);

  // Same seeds, paired across methods; workers do not change the result.
  cfg.workers = 1;
  cfg.out_dir.clear();
  const auto serial = run_experiment(methods, datasets, cfg);
  for (std::size_t i = 0; i < results.size(); ++i)
    for (std::size_t r = 0; r < 3; ++r) CHECK(serial[i].runs[r].log.best == results[i].runs[r].log.best);

  report(results, dir / "a");
  const auto loaded = load_runlogs(dir / "a");
  REQUIRE(loaded.size() == 6);
  report(loaded, dir / "b");
  for (const char* f : {"tables/summary.csv", "tables/ranks.csv", "tables/significance.csv", "tables/failures.csv",
                        "tables/series_train_rmse.csv", "tables/series_size.csv", "tables/series_step_sd.csv",
                        "tables/series_stagnation.csv"}) {
    INFO(f);
    std::string a = slurp(dir / "a" / f), b = slurp(dir / "b" / f);
    // Loaded results are ordered by file name; compare as sorted line sets.
    std::vector<std::string> la, lb;
    std::stringstream sa(a), sb(b);
    for (std::string l; std::getline(sa, l);) la.push_back(l);
    for (std::string l; std::getline(sb, l);) lb.push_back(l);
    for (auto* v : {&la, &lb}) std::sort(v->begin() + 1, v->end());
    CHECK(la.size() == lb.size());
    if (std::string(f).find("summary") == std::string::npos) CHECK(la == lb);
  }
  CHECK(std::filesystem::exists(dir / "a" / "summary.json"));
  report(results, dir / "c");
  CHECK(slurp(dir / "a" / "summary.json") == slurp(dir / "c" / "summary.json"));
  CHECK(slurp(dir / "a" / "tables/series_train_rmse.csv") == slurp(dir / "c" / "tables/series_train_rmse.csv"));

  // Failures are reported, not dropped; ranks are withheld for the incomplete table.
  CHECK(read_table(dir / "a" / "tables/failures.csv").size() == 4);
  CHECK(read_table(dir / "a" / "tables/ranks.csv").size() == 1);

  // Summary medians against the persisted runlogs.
  const auto table = read_table(dir / "b" / "tables/summary.csv");
  REQUIRE(table.size() == 7);
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& row = table[i];
    for (const auto& res : loaded) {
      if (res.method != row[1] || res.dataset != row[0]) continue;
      std::vector<double> t;
      for (const auto& r : res.runs)
        if (r.ok) t.push_back(r.log.test_rmse);
      if (t.empty()) {
        CHECK(row[5] == "nan");
      } else {
        CHECK(std::stod(row[5]) == doctest::Approx(quantile(t, 0.5)).epsilon(1e-9));
      }
    }
  }

  // IQR bands are ordered at every generation.
  for (const char* f : {"series_train_rmse.csv", "series_size.csv", "series_stagnation.csv"}) {
    const auto rows = read_table(dir / "a" / "tables" / f);
    for (std::size_t i = 1; i < rows.size(); ++i) {
      const double q25 = std::stod(rows[i][4]), med = std::stod(rows[i][5]), q75 = std::stod(rows[i][6]);
      CHECK(q25 <= med);
      CHECK(med <= q75);
    }
  }

  CHECK_THROWS_AS(run_experiment(std::vector<MethodSpec>{parse_method("tsgp")}, datasets, ExperimentConfig{}), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("complete tables are ranked and labelled") {
  auto make = [](const std::string& m, const std::string& d, std::vector<double> test) {
    ExperimentResult r;
    r.method = m;
    r.dataset = d;
    for (std::size_t i = 0; i < test.size(); ++i) {
      RunRecord rec;
      rec.method = m;
      rec.dataset = d;
      rec.run = static_cast<int>(i);
      rec.ok = true;
      rec.log.test_rmse = test[i];
      rec.log.best_train_rmse = test[i];
      rec.log.best = parse_prefix(std::string("x1"));
      rec.log.generations.resize(1);
      r.runs.push_back(rec);
    }
    return r;
  };
  std::vector<double> low(12), high(12);
  for (int i = 0; i < 12; ++i) {
    low[static_cast<std::size_t>(i)] = 0.1 + 0.001 * i;
    high[static_cast<std::size_t>(i)] = 0.5 + 0.001 * i;
  }
  const std::vector<ExperimentResult> res{make("A", "d1", low), make("B", "d1", high), make("C", "d1", high),
                                          make("A", "d2", high), make("B", "d2", low), make("C", "d2", high)};
  const auto dir = test_util::temp_dir("ranked");
  report(res, dir);
  const auto ranks = read_table(dir / "tables/ranks.csv");
  REQUIRE(ranks.size() == 4);
  CHECK(ranks[1][0] == "A");
  CHECK(std::stod(ranks[1][2]) == 1.75);   // ranks 1 and 2.5
  CHECK(std::stod(ranks[3][2]) == 2.5);    // C: 2.5 twice
  const auto summary = read_table(dir / "tables/summary.csv");
  CHECK(summary[1][1] == "A");
  CHECK(summary[1][11] == "bc");  // A beats B and C on d1
  CHECK(summary[5][1] == "B");
  CHECK(summary[5][11] == "ac");
  std::filesystem::remove_all(dir);
}
