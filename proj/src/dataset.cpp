#include "tsgp/dataset.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "tsgp/common.hpp"

namespace tsgp {

std::string to_string(Provenance p) { return p == Provenance::synthetic ? "synthetic" : "real-world"; }

Provenance parse_provenance(const std::string& s) {
  if (s == "synthetic") return Provenance::synthetic;
  if (s == "real-world") return Provenance::real_world;
  throw Error("unknown provenance '" + s + "' (expected real-world or synthetic)");
}

void validate(const Dataset& ds, Eigen::Index min_rows) {
  const std::string who = "dataset '" + ds.name + "': ";
  if (ds.d < kMinDim || ds.d > kMaxDim) throw Error(who + "d=" + std::to_string(ds.d) + " outside 2..5");
  if (ds.X.cols() != ds.d || ds.X.rows() != ds.y.size()) throw Error(who + "feature/target shapes disagree");
  if (ds.rows() < min_rows)
    throw Error(who + std::to_string(ds.rows()) + " rows, at least " + std::to_string(min_rows) + " required");
  if (!ds.X.allFinite() || !ds.y.allFinite()) throw Error(who + "non-finite values");
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  cells.push_back(cur);
  return cells;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& name, Provenance provenance,
                 Eigen::Index min_rows) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(path.string() + ": empty file");
  if (line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
  Dataset ds;
  ds.name = name.empty() ? path.stem().string() : name;
  ds.provenance = provenance;
  for (auto& c : split_line(line)) ds.columns.push_back(trim(c));
  const auto ncol = ds.columns.size();
  if (ncol < 2) throw Error(path.string() + ": need feature columns and a target column");
  ds.d = static_cast<int>(ncol) - 1;
  if (ds.d < kMinDim || ds.d > kMaxDim)
    throw Error(path.string() + ": " + std::to_string(ds.d) + " feature columns, expected 2..5");

  std::vector<double> values;
  std::size_t row = 1;  // header is row 1
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_line(line);
    const std::string where = path.string() + ": row " + std::to_string(row);
    if (cells.size() != ncol)
      throw Error(where + ": " + std::to_string(cells.size()) + " cells, expected " + std::to_string(ncol));
    for (std::size_t c = 0; c < ncol; ++c) {
      const std::string cell = trim(cells[c]);
      const std::string at = where + ", column " + std::to_string(c + 1) + " (" + ds.columns[c] + ")";
      if (cell.empty()) throw Error(at + ": missing value");
      double v = 0.0;
      const char* first = cell.data();
      if (*first == '+') ++first;
      const auto [end, ec] = std::from_chars(first, cell.data() + cell.size(), v);
      if (ec != std::errc() || end != cell.data() + cell.size()) throw Error(at + ": non-numeric value '" + cell + "'");
      if (!std::isfinite(v)) throw Error(at + ": non-finite value '" + cell + "'");
      values.push_back(v);
    }
  }
  const auto n = static_cast<Eigen::Index>(values.size() / ncol);
  const Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
      values.data(), n, static_cast<Eigen::Index>(ncol));
  ds.X = m.leftCols(ds.d);
  ds.y = m.col(ds.d);
  validate(ds, min_rows);
  return ds;
}

void write_csv(const Dataset& ds, const std::filesystem::path& path) {
  if (ds.X.cols() != ds.d || ds.X.rows() != ds.y.size()) throw Error("write_csv: inconsistent dataset shapes");
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  std::vector<std::string> cols = ds.columns;
  if (cols.size() != static_cast<std::size_t>(ds.d) + 1) {
    cols.clear();
    for (int j = 1; j <= ds.d; ++j) cols.push_back("x" + std::to_string(j));
    cols.push_back("y");
  }
  for (std::size_t c = 0; c < cols.size(); ++c) out << (c ? "," : "") << cols[c];
  out << '\n';
  char buf[32];
  for (Eigen::Index i = 0; i < ds.rows(); ++i) {
    for (Eigen::Index j = 0; j <= ds.d; ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", j < ds.d ? ds.X(i, j) : ds.y(i));
      out << (j ? "," : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

Split split_standardize(const Dataset& ds, double ratio, std::uint64_t seed, StandardizeFit fit) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw Error("split ratio must be in (0, 1)");
  const Eigen::Index n = ds.rows();
  if (n < 2) throw Error("split needs at least two rows");
  std::vector<Eigen::Index> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), Eigen::Index{0});
  Rng rng(derive_seed(seed, 0x5b17u));
  for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[uniform_index(rng, i)]);
  const auto n_train = std::clamp<Eigen::Index>(std::llround(ratio * static_cast<double>(n)), 1, n - 1);

  Split s;
  s.train_rows.assign(perm.begin(), perm.begin() + n_train);
  s.test_rows.assign(perm.begin() + n_train, perm.end());
  const Eigen::MatrixXd Xtr = ds.X(s.train_rows, Eigen::all);
  const Eigen::MatrixXd Xte = ds.X(s.test_rows, Eigen::all);
  const Eigen::VectorXd ytr = ds.y(s.train_rows), yte = ds.y(s.test_rows);
  const bool on_train = fit == StandardizeFit::train;

  s.X_train.resize(Xtr.rows(), ds.d);
  s.X_test.resize(Xte.rows(), ds.d);
  for (int j = 0; j < ds.d; ++j) {
    const ColumnScaler sc = standardize_fit(on_train ? Eigen::VectorXd(Xtr.col(j)) : Eigen::VectorXd(ds.X.col(j)));
    s.feature_scalers.push_back(sc);
    s.X_train.col(j) = standardize_apply(Xtr.col(j), sc);
    s.X_test.col(j) = standardize_apply(Xte.col(j), sc);
  }
  s.target_scaler = standardize_fit(on_train ? ytr : ds.y);
  s.y_train = standardize_apply(ytr, s.target_scaler);
  s.y_test = standardize_apply(yte, s.target_scaler);
  return s;
}

RegressionProblem to_problem(const Dataset& ds, const Split& split) {
  RegressionProblem p;
  p.name = ds.name;
  p.d = ds.d;
  p.X_train = split.X_train;
  p.X_test = split.X_test;
  p.y_train = split.y_train;
  p.y_test = split.y_test;
  return p;
}

namespace {

using std::numbers::pi;

std::vector<FeynmanFormula> build_registry() {
  std::vector<FeynmanFormula> r;
  auto add = [&](std::string name, std::string formula, std::vector<std::string> vars,
                 std::vector<std::pair<double, double>> ranges, std::function<double(std::span<const double>)> f) {
    r.push_back(FeynmanFormula{std::move(name), std::move(formula), std::move(vars), std::move(ranges), std::move(f)});
  };
  add("Feynman_I_18_4", "(m1*r1 + m2*r2) / (m1 + m2)", {"m1", "m2", "r1", "r2"}, {{1, 5}, {1, 5}, {1, 5}, {1, 5}},
      [](auto v) { return (v[0] * v[2] + v[1] * v[3]) / (v[0] + v[1]); });
  add("Feynman_I_24_6", "m*(omega^2 + omega_0^2)*x^2 / 4", {"m", "omega", "omega_0", "x"},
      {{1, 3}, {1, 3}, {1, 3}, {1, 3}},
      [](auto v) { return 0.25 * v[0] * (v[1] * v[1] + v[2] * v[2]) * v[3] * v[3]; });
  add("Feynman_I_25_13", "q / C", {"q", "C"}, {{1, 5}, {1, 5}}, [](auto v) { return v[0] / v[1]; });
  add("Feynman_I_29_4", "omega / c", {"omega", "c"}, {{1, 10}, {1, 10}}, [](auto v) { return v[0] / v[1]; });
  add("Feynman_I_43_43", "kb*v / ((gamma - 1)*A)", {"gamma", "kb", "v", "A"}, {{2, 5}, {1, 5}, {1, 5}, {1, 5}},
      [](auto v) { return v[1] * v[2] / ((v[0] - 1.0) * v[3]); });
  add("Feynman_II_34_2", "q*v*r / 2", {"q", "v", "r"}, {{1, 5}, {1, 5}, {1, 5}},
      [](auto v) { return 0.5 * v[0] * v[1] * v[2]; });
  add("Feynman_II_38_3", "Y*A*x / d", {"Y", "A", "d", "x"}, {{1, 5}, {1, 5}, {1, 5}, {1, 5}},
      [](auto v) { return v[0] * v[1] * v[3] / v[2]; });
  add("Feynman_II_4_23", "q / (4*pi*epsilon*r)", {"q", "epsilon", "r"}, {{1, 5}, {1, 5}, {1, 5}},
      [](auto v) { return v[0] / (4.0 * pi * v[1] * v[2]); });
  add("Feynman_III_14_14", "I_0*(exp(q*Volt/(kb*T)) - 1)", {"I_0", "q", "Volt", "kb", "T"},
      {{1, 2}, {1, 2}, {1, 2}, {1, 2}, {1, 2}},
      [](auto v) { return v[0] * (std::exp(v[1] * v[2] / (v[3] * v[4])) - 1.0); });
  return r;
}

}  // namespace

std::span<const FeynmanFormula> feynman_registry() {
  static const std::vector<FeynmanFormula> registry = build_registry();
  return registry;
}

const FeynmanFormula& feynman(const std::string& name) {
  for (const auto& s : feynman_registry())
    if (s.name == name) return s;
  std::string known;
  for (const auto& s : feynman_registry()) known += (known.empty() ? "" : ", ") + s.name;
  throw Error("unknown Feynman dataset '" + name + "' (known: " + known + ")");
}

Dataset make_feynman(const std::string& name, Eigen::Index n, std::uint64_t seed) {
  const FeynmanFormula& formula = feynman(name);
  Dataset ds;
  ds.name = formula.name;
  ds.d = formula.d();
  ds.columns = formula.variables;
  ds.columns.push_back("y");
  ds.provenance = Provenance::synthetic;
  ds.X.resize(n, ds.d);
  ds.y.resize(n);
  Rng rng(derive_seed(seed, 0xfe1u, fnv1a64(name.data(), name.size())));
  std::vector<double> v(static_cast<std::size_t>(ds.d));
  for (Eigen::Index i = 0; i < n; ++i) {
    for (int j = 0; j < ds.d; ++j) {
      const auto [lo, hi] = formula.ranges[static_cast<std::size_t>(j)];
      v[static_cast<std::size_t>(j)] = std::uniform_real_distribution<double>(lo, hi)(rng);
      ds.X(i, j) = v[static_cast<std::size_t>(j)];
    }
    ds.y(i) = formula.f(v);
  }
  validate(ds, std::min(n, kMinDatasetRows));
  return ds;
}

}  // namespace tsgp
