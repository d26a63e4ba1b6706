#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tsgp/engine.hpp"
#include "tsgp/semantics.hpp"

namespace tsgp {

enum class Provenance { real_world, synthetic };
std::string to_string(Provenance p);
Provenance parse_provenance(const std::string& s);

struct Dataset {
  std::string name;
  int d = 0;
  std::vector<std::string> columns;  // d feature names, then the target
  Eigen::MatrixXd X;                 // n x d
  Eigen::VectorXd y;
  Provenance provenance = Provenance::real_world;

  Eigen::Index rows() const { return X.rows(); }
};

inline constexpr Eigen::Index kMinDatasetRows = 100;

/// Throws unless 2 <= d <= 5, shapes agree, every value is finite and n >= min_rows.
void validate(const Dataset& ds, Eigen::Index min_rows = kMinDatasetRows);

/// Header row, feature columns then the target as the last column. Errors name the row and column.
Dataset load_csv(const std::filesystem::path& path, const std::string& name = "",
                 Provenance provenance = Provenance::real_world, Eigen::Index min_rows = kMinDatasetRows);
/// Values are written with 17 significant digits so load_csv reproduces them bit-exactly.
void write_csv(const Dataset& ds, const std::filesystem::path& path);

enum class StandardizeFit { train, full };

struct Split {
  std::vector<Eigen::Index> train_rows, test_rows;
  std::vector<ColumnScaler> feature_scalers;
  ColumnScaler target_scaler;
  Eigen::MatrixXd X_train, X_test;
  Eigen::VectorXd y_train, y_test;
};

/// Seeded shuffle, first round(ratio * n) rows for training. Scalers are fit on the training rows
/// (or on all rows with StandardizeFit::full) and applied to both parts.
Split split_standardize(const Dataset& ds, double ratio, std::uint64_t seed,
                        StandardizeFit fit = StandardizeFit::train);
RegressionProblem to_problem(const Dataset& ds, const Split& split);

struct FeynmanFormula {
  std::string name;
  std::string formula;
  std::vector<std::string> variables;
  std::vector<std::pair<double, double>> ranges;  // uniform sampling range per variable
  std::function<double(std::span<const double>)> f;
  int d() const { return static_cast<int>(variables.size()); }
};

std::span<const FeynmanFormula> feynman_registry();
const FeynmanFormula& feynman(const std::string& name);
/// Noise-free samples of a registered formula; raw (unstandardized) values.
Dataset make_feynman(const std::string& name, Eigen::Index n = 10000, std::uint64_t seed = 0);

}  // namespace tsgp
