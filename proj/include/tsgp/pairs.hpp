#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "tsgp/datagen.hpp"

namespace tsgp {

/// N x m semantic vectors, one row per archive entry.
using SemanticMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Neighbor {
  std::size_t id = 0;
  double sd = 0.0;
  bool operator==(const Neighbor&) const = default;
};

/// Exact k nearest neighbours of row `query` (itself excluded), ascending by SD then id.
std::vector<Neighbor> brute_knn(const SemanticMatrix& S, std::size_t query, std::size_t k);

/// Inverted-file index: k-means centroids and one posting list per centroid.
struct IvfIndex {
  Eigen::MatrixXd centroids;  // c x m
  std::vector<std::vector<std::size_t>> lists;
  std::vector<std::size_t> assignment;
  std::size_t nprobe = 8;

  std::size_t clusters() const { return lists.size(); }
};

inline constexpr int kKmeansIterations = 25;
inline constexpr std::size_t kDefaultNprobe = 8;

/// ceil(sqrt(n)) clusters, the default index size for an archive of n entries.
std::size_t default_clusters(std::size_t n);

/// Seeded k-means (25 Lloyd iterations); empty clusters are re-seeded with the point farthest
/// from its centroid.
IvfIndex build_ivf(const SemanticMatrix& S, std::size_t c, std::uint64_t seed,
                   std::size_t nprobe = kDefaultNprobe);
/// Scans the lists of the nprobe nearest centroids (more if they hold fewer than k others).
std::vector<Neighbor> ivf_knn(const IvfIndex& index, const SemanticMatrix& S, std::size_t query, std::size_t k);
/// Cells ivf_knn scans for `query`, nearest centroid first.
std::vector<std::size_t> ivf_probe_cells(const IvfIndex& index, const SemanticMatrix& S, std::size_t query,
                                          std::size_t k);
/// ivf_knn for every row at once: per-cell blocked products, then an exact re-rank. Same result as
/// calling ivf_knn row by row.
std::vector<std::vector<Neighbor>> ivf_knn_all(const IvfIndex& index, const SemanticMatrix& S, std::size_t k);

struct TrainingPair {
  TokenSeq src;
  TokenSeq dst;
  double sd = 0.0;
  int d = 0;
  bool operator==(const TrainingPair&) const = default;
};

struct PairStats {
  std::size_t candidates = 0;
  std::size_t dropped_zero = 0;  // sd == 0 (semantic duplicates)
  std::size_t dropped_far = 0;   // sd >= 100
  std::size_t dropped_long = 0;  // either side over 100 tokens
  std::size_t emitted = 0;
};

struct PairConfig {
  std::size_t k = 3;
  double max_sd = 100.0;
  std::size_t max_tokens = 100;
  std::uint64_t seed = 0;
  std::size_t nprobe = kDefaultNprobe;
  std::size_t clusters = 0;  // 0 = ceil(sqrt(N))
};

SemanticMatrix semantic_matrix(const Archive& archive);

/// For each entry and each of its k neighbours, emits (entry -> neighbour) when
/// 0 < SD < 100 and both sides have at most 100 tokens.
std::vector<TrainingPair> assemble_pairs(const Archive& archive, const PairConfig& cfg, PairStats* stats = nullptr);

void shuffle_pairs(std::vector<TrainingPair>& pairs, std::uint64_t seed);

/// JSON lines: {"d": int, "sd": real, "src": [tokens], "dst": [tokens]}.
void write_pairs(const std::filesystem::path& path, const std::vector<TrainingPair>& pairs);
std::vector<TrainingPair> read_pairs(const std::filesystem::path& path);

}  // namespace tsgp
