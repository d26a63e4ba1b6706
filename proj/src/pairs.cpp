#include "tsgp/pairs.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "json.hpp"

namespace tsgp {

using nlohmann::json;

namespace {

bool closer(const Neighbor& a, const Neighbor& b) { return a.sd != b.sd ? a.sd < b.sd : a.id < b.id; }

std::vector<Neighbor> top_k(std::vector<Neighbor> cand, std::size_t k) {
  k = std::min(k, cand.size());
  std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end(), closer);
  return {cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k)};  // drop the candidate capacity
}

double row_sd(const SemanticMatrix& S, std::size_t a, std::size_t b) {
  return (S.row(static_cast<Eigen::Index>(a)) - S.row(static_cast<Eigen::Index>(b))).norm();
}

}  // namespace

std::vector<Neighbor> brute_knn(const SemanticMatrix& S, std::size_t query, std::size_t k) {
  const auto n = static_cast<std::size_t>(S.rows());
  if (query >= n) throw Error("k-NN query id out of range");
  if (k >= n) throw Error("k-NN needs k < archive size (k=" + std::to_string(k) + ", size=" + std::to_string(n) + ")");
  std::vector<Neighbor> cand;
  cand.reserve(n - 1);
  for (std::size_t i = 0; i < n; ++i)
    if (i != query) cand.push_back({i, row_sd(S, query, i)});
  return top_k(std::move(cand), k);
}

std::size_t default_clusters(std::size_t n) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n)))));
}

namespace {

// Nearest centroid per row by squared distance; ties go to the lower centroid id.
void assign(const SemanticMatrix& S, const Eigen::MatrixXd& C, std::vector<std::size_t>& out,
            Eigen::VectorXd& dist2) {
  const Eigen::VectorXd cn = C.rowwise().squaredNorm();
  const Eigen::VectorXd sn = S.rowwise().squaredNorm();
  const Eigen::MatrixXd dots = S * C.transpose();  // N x c
  out.resize(static_cast<std::size_t>(S.rows()));
  dist2.resize(S.rows());
  for (Eigen::Index i = 0; i < S.rows(); ++i) {
    Eigen::Index best = 0;
    double bd = sn(i) - 2.0 * dots(i, 0) + cn(0);
    for (Eigen::Index j = 1; j < C.rows(); ++j) {
      const double di = sn(i) - 2.0 * dots(i, j) + cn(j);
      if (di < bd) {
        bd = di;
        best = j;
      }
    }
    out[static_cast<std::size_t>(i)] = static_cast<std::size_t>(best);
    dist2(i) = std::max(0.0, bd);
  }
}

}  // namespace

IvfIndex build_ivf(const SemanticMatrix& S, std::size_t c, std::uint64_t seed, std::size_t nprobe) {
  const auto n = static_cast<std::size_t>(S.rows());
  if (c < 1 || c > n) throw Error("IVF cluster count must be in 1..archive size");
  IvfIndex idx;
  idx.nprobe = std::clamp<std::size_t>(nprobe, 1, c);

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x1f0u));
  for (std::size_t i = 0; i < c; ++i) std::swap(order[i], order[i + uniform_index(rng, n - i)]);
  idx.centroids.resize(static_cast<Eigen::Index>(c), S.cols());
  for (std::size_t j = 0; j < c; ++j) idx.centroids.row(static_cast<Eigen::Index>(j)) = S.row(static_cast<Eigen::Index>(order[j]));

  Eigen::VectorXd dist2;
  for (int iter = 0; iter < kKmeansIterations; ++iter) {
    assign(S, idx.centroids, idx.assignment, dist2);
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(c), S.cols());
    std::vector<std::size_t> counts(c, 0);
    for (std::size_t i = 0; i < n; ++i) {
      sums.row(static_cast<Eigen::Index>(idx.assignment[i])) += S.row(static_cast<Eigen::Index>(i));
      ++counts[idx.assignment[i]];
    }
    for (std::size_t j = 0; j < c; ++j) {
      if (counts[j] > 0) {
        idx.centroids.row(static_cast<Eigen::Index>(j)) = sums.row(static_cast<Eigen::Index>(j)) / static_cast<double>(counts[j]);
        continue;
      }
      // Empty cluster: re-seed with the point farthest from its centroid in a multi-member cluster.
      std::size_t far = n;
      for (std::size_t i = 0; i < n; ++i)
        if (counts[idx.assignment[i]] > 1 && (far == n || dist2(static_cast<Eigen::Index>(i)) > dist2(static_cast<Eigen::Index>(far))))
          far = i;
      if (far == n) continue;
      --counts[idx.assignment[far]];
      idx.assignment[far] = j;
      counts[j] = 1;
      dist2(static_cast<Eigen::Index>(far)) = 0.0;
      idx.centroids.row(static_cast<Eigen::Index>(j)) = S.row(static_cast<Eigen::Index>(far));
    }
  }
  assign(S, idx.centroids, idx.assignment, dist2);
  idx.lists.assign(c, {});
  for (std::size_t i = 0; i < n; ++i) idx.lists[idx.assignment[i]].push_back(i);
  return idx;
}

std::vector<std::size_t> ivf_probe_cells(const IvfIndex& index, const SemanticMatrix& S, std::size_t query,
                                          std::size_t k) {
  const std::size_t c = index.clusters();
  const auto q = S.row(static_cast<Eigen::Index>(query));
  std::vector<Neighbor> cells(c);
  for (std::size_t j = 0; j < c; ++j) cells[j] = {j, (index.centroids.row(static_cast<Eigen::Index>(j)) - q).squaredNorm()};
  std::sort(cells.begin(), cells.end(), closer);
  std::vector<std::size_t> out;
  std::size_t have = 0;
  for (std::size_t p = 0; p < c && (p < index.nprobe || have < k); ++p) {
    const auto& list = index.lists[cells[p].id];
    have += list.size() - static_cast<std::size_t>(std::count(list.begin(), list.end(), query));
    out.push_back(cells[p].id);
  }
  return out;
}

std::vector<Neighbor> ivf_knn(const IvfIndex& index, const SemanticMatrix& S, std::size_t query, std::size_t k) {
  const auto n = static_cast<std::size_t>(S.rows());
  if (query >= n) throw Error("k-NN query id out of range");
  if (k >= n) throw Error("k-NN needs k < archive size");
  std::vector<Neighbor> cand;
  for (std::size_t j : ivf_probe_cells(index, S, query, k))
    for (std::size_t i : index.lists[j])
      if (i != query) cand.push_back({i, row_sd(S, query, i)});
  return top_k(std::move(cand), k);
}

std::vector<std::vector<Neighbor>> ivf_knn_all(const IvfIndex& index, const SemanticMatrix& S, std::size_t k) {
  const auto n = static_cast<std::size_t>(S.rows());
  if (k >= n) throw Error("k-NN needs k < archive size");
  const std::size_t c = index.clusters();
  constexpr Eigen::Index kQueryBlock = 256, kListBlock = 2048;
  // Tolerance on the expanded squared distance |q|^2 + |x|^2 - 2 q.x; far above its rounding error.
  constexpr double kRel = 1e-9;

  std::vector<std::vector<std::size_t>> probing(c);  // cell -> queries that scan it
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j : ivf_probe_cells(index, S, i, k)) probing[j].push_back(i);
  const Eigen::VectorXd norms = S.rowwise().squaredNorm();

  // Shortlist per query: bounds on the squared distance, exact once re-ranked (sd >= 0). Anything
  // whose lower bound exceeds the k-th smallest upper bound cannot be among the k nearest.
  struct Cand {
    double lo, hi;
    std::size_t id;
    double sd = -1.0;
  };
  std::vector<std::vector<Cand>> shortlist(n);
  const std::size_t limit = 4 * k + 64;
  auto prune = [&](std::size_t qi, bool final) {
    auto& v = shortlist[qi];
    if (v.empty()) return;
    if (v.size() > k) {
      std::vector<double> hi(v.size());
      for (std::size_t i = 0; i < v.size(); ++i) hi[i] = v[i].hi;
      std::nth_element(hi.begin(), hi.begin() + static_cast<std::ptrdiff_t>(k - 1), hi.end());
      const double cut = hi[k - 1];
      std::erase_if(v, [cut](const Cand& x) { return x.lo > cut; });
    }
    if (!final && v.size() <= limit / 2) return;
    // Ties (semantic duplicates) survive the bounds; settle them exactly.
    std::vector<Neighbor> cand;
    cand.reserve(v.size());
    for (Cand& x : v) cand.push_back({x.id, x.sd >= 0.0 ? x.sd : row_sd(S, qi, x.id)});
    cand = top_k(std::move(cand), k);
    v.clear();
    for (const Neighbor& nb : cand) v.push_back({nb.sd * nb.sd, nb.sd * nb.sd, nb.id, nb.sd});
  };

  SemanticMatrix Q, L;
  Eigen::MatrixXd G;
  for (std::size_t j = 0; j < c; ++j) {
    const auto& list = index.lists[j];
    const auto& qs = probing[j];
    for (std::size_t l0 = 0; l0 < list.size(); l0 += kListBlock) {
      const auto lb = static_cast<Eigen::Index>(std::min<std::size_t>(kListBlock, list.size() - l0));
      L.resize(lb, S.cols());
      for (Eigen::Index t = 0; t < lb; ++t) L.row(t) = S.row(static_cast<Eigen::Index>(list[l0 + static_cast<std::size_t>(t)]));
      for (std::size_t q0 = 0; q0 < qs.size(); q0 += kQueryBlock) {
        const auto qb = static_cast<Eigen::Index>(std::min<std::size_t>(kQueryBlock, qs.size() - q0));
        Q.resize(qb, S.cols());
        for (Eigen::Index t = 0; t < qb; ++t) Q.row(t) = S.row(static_cast<Eigen::Index>(qs[q0 + static_cast<std::size_t>(t)]));
        G.noalias() = Q * L.transpose();
        for (Eigen::Index a = 0; a < qb; ++a) {
          const std::size_t qi = qs[q0 + static_cast<std::size_t>(a)];
          auto& v = shortlist[qi];
          for (Eigen::Index b = 0; b < lb; ++b) {
            const std::size_t id = list[l0 + static_cast<std::size_t>(b)];
            if (id == qi) continue;
            const double s2 = norms(static_cast<Eigen::Index>(qi)) + norms(static_cast<Eigen::Index>(id));
            const double d2 = s2 - 2.0 * G(a, b);
            v.push_back({d2 - kRel * s2, d2 + kRel * s2, id});
            if (v.size() > limit) prune(qi, false);
          }
        }
      }
    }
  }

  std::vector<std::vector<Neighbor>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    prune(i, true);
    for (const Cand& x : shortlist[i]) out[i].push_back({x.id, x.sd});
    std::vector<Cand>().swap(shortlist[i]);
  }
  return out;
}

SemanticMatrix semantic_matrix(const Archive& archive) {
  SemanticMatrix S(static_cast<Eigen::Index>(archive.size()), archive.probe_m);
  for (std::size_t i = 0; i < archive.size(); ++i)
    S.row(static_cast<Eigen::Index>(i)) = archive.entries[i].semantics.values.transpose();
  return S;
}

std::vector<TrainingPair> assemble_pairs(const Archive& archive, const PairConfig& cfg, PairStats* stats) {
  if (cfg.k < 1) throw Error("pair mining needs k >= 1");
  PairStats local;
  std::vector<TrainingPair> out;
  if (archive.size() <= cfg.k) {
    if (stats) *stats = local;
    return out;
  }
  const SemanticMatrix S = semantic_matrix(archive);
  const std::size_t c = cfg.clusters ? cfg.clusters : default_clusters(archive.size());
  const IvfIndex index = build_ivf(S, std::min(c, archive.size()), cfg.seed, cfg.nprobe);

  const std::size_t n = archive.size();
  const std::vector<std::vector<Neighbor>> neighbors = ivf_knn_all(index, S, cfg.k);

  out.reserve(n * cfg.k);
  for (std::size_t i = 0; i < n; ++i) {
    const Expr& src = archive.entries[i].expr;
    for (const Neighbor& nb : neighbors[i]) {
      ++local.candidates;
      const Expr& dst = archive.entries[nb.id].expr;
      if (!(nb.sd > 0.0)) {
        ++local.dropped_zero;
      } else if (!(nb.sd < cfg.max_sd)) {
        ++local.dropped_far;
      } else if (src.size() > cfg.max_tokens || dst.size() > cfg.max_tokens) {
        ++local.dropped_long;
      } else {
        out.push_back({src.tokens(), dst.tokens(), nb.sd, archive.d});
      }
    }
  }
  local.emitted = out.size();
  if (stats) *stats = local;
  return out;
}

void shuffle_pairs(std::vector<TrainingPair>& pairs, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5u));
  for (std::size_t i = pairs.size(); i > 1; --i) std::swap(pairs[i - 1], pairs[uniform_index(rng, i)]);
}

void write_pairs(const std::filesystem::path& path, const std::vector<TrainingPair>& pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write pair file " + path.string());
  for (const auto& p : pairs) {
    json j = {{"d", p.d}, {"sd", p.sd}, {"src", to_strings(p.src)}, {"dst", to_strings(p.dst)}};
    out << j.dump() << '\n';
  }
}

std::vector<TrainingPair> read_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read pair file " + path.string());
  std::vector<TrainingPair> pairs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      TrainingPair p;
      p.d = j.at("d").get<int>();
      p.sd = j.at("sd").get<double>();
      p.src = parse_prefix(j.at("src").get<std::vector<std::string>>()).tokens();
      p.dst = parse_prefix(j.at("dst").get<std::vector<std::string>>()).tokens();
      if (p.d < kMinDim || p.d > kMaxDim) throw Error("d outside 2..5");
      if (!(p.sd > 0.0)) throw Error("sd must be positive");
      pairs.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw Error(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return pairs;
}

}  // namespace tsgp
