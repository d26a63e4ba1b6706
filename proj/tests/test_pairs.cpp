#include <fstream>
#include <set>

#include "doctest.h"
#include "test_util.hpp"
#include "tsgp/pairs.hpp"

using namespace tsgp;

namespace {

SemanticMatrix gaussian_rows(std::size_t n, Eigen::Index m, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> normal;
  SemanticMatrix S(static_cast<Eigen::Index>(n), m);
  for (Eigen::Index i = 0; i < S.rows(); ++i)
    for (Eigen::Index j = 0; j < m; ++j) S(i, j) = normal(rng);
  return S;
}

double recall_at(const IvfIndex& idx, const SemanticMatrix& S, std::size_t k, std::size_t stride) {
  std::size_t hit = 0, total = 0;
  for (std::size_t q = 0; q < static_cast<std::size_t>(S.rows()); q += stride) {
    std::set<std::size_t> truth;
    for (const auto& nb : brute_knn(S, q, k)) truth.insert(nb.id);
    for (const auto& nb : ivf_knn(idx, S, q, k)) hit += truth.count(nb.id);
    total += k;
  }
  return static_cast<double>(hit) / static_cast<double>(total);
}

Archive small_archive(int d, std::size_t n, std::uint64_t seed) {
  const ProbeSet probe = ProbeSet::make(kDefaultProbeSeed, 200, d);
  Archive a;
  a.d = d;
  a.probe_seed = probe.seed;
  a.probe_m = probe.m();
  Rng rng(seed);
  while (a.size() < n) a.try_insert(test_util::random_expr(rng, d, 5), probe);
  return a;
}

}  // namespace

TEST_CASE("brute k-NN hand enumeration") {
  SemanticMatrix S(4, 1);
  S << 0, 1, 5, 6;
  const auto nb = brute_knn(S, 1, 2);
  REQUIRE(nb.size() == 2);
  CHECK(nb[0] == Neighbor{0, 1.0});
  CHECK(nb[1] == Neighbor{2, 4.0});

  const auto all = brute_knn(S, 1, 3);
  CHECK(all.size() == 3);
  CHECK(all[2] == Neighbor{3, 5.0});
  for (const auto& n : all) CHECK(n.id != 1);

  CHECK_THROWS_AS(brute_knn(S, 1, 4), Error);
  CHECK_THROWS_AS(brute_knn(S, 4, 1), Error);
}

TEST_CASE("ties are broken by id") {
  SemanticMatrix S(5, 1);
  S << 0, 1, -1, 1, -1;
  const auto nb = brute_knn(S, 0, 4);
  CHECK(nb[0].id == 1);
  CHECK(nb[1].id == 2);
  CHECK(nb[2].id == 3);
  CHECK(nb[3].id == 4);
}

TEST_CASE("IVF structure and degenerate cases") {
  const SemanticMatrix S = gaussian_rows(600, 16, 3);
  const IvfIndex idx = build_ivf(S, 25, 11, 4);
  CHECK(idx.clusters() == 25);
  CHECK(idx.nprobe == 4);
  std::vector<int> seen(600, 0);
  for (const auto& list : idx.lists) {
    CHECK_FALSE(list.empty());
    for (auto i : list) ++seen[i];
  }
  for (int s : seen) CHECK(s == 1);

  const IvfIndex again = build_ivf(S, 25, 11, 4);
  CHECK(again.centroids == idx.centroids);
  CHECK(again.lists == idx.lists);

  const IvfIndex one = build_ivf(S, 1, 5);
  CHECK(one.nprobe == 1);
  IvfIndex full = idx;
  full.nprobe = idx.clusters();
  for (std::size_t q = 0; q < 600; ++q) {
    const auto truth = brute_knn(S, q, 5);
    CHECK(ivf_knn(one, S, q, 5) == truth);
    CHECK(ivf_knn(full, S, q, 5) == truth);
  }

  CHECK_THROWS_AS(build_ivf(S, 0, 1), Error);
  CHECK_THROWS_AS(build_ivf(S, 601, 1), Error);
  CHECK(default_clusters(10000) == 100);
  CHECK(default_clusters(20001) == 142);
}

TEST_CASE("IVF with duplicate points never fails") {
  SemanticMatrix S = SemanticMatrix::Zero(50, 4);
  S.row(49).setOnes();
  const IvfIndex idx = build_ivf(S, 10, 2);
  std::size_t total = 0;
  for (const auto& l : idx.lists) total += l.size();
  CHECK(total == 50);
  CHECK(ivf_knn(idx, S, 49, 3).size() == 3);
}

TEST_CASE("IVF recall on clustered semantics") {
  // Program semantics are strongly clustered; i.i.d. vectors are the hard case and are
  // reported by the acceptance suite.
  const Archive a = small_archive(2, 3000, 21);
  const SemanticMatrix S = semantic_matrix(a);
  const IvfIndex idx = build_ivf(S, default_clusters(a.size()), 4);
  const auto nb_ok = [&](std::size_t q) {
    const auto t = brute_knn(S, q, 3);
    const auto r = ivf_knn(idx, S, q, 3);
    std::size_t hit = 0;
    for (std::size_t i = 0; i < 3; ++i) hit += (std::abs(t[i].sd - r[i].sd) <= 1e-12);
    return hit;
  };
  std::size_t hit = 0;
  for (std::size_t q = 0; q < a.size(); q += 7) hit += nb_ok(q);
  CHECK(static_cast<double>(hit) / (3.0 * static_cast<double>((a.size() + 6) / 7)) >= 0.8);

  const SemanticMatrix G = gaussian_rows(2000, 32, 9);
  const IvfIndex gi = build_ivf(G, 45, 1, 45);
  CHECK(recall_at(gi, G, 3, 5) == 1.0);
}

TEST_CASE("pair assembly filters and audit") {
  const Archive a = small_archive(3, 400, 5);
  PairStats stats;
  PairConfig cfg;
  cfg.seed = 8;
  const auto pairs = assemble_pairs(a, cfg, &stats);
  CHECK(stats.candidates == 3 * a.size());
  CHECK(stats.emitted == pairs.size());
  CHECK(stats.emitted + stats.dropped_zero + stats.dropped_far + stats.dropped_long == stats.candidates);
  CHECK(pairs.size() <= 3 * a.size());
  CHECK(pairs.size() > 0);

  const ProbeSet probe = ProbeSet::make(a.probe_seed, a.probe_m, a.d);
  for (const auto& p : pairs) {
    CHECK(p.d == 3);
    CHECK(p.sd > 0.0);
    CHECK(p.sd < 100.0);
    CHECK(p.src.size() <= 100);
    CHECK(p.dst.size() <= 100);
    const double re = sd(semantic_vector(parse_prefix(p.src), probe), semantic_vector(parse_prefix(p.dst), probe));
    CHECK(std::abs(re - p.sd) <= 1e-9 * std::max(1.0, re));
    CHECK(parse_prefix(p.src).max_variable() <= 3);
  }
}

TEST_CASE("semantic duplicates yield no pairs") {
  const ProbeSet probe = ProbeSet::make(1, 50, 2);
  Archive a;
  a.d = 2;
  a.probe_seed = probe.seed;
  a.probe_m = probe.m();
  for (const char* s : {"x1", "add x1 0.0", "mul x1 1", "div x1 1", "sub x1 0.0"}) {
    a.entries.push_back({parse_prefix(std::string(s)), semantic_vector(parse_prefix(std::string(s)), probe)});
  }
  PairStats stats;
  const auto pairs = assemble_pairs(a, PairConfig{}, &stats);
  CHECK(pairs.empty());
  CHECK(stats.dropped_zero == 15);
}

TEST_CASE("pair file round trip and shuffle") {
  const Archive a = small_archive(2, 200, 13);
  auto pairs = assemble_pairs(a, PairConfig{});
  REQUIRE(!pairs.empty());
  auto shuffled = pairs;
  shuffle_pairs(shuffled, 4);
  auto again = pairs;
  shuffle_pairs(again, 4);
  CHECK(shuffled == again);
  CHECK(shuffled != pairs);

  const auto dir = test_util::temp_dir("pairs");
  write_pairs(dir / "p.jsonl", shuffled);
  CHECK(read_pairs(dir / "p.jsonl") == shuffled);

  {
    std::ofstream bad(dir / "bad.jsonl");
    bad << R"({"d": 2, "sd": 0.5, "src": ["add", "x1"], "dst": ["x1"]})" << '\n';
  }
  CHECK_THROWS_AS(read_pairs(dir / "bad.jsonl"), Error);
  std::filesystem::remove_all(dir);
}

TEST_CASE("batched IVF search equals per-query search") {
  // Exact duplicates, a near-duplicate and rows near the evaluation cap stress the re-rank.
  SemanticMatrix S = gaussian_rows(900, 16, 31);
  for (Eigen::Index i = 0; i < 40; ++i) S.row(100 + i) = S.row(7);
  S.row(200) = S.row(7);
  S(200, 3) += 1e-9;
  for (Eigen::Index i = 0; i < 30; ++i) S.row(300 + i) *= 1e11;
  for (std::size_t nprobe : {1, 3, 30}) {
    const IvfIndex idx = build_ivf(S, 30, 8, nprobe);
    for (std::size_t k : {1, 3, 7}) {
      const auto all = ivf_knn_all(idx, S, k);
      REQUIRE(all.size() == 900);
      std::size_t mismatched = 0;
      for (std::size_t q = 0; q < 900; ++q) mismatched += !(all[q] == ivf_knn(idx, S, q, k));
      CHECK(mismatched == 0);
    }
  }
  const Archive a = small_archive(3, 2000, 5);
  const SemanticMatrix P = semantic_matrix(a);
  const IvfIndex idx = build_ivf(P, default_clusters(a.size()), 2);
  const auto all = ivf_knn_all(idx, P, 3);
  std::size_t mismatched = 0;
  for (std::size_t q = 0; q < a.size(); ++q) mismatched += !(all[q] == ivf_knn(idx, P, q, 3));
  CHECK(mismatched == 0);
}
