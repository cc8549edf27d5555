#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "melhubert/quantizer.hpp"
#include "test_util.hpp"

using namespace melhubert;
using melhubert::test::TempDir;

namespace {

FeatureMatrix random_frames(Rng& rng, int n, int d, double spread = 1.0) {
  FeatureMatrix f;
  f.data.resize(n, d);
  for (Eigen::Index i = 0; i < f.data.size(); ++i) f.data.data()[i] = static_cast<float>(spread * normal01(rng));
  return f;
}

int brute_nearest(const MatrixF& c, const Eigen::RowVectorXf& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (int k = 0; k < c.rows(); ++k) {
    double d = 0;
    for (int j = 0; j < c.cols(); ++j) {
      const double diff = static_cast<double>(c(k, j)) - x[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = k;
    }
  }
  return best;
}

}  // namespace

TEST_CASE("k distinct points are fit exactly") {
  Rng rng(1);
  FeatureMatrix f = random_frames(rng, 6, 3, 5.0);
  std::vector<FeatureMatrix> feats{f};
  Codebook cb = kmeans_fit(feats, {.k = 6, .seed = 2});
  CHECK(distortion(cb, feats) == doctest::Approx(0.0).epsilon(1e-9));
  std::set<int> used;
  for (int t = 0; t < 6; ++t) {
    int l = assign(cb, f).labels[static_cast<std::size_t>(t)];
    used.insert(l);
    CHECK((cb.centroids.row(l) - f.data.row(t)).norm() < 1e-6f);
  }
  CHECK(used.size() == 6);
}

TEST_CASE("2D toy set matches the brute-force optimal 2-partition") {
  const std::vector<std::array<double, 2>> pts{{0, 0}, {0, 1}, {10, 0}, {10, 1}};
  // Oracle: enumerate every split into two non-empty groups.
  double best = std::numeric_limits<double>::infinity();
  for (int mask = 1; mask < 15; ++mask) {
    double cost = 0;
    for (int g = 0; g < 2; ++g) {
      double mx = 0, my = 0;
      int n = 0;
      for (int i = 0; i < 4; ++i) {
        if (((mask >> i) & 1) == g) {
          mx += pts[static_cast<std::size_t>(i)][0];
          my += pts[static_cast<std::size_t>(i)][1];
          ++n;
        }
      }
      mx /= n;
      my /= n;
      for (int i = 0; i < 4; ++i) {
        if (((mask >> i) & 1) == g) {
          cost += std::pow(pts[static_cast<std::size_t>(i)][0] - mx, 2) + std::pow(pts[static_cast<std::size_t>(i)][1] - my, 2);
        }
      }
    }
    best = std::min(best, cost);
  }
  CHECK(best == doctest::Approx(1.0));

  FeatureMatrix f;
  f.data.resize(4, 2);
  f.data << 0, 0, 0, 1, 10, 0, 10, 1;
  std::vector<FeatureMatrix> feats{f};
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Codebook cb = kmeans_fit(feats, {.k = 2, .seed = seed});
    CHECK(distortion(cb, feats) == doctest::Approx(best));
    MatrixF c = cb.centroids;
    if (c(0, 0) > c(1, 0)) c.row(0).swap(c.row(1));
    CHECK(c(0, 0) == doctest::Approx(0.0));
    CHECK(c(0, 1) == doctest::Approx(0.5));
    CHECK(c(1, 0) == doctest::Approx(10.0));
    CHECK(c(1, 1) == doctest::Approx(0.5));
  }
}

TEST_CASE("Lloyd distortion never increases") {
  for (std::uint64_t seed : {3u, 4u, 5u}) {
    Rng rng(seed);
    std::vector<FeatureMatrix> feats;
    for (int u = 0; u < 5; ++u) feats.push_back(random_frames(rng, 200, 4));
    KMeansTrace trace;
    kmeans_fit(feats, {.k = 12, .seed = seed, .max_iters = 50, .tol = 0.0}, {}, &trace);
    REQUIRE(trace.distortion.size() >= 2);
    for (std::size_t i = 1; i < trace.distortion.size(); ++i) CHECK(trace.distortion[i] <= trace.distortion[i - 1]);
  }
}

TEST_CASE("empty clusters are reseeded and k is preserved") {
  // Many duplicates: k-means++ must fall back to duplicates for later centres.
  FeatureMatrix f;
  f.data = MatrixF::Zero(20, 2);
  f.data(19, 0) = 1.0f;
  std::vector<FeatureMatrix> feats{f};
  Codebook cb = kmeans_fit(feats, {.k = 3, .seed = 0});
  CHECK(cb.k() == 3);
  CHECK(cb.centroids.allFinite());
}

TEST_CASE("kmeans error paths and determinism") {
  Rng rng(8);
  std::vector<FeatureMatrix> feats{random_frames(rng, 5, 2)};
  CHECK_THROWS_AS(kmeans_fit(feats, {.k = 6}), Error);
  feats[0].data(2, 1) = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(kmeans_fit(feats, {.k = 2}), NumericError);

  std::vector<FeatureMatrix> big{random_frames(rng, 300, 3)};
  Codebook a = kmeans_fit(big, {.k = 7, .seed = 11});
  Codebook b = kmeans_fit(big, {.k = 7, .seed = 11});
  CHECK(a.centroids == b.centroids);
}

TEST_CASE("frame cap subsamples deterministically") {
  Rng rng(12);
  std::vector<FeatureMatrix> feats{random_frames(rng, 400, 2), random_frames(rng, 400, 2)};
  Codebook a = kmeans_fit(feats, {.k = 4, .seed = 1, .max_frames = 100});
  Codebook b = kmeans_fit(feats, {.k = 4, .seed = 1, .max_frames = 100});
  CHECK(a.centroids == b.centroids);
}

TEST_CASE("assign: exact hits, tie-break, brute-force agreement") {
  Codebook cb;
  cb.centroids.resize(5, 2);
  cb.centroids << 0, 0, -1, 0, 5, 5, 2, 2, 1, 0;
  FeatureMatrix f;
  f.data.resize(2, 2);
  f.data << 2, 2, 0, 0;
  CHECK(assign(cb, f).labels == std::vector<int>{3, 0});
  // (0, 0) is equidistant to centroids 1 and 4 once centroid 0 moves away.
  cb.centroids.row(0) << 9, 9;
  CHECK(assign(cb, f).labels[1] == 1);

  FeatureMatrix wrong;
  wrong.data.resize(1, 3);
  CHECK_THROWS_AS(assign(cb, wrong), Error);

  Rng rng(99);
  Codebook rc;
  rc.centroids = random_frames(rng, 16, 8).data;
  FeatureMatrix frames = random_frames(rng, 1000, 8);
  LabelSeq l = assign(rc, frames);
  for (int t = 0; t < 1000; ++t) CHECK(l.labels[static_cast<std::size_t>(t)] == brute_nearest(rc.centroids, frames.data.row(t)));
}

TEST_CASE("property: assign is permutation-equivariant and idempotent") {
  Rng rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    Codebook cb;
    cb.centroids = random_frames(rng, 9, 3).data;
    FeatureMatrix f = random_frames(rng, 50, 3);
    LabelSeq base = assign(cb, f);
    CHECK(assign(cb, f).labels == base.labels);

    std::vector<int> perm(9);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 8; i > 0; --i) std::swap(perm[static_cast<std::size_t>(i)], perm[uniform_index(rng, static_cast<std::size_t>(i + 1))]);
    Codebook permuted = cb;
    for (int c = 0; c < 9; ++c) permuted.centroids.row(perm[static_cast<std::size_t>(c)]) = cb.centroids.row(c);
    LabelSeq moved = assign(permuted, f);
    for (std::size_t t = 0; t < base.labels.size(); ++t) CHECK(moved.labels[t] == perm[static_cast<std::size_t>(base.labels[t])]);
  }
}

TEST_CASE("purity: identical labels, hand counts, relabeling, errors") {
  AlignmentFile ali;
  ali.utterances["u"] = {{0, 3, 0}, {3, 6, 1}, {7, 9, 2}};
  std::vector<LabelSeq> same{{"u", {0, 0, 0, 1, 1, 1, 5, 2, 2}, 10.0}};
  PurityReport r = purity(same, ali);
  CHECK(r.phone_purity == 1.0);
  CHECK(r.cluster_purity == 1.0);
  CHECK(r.frames == 8);  // frame 6 is unaligned

  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> joint(2, 2);
  joint << 2, 0, 1, 1;
  PurityReport h = purity_from_counts(joint);
  CHECK(h.phone_purity == doctest::Approx(0.75));
  CHECK(h.cluster_purity == doctest::Approx(0.75));

  std::vector<LabelSeq> swapped{{"u", {1, 1, 1, 0, 0, 0, 5, 2, 2}, 10.0}};
  PurityReport s = purity(swapped, ali);
  CHECK(s.phone_purity == r.phone_purity);
  CHECK(s.cluster_purity == r.cluster_purity);

  std::vector<LabelSeq> wrong_period{{"u", {0, 0}, 20.0}};
  CHECK_THROWS_AS(purity(wrong_period, ali), Error);
  std::vector<LabelSeq> disjoint{{"other", {0, 0}, 10.0}};
  CHECK_THROWS_AS(purity(disjoint, ali), Error);
}

TEST_CASE("purity of random labels matches a direct recount") {
  Rng rng(17);
  AlignmentFile ali;
  std::vector<LabelSeq> labels;
  for (int u = 0; u < 10; ++u) {
    std::string id = "u" + std::to_string(u);
    int t = 0;
    while (t < 200) {
      int len = 10 + static_cast<int>(uniform_index(rng, 20));
      ali.utterances[id].push_back({t, t + len, static_cast<int>(uniform_index(rng, 4))});
      t += len;
    }
    LabelSeq l{id, {}, 10.0};
    for (int i = 0; i < t; ++i) l.labels.push_back(static_cast<int>(uniform_index(rng, 64)));
    labels.push_back(l);
  }
  PurityReport r = purity(labels, ali);

  std::map<std::pair<int, int>, int> counts;
  int n = 0;
  for (const auto& l : labels) {
    for (const auto& s : ali.utterances[l.utt_id]) {
      for (int t = s.start_frame; t < s.end_frame; ++t) {
        ++counts[{l.labels[static_cast<std::size_t>(t)], s.phone_id}];
        ++n;
      }
    }
  }
  std::map<int, int> best_by_cluster, best_by_phone;
  for (const auto& [key, c] : counts) {
    best_by_cluster[key.first] = std::max(best_by_cluster[key.first], c);
    best_by_phone[key.second] = std::max(best_by_phone[key.second], c);
  }
  int sc = 0, sp = 0;
  for (const auto& [k, v] : best_by_cluster) sc += v;
  for (const auto& [k, v] : best_by_phone) sp += v;
  CHECK(r.frames == n);
  CHECK(r.phone_purity == doctest::Approx(static_cast<double>(sc) / n));
  CHECK(r.cluster_purity == doctest::Approx(static_cast<double>(sp) / n));
  CHECK(r.joint_counts.rowwise().sum().sum() == n);
}

TEST_CASE("codebook and label files round trip") {
  TempDir dir("kmeans");
  Rng rng(4);
  Codebook cb;
  cb.centroids = random_frames(rng, 5, 3).data;
  cb.source = {CodebookSource::Kind::kHidden, 6};
  write_codebook(dir / "c.mhkc", cb);
  Codebook back = read_codebook(dir / "c.mhkc");
  CHECK(back.centroids == cb.centroids);
  CHECK(back.source == cb.source);
  write_codebook(dir / "d.mhkc", back);
  CHECK(melhubert::test::slurp(dir / "c.mhkc") == melhubert::test::slurp(dir / "d.mhkc"));
  CHECK(melhubert::test::slurp(dir / "c.mhkc").size() == 16 + 5 * 3 * 4);

  std::vector<LabelSeq> labels{{"a", {1, 2, 3}, 20.0}, {"b", {}, 20.0}};
  write_labels(dir / "l.txt", labels);
  auto l2 = read_labels(dir / "l.txt");
  REQUIRE(l2.size() == 2);
  CHECK(l2[0].labels == labels[0].labels);
  CHECK(l2[0].frame_period_ms == 20.0);
  CHECK(l2[1].labels.empty());
}
