#include "melhubert/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "binary_io.hpp"

namespace melhubert {

namespace fs = std::filesystem;

CodebookSource CodebookSource::from_tag(std::uint32_t tag) {
  CodebookSource s;
  if (tag != 0) {
    s.kind = Kind::kHidden;
    s.layer = static_cast<int>(tag);
  }
  return s;
}

namespace {

MatrixD stack_frames(std::span<const FeatureMatrix> features, std::int64_t max_frames, std::uint64_t seed) {
  std::int64_t total = 0;
  int dim = -1;
  for (const auto& f : features) {
    if (f.num_frames() == 0) continue;
    if (dim >= 0 && f.dim() != dim) throw Error("kmeans: inconsistent feature dimensions");
    dim = f.dim();
    total += f.num_frames();
  }
  if (dim < 0) return MatrixD(0, 0);

  // Fixed-order index list, then a seeded partial shuffle when capped.
  std::vector<std::pair<std::size_t, int>> index;
  index.reserve(static_cast<std::size_t>(total));
  for (std::size_t u = 0; u < features.size(); ++u) {
    for (int t = 0; t < features[u].num_frames(); ++t) index.emplace_back(u, t);
  }
  if (total > max_frames) {
    Rng rng = make_stream(seed, "kmeans/subsample");
    for (std::int64_t i = 0; i < max_frames; ++i) {
      auto j = static_cast<std::size_t>(i) + uniform_index(rng, static_cast<std::size_t>(total - i));
      std::swap(index[static_cast<std::size_t>(i)], index[j]);
    }
    index.resize(static_cast<std::size_t>(max_frames));
    std::sort(index.begin(), index.end());
  }

  MatrixD x(static_cast<Eigen::Index>(index.size()), dim);
  for (std::size_t i = 0; i < index.size(); ++i) {
    const auto& [u, t] = index[i];
    x.row(static_cast<Eigen::Index>(i)) = features[u].data.row(t).cast<double>();
  }
  if (!x.allFinite()) throw NumericError("kmeans: non-finite feature values");
  return x;
}

// Returns (index, squared distance) of the nearest centroid, lowest index on ties.
std::pair<int, double> nearest(const MatrixD& centroids, const Eigen::Ref<const Eigen::RowVectorXd>& x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (Eigen::Index c = 0; c < centroids.rows(); ++c) {
    const double d = (centroids.row(c) - x).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return {best, best_d};
}

MatrixD kmeans_pp_init(const MatrixD& x, int k, Rng& rng) {
  const Eigen::Index n = x.rows();
  MatrixD centroids(k, x.cols());
  centroids.row(0) = x.row(static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n))));
  VectorD d2(n);
  for (Eigen::Index i = 0; i < n; ++i) d2[i] = (x.row(i) - centroids.row(0)).squaredNorm();
  for (int c = 1; c < k; ++c) {
    const double total = d2.sum();
    Eigen::Index pick = 0;
    if (total > 0) {
      double r = uniform01(rng) * total;
      for (pick = 0; pick < n - 1; ++pick) {
        r -= d2[pick];
        if (r < 0) break;
      }
      // Never land on a zero-weight point because of roundoff.
      while (d2[pick] == 0.0 && pick > 0) --pick;
    } else {
      pick = static_cast<Eigen::Index>(uniform_index(rng, static_cast<std::size_t>(n)));
    }
    centroids.row(c) = x.row(pick);
    for (Eigen::Index i = 0; i < n; ++i) d2[i] = std::min(d2[i], (x.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

}  // namespace

Codebook kmeans_fit(std::span<const FeatureMatrix> features, const KMeansOptions& opts, CodebookSource source,
                    KMeansTrace* trace) {
  if (opts.k < 1) throw Error("kmeans: k must be >= 1");
  if (opts.max_iters < 1) throw Error("kmeans: max_iters must be >= 1");
  const MatrixD x = stack_frames(features, std::max<std::int64_t>(opts.max_frames, opts.k), opts.seed);
  const Eigen::Index n = x.rows();
  if (n < opts.k) {
    throw Error("kmeans: " + std::to_string(n) + " frames is fewer than k=" + std::to_string(opts.k));
  }

  Rng rng = make_stream(opts.seed, "kmeans/init");
  MatrixD centroids = kmeans_pp_init(x, opts.k, rng);
  std::vector<int> assignment(static_cast<std::size_t>(n));
  VectorD cost(n);
  double prev = std::numeric_limits<double>::infinity();
  KMeansTrace local;

  for (int iter = 0; iter < opts.max_iters; ++iter) {
    for (Eigen::Index i = 0; i < n; ++i) {
      auto [c, d] = nearest(centroids, x.row(i));
      assignment[static_cast<std::size_t>(i)] = c;
      cost[i] = d;
    }

    MatrixD sums = MatrixD::Zero(opts.k, x.cols());
    std::vector<std::int64_t> counts(static_cast<std::size_t>(opts.k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(assignment[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(assignment[static_cast<std::size_t>(i)])];
    }
    for (int c = 0; c < opts.k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) {
        centroids.row(c) = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      } else {
        // Empty cluster: move it onto the frame farthest from its centroid.
        Eigen::Index far;
        cost.maxCoeff(&far);
        centroids.row(c) = x.row(far);
        cost[far] = 0.0;
        ++local.reseeded;
      }
    }

    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      total += (x.row(i) - centroids.row(assignment[static_cast<std::size_t>(i)])).squaredNorm();
    }
    local.distortion.push_back(total);
    local.iterations = iter + 1;
    const double improvement = prev - total;
    if (total == 0.0 || (std::isfinite(prev) && improvement <= opts.tol * prev)) break;
    prev = total;
  }

  if (trace) *trace = std::move(local);
  Codebook cb;
  cb.centroids = centroids.cast<float>();
  cb.source = source;
  return cb;
}

LabelSeq assign(const Codebook& cb, const FeatureMatrix& f) {
  if (f.num_frames() > 0 && f.dim() != cb.feature_dim()) {
    throw Error("assign: feature dim " + std::to_string(f.dim()) + " != codebook dim " +
                std::to_string(cb.feature_dim()));
  }
  const MatrixD centroids = cb.centroids.cast<double>();
  LabelSeq out;
  out.utt_id = f.utt_id;
  out.frame_period_ms = f.frame_period_ms;
  out.labels.resize(static_cast<std::size_t>(f.num_frames()));
  for (int t = 0; t < f.num_frames(); ++t) {
    out.labels[static_cast<std::size_t>(t)] = nearest(centroids, f.data.row(t).cast<double>()).first;
  }
  return out;
}

double distortion(const Codebook& cb, std::span<const FeatureMatrix> features) {
  const MatrixD centroids = cb.centroids.cast<double>();
  double total = 0.0;
  for (const auto& f : features) {
    for (int t = 0; t < f.num_frames(); ++t) total += nearest(centroids, f.data.row(t).cast<double>()).second;
  }
  return total;
}

PurityReport purity_from_counts(const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& joint) {
  PurityReport r;
  r.joint_counts = joint;
  r.frames = joint.sum();
  if (r.frames == 0) throw Error("purity: no frames counted");
  std::int64_t by_cluster = 0, by_phone = 0;
  for (Eigen::Index c = 0; c < joint.rows(); ++c) by_cluster += joint.row(c).maxCoeff();
  for (Eigen::Index p = 0; p < joint.cols(); ++p) by_phone += joint.col(p).maxCoeff();
  r.phone_purity = static_cast<double>(by_cluster) / static_cast<double>(r.frames);
  r.cluster_purity = static_cast<double>(by_phone) / static_cast<double>(r.frames);
  return r;
}

PurityReport purity(std::span<const LabelSeq> labels, const AlignmentFile& phones) {
  int k = 0, p = 0;
  for (const auto& l : labels) {
    if (std::abs(l.frame_period_ms - phones.frame_period_ms) > 1e-9) {
      throw Error("purity: label frame period " + std::to_string(l.frame_period_ms) + " != alignment period " +
                  std::to_string(phones.frame_period_ms));
    }
    for (int v : l.labels) {
      if (v < 0) throw Error("purity: negative label");
      k = std::max(k, v + 1);
    }
  }
  for (const auto& [utt, segs] : phones.utterances) {
    for (const auto& s : segs) p = std::max(p, s.phone_id + 1);
  }
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> joint =
      Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>::Zero(std::max(k, 1), std::max(p, 1));
  for (const auto& l : labels) {
    const auto ph = phones.frame_labels(l.utt_id, static_cast<int>(l.labels.size()));
    for (std::size_t t = 0; t < l.labels.size(); ++t) {
      if (ph[t] >= 0) ++joint(l.labels[t], ph[t]);
    }
  }
  if (joint.sum() == 0) throw Error("purity: labels and alignments share no frames");
  return purity_from_counts(joint);
}

void write_codebook(const fs::path& path, const Codebook& cb) {
  detail::BinaryWriter w;
  w.bytes("MHKC", 4);
  w.u32(static_cast<std::uint32_t>(cb.k()));
  w.u32(static_cast<std::uint32_t>(cb.feature_dim()));
  w.u32(cb.source.tag());
  w.f32_array(cb.centroids.data(), static_cast<std::size_t>(cb.centroids.size()));
  w.save_atomic(path);
}

Codebook read_codebook(const fs::path& path) {
  detail::BinaryReader r(path);
  r.expect_magic("MHKC");
  const std::uint32_t k = r.u32();
  const std::uint32_t d = r.u32();
  Codebook cb;
  cb.source = CodebookSource::from_tag(r.u32());
  if (k == 0) throw FormatError(path.string() + ": empty codebook");
  cb.centroids.resize(k, d);
  r.f32_array(cb.centroids.data(), static_cast<std::size_t>(k) * d);
  r.expect_end();
  if (!cb.centroids.allFinite()) throw FormatError(path.string() + ": non-finite centroid");
  return cb;
}

void write_labels(const fs::path& path, std::span<const LabelSeq> labels) {
  std::ostringstream out;
  if (!labels.empty()) out << "#frame_period_ms=" << labels.front().frame_period_ms << '\n';
  for (const auto& l : labels) {
    out << l.utt_id << '\t';
    for (std::size_t i = 0; i < l.labels.size(); ++i) out << (i ? " " : "") << l.labels[i];
    out << '\n';
  }
  detail::BinaryWriter w;
  const std::string text = out.str();
  w.bytes(text.data(), text.size());
  w.save_atomic(path);
}

std::vector<LabelSeq> read_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<LabelSeq> out;
  double period = 10.0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string key = "#frame_period_ms=";
      if (line.rfind(key, 0) == 0) period = std::stod(line.substr(key.size()));
      continue;
    }
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw FormatError(path.string() + ": expected utt_id<TAB>labels");
    LabelSeq l;
    l.utt_id = line.substr(0, tab);
    l.frame_period_ms = period;
    std::istringstream ss(line.substr(tab + 1));
    std::string tok;
    while (ss >> tok) {
      try {
        l.labels.push_back(std::stoi(tok));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ": bad label '" + tok + "'");
      }
    }
    out.push_back(std::move(l));
  }
  return out;
}

}  // namespace melhubert
