#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"
#include "melhubert/corpus_io.hpp"
#include "melhubert/mel_frontend.hpp"

namespace melhubert {

// What a codebook was fit on: the input log-Mel frames, or the hidden
// activations of an encoder layer. Serialized as 0 for log-Mel, else the layer.
struct CodebookSource {
  enum class Kind { kLogMel, kHidden } kind = Kind::kLogMel;
  int layer = 0;

  std::uint32_t tag() const { return kind == Kind::kLogMel ? 0u : static_cast<std::uint32_t>(layer); }
  static CodebookSource from_tag(std::uint32_t tag);
  bool operator==(const CodebookSource&) const = default;
};

struct Codebook {
  MatrixF centroids;  // k x D
  CodebookSource source;

  int k() const { return static_cast<int>(centroids.rows()); }
  int feature_dim() const { return static_cast<int>(centroids.cols()); }
};

struct LabelSeq {
  std::string utt_id;
  std::vector<int> labels;
  double frame_period_ms = 10.0;
};

struct KMeansOptions {
  int k = 512;
  std::uint64_t seed = 0;
  int max_iters = 100;
  double tol = 1e-6;
  // Frames beyond this cap are subsampled uniformly (seeded) before fitting.
  std::int64_t max_frames = 2'000'000;
};

struct KMeansTrace {
  std::vector<double> distortion;  // total squared error after each Lloyd iteration
  int iterations = 0;
  int reseeded = 0;
};

/// Lloyd's algorithm from a k-means++ start. Deterministic for a given seed
/// and input order.
Codebook kmeans_fit(std::span<const FeatureMatrix> features, const KMeansOptions& opts,
                    CodebookSource source = {}, KMeansTrace* trace = nullptr);

/// Nearest centroid per frame; ties go to the lowest index.
LabelSeq assign(const Codebook& cb, const FeatureMatrix& f);

/// Sum of squared distances from each frame to its assigned centroid.
double distortion(const Codebook& cb, std::span<const FeatureMatrix> features);

struct PurityReport {
  double phone_purity = 0.0;
  double cluster_purity = 0.0;
  Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic> joint_counts;  // k x P
  std::int64_t frames = 0;
};

/// Cluster/phone agreement over frames covered by both a label and an aligned
/// segment. Frame periods must match.
PurityReport purity(std::span<const LabelSeq> labels, const AlignmentFile& phones);
PurityReport purity_from_counts(const Eigen::Matrix<std::int64_t, Eigen::Dynamic, Eigen::Dynamic>& joint);

void write_codebook(const std::filesystem::path& path, const Codebook& cb);
Codebook read_codebook(const std::filesystem::path& path);

void write_labels(const std::filesystem::path& path, std::span<const LabelSeq> labels);
std::vector<LabelSeq> read_labels(const std::filesystem::path& path);

}  // namespace melhubert
