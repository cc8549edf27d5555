#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"
#include "melhubert/corpus_io.hpp"
#include "melhubert/mel_frontend.hpp"
#include "melhubert/trainer.hpp"

namespace melhubert {

// ---- CCA ----

struct CcaConfig {
  double reg = 1e-4;  // ridge added to both covariance matrices
  int max_dims = 0;   // 0: min(Dx, Dy)

  void validate() const;
};

/// Linear CCA similarity. Canonical directions come from the ridge-regularized
/// problem (whitening + SVD); each pair is then scored by the sample
/// correlation of its projected variates, clipped to [0, 1]. Returns the mean
/// over the leading min(Dx, Dy) pairs. Requires N > max(Dx, Dy) + 10.
double cca_score(const MatrixD& x, const MatrixD& y, const CcaConfig& cfg = {});

struct LayerScore {
  std::string layer;
  double score = 0.0;
};

/// Per layer: segment-mean activations against one-hot phone identity. The
/// alignment may be at 10 ms for a 20 ms model; it is then downsampled and
/// segments that collapse are dropped.
std::vector<LayerScore> phone_cca(const LayerActivations& acts, const AlignmentFile& alignments,
                                  const CcaConfig& cfg = {});

/// Per layer: frame activations against the model's own input frames (for
/// 20 ms models the concatenated pair). At most `max_frames` frames, drawn
/// uniformly with a seeded stream.
std::vector<LayerScore> mel_cca(const LayerActivations& acts, std::span<const FeatureMatrix> model_inputs,
                                const CcaConfig& cfg = {}, std::int64_t max_frames = 50'000,
                                std::uint64_t seed = 0);

void write_scores_csv(const std::filesystem::path& path, std::span<const LayerScore> scores);
std::vector<LayerScore> read_scores_csv(const std::filesystem::path& path);

/// Line chart of one or more score series over layers.
std::string scores_svg(const std::map<std::string, std::vector<LayerScore>>& series, const std::string& title);

// ---- MACs ----

struct ArchLayer {
  enum class Kind { kInput, kConv1d, kLinear, kAttention, kFfn };
  Kind kind = Kind::kLinear;
  std::string group;
  // input: samples or frames per second, optional dim
  std::int64_t length = 0;
  int dim = 0;
  bool samples = false;
  // conv1d / linear
  int in = 0, out = 0, kernel = 1, stride = 1, padding = 0, groups = 1;
  int trim = 0;  // conv1d: trailing outputs discarded (and not computed)
  // attention / ffn
  int d_model = 0, heads = 1, hidden = 0;
  std::int64_t context = 0;  // 0: the current frame count
  int repeat = 1;
};

/// Declarative architecture, one layer per line:
///
///   name hubert-base
///   group conv frontend
///   input samples=16000
///   conv1d in=1 out=512 kernel=10 stride=5
///   group transformer
///   input frames=50
///   linear in=512 out=768
///   attention d_model=768 heads=12 context=50 repeat=12
///   ffn d_model=768 hidden=3072 repeat=12
///
/// `#` starts a comment. Layers take the group of the latest `group` line.
struct ArchSpec {
  std::string name;
  std::vector<ArchLayer> layers;
};

ArchSpec parse_arch_spec(const std::string& text, const std::string& origin = "arch spec");
std::string format_arch_spec(const ArchSpec& spec);
ArchSpec read_arch_spec(const std::filesystem::path& path);

struct MacsEntry {
  std::string name;   // e.g. "transformer/attention"
  std::string group;
  std::int64_t macs = 0;  // per second of speech, all repeats included
};

struct MacsReport {
  std::string arch;
  std::vector<MacsEntry> entries;
  std::map<std::string, std::int64_t> groups;
  std::int64_t total = 0;

  double share(const std::string& group) const;
};

/// conv1d: out_len * out * (in / groups) * kernel, out_len = floor((L + 2p - k) / s) + 1 - trim
/// linear: frames * in * out
/// attention: frames * 4 d^2 + 2 * frames * context * d
/// ffn: frames * 2 * d * hidden
MacsReport macs_count(const ArchSpec& spec);

/// Shipped presets: melhubert-10ms, melhubert-20ms, melhubert-20ms-best, hubert-base-macs.
std::vector<std::string> arch_preset_names();
ArchSpec arch_preset(const std::string& name);

std::string macs_report_json(const MacsReport& r);

}  // namespace melhubert
