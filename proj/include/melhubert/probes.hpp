#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"
#include "melhubert/corpus_io.hpp"
#include "melhubert/diff_core.hpp"
#include "melhubert/trainer.hpp"

namespace melhubert {

struct LayerWeights {
  VectorD logits;  // one per layer, feat first

  VectorD weights() const;  // softmax(logits)
};

/// sum_l softmax(logits)_l * hidden_l; every layer must have the same shape.
MatrixD weighted_sum(std::span<const MatrixD> hidden, const LayerWeights& w);

/// Differentiable form; `logits` is a 1 x L row.
template <typename S>
ad::Var<S> weighted_sum(std::span<const ad::Var<S>> hidden, ad::Var<S> logits);

enum class ProbeTask { kPhoneFrame, kSpeaker, kF0 };
std::string to_string(ProbeTask t);
ProbeTask probe_task_from_string(const std::string& s);

struct ProbeConfig {
  ProbeTask task = ProbeTask::kPhoneFrame;
  double lr = 1e-3;
  std::vector<double> lr_grid;  // when non-empty, picked on a dev split carved from the training part
  int epochs = 20;
  int batch_utts = 8;
  double heldout_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Task labels at the activation frame rate. Only the member matching the
/// task is read.
struct ProbeLabels {
  std::vector<std::vector<int>> frame_classes;    // phone_frame: per frame, -1 = ignore
  std::vector<int> utt_classes;                   // speaker: per utterance
  std::vector<std::vector<double>> frame_values;  // f0: per frame log-F0, NaN = unvoiced
};

/// Alignment phones per activation frame (downsampled when the activation
/// period is a multiple of the alignment period).
ProbeLabels phone_frame_labels(const LayerActivations& acts, const AlignmentFile& alignments);
/// Dense class ids 0..S-1 in sorted order of the speaker labels.
ProbeLabels speaker_labels(const LayerActivations& acts, const std::map<std::string, int>& speakers);
/// Log-F0 per activation frame from 10 ms pitch frames; a 20 ms frame takes
/// the mean of its two constituents and is unvoiced unless both are voiced.
ProbeLabels f0_labels(const LayerActivations& acts, std::span<const std::vector<double>> log_f0_10ms);

struct ProbeResult {
  ProbeTask task = ProbeTask::kPhoneFrame;
  std::string metric_name;  // "frame_error", "speaker_error" or "log_f0_mse"
  double heldout_metric = 0.0;
  double train_metric = 0.0;
  double lr = 0.0;
  std::vector<double> epoch_loss;
  LayerWeights layer_weights;
  std::size_t train_utts = 0, heldout_utts = 0;
};

/// Trains LayerWeights plus a linear head on fixed activations.
ProbeResult probe_train(const LayerActivations& acts, const ProbeLabels& labels, const ProbeConfig& cfg);

struct FrozenProbeResult {
  ProbeResult probe;
  std::uint64_t upstream_hash_before = 0;
  std::uint64_t upstream_hash_after = 0;
};

/// Extracts every layer of `ckpt` and probes it. Throws if the upstream
/// checkpoint changed during the run.
FrozenProbeResult probe_train(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features,
                              const ProbeLabels& labels, const ProbeConfig& cfg);

void write_layer_weights_csv(const std::filesystem::path& path, const LayerWeights& w);
void write_probe_metrics_csv(const std::filesystem::path& path, const ProbeResult& r);

struct F0Config {
  double win_ms = 40.0;
  double hop_ms = 10.0;
  double fmin_hz = 60.0;
  double fmax_hz = 400.0;
  double voicing_threshold = 0.5;
  // Frames are centred like log-Mel frames of this window length, so both
  // tracks have the same count and alignment.
  double align_win_ms = 25.0;
};

struct F0Track {
  std::vector<double> log_f0;  // NaN where unvoiced
  std::vector<bool> voiced;
};

/// Normalized-autocorrelation pitch tracker.
F0Track estimate_f0(const WaveBuffer& wave, const F0Config& cfg = {});

}  // namespace melhubert
