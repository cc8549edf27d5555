#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"
#include "melhubert/corpus_io.hpp"

namespace melhubert {

struct MelConfig {
  int sample_rate_hz = 16000;
  double win_ms = 25.0;
  double hop_ms = 10.0;
  int n_fft = 512;
  int n_mels = 40;
  double fmin_hz = 0.0;
  double fmax_hz = 8000.0;
  double log_floor = 1e-10;

  int win_samples() const;
  int hop_samples() const;
  void validate() const;
};

struct FeatureMatrix {
  MatrixF data;  // T x D
  double frame_period_ms = 10.0;
  std::string utt_id;

  int num_frames() const { return static_cast<int>(data.rows()); }
  int dim() const { return static_cast<int>(data.cols()); }
};

struct NormStats {
  VectorD mean;
  VectorD std;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular HTK-scale filterbank, n_mels x (n_fft/2 + 1), plus the center
/// frequency of each filter in Hz.
struct MelFilterbank {
  MatrixD weights;
  std::vector<double> center_hz;
};
MelFilterbank make_mel_filterbank(const MelConfig& cfg);

FeatureMatrix compute_logmel(const WaveBuffer& wave, const MelConfig& cfg, std::string utt_id = {});

/// Population mean/std over every frame, merged per utterance with Chan's
/// update in input order. std is floored at 1e-8.
NormStats estimate_norm_stats(std::span<const FeatureMatrix> features);

void apply_norm(FeatureMatrix& f, const NormStats& stats);

/// Rows (k*t .. k*t+k-1) concatenated into row t; trailing remainder dropped.
FeatureMatrix concat_frames(const FeatureMatrix& f, int factor = 2);

void write_features(const std::filesystem::path& path, const FeatureMatrix& f);
FeatureMatrix read_features(const std::filesystem::path& path);

void write_norm_stats(const std::filesystem::path& path, const NormStats& stats);
NormStats read_norm_stats(const std::filesystem::path& path);

}  // namespace melhubert
