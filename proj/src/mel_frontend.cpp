#include "melhubert/mel_frontend.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <memory>
#include <mutex>

#include <fftw3.h>
#include "json.hpp"

#include "binary_io.hpp"

namespace melhubert {

namespace fs = std::filesystem;

int MelConfig::win_samples() const {
  return static_cast<int>(std::lround(win_ms * sample_rate_hz / 1000.0));
}

int MelConfig::hop_samples() const {
  return static_cast<int>(std::lround(hop_ms * sample_rate_hz / 1000.0));
}

void MelConfig::validate() const {
  if (sample_rate_hz <= 0) throw ConfigError("mel.sample_rate_hz must be positive");
  if (!(hop_ms > 0) || hop_ms > win_ms) throw ConfigError("mel.hop_ms must be in (0, win_ms]");
  if (win_samples() > n_fft) throw ConfigError("mel.n_fft must cover the analysis window");
  if (n_mels < 1) throw ConfigError("mel.n_mels must be positive");
  if (fmin_hz < 0 || fmax_hz <= fmin_hz || fmax_hz > sample_rate_hz / 2.0) {
    throw ConfigError("mel.fmax_hz must be in (fmin_hz, sample_rate_hz/2]");
  }
  if (!(log_floor > 0)) throw ConfigError("mel.log_floor must be positive");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank make_mel_filterbank(const MelConfig& cfg) {
  const int bins = cfg.n_fft / 2 + 1;
  const double lo = hz_to_mel(cfg.fmin_hz);
  const double hi = hz_to_mel(cfg.fmax_hz);
  const double step = (hi - lo) / (cfg.n_mels + 1);

  MelFilterbank fb;
  fb.weights = MatrixD::Zero(cfg.n_mels, bins);
  for (int m = 0; m < cfg.n_mels; ++m) {
    const double left = lo + m * step;
    const double center = left + step;
    const double right = center + step;
    fb.center_hz.push_back(mel_to_hz(center));
    for (int k = 0; k < bins; ++k) {
      const double mel = hz_to_mel(static_cast<double>(k) * cfg.sample_rate_hz / cfg.n_fft);
      if (mel > left && mel < right) {
        fb.weights(m, k) = mel <= center ? (mel - left) / (center - left) : (right - mel) / (right - center);
      }
    }
  }
  return fb;
}

namespace {

// FFTW planning is not thread-safe; execution is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

fftw_plan make_r2c_plan(int n, double* in, fftw_complex* out) {
  std::lock_guard<std::mutex> lock(fftw_planner_mutex());
  return fftw_plan_dft_r2c_1d(n, in, out, FFTW_ESTIMATE);
}

struct FftwPlan {
  int n;
  double* in;
  fftw_complex* out;
  fftw_plan plan;

  explicit FftwPlan(int n_fft)
      : n(n_fft),
        in(fftw_alloc_real(static_cast<std::size_t>(n_fft))),
        out(fftw_alloc_complex(static_cast<std::size_t>(n_fft / 2 + 1))),
        plan(make_r2c_plan(n_fft, in, out)) {}
  ~FftwPlan() {
    {
      std::lock_guard<std::mutex> lock(fftw_planner_mutex());
      fftw_destroy_plan(plan);
    }
    fftw_free(in);
    fftw_free(out);
  }
  FftwPlan(const FftwPlan&) = delete;
  FftwPlan& operator=(const FftwPlan&) = delete;
};

}  // namespace

FeatureMatrix compute_logmel(const WaveBuffer& wave, const MelConfig& cfg, std::string utt_id) {
  cfg.validate();
  if (wave.sample_rate_hz != cfg.sample_rate_hz) {
    throw Error("compute_logmel: sample rate " + std::to_string(wave.sample_rate_hz) + " does not match config " +
                std::to_string(cfg.sample_rate_hz));
  }
  const int win = cfg.win_samples();
  const int hop = cfg.hop_samples();
  const auto len = static_cast<long>(wave.samples.size());
  const int frames = len < win ? 0 : static_cast<int>(1 + (len - win) / hop);

  FeatureMatrix f;
  f.utt_id = std::move(utt_id);
  f.frame_period_ms = cfg.hop_ms;
  f.data.resize(frames, cfg.n_mels);
  if (frames == 0) return f;

  // Periodic Hann window.
  std::vector<double> window(static_cast<std::size_t>(win));
  for (int i = 0; i < win; ++i) window[static_cast<std::size_t>(i)] = 0.5 - 0.5 * std::cos(2.0 * M_PI * i / win);

  const MelFilterbank fb = make_mel_filterbank(cfg);
  const int bins = cfg.n_fft / 2 + 1;
  FftwPlan plan(cfg.n_fft);
  VectorD power(bins);
  const double floor_log = std::log(cfg.log_floor);

  for (int t = 0; t < frames; ++t) {
    const float* src = wave.samples.data() + static_cast<std::ptrdiff_t>(t) * hop;
    for (int i = 0; i < win; ++i) plan.in[i] = static_cast<double>(src[i]) * window[static_cast<std::size_t>(i)];
    for (int i = win; i < cfg.n_fft; ++i) plan.in[i] = 0.0;
    fftw_execute(plan.plan);
    for (int k = 0; k < bins; ++k) power[k] = plan.out[k][0] * plan.out[k][0] + plan.out[k][1] * plan.out[k][1];
    VectorD mel = fb.weights * power;
    for (int m = 0; m < cfg.n_mels; ++m) {
      f.data(t, m) = static_cast<float>(mel[m] > cfg.log_floor ? std::log(mel[m]) : floor_log);
    }
  }
  return f;
}

NormStats estimate_norm_stats(std::span<const FeatureMatrix> features) {
  long long count = 0;
  VectorD mean, m2;
  for (const auto& f : features) {
    if (f.num_frames() == 0) continue;
    if (count == 0) {
      mean = VectorD::Zero(f.dim());
      m2 = VectorD::Zero(f.dim());
    } else if (f.dim() != mean.size()) {
      throw Error("estimate_norm_stats: inconsistent feature dimensions");
    }
    const MatrixD x = f.data.cast<double>();
    const VectorD local_mean = x.colwise().mean().transpose();
    const VectorD local_m2 = (x.rowwise() - local_mean.transpose()).array().square().colwise().sum().transpose();
    const long long n = x.rows();
    const long long total = count + n;
    const VectorD delta = local_mean - mean;
    mean += delta * (static_cast<double>(n) / total);
    m2 += local_m2 + delta.array().square().matrix() * (static_cast<double>(count) * n / total);
    count = total;
  }
  if (count == 0) throw Error("estimate_norm_stats: no frames");
  NormStats s;
  s.mean = mean;
  s.std = (m2 / static_cast<double>(count)).array().sqrt().max(1e-8).matrix();
  return s;
}

void apply_norm(FeatureMatrix& f, const NormStats& stats) {
  if (f.dim() != stats.mean.size()) throw Error("apply_norm: dimension mismatch");
  for (int t = 0; t < f.num_frames(); ++t) {
    for (int d = 0; d < f.dim(); ++d) {
      f.data(t, d) = static_cast<float>((f.data(t, d) - stats.mean[d]) / stats.std[d]);
    }
  }
}

FeatureMatrix concat_frames(const FeatureMatrix& f, int factor) {
  if (factor < 1) throw Error("concat_frames: factor must be >= 1");
  FeatureMatrix out;
  out.utt_id = f.utt_id;
  out.frame_period_ms = f.frame_period_ms * factor;
  const int rows = f.num_frames() / factor;
  const int dim = f.dim();
  out.data.resize(rows, static_cast<Eigen::Index>(dim) * factor);
  // Row-major storage makes the concatenation a reinterpretation of the
  // leading rows*factor rows.
  std::memcpy(out.data.data(), f.data.data(), sizeof(float) * static_cast<std::size_t>(rows) * factor * dim);
  return out;
}

void write_features(const fs::path& path, const FeatureMatrix& f) {
  detail::BinaryWriter w;
  w.bytes("MHF1", 4);
  w.u32(1);
  w.u32(static_cast<std::uint32_t>(f.num_frames()));
  w.u32(static_cast<std::uint32_t>(f.dim()));
  w.f32(static_cast<float>(f.frame_period_ms));
  w.f32_array(f.data.data(), static_cast<std::size_t>(f.data.size()));
  w.save_atomic(path);
}

FeatureMatrix read_features(const fs::path& path) {
  detail::BinaryReader r(path);
  r.expect_magic("MHF1");
  if (r.u32() != 1) throw FormatError(path.string() + ": unsupported feature file version");
  const std::uint32_t t = r.u32();
  const std::uint32_t d = r.u32();
  FeatureMatrix f;
  f.frame_period_ms = r.f32();
  f.utt_id = path.stem().string();
  f.data.resize(t, d);
  r.f32_array(f.data.data(), static_cast<std::size_t>(t) * d);
  r.expect_end();
  return f;
}

void write_norm_stats(const fs::path& path, const NormStats& stats) {
  nlohmann::json j;
  j["mean"] = std::vector<double>(stats.mean.data(), stats.mean.data() + stats.mean.size());
  j["std"] = std::vector<double>(stats.std.data(), stats.std.data() + stats.std.size());
  detail::BinaryWriter w;
  const std::string text = j.dump(1) + "\n";
  w.bytes(text.data(), text.size());
  w.save_atomic(path);
}

NormStats read_norm_stats(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  auto mean = j.at("mean").get<std::vector<double>>();
  auto std = j.at("std").get<std::vector<double>>();
  if (mean.size() != std.size()) throw FormatError(path.string() + ": mean/std size mismatch");
  NormStats s;
  s.mean = Eigen::Map<VectorD>(mean.data(), static_cast<Eigen::Index>(mean.size()));
  s.std = Eigen::Map<VectorD>(std.data(), static_cast<Eigen::Index>(std.size()));
  return s;
}

}  // namespace melhubert
