#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "melhubert/common.hpp"

namespace melhubert {

struct WaveBuffer {
  std::vector<float> samples;
  int sample_rate_hz = 16000;
};

enum class WavEncoding { kPcm16, kFloat32 };

WaveBuffer read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const WaveBuffer& wave,
               WavEncoding encoding = WavEncoding::kPcm16);

struct ManifestEntry {
  std::string utt_id;
  std::string path;
  std::int64_t num_samples = 0;
};

// Utterance list in canonical order. Relative paths are resolved against
// `root`, which is the manifest's directory when loaded from disk.
struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path root;

  std::filesystem::path resolve(const ManifestEntry& e) const;
  void validate() const;
};

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const Manifest& manifest);

struct Segment {
  int start_frame = 0;
  int end_frame = 0;  // exclusive
  int phone_id = 0;
};

struct AlignmentFile {
  double frame_period_ms = 10.0;
  // Keyed by utt_id; segments sorted and non-overlapping.
  std::map<std::string, std::vector<Segment>> utterances;

  void validate() const;
  /// Per-frame phone ids for `num_frames` frames, -1 where no segment covers.
  std::vector<int> frame_labels(const std::string& utt_id, int num_frames) const;
  /// Same alignment re-expressed at a coarser period (factor 2 for 20 ms).
  /// Boundaries are floor-divided; segments that collapse are dropped.
  AlignmentFile downsample(int factor) const;
};

AlignmentFile read_alignments(const std::filesystem::path& path);
void write_alignments(const std::filesystem::path& path, const AlignmentFile& ali);

// utt_id -> integer label, stored as `utt_id<TAB>label`.
std::map<std::string, int> read_utt_labels(const std::filesystem::path& path);
void write_utt_labels(const std::filesystem::path& path, const std::map<std::string, int>& labels);

struct SynthOptions {
  int num_utts = 200;
  int classes = 3;
  std::uint64_t seed = 0;
  int num_speakers = 4;
  int sample_rate_hz = 16000;
  double noise_level = 0.2;
  double formant_spread = 0.16;  // speaker formant scales span 1 +- spread/2
};

// In-memory corpus: the manifest plus the audio it points at.
struct Corpus {
  Manifest manifest;
  AlignmentFile alignments;
  std::vector<WaveBuffer> waves;      // parallel to manifest.entries
  std::map<std::string, int> speakers;  // generator identity channel
};

/// Synthetic phone corpus. Each utterance is 100-300 frames of 10 ms built from
/// 10-40 frame segments, plus a 15 ms tail so that 25/10 ms framing yields
/// exactly one analysis frame per aligned frame.
Corpus synth_corpus(const SynthOptions& opts);

/// Writes wav/<utt>.wav (float32), manifest.tsv, alignments.txt, speakers.tsv.
void write_corpus(const std::filesystem::path& dir, const Corpus& corpus);
/// Loads a corpus written by write_corpus (alignments/speakers optional).
Corpus load_corpus(const std::filesystem::path& manifest_path);

/// Sawtooth utterance at a constant fundamental, for pitch tests.
WaveBuffer synth_sawtooth(double f0_hz, double seconds, int sample_rate_hz = 16000,
                          double amplitude = 0.5);

}  // namespace melhubert
