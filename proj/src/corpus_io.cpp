#include "melhubert/corpus_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

namespace melhubert {

namespace fs = std::filesystem;

namespace {

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

std::vector<std::string> split(const std::string& line, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  std::istringstream ss(line);
  while (std::getline(ss, cur, sep)) parts.push_back(cur);
  if (!line.empty() && line.back() == sep) parts.emplace_back();
  return parts;
}

int parse_int(const std::string& s, const std::string& what) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return static_cast<int>(v);
  } catch (const std::exception&) {
    throw FormatError("bad integer for " + what + ": '" + s + "'");
  }
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw Error("cannot write " + tmp.string());
    out << text;
  }
  fs::rename(tmp, path);
}

}  // namespace

WaveBuffer read_wav(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw FormatError(path.string() + ": not a RIFF/WAVE file");
  }

  bool have_fmt = false;
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    std::uint32_t size = read_u32(hdr + 4);
    std::size_t body = pos + 8;
    if (body + size > bytes.size()) throw FormatError(path.string() + ": truncated chunk");
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(path.string() + ": short fmt chunk");
      const unsigned char* f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == 0xFFFE) {
        if (size < 40) throw FormatError(path.string() + ": short extensible fmt chunk");
        format = read_u16(f + 24);
      }
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data = bytes.data() + body;
      data_size = size;
      have_data = true;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt || !have_data) throw FormatError(path.string() + ": missing fmt or data chunk");
  if (channels != 1) throw UnsupportedError(path.string() + ": only mono audio is supported");
  if (rate == 0) throw FormatError(path.string() + ": zero sample rate");

  WaveBuffer wave;
  wave.sample_rate_hz = static_cast<int>(rate);
  if (format == 1 && bits == 16) {
    if (data_size % 2 != 0) throw FormatError(path.string() + ": odd PCM16 data size");
    wave.samples.resize(data_size / 2);
    for (std::size_t i = 0; i < wave.samples.size(); ++i) {
      auto v = static_cast<std::int16_t>(read_u16(data + 2 * i));
      wave.samples[i] = static_cast<float>(v) / 32768.0f;
    }
  } else if (format == 3 && bits == 32) {
    if (data_size % 4 != 0) throw FormatError(path.string() + ": bad float32 data size");
    wave.samples.resize(data_size / 4);
    for (std::size_t i = 0; i < wave.samples.size(); ++i) {
      std::uint32_t u = read_u32(data + 4 * i);
      float v;
      std::memcpy(&v, &u, 4);
      if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite sample");
      wave.samples[i] = v;
    }
  } else {
    throw UnsupportedError(path.string() + ": unsupported encoding (format " + std::to_string(format) +
                           ", " + std::to_string(bits) + " bits)");
  }
  return wave;
}

void write_wav(const fs::path& path, const WaveBuffer& wave, WavEncoding encoding) {
  if (wave.sample_rate_hz <= 0) throw Error("write_wav: sample rate must be positive");
  const bool pcm = encoding == WavEncoding::kPcm16;
  const std::uint16_t bits = pcm ? 16 : 32;
  const std::uint32_t data_size = static_cast<std::uint32_t>(wave.samples.size() * (bits / 8));

  std::string out;
  out.reserve(44 + data_size);
  out += "RIFF";
  put_u32(out, 36 + data_size);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, pcm ? 1 : 3);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate_hz));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate_hz) * (bits / 8));
  put_u16(out, bits / 8);
  put_u16(out, bits);
  out += "data";
  put_u32(out, data_size);
  for (float s : wave.samples) {
    if (pcm) {
      double v = std::round(static_cast<double>(s) * 32768.0);
      v = std::clamp(v, -32768.0, 32767.0);
      put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(v)));
    } else {
      std::uint32_t u;
      std::memcpy(&u, &s, 4);
      put_u32(out, u);
    }
  }
  write_text_atomic(path, out);
}

fs::path Manifest::resolve(const ManifestEntry& e) const {
  fs::path p(e.path);
  return p.is_absolute() ? p : root / p;
}

void Manifest::validate() const {
  std::set<std::string> seen;
  for (const auto& e : entries) {
    if (e.utt_id.empty()) throw FormatError("manifest: empty utt_id");
    if (e.path.empty()) throw FormatError("manifest: empty path for " + e.utt_id);
    if (e.num_samples <= 0) throw FormatError("manifest: num_samples must be positive for " + e.utt_id);
    if (!seen.insert(e.utt_id).second) throw FormatError("manifest: duplicate utt_id " + e.utt_id);
  }
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  Manifest m;
  m.root = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto parts = split(line, '\t');
    if (parts.size() != 3) {
      throw FormatError("manifest line " + std::to_string(lineno) + ": expected 3 tab-separated fields");
    }
    m.entries.push_back({parts[0], parts[1], parse_int(parts[2], "num_samples")});
  }
  m.validate();
  return m;
}

void write_manifest(const fs::path& path, const Manifest& manifest) {
  manifest.validate();
  std::ostringstream out;
  for (const auto& e : manifest.entries) out << e.utt_id << '\t' << e.path << '\t' << e.num_samples << '\n';
  write_text_atomic(path, out.str());
}

void AlignmentFile::validate() const {
  if (!(frame_period_ms > 0)) throw FormatError("alignments: frame period must be positive");
  for (const auto& [utt, segs] : utterances) {
    int prev_end = 0;
    for (const auto& s : segs) {
      if (s.start_frame < 0 || s.end_frame <= s.start_frame) {
        throw FormatError("alignments: empty or negative segment in " + utt);
      }
      if (s.start_frame < prev_end) throw FormatError("alignments: overlapping or unsorted segments in " + utt);
      if (s.phone_id < 0) throw FormatError("alignments: negative phone id in " + utt);
      prev_end = s.end_frame;
    }
  }
}

std::vector<int> AlignmentFile::frame_labels(const std::string& utt_id, int num_frames) const {
  std::vector<int> labels(static_cast<std::size_t>(std::max(num_frames, 0)), -1);
  auto it = utterances.find(utt_id);
  if (it == utterances.end()) return labels;
  for (const auto& s : it->second) {
    for (int t = s.start_frame; t < std::min(s.end_frame, num_frames); ++t) labels[static_cast<std::size_t>(t)] = s.phone_id;
  }
  return labels;
}

AlignmentFile AlignmentFile::downsample(int factor) const {
  if (factor < 1) throw Error("downsample: factor must be >= 1");
  AlignmentFile out;
  out.frame_period_ms = frame_period_ms * factor;
  for (const auto& [utt, segs] : utterances) {
    auto& dst = out.utterances[utt];
    for (const auto& s : segs) {
      Segment d{s.start_frame / factor, s.end_frame / factor, s.phone_id};
      if (!dst.empty() && d.start_frame < dst.back().end_frame) d.start_frame = dst.back().end_frame;
      if (d.end_frame > d.start_frame) dst.push_back(d);
    }
  }
  return out;
}

AlignmentFile read_alignments(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open alignments " + path.string());
  AlignmentFile ali;
  std::string line;
  bool have_header = false;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      const std::string key = "#frame_period_ms=";
      if (line.rfind(key, 0) == 0) {
        try {
          ali.frame_period_ms = std::stod(line.substr(key.size()));
        } catch (const std::exception&) {
          throw FormatError("alignments: bad frame period header");
        }
        have_header = true;
      }
      continue;
    }
    auto parts = split(line, '\t');
    if (parts.size() != 4) {
      throw FormatError("alignments line " + std::to_string(lineno) + ": expected 4 tab-separated fields");
    }
    ali.utterances[parts[0]].push_back(
        {parse_int(parts[1], "start_frame"), parse_int(parts[2], "end_frame"), parse_int(parts[3], "phone_id")});
  }
  if (!have_header) throw FormatError("alignments: missing #frame_period_ms header");
  ali.validate();
  return ali;
}

void write_alignments(const fs::path& path, const AlignmentFile& ali) {
  ali.validate();
  std::ostringstream out;
  out << "#frame_period_ms=" << ali.frame_period_ms << '\n';
  for (const auto& [utt, segs] : ali.utterances) {
    for (const auto& s : segs) out << utt << '\t' << s.start_frame << '\t' << s.end_frame << '\t' << s.phone_id << '\n';
  }
  write_text_atomic(path, out.str());
}

std::map<std::string, int> read_utt_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::map<std::string, int> labels;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto parts = split(line, '\t');
    if (parts.size() != 2) throw FormatError(path.string() + ": expected utt_id<TAB>label");
    labels[parts[0]] = parse_int(parts[1], "label");
  }
  return labels;
}

void write_utt_labels(const fs::path& path, const std::map<std::string, int>& labels) {
  std::ostringstream out;
  for (const auto& [utt, l] : labels) out << utt << '\t' << l << '\n';
  write_text_atomic(path, out.str());
}

namespace {

struct PhoneTemplate {
  std::array<double, 3> formants;
  std::array<double, 3> bandwidths;
};

// Spectral envelope value at `freq` for a phone template; speakers scale the
// formant positions slightly.
double envelope(const PhoneTemplate& p, double freq, double formant_scale) {
  double a = 0.0;
  for (std::size_t i = 0; i < p.formants.size(); ++i) {
    double d = (freq - p.formants[i] * formant_scale) / p.bandwidths[i];
    a += std::exp(-0.5 * d * d) / static_cast<double>(i + 1);
  }
  return a + 0.02;
}

}  // namespace

Corpus synth_corpus(const SynthOptions& opts) {
  if (opts.num_utts <= 0) throw Error("synth_corpus: num_utts must be positive");
  if (opts.classes < 2) throw Error("synth_corpus: classes must be >= 2");
  if (opts.num_speakers < 1) throw Error("synth_corpus: num_speakers must be >= 1");
  if (!(opts.formant_spread >= 0.0 && opts.formant_spread < 1.0)) throw Error("synth_corpus: formant_spread must be in [0, 1)");

  constexpr int kHop = 160;
  constexpr int kTail = 240;  // 25 ms window minus 10 ms hop
  const double sr = opts.sample_rate_hz;
  const double hop_scale = sr / 16000.0;

  Rng phone_rng = make_stream(opts.seed, "synth/phones");
  std::vector<PhoneTemplate> phones(static_cast<std::size_t>(opts.classes));
  for (int p = 0; p < opts.classes; ++p) {
    double frac = (p + 0.5) / opts.classes;
    double rev = (opts.classes - p - 0.5) / opts.classes;
    auto& t = phones[static_cast<std::size_t>(p)];
    t.formants = {250.0 + 650.0 * frac + 40.0 * (uniform01(phone_rng) - 0.5),
                  900.0 + 1900.0 * rev + 80.0 * (uniform01(phone_rng) - 0.5),
                  2300.0 + 1400.0 * (0.5 + 0.5 * std::sin(2.4 * p)) + 80.0 * (uniform01(phone_rng) - 0.5)};
    t.bandwidths = {90.0, 140.0, 200.0};
  }

  Rng spk_rng = make_stream(opts.seed, "synth/speakers");
  std::vector<double> spk_f0(static_cast<std::size_t>(opts.num_speakers));
  std::vector<double> spk_scale(static_cast<std::size_t>(opts.num_speakers));
  for (int s = 0; s < opts.num_speakers; ++s) {
    spk_f0[static_cast<std::size_t>(s)] = 90.0 * std::pow(2.6, (s + 0.5) / opts.num_speakers) + 10.0 * uniform01(spk_rng);
    spk_scale[static_cast<std::size_t>(s)] = 1.0 + opts.formant_spread * ((s + 0.5) / opts.num_speakers - 0.5);
  }

  Rng rng = make_stream(opts.seed, "synth/utterances");
  Corpus corpus;
  corpus.alignments.frame_period_ms = 10.0;
  const int width = static_cast<int>(std::to_string(opts.num_utts - 1).size());

  for (int u = 0; u < opts.num_utts; ++u) {
    std::string num = std::to_string(u);
    std::string utt = "utt" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0') + num;
    const int speaker = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(opts.num_speakers)));
    const double f0 = spk_f0[static_cast<std::size_t>(speaker)];
    const double scale = spk_scale[static_cast<std::size_t>(speaker)];

    const int target = 100 + static_cast<int>(uniform_index(rng, 201));
    std::vector<Segment> segs;
    int used = 0;
    int prev_phone = -1;
    while (used < target) {
      int remaining = target - used;
      int len;
      if (remaining <= 40) {
        len = remaining;
      } else {
        int hi = std::min(40, remaining - 10);
        len = 10 + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(hi - 10 + 1)));
      }
      int phone;
      if (prev_phone < 0) {
        phone = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(opts.classes)));
      } else {
        // adjacent segments differ
        phone = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(opts.classes - 1)));
        if (phone >= prev_phone) ++phone;
      }
      segs.push_back({used, used + len, phone});
      prev_phone = phone;
      used += len;
    }

    const int hop = static_cast<int>(std::lround(kHop * hop_scale));
    const std::size_t n = static_cast<std::size_t>(target) * static_cast<std::size_t>(hop) +
                          static_cast<std::size_t>(std::lround(kTail * hop_scale));
    WaveBuffer wave;
    wave.sample_rate_hz = opts.sample_rate_hz;
    wave.samples.assign(n, 0.0f);
    const int n_harm = static_cast<int>(std::floor(0.47 * sr / f0));

    // Per-segment harmonic amplitudes, unit energy.
    std::vector<std::vector<double>> amps;
    for (const auto& s : segs) {
      std::vector<double> a(static_cast<std::size_t>(n_harm));
      double norm = 0.0;
      for (int h = 1; h <= n_harm; ++h) {
        a[static_cast<std::size_t>(h - 1)] = envelope(phones[static_cast<std::size_t>(s.phone_id)], h * f0, scale);
        norm += a[static_cast<std::size_t>(h - 1)] * a[static_cast<std::size_t>(h - 1)];
      }
      for (double& v : a) v /= std::sqrt(norm);
      amps.push_back(std::move(a));
    }
    // Harmonic oscillators as rotating phasors.
    const double phase0 = 6.283185307179586 * uniform01(rng);
    std::vector<std::complex<double>> osc(static_cast<std::size_t>(n_harm));
    std::vector<std::complex<double>> rot(static_cast<std::size_t>(n_harm));
    for (int h = 1; h <= n_harm; ++h) {
      osc[static_cast<std::size_t>(h - 1)] = std::polar(1.0, phase0 * h);
      rot[static_cast<std::size_t>(h - 1)] = std::polar(1.0, 6.283185307179586 * h * f0 / sr);
    }
    std::size_t si = 0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t frame = std::min(i / static_cast<std::size_t>(hop), static_cast<std::size_t>(target - 1));
      while (si + 1 < segs.size() && static_cast<std::size_t>(segs[si].end_frame) <= frame) ++si;
      double v = 0.0;
      const auto& a = amps[si];
      for (std::size_t h = 0; h < osc.size(); ++h) {
        v += a[h] * osc[h].imag();
        osc[h] *= rot[h];
      }
      v = 0.3 * v + opts.noise_level * normal01(rng);
      wave.samples[i] = static_cast<float>(std::clamp(v, -1.0, 1.0));
    }

    corpus.manifest.entries.push_back({utt, "wav/" + utt + ".wav", static_cast<std::int64_t>(n)});
    corpus.alignments.utterances[utt] = std::move(segs);
    corpus.speakers[utt] = speaker;
    corpus.waves.push_back(std::move(wave));
  }
  corpus.manifest.validate();
  return corpus;
}

void write_corpus(const fs::path& dir, const Corpus& corpus) {
  fs::create_directories(dir / "wav");
  for (std::size_t i = 0; i < corpus.waves.size(); ++i) {
    write_wav(dir / corpus.manifest.entries[i].path, corpus.waves[i], WavEncoding::kFloat32);
  }
  Manifest m = corpus.manifest;
  m.root = dir;
  write_manifest(dir / "manifest.tsv", m);
  write_alignments(dir / "alignments.txt", corpus.alignments);
  write_utt_labels(dir / "speakers.tsv", corpus.speakers);
}

Corpus load_corpus(const fs::path& manifest_path) {
  Corpus c;
  c.manifest = read_manifest(manifest_path);
  for (const auto& e : c.manifest.entries) {
    WaveBuffer w = read_wav(c.manifest.resolve(e));
    if (static_cast<std::int64_t>(w.samples.size()) != e.num_samples) {
      throw FormatError("manifest sample count mismatch for " + e.utt_id);
    }
    c.waves.push_back(std::move(w));
  }
  const fs::path dir = manifest_path.parent_path();
  if (fs::exists(dir / "alignments.txt")) c.alignments = read_alignments(dir / "alignments.txt");
  if (fs::exists(dir / "speakers.tsv")) c.speakers = read_utt_labels(dir / "speakers.tsv");
  return c;
}

WaveBuffer synth_sawtooth(double f0_hz, double seconds, int sample_rate_hz, double amplitude) {
  WaveBuffer w;
  w.sample_rate_hz = sample_rate_hz;
  const auto n = static_cast<std::size_t>(std::lround(seconds * sample_rate_hz));
  w.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double phase = std::fmod(f0_hz * static_cast<double>(i) / sample_rate_hz, 1.0);
    w.samples[i] = static_cast<float>(amplitude * (2.0 * phase - 1.0));
  }
  return w;
}

}  // namespace melhubert
