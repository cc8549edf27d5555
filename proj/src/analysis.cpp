#include "melhubert/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "json.hpp"

namespace melhubert {

namespace fs = std::filesystem;

void CcaConfig::validate() const {
  if (!(reg > 0) || !std::isfinite(reg)) throw ConfigError("cca: reg must be positive");
  if (max_dims < 0) throw ConfigError("cca: max_dims must be >= 0");
}

namespace {

// (C + reg I)^{-1/2} for a symmetric positive semi-definite C.
MatrixD inv_sqrt(const MatrixD& c, double reg) {
  MatrixD r = c;
  r.diagonal().array() += reg;
  Eigen::SelfAdjointEigenSolver<MatrixD> es(r);
  if (es.info() != Eigen::Success) throw NumericError("cca: eigendecomposition failed");
  const VectorD ev = es.eigenvalues();
  if (!ev.allFinite() || ev.minCoeff() <= 0) throw NumericError("cca: covariance is not positive definite");
  return es.eigenvectors() * ev.cwiseInverse().cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double cca_score(const MatrixD& x, const MatrixD& y, const CcaConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = x.rows();
  if (y.rows() != n) throw Error("cca: X has " + std::to_string(n) + " rows, Y has " + std::to_string(y.rows()));
  if (x.cols() == 0 || y.cols() == 0) throw Error("cca: empty feature dimension");
  const Eigen::Index need = std::max(x.cols(), y.cols()) + 10;
  if (n <= need) {
    throw Error("cca: " + std::to_string(n) + " samples, need more than " + std::to_string(need));
  }
  if (!x.allFinite() || !y.allFinite()) throw NumericError("cca: non-finite input");

  const MatrixD xc = x.rowwise() - x.colwise().mean();
  const MatrixD yc = y.rowwise() - y.colwise().mean();
  const double denom = static_cast<double>(n - 1);
  const MatrixD cxx = xc.transpose() * xc / denom;
  const MatrixD cyy = yc.transpose() * yc / denom;
  const MatrixD cxy = xc.transpose() * yc / denom;

  const MatrixD wx = inv_sqrt(cxx, cfg.reg);
  const MatrixD wy = inv_sqrt(cyy, cfg.reg);
  Eigen::JacobiSVD<MatrixD> svd(wx * cxy * wy, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::Index m = std::min(x.cols(), y.cols());
  if (cfg.max_dims > 0) m = std::min<Eigen::Index>(m, cfg.max_dims);

  const double tiny_x = 1e-12 * std::max(cxx.trace() / static_cast<double>(x.cols()), 1e-300);
  const double tiny_y = 1e-12 * std::max(cyy.trace() / static_cast<double>(y.cols()), 1e-300);
  double total = 0.0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const VectorD a = wx * svd.matrixU().col(i);
    const VectorD b = wy * svd.matrixV().col(i);
    const double vx = a.dot(cxx * a);
    const double vy = b.dot(cyy * b);
    if (!(vx > tiny_x) || !(vy > tiny_y)) {
      throw NumericError("cca: canonical pair " + std::to_string(i) + " has no variance (rank-deficient input)");
    }
    const double rho = a.dot(cxy * b) / std::sqrt(vx * vy);
    if (!std::isfinite(rho)) throw NumericError("cca: non-finite correlation");
    total += std::clamp(rho, 0.0, 1.0);
  }
  return total / static_cast<double>(m);
}

std::vector<LayerScore> phone_cca(const LayerActivations& acts, const AlignmentFile& alignments, const CcaConfig& cfg) {
  AlignmentFile ali = alignments;
  if (std::abs(ali.frame_period_ms - acts.frame_period_ms) > 1e-9) {
    const double ratio = acts.frame_period_ms / ali.frame_period_ms;
    const int factor = static_cast<int>(std::lround(ratio));
    if (factor < 2 || std::abs(ratio - factor) > 1e-9) {
      throw Error("phone_cca: alignment period " + std::to_string(ali.frame_period_ms) +
                  " ms does not divide activation period " + std::to_string(acts.frame_period_ms) + " ms");
    }
    ali = ali.downsample(factor);
  }

  // (utt index, start, end, phone) for every usable segment.
  struct Seg {
    std::size_t utt;
    int start, end, phone;
  };
  std::vector<Seg> segs;
  std::set<int> phones;
  for (std::size_t u = 0; u < acts.utt_ids.size(); ++u) {
    auto it = ali.utterances.find(acts.utt_ids[u]);
    if (it == ali.utterances.end()) continue;
    const int t = static_cast<int>(acts.layers.front()[u].rows());
    for (const auto& s : it->second) {
      const int end = std::min(s.end_frame, t);
      if (end <= s.start_frame) continue;
      segs.push_back({u, s.start_frame, end, s.phone_id});
      phones.insert(s.phone_id);
    }
  }
  if (phones.size() < 2) throw Error("phone_cca: need at least two distinct phones");
  // Dummy coding: the last phone is the reference column (one-hot columns sum to 1).
  std::map<int, int> column;
  for (int p : phones) column.emplace(p, static_cast<int>(column.size()));
  const int ycols = static_cast<int>(phones.size()) - 1;
  MatrixD y = MatrixD::Zero(static_cast<Eigen::Index>(segs.size()), ycols);
  for (std::size_t i = 0; i < segs.size(); ++i) {
    const int c = column.at(segs[i].phone);
    if (c < ycols) y(static_cast<Eigen::Index>(i), c) = 1.0;
  }

  std::vector<LayerScore> out;
  for (int l = 0; l < acts.num_layers(); ++l) {
    const auto& layer = acts.layers[static_cast<std::size_t>(l)];
    MatrixD x(static_cast<Eigen::Index>(segs.size()), layer.front().cols());
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const auto& s = segs[i];
      x.row(static_cast<Eigen::Index>(i)) =
          layer[s.utt].middleRows(s.start, s.end - s.start).cast<double>().colwise().mean();
    }
    out.push_back({LayerActivations::layer_name(l), cca_score(x, y, cfg)});
  }
  return out;
}

std::vector<LayerScore> mel_cca(const LayerActivations& acts, std::span<const FeatureMatrix> model_inputs,
                                const CcaConfig& cfg, std::int64_t max_frames, std::uint64_t seed) {
  if (model_inputs.size() != acts.utt_ids.size()) throw Error("mel_cca: input and activation utterance counts differ");
  std::vector<std::pair<std::size_t, int>> frames;
  for (std::size_t u = 0; u < model_inputs.size(); ++u) {
    const int t = model_inputs[u].num_frames();
    if (acts.layers.front()[u].rows() != t) {
      throw Error("mel_cca: frame count mismatch for " + acts.utt_ids[u]);
    }
    for (int i = 0; i < t; ++i) frames.emplace_back(u, i);
  }
  if (max_frames > 0 && static_cast<std::int64_t>(frames.size()) > max_frames) {
    Rng rng = make_stream(seed, "mel_cca/subsample");
    for (std::size_t i = 0; i < static_cast<std::size_t>(max_frames); ++i) {
      std::swap(frames[i], frames[i + uniform_index(rng, frames.size() - i)]);
    }
    frames.resize(static_cast<std::size_t>(max_frames));
    std::sort(frames.begin(), frames.end());
  }
  const Eigen::Index n = static_cast<Eigen::Index>(frames.size());
  MatrixD y(n, model_inputs.front().dim());
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto [u, t] = frames[static_cast<std::size_t>(i)];
    y.row(i) = model_inputs[u].data.row(t).cast<double>();
  }
  std::vector<LayerScore> out;
  for (int l = 0; l < acts.num_layers(); ++l) {
    const auto& layer = acts.layers[static_cast<std::size_t>(l)];
    MatrixD x(n, layer.front().cols());
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto [u, t] = frames[static_cast<std::size_t>(i)];
      x.row(i) = layer[u].row(t).cast<double>();
    }
    out.push_back({LayerActivations::layer_name(l), cca_score(x, y, cfg)});
  }
  return out;
}

void write_scores_csv(const fs::path& path, std::span<const LayerScore> scores) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "layer,score\n";
  char buf[64];
  for (const auto& s : scores) {
    std::snprintf(buf, sizeof buf, "%.9g", s.score);
    out << s.layer << ',' << buf << '\n';
  }
  if (!out) throw Error("write failed: " + path.string());
}

std::vector<LayerScore> read_scores_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != "layer,score") throw FormatError(path.string() + ": missing header");
  std::vector<LayerScore> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError(path.string() + ": bad line '" + line + "'");
    try {
      out.push_back({line.substr(0, comma), std::stod(line.substr(comma + 1))});
    } catch (const std::exception&) {
      throw FormatError(path.string() + ": bad score in '" + line + "'");
    }
  }
  return out;
}

std::string scores_svg(const std::map<std::string, std::vector<LayerScore>>& series, const std::string& title) {
  const double w = 480, h = 300, left = 50, right = 120, top = 30, bottom = 40;
  const double pw = w - left - right, ph = h - top - bottom;
  std::size_t n = 0;
  for (const auto& [name, s] : series) n = std::max(n, s.size());
  const double step = n > 1 ? pw / static_cast<double>(n - 1) : 0.0;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  std::ostringstream o;
  char buf[160];
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  o << "<text x=\"" << left << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (int tick = 0; tick <= 4; ++tick) {
    const double v = tick / 4.0;
    const double yy = top + ph * (1.0 - v);
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"end\">%.2f</text>\n",
                  left - 4, yy + 3, v);
    o << buf;
  }
  if (!series.empty()) {
    const auto& first = series.begin()->second;
    for (std::size_t i = 0; i < first.size(); ++i) {
      std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"10\" text-anchor=\"middle\">%s</text>\n",
                    left + step * static_cast<double>(i), top + ph + 14, first[i].layer.c_str());
      o << buf;
    }
  }
  int idx = 0;
  for (const auto& [name, s] : series) {
    const char* color = colors[idx % 6];
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < s.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", left + step * static_cast<double>(i),
                    top + ph * (1.0 - std::clamp(s[i].score, 0.0, 1.0)));
      o << buf;
    }
    o << "\"/>\n";
    std::snprintf(buf, sizeof buf, "<text x=\"%.1f\" y=\"%.1f\" font-size=\"11\" fill=\"%s\">%s</text>\n",
                  left + pw + 8, top + 14.0 * (idx + 1), color, name.c_str());
    o << buf;
    ++idx;
  }
  o << "</svg>\n";
  return o.str();
}

// ---- MACs ----

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

const char* kind_name(ArchLayer::Kind k) {
  switch (k) {
    case ArchLayer::Kind::kInput: return "input";
    case ArchLayer::Kind::kConv1d: return "conv1d";
    case ArchLayer::Kind::kLinear: return "linear";
    case ArchLayer::Kind::kAttention: return "attention";
    case ArchLayer::Kind::kFfn: return "ffn";
  }
  return "?";
}

}  // namespace

ArchSpec parse_arch_spec(const std::string& text, const std::string& origin) {
  ArchSpec spec;
  std::string group = "default";
  std::istringstream in(text);
  std::string raw;
  int lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    const std::string line = trim(raw.substr(0, raw.find('#')));
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "name" || word == "group") {
      std::string rest;
      std::getline(ls, rest);
      rest = trim(rest);
      if (rest.empty()) throw ConfigError(where + word + " needs a value");
      (word == "name" ? spec.name : group) = rest;
      continue;
    }
    ArchLayer l;
    l.group = group;
    if (word == "input") l.kind = ArchLayer::Kind::kInput;
    else if (word == "conv1d") l.kind = ArchLayer::Kind::kConv1d;
    else if (word == "linear") l.kind = ArchLayer::Kind::kLinear;
    else if (word == "attention") l.kind = ArchLayer::Kind::kAttention;
    else if (word == "ffn") l.kind = ArchLayer::Kind::kFfn;
    else throw ConfigError(where + "unknown layer kind '" + word + "'");

    std::map<std::string, std::int64_t> kv;
    std::string tok;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) throw ConfigError(where + "expected key=value, got '" + tok + "'");
      try {
        std::size_t used = 0;
        const std::string v = tok.substr(eq + 1);
        const long long x = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        if (!kv.emplace(tok.substr(0, eq), x).second) throw ConfigError(where + "duplicate key " + tok.substr(0, eq));
      } catch (const std::logic_error&) {
        throw ConfigError(where + "bad integer in '" + tok + "'");
      }
    }
    auto take = [&](const char* key, bool required, std::int64_t fallback) -> std::int64_t {
      auto it = kv.find(key);
      if (it == kv.end()) {
        if (required) throw ConfigError(where + word + " needs " + key + "=");
        return fallback;
      }
      const std::int64_t v = it->second;
      kv.erase(it);
      return v;
    };
    switch (l.kind) {
      case ArchLayer::Kind::kInput:
        if (kv.count("samples")) {
          l.samples = true;
          l.length = take("samples", true, 0);
          l.dim = static_cast<int>(take("dim", false, 1));
        } else {
          l.length = take("frames", true, 0);
          l.dim = static_cast<int>(take("dim", false, 0));
        }
        break;
      case ArchLayer::Kind::kConv1d:
        l.in = static_cast<int>(take("in", true, 0));
        l.out = static_cast<int>(take("out", true, 0));
        l.kernel = static_cast<int>(take("kernel", true, 0));
        l.stride = static_cast<int>(take("stride", false, 1));
        l.padding = static_cast<int>(take("padding", false, 0));
        l.groups = static_cast<int>(take("groups", false, 1));
        l.trim = static_cast<int>(take("trim", false, 0));
        break;
      case ArchLayer::Kind::kLinear:
        l.in = static_cast<int>(take("in", true, 0));
        l.out = static_cast<int>(take("out", true, 0));
        break;
      case ArchLayer::Kind::kAttention:
        l.d_model = static_cast<int>(take("d_model", true, 0));
        l.heads = static_cast<int>(take("heads", false, 1));
        l.context = take("context", false, 0);
        break;
      case ArchLayer::Kind::kFfn:
        l.d_model = static_cast<int>(take("d_model", true, 0));
        l.hidden = static_cast<int>(take("hidden", true, 0));
        break;
    }
    if (l.kind != ArchLayer::Kind::kInput) l.repeat = static_cast<int>(take("repeat", false, 1));
    if (!kv.empty()) throw ConfigError(where + "unknown key " + kv.begin()->first + " for " + word);
    spec.layers.push_back(l);
  }
  return spec;
}

std::string format_arch_spec(const ArchSpec& spec) {
  std::ostringstream o;
  if (!spec.name.empty()) o << "name " << spec.name << '\n';
  std::string group;
  for (const auto& l : spec.layers) {
    if (l.group != group) {
      group = l.group;
      o << "group " << group << '\n';
    }
    o << kind_name(l.kind);
    switch (l.kind) {
      case ArchLayer::Kind::kInput:
        o << (l.samples ? " samples=" : " frames=") << l.length;
        if (l.dim > 0 && !(l.samples && l.dim == 1)) o << " dim=" << l.dim;
        break;
      case ArchLayer::Kind::kConv1d:
        o << " in=" << l.in << " out=" << l.out << " kernel=" << l.kernel << " stride=" << l.stride;
        if (l.padding != 0) o << " padding=" << l.padding;
        if (l.groups != 1) o << " groups=" << l.groups;
        if (l.trim != 0) o << " trim=" << l.trim;
        break;
      case ArchLayer::Kind::kLinear:
        o << " in=" << l.in << " out=" << l.out;
        break;
      case ArchLayer::Kind::kAttention:
        o << " d_model=" << l.d_model << " heads=" << l.heads;
        if (l.context > 0) o << " context=" << l.context;
        break;
      case ArchLayer::Kind::kFfn:
        o << " d_model=" << l.d_model << " hidden=" << l.hidden;
        break;
    }
    if (l.kind != ArchLayer::Kind::kInput && l.repeat != 1) o << " repeat=" << l.repeat;
    o << '\n';
  }
  return o.str();
}

ArchSpec read_arch_spec(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_arch_spec(ss.str(), path.string());
}

double MacsReport::share(const std::string& group) const {
  auto it = groups.find(group);
  if (it == groups.end() || total == 0) return 0.0;
  return static_cast<double>(it->second) / static_cast<double>(total);
}

MacsReport macs_count(const ArchSpec& spec) {
  MacsReport r;
  r.arch = spec.name;
  std::int64_t len = -1;  // frames (or samples) per second entering the next layer
  int dim = 0;            // channels / feature dim entering the next layer; 0 = unknown
  std::map<std::string, int> seen;
  auto fail = [&](const std::string& msg) { throw ConfigError("arch '" + spec.name + "': " + msg); };
  auto positive = [&](std::int64_t v, const char* what) {
    if (v <= 0) fail(std::string(what) + " must be positive");
  };
  auto check_dim = [&](int want, const char* what) {
    if (dim != 0 && dim != want) {
      fail(std::string(what) + " expects dim " + std::to_string(want) + " but receives " + std::to_string(dim));
    }
  };

  for (const auto& l : spec.layers) {
    if (l.kind == ArchLayer::Kind::kInput) {
      positive(l.length, "input length");
      len = l.length;
      if (l.dim > 0) dim = l.dim;
      continue;
    }
    if (len < 0) fail("layer before any input line");
    positive(l.repeat, "repeat");
    std::int64_t macs = 0;
    for (int rep = 0; rep < l.repeat; ++rep) {
      switch (l.kind) {
        case ArchLayer::Kind::kConv1d: {
          positive(l.in, "conv1d in");
          positive(l.out, "conv1d out");
          positive(l.kernel, "conv1d kernel");
          positive(l.stride, "conv1d stride");
          positive(l.groups, "conv1d groups");
          if (l.padding < 0 || l.trim < 0) fail("conv1d padding and trim must be >= 0");
          if (l.in % l.groups != 0 || l.out % l.groups != 0) fail("conv1d channels not divisible by groups");
          check_dim(l.in, "conv1d");
          const std::int64_t span = len + 2 * l.padding - l.kernel;
          if (span < 0) fail("conv1d kernel longer than its input");
          len = span / l.stride + 1 - l.trim;
          if (len <= 0) fail("conv1d trims away its whole output");
          macs += len * l.out * (l.in / l.groups) * l.kernel;
          dim = l.out;
          break;
        }
        case ArchLayer::Kind::kLinear:
          positive(l.in, "linear in");
          positive(l.out, "linear out");
          check_dim(l.in, "linear");
          macs += len * l.in * l.out;
          dim = l.out;
          break;
        case ArchLayer::Kind::kAttention: {
          positive(l.d_model, "attention d_model");
          positive(l.heads, "attention heads");
          if (l.d_model % l.heads != 0) fail("attention d_model not divisible by heads");
          check_dim(l.d_model, "attention");
          const std::int64_t ctx = l.context > 0 ? l.context : len;
          const std::int64_t d = l.d_model;
          macs += len * 4 * d * d + 2 * len * ctx * d;
          dim = l.d_model;
          break;
        }
        case ArchLayer::Kind::kFfn:
          positive(l.d_model, "ffn d_model");
          positive(l.hidden, "ffn hidden");
          check_dim(l.d_model, "ffn");
          macs += len * 2 * static_cast<std::int64_t>(l.d_model) * l.hidden;
          dim = l.d_model;
          break;
        case ArchLayer::Kind::kInput:
          break;
      }
    }
    std::string name = l.group + "/" + kind_name(l.kind);
    const int n = ++seen[name];
    if (n > 1) name += "#" + std::to_string(n);
    r.entries.push_back({name, l.group, macs});
    r.groups[l.group] += macs;
    r.total += macs;
  }
  return r;
}

std::vector<std::string> arch_preset_names() {
  return {"melhubert-10ms", "melhubert-20ms", "melhubert-20ms-best", "hubert-base-macs"};
}

namespace {

// 12-layer, d=768 Transformer with the convolutional positional embedding
// (kernel 128, 16 groups, last output trimmed to keep the length) shared by
// both model families.
std::string transformer_block(int frames, int input_dim) {
  std::ostringstream o;
  o << "group transformer\n"
    << "input frames=" << frames << " dim=" << input_dim << "\n"
    << "linear in=" << input_dim << " out=768\n"
    << "conv1d in=768 out=768 kernel=128 stride=1 padding=64 groups=16 trim=1\n"
    << "attention d_model=768 heads=12 context=" << frames << " repeat=12\n"
    << "ffn d_model=768 hidden=3072 repeat=12\n";
  return o.str();
}

}  // namespace

ArchSpec arch_preset(const std::string& name) {
  std::string text;
  if (name == "melhubert-10ms") {
    text = "name melhubert-10ms\n" + transformer_block(100, 40);
  } else if (name == "melhubert-20ms" || name == "melhubert-20ms-best") {
    text = "name " + name + "\n" + transformer_block(50, 80);
  } else if (name == "hubert-base-macs") {
    text =
        "name hubert-base-macs\n"
        "group conv frontend\n"
        "input samples=16000\n"
        "conv1d in=1 out=512 kernel=10 stride=5\n"
        "conv1d in=512 out=512 kernel=3 stride=2 repeat=4\n"
        "conv1d in=512 out=512 kernel=2 stride=2 repeat=2\n" +
        transformer_block(50, 512);
  } else {
    std::string known;
    for (const auto& n : arch_preset_names()) known += (known.empty() ? "" : ", ") + n;
    throw ConfigError("unknown arch preset '" + name + "' (known: " + known + ")");
  }
  return parse_arch_spec(text, name);
}

std::string macs_report_json(const MacsReport& r) {
  nlohmann::ordered_json j;
  j["arch"] = r.arch;
  j["total_macs_per_second"] = r.total;
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  for (const auto& [g, m] : r.groups) groups[g] = {{"macs", m}, {"share", r.share(g)}};
  j["groups"] = groups;
  nlohmann::ordered_json entries = nlohmann::ordered_json::array();
  for (const auto& e : r.entries) entries.push_back({{"name", e.name}, {"group", e.group}, {"macs", e.macs}});
  j["layers"] = entries;
  return j.dump(2) + "\n";
}

}  // namespace melhubert
