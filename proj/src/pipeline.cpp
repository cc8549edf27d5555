#include "melhubert/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <exception>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "CLI11.hpp"
#include "json.hpp"

namespace melhubert {

namespace fs = std::filesystem;
using json = nlohmann::json;

PipelineConfig::PipelineConfig() {
  kmeans.k = 16;
  train.lr = 1e-3;
  train.accum_steps = 1;
  train.max_steps = 600;
  plan.target_layer = 1;
  plan.stage2_k = 64;
  probe.lr_grid = {1e-2, 1e-3, 1e-4};
}

namespace {

// ---- value parsing ---------------------------------------------------------

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& what, const std::string& v) {
  throw ConfigError(key + ": expected " + what + ", got '" + v + "'");
}

template <typename T>
T parse_number(const std::string& key, const std::string& raw, const char* what) {
  const std::string v = trim(raw);
  T out{};
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, what, raw);
  return out;
}

int parse_int(const std::string& key, const std::string& v) { return parse_number<int>(key, v, "an integer"); }
std::int64_t parse_i64(const std::string& key, const std::string& v) {
  return parse_number<std::int64_t>(key, v, "an integer");
}
std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  return parse_number<std::uint64_t>(key, v, "a non-negative integer");
}
double parse_double(const std::string& key, const std::string& v) {
  const double d = parse_number<double>(key, v, "a number");
  if (!std::isfinite(d)) bad_value(key, "a finite number", v);
  return d;
}
bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string v = trim(raw);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, "true or false", raw);
}

std::string show(double d) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), d);
  return std::string(buf, r.ptr);
}
std::string show(bool b) { return b ? "true" : "false"; }
template <typename I>
  requires std::is_integral_v<I>
std::string show(I i) {
  return std::to_string(i);
}

// Wraps a module's enum parser so failures name the key.
template <typename F>
auto keyed(const std::string& key, F&& f) {
  try {
    return f();
  } catch (const Error& e) {
    throw ConfigError(key + ": " + e.what());
  }
}

// ---- key registry ----------------------------------------------------------

template <typename Ref>
ConfigKey number_key(std::string name, std::string doc, Ref ref) {
  using T = std::remove_reference_t<decltype(ref(std::declval<PipelineConfig&>()))>;
  auto set = [ref, name](PipelineConfig& c, const std::string& v) {
    if constexpr (std::is_same_v<T, bool>) {
      ref(c) = parse_bool(name, v);
    } else if constexpr (std::is_same_v<T, double>) {
      ref(c) = parse_double(name, v);
    } else if constexpr (std::is_same_v<T, std::uint64_t>) {
      ref(c) = parse_u64(name, v);
    } else if constexpr (std::is_same_v<T, std::int64_t>) {
      ref(c) = parse_i64(name, v);
    } else {
      ref(c) = parse_int(name, v);
    }
  };
  auto get = [ref](const PipelineConfig& c) { return show(ref(const_cast<PipelineConfig&>(c))); };
  return {std::move(name), std::move(doc), set, get};
}

template <typename Ref>
ConfigKey text_key(std::string name, std::string doc, Ref ref) {
  auto set = [ref](PipelineConfig& c, const std::string& v) { ref(c) = trim(v); };
  auto get = [ref](const PipelineConfig& c) {
    return std::string(fs::path(ref(const_cast<PipelineConfig&>(c))).string());
  };
  return {std::move(name), std::move(doc), set, get};
}

std::vector<ConfigKey> build_keys() {
  using C = PipelineConfig;
  std::vector<ConfigKey> k;
  k.push_back(number_key("run.seed", "global seed; every module derives its streams from it",
                         [](C& c) -> auto& { return c.seed; }));
  k.push_back(text_key("run.run_dir", "directory receiving the artifacts of one command",
                       [](C& c) -> auto& { return c.run_dir; }));
  k.push_back(number_key("run.workers", "threads for feature extraction and label assignment",
                         [](C& c) -> auto& { return c.workers; }));

  k.push_back(text_key("paths.corpus", "corpus manifest.tsv (or its directory)", [](C& c) -> auto& { return c.paths.corpus; }));
  k.push_back(text_key("paths.features", "feature directory written by `mel`", [](C& c) -> auto& { return c.paths.features; }));
  k.push_back(text_key("paths.norm", "normalization stats written by `mel`", [](C& c) -> auto& { return c.paths.norm; }));
  k.push_back(text_key("paths.codebook", "codebook written by `kmeans` or `relabel`", [](C& c) -> auto& { return c.paths.codebook; }));
  k.push_back(text_key("paths.labels", "label file written by `kmeans` or `relabel`", [](C& c) -> auto& { return c.paths.labels; }));
  k.push_back(text_key("paths.checkpoint", "upstream checkpoint for relabel, probe and cca",
                       [](C& c) -> auto& { return c.paths.checkpoint; }));
  k.push_back(text_key("paths.init_checkpoint", "stage-1 checkpoint required by stage 2",
                       [](C& c) -> auto& { return c.paths.init_checkpoint; }));
  k.push_back(text_key("paths.arch", "architecture spec file for `macs` (overrides analysis.arch_preset)",
                       [](C& c) -> auto& { return c.paths.arch; }));

  k.push_back(number_key("synth.num_utts", "utterances to generate", [](C& c) -> auto& { return c.synth.num_utts; }));
  k.push_back(number_key("synth.classes", "synthetic phone classes", [](C& c) -> auto& { return c.synth.classes; }));
  k.push_back(number_key("synth.num_speakers", "generator speakers", [](C& c) -> auto& { return c.synth.num_speakers; }));
  k.push_back(number_key("synth.noise_level", "white-noise standard deviation", [](C& c) -> auto& { return c.synth.noise_level; }));
  k.push_back(number_key("synth.formant_spread", "speaker formant scale range around 1",
                         [](C& c) -> auto& { return c.synth.formant_spread; }));
  k.push_back(number_key("synth.sample_rate_hz", "output sample rate", [](C& c) -> auto& { return c.synth.sample_rate_hz; }));

  k.push_back(number_key("mel.sample_rate_hz", "expected input sample rate", [](C& c) -> auto& { return c.mel.sample_rate_hz; }));
  k.push_back(number_key("mel.win_ms", "analysis window", [](C& c) -> auto& { return c.mel.win_ms; }));
  k.push_back(number_key("mel.hop_ms", "frame hop", [](C& c) -> auto& { return c.mel.hop_ms; }));
  k.push_back(number_key("mel.n_fft", "FFT size", [](C& c) -> auto& { return c.mel.n_fft; }));
  k.push_back(number_key("mel.n_mels", "Mel filters", [](C& c) -> auto& { return c.mel.n_mels; }));
  k.push_back(number_key("mel.fmin_hz", "lowest filter edge", [](C& c) -> auto& { return c.mel.fmin_hz; }));
  k.push_back(number_key("mel.fmax_hz", "highest filter edge", [](C& c) -> auto& { return c.mel.fmax_hz; }));
  k.push_back(number_key("mel.log_floor", "energy floor before the log", [](C& c) -> auto& { return c.mel.log_floor; }));

  k.push_back(number_key("kmeans.k", "clusters for stage-1 input-Mel targets", [](C& c) -> auto& { return c.kmeans.k; }));
  k.push_back(number_key("kmeans.max_iters", "Lloyd iterations", [](C& c) -> auto& { return c.kmeans.max_iters; }));
  k.push_back(number_key("kmeans.tol", "relative distortion change that stops Lloyd", [](C& c) -> auto& { return c.kmeans.tol; }));
  k.push_back(number_key("kmeans.max_frames", "frames kept for fitting (seeded subsample)",
                         [](C& c) -> auto& { return c.kmeans.max_frames; }));

  k.push_back(number_key("model.d_model", "hidden size", [](C& c) -> auto& { return c.model.d_model; }));
  k.push_back(number_key("model.n_layers", "Transformer layers", [](C& c) -> auto& { return c.model.n_layers; }));
  k.push_back(number_key("model.n_heads", "attention heads", [](C& c) -> auto& { return c.model.n_heads; }));
  k.push_back(number_key("model.ffn_dim", "feed-forward width", [](C& c) -> auto& { return c.model.ffn_dim; }));
  k.push_back(number_key("model.dropout", "dropout probability", [](C& c) -> auto& { return c.model.dropout; }));
  k.push_back(number_key("model.max_positions", "learned absolute positions", [](C& c) -> auto& { return c.model.max_positions; }));
  k.push_back(number_key("model.pos_conv_kernel", "positional convolution width (0 disables)",
                         [](C& c) -> auto& { return c.model.pos_conv_kernel; }));
  k.push_back(number_key("model.pos_conv_groups", "positional convolution groups",
                         [](C& c) -> auto& { return c.model.pos_conv_groups; }));

  k.push_back(number_key("train.lr", "Adam learning rate (no schedule)", [](C& c) -> auto& { return c.train.lr; }));
  k.push_back(number_key("train.batch_utts", "utterances per micro-batch", [](C& c) -> auto& { return c.train.batch_utts; }));
  k.push_back(number_key("train.accum_steps", "micro-batches per update", [](C& c) -> auto& { return c.train.accum_steps; }));
  k.push_back(number_key("train.epochs", "passes over the training split", [](C& c) -> auto& { return c.train.epochs; }));
  k.push_back(number_key("train.max_steps", "update cap (0: epochs only)", [](C& c) -> auto& { return c.train.max_steps; }));
  k.push_back(number_key("train.adam_beta1", "Adam beta1", [](C& c) -> auto& { return c.train.adam_beta1; }));
  k.push_back(number_key("train.adam_beta2", "Adam beta2", [](C& c) -> auto& { return c.train.adam_beta2; }));
  k.push_back(number_key("train.adam_eps", "Adam epsilon", [](C& c) -> auto& { return c.train.adam_eps; }));
  k.push_back(number_key("train.weight_decay", "must be 0", [](C& c) -> auto& { return c.train.weight_decay; }));
  k.push_back({"train.loss", "cosine (projected cosine similarity with temperature) or ce",
               [](C& c, const std::string& v) { c.train.loss = keyed("train.loss", [&] { return loss_kind_from_string(trim(v)); }); },
               [](const C& c) { return to_string(c.train.loss); }});
  k.push_back(number_key("train.dual_targets", "predict both frames of each 20 ms pair",
                         [](C& c) -> auto& { return c.train.dual_targets; }));
  k.push_back({"train.frame_variant", "10ms or 20ms (two stacked frames)",
               [](C& c, const std::string& v) {
                 c.train.frame_variant = keyed("train.frame_variant", [&] { return frame_variant_from_string(trim(v)); });
               },
               [](const C& c) { return to_string(c.train.frame_variant); }});
  k.push_back(number_key("train.mask_start_prob", "probability that a frame starts a masked span",
                         [](C& c) -> auto& { return c.train.mask.mask_start_prob; }));
  k.push_back(number_key("train.mask_span_len", "masked span length in model frames",
                         [](C& c) -> auto& { return c.train.mask.span_len; }));
  k.push_back(number_key("train.min_masked_frames", "minimum masked frames per utterance",
                         [](C& c) -> auto& { return c.train.mask.min_masked_frames; }));
  k.push_back(number_key("train.hubert_proj_dim", "cosine-loss projection size", [](C& c) -> auto& { return c.train.hubert_proj_dim; }));
  k.push_back(number_key("train.hubert_tau", "cosine-loss temperature", [](C& c) -> auto& { return c.train.hubert_tau; }));
  k.push_back(number_key("train.stage", "1 (input-Mel targets) or 2 (hidden-unit targets)",
                         [](C& c) -> auto& { return c.plan.stage; }));
  k.push_back({"train.stage2_mode", "scratch or continued",
               [](C& c, const std::string& raw) {
                 const std::string v = trim(raw);
                 if (v == "scratch") {
                   c.plan.stage2_mode = StagePlan::Mode::kScratch;
                 } else if (v == "continued") {
                   c.plan.stage2_mode = StagePlan::Mode::kContinued;
                 } else {
                   bad_value("train.stage2_mode", "scratch or continued", raw);
                 }
               },
               [](const C& c) { return std::string(c.plan.stage2_mode == StagePlan::Mode::kScratch ? "scratch" : "continued"); }});
  k.push_back(number_key("train.target_layer", "layer quantized by `relabel` (1-based)",
                         [](C& c) -> auto& { return c.plan.target_layer; }));
  k.push_back(number_key("train.stage2_k", "clusters for stage-2 targets", [](C& c) -> auto& { return c.plan.stage2_k; }));
  k.push_back(number_key("train.heldout_fraction", "trailing share of utterances kept out of training for evaluation",
                         [](C& c) -> auto& { return c.train_heldout_fraction; }));
  k.push_back(number_key("train.checkpoint_every_epoch", "rewrite the checkpoint after each epoch",
                         [](C& c) -> auto& { return c.checkpoint_every_epoch; }));

  k.push_back(text_key("analysis.cca", "phone, mel or both", [](C& c) -> auto& { return c.analysis.cca; }));
  k.push_back(number_key("analysis.cca_reg", "ridge used to find canonical directions",
                         [](C& c) -> auto& { return c.analysis.cca_cfg.reg; }));
  k.push_back(number_key("analysis.cca_max_dims", "canonical pairs averaged (0: all)",
                         [](C& c) -> auto& { return c.analysis.cca_cfg.max_dims; }));
  k.push_back(number_key("analysis.cca_max_frames", "frame cap for Mel CCA", [](C& c) -> auto& { return c.analysis.cca_max_frames; }));
  k.push_back(text_key("analysis.arch_preset", "architecture counted by `macs`", [](C& c) -> auto& { return c.analysis.arch_preset; }));

  k.push_back({"probe.task", "phone_frame, speaker or f0",
               [](C& c, const std::string& v) { c.probe.task = keyed("probe.task", [&] { return probe_task_from_string(trim(v)); }); },
               [](const C& c) { return to_string(c.probe.task); }});
  k.push_back(number_key("probe.lr", "probe learning rate", [](C& c) -> auto& { return c.probe.lr; }));
  k.push_back({"probe.lr_grid", "comma-separated learning rates chosen on a dev split (empty: probe.lr)",
               [](C& c, const std::string& raw) {
                 c.probe.lr_grid.clear();
                 std::stringstream ss(raw);
                 std::string item;
                 while (std::getline(ss, item, ',')) {
                   if (!trim(item).empty()) c.probe.lr_grid.push_back(parse_double("probe.lr_grid", item));
                 }
               },
               [](const C& c) {
                 std::string s;
                 for (std::size_t i = 0; i < c.probe.lr_grid.size(); ++i) s += (i ? "," : "") + show(c.probe.lr_grid[i]);
                 return s;
               }});
  k.push_back(number_key("probe.epochs", "probe epochs", [](C& c) -> auto& { return c.probe.epochs; }));
  k.push_back(number_key("probe.batch_utts", "utterances per probe step", [](C& c) -> auto& { return c.probe.batch_utts; }));
  k.push_back(number_key("probe.heldout_fraction", "utterances scored, never trained on",
                         [](C& c) -> auto& { return c.probe.heldout_fraction; }));
  k.push_back(text_key("probe.upstream", "checkpoint or random (untrained model from the model section)",
                       [](C& c) -> auto& { return c.probe_upstream; }));
  return k;
}

const ConfigKey* find_key(const std::string& name) {
  for (const auto& k : config_keys()) {
    if (k.name == name) return &k;
  }
  return nullptr;
}

[[noreturn]] void throw_all(const std::vector<std::string>& errors) {
  std::string msg = "invalid configuration:";
  for (const auto& e : errors) msg += "\n  - " + e;
  throw ConfigError(msg);
}

// ---- presets ---------------------------------------------------------------

struct Preset {
  std::string name;
  bool macs_only = false;
  std::vector<std::pair<std::string, std::string>> values;
};

const std::vector<Preset>& presets() {
  static const std::vector<Preset> all = [] {
    const std::vector<std::pair<std::string, std::string>> full = {
        {"mel.n_mels", "40"},          {"model.d_model", "768"},        {"model.n_layers", "12"},
        {"model.n_heads", "12"},       {"model.ffn_dim", "3072"},       {"model.max_positions", "4096"},
        {"model.pos_conv_kernel", "128"}, {"model.pos_conv_groups", "16"}, {"train.lr", "1e-4"},
        {"train.batch_utts", "8"},     {"train.accum_steps", "4"},      {"train.epochs", "200"},
        {"train.max_steps", "0"},      {"train.loss", "ce"},            {"train.target_layer", "6"},
        {"train.stage2_k", "512"},     {"kmeans.k", "512"},             {"train.dual_targets", "false"}};
    auto with = [&](std::vector<std::pair<std::string, std::string>> extra) {
      auto v = full;
      v.insert(v.end(), extra.begin(), extra.end());
      return v;
    };
    return std::vector<Preset>{
        {"melhubert-10ms", false, with({{"train.frame_variant", "10ms"}, {"analysis.arch_preset", "melhubert-10ms"}})},
        {"melhubert-20ms", false, with({{"train.frame_variant", "20ms"}, {"analysis.arch_preset", "melhubert-20ms"}})},
        {"melhubert-20ms-best", false,
         with({{"train.frame_variant", "20ms"},
               {"kmeans.k", "100"},
               {"train.dual_targets", "true"},
               {"analysis.arch_preset", "melhubert-20ms-best"}})},
        {"hubert-base-macs", true, {{"analysis.arch_preset", "hubert-base-macs"}}},
    };
  }();
  return all;
}

// ---- helpers for commands --------------------------------------------------

template <typename F>
void parallel_for(std::size_t n, int workers, F&& f) {
  const std::size_t w = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, workers)), std::max<std::size_t>(n, 1));
  if (w <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::exception_ptr failure;
  std::mutex m;
  std::vector<std::thread> threads;
  for (std::size_t t = 0; t < w; ++t) {
    threads.emplace_back([&, t] {
      for (std::size_t i = t; i < n; i += w) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(m);
          if (!failure) failure = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& th : threads) th.join();
  if (failure) std::rethrow_exception(failure);
}

fs::path manifest_path(const fs::path& corpus) {
  return fs::is_directory(corpus) ? corpus / "manifest.tsv" : corpus;
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = 1469598103934665603ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

// Size and FNV-1a digest of a file, or of every file below a directory.
json describe_path(const fs::path& p) {
  std::uint64_t h = 1469598103934665603ULL;
  std::uintmax_t bytes = 0;
  int files = 0;
  auto add = [&](const fs::path& f, const std::string& rel) {
    const std::string data = read_file(f);
    h = fnv1a(rel, h);
    h = fnv1a(data, h);
    bytes += data.size();
    ++files;
  };
  if (fs::is_directory(p)) {
    std::vector<fs::path> all;
    for (const auto& e : fs::recursive_directory_iterator(p)) {
      if (e.is_regular_file()) all.push_back(e.path());
    }
    std::sort(all.begin(), all.end());
    for (const auto& f : all) add(f, fs::relative(f, p).generic_string());
  } else {
    add(p, "");
  }
  return {{"bytes", bytes}, {"files", files}, {"fnv1a64", hex64(h)}};
}

class RunRecord {
 public:
  RunRecord(std::string command, const PipelineConfig& cfg) : command_(std::move(command)), cfg_(cfg) {
    fs::create_directories(cfg.run_dir);
  }
  void input(const std::string& key, const fs::path& p) {
    json j = describe_path(p);
    j["key"] = key;
    j["path"] = p.generic_string();
    inputs_.push_back(std::move(j));
  }
  fs::path output(const std::string& name) {
    outputs_.push_back(name);
    return cfg_.run_dir / name;
  }
  void finish() {
    std::ofstream(cfg_.run_dir / "config.ini") << format_config(cfg_);
    json m;
    m["command"] = command_;
    m["preset"] = cfg_.preset;
    m["seed"] = cfg_.seed;
    m["inputs"] = inputs_;
    json outs = json::array();
    for (const auto& name : outputs_) {
      json j = describe_path(cfg_.run_dir / name);
      j["path"] = name;
      outs.push_back(std::move(j));
    }
    m["outputs"] = outs;
    m["config_snapshot"] = "config.ini";
    std::ofstream(cfg_.run_dir / "run_manifest.json") << m.dump(2) << '\n';
  }

 private:
  std::string command_;
  const PipelineConfig& cfg_;
  json inputs_ = json::array();
  std::vector<std::string> outputs_;
};

json mel_json(const MelConfig& m) {
  return {{"sample_rate_hz", m.sample_rate_hz}, {"win_ms", m.win_ms},   {"hop_ms", m.hop_ms},
          {"n_fft", m.n_fft},                   {"n_mels", m.n_mels},   {"fmin_hz", m.fmin_hz},
          {"fmax_hz", m.fmax_hz},               {"log_floor", m.log_floor}};
}

MelConfig mel_from_json(const json& j) {
  MelConfig m;
  m.sample_rate_hz = j.at("sample_rate_hz");
  m.win_ms = j.at("win_ms");
  m.hop_ms = j.at("hop_ms");
  m.n_fft = j.at("n_fft");
  m.n_mels = j.at("n_mels");
  m.fmin_hz = j.at("fmin_hz");
  m.fmax_hz = j.at("fmax_hz");
  m.log_floor = j.at("log_floor");
  return m;
}

struct FeatureSet {
  std::vector<FeatureMatrix> logmel;  // 10 ms, unnormalized, in index order
  MelConfig mel;
};

FeatureSet load_features(const fs::path& dir) {
  FeatureSet s;
  std::ifstream idx(dir / "index.txt");
  if (!idx) throw Error("missing " + (dir / "index.txt").string());
  std::string id;
  while (std::getline(idx, id)) {
    if (trim(id).empty()) continue;
    s.logmel.push_back(read_features(dir / (trim(id) + ".feat")));
  }
  s.mel = mel_from_json(json::parse(read_file(dir / "mel.json")));
  return s;
}

AlignmentFile load_alignments(const fs::path& corpus) {
  return read_alignments(manifest_path(corpus).parent_path() / "alignments.txt");
}

EncoderConfig derived_model(const PipelineConfig& cfg, int n_mels) {
  EncoderConfig e = cfg.model;
  e.input_dim = n_mels * frame_factor(cfg.train.frame_variant);
  return e;
}

std::size_t heldout_count(std::size_t n, double fraction) {
  if (fraction <= 0.0 || n < 2) return 0;
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n))), 1, n - 1);
}

void write_json(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(2) << '\n'; }

std::string fmt(double v, int prec = 4) {
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(prec) << v;
  return ss.str();
}

// ---- commands ---------------------------------------------------------------

void cmd_synth(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  SynthOptions so = cfg.synth;
  so.seed = cfg.seed;
  const Corpus c = synth_corpus(so);
  write_corpus(rec.output("corpus"), c);
  out << "synth: " << c.manifest.entries.size() << " utterances, " << so.classes << " phones -> "
      << (cfg.run_dir / "corpus" / "manifest.tsv").string() << '\n';
}

void cmd_mel(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  rec.input("paths.corpus", cfg.paths.corpus);
  const Corpus c = load_corpus(manifest_path(cfg.paths.corpus));
  std::vector<FeatureMatrix> feats(c.waves.size());
  parallel_for(c.waves.size(), cfg.workers, [&](std::size_t i) {
    feats[i] = compute_logmel(c.waves[i], cfg.mel, c.manifest.entries[i].utt_id);
  });
  const NormStats stats = estimate_norm_stats(feats);
  const fs::path dir = rec.output("features");
  fs::create_directories(dir);
  std::ofstream idx(dir / "index.txt");
  for (const auto& f : feats) {
    write_features(dir / (f.utt_id + ".feat"), f);
    idx << f.utt_id << '\n';
  }
  idx.close();
  write_json(dir / "mel.json", mel_json(cfg.mel));
  write_norm_stats(rec.output("norm.stats"), stats);
  std::int64_t frames = 0;
  for (const auto& f : feats) frames += f.num_frames();
  out << "mel: " << feats.size() << " utterances, " << frames << " frames x " << cfg.mel.n_mels << " bins\n";
}

void cmd_kmeans(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  rec.input("paths.features", cfg.paths.features);
  rec.input("paths.norm", cfg.paths.norm);
  const FeatureSet fsets = load_features(cfg.paths.features);
  const auto normed = to_model_rate(fsets.logmel, read_norm_stats(cfg.paths.norm), FrameVariant::k10ms);
  KMeansOptions ko = cfg.kmeans;
  ko.seed = cfg.seed;
  KMeansTrace trace;
  const Codebook cb = kmeans_fit(normed, ko, CodebookSource{}, &trace);
  std::vector<LabelSeq> labels(normed.size());
  parallel_for(normed.size(), cfg.workers, [&](std::size_t i) { labels[i] = assign(cb, normed[i]); });
  write_codebook(rec.output("codebook.cb"), cb);
  write_labels(rec.output("labels.txt"), labels);
  out << "kmeans: k=" << cb.k() << " after " << trace.iterations << " iterations, total squared error "
      << (trace.distortion.empty() ? 0.0 : trace.distortion.back()) << '\n';
}

void cmd_purity(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  rec.input("paths.labels", cfg.paths.labels);
  rec.input("paths.corpus", manifest_path(cfg.paths.corpus).parent_path() / "alignments.txt");
  const auto labels = read_labels(cfg.paths.labels);
  AlignmentFile ali = load_alignments(cfg.paths.corpus);
  if (!labels.empty() && labels.front().frame_period_ms != ali.frame_period_ms) {
    const double ratio = labels.front().frame_period_ms / ali.frame_period_ms;
    if (std::abs(ratio - std::round(ratio)) > 1e-9 || ratio < 1) {
      throw ConfigError("paths.labels: frame period does not divide into the alignment period");
    }
    ali = ali.downsample(static_cast<int>(std::lround(ratio)));
  }
  const PurityReport r = purity(labels, ali);
  write_json(rec.output("purity.json"),
             {{"phone_purity", r.phone_purity}, {"cluster_purity", r.cluster_purity}, {"frames", r.frames}});
  out << "purity: phone " << fmt(r.phone_purity) << ", cluster " << fmt(r.cluster_purity) << " over " << r.frames
      << " frames\n";
}

std::vector<TrainingUtterance> training_data(const PipelineConfig& cfg, const std::vector<FeatureMatrix>& logmel,
                                             const std::vector<FeatureMatrix>& model_rate, int k) {
  std::map<std::string, LabelSeq> by_id;
  for (auto& l : read_labels(cfg.paths.labels)) by_id[l.utt_id] = std::move(l);
  const double period = logmel.front().frame_period_ms * frame_factor(cfg.train.frame_variant);
  std::vector<TrainingUtterance> data;
  for (std::size_t i = 0; i < model_rate.size(); ++i) {
    auto it = by_id.find(model_rate[i].utt_id);
    if (it == by_id.end()) throw ConfigError("paths.labels: no labels for " + model_rate[i].utt_id);
    const LabelSeq& l = it->second;
    for (int v : l.labels) {
      if (v < 0 || v >= k) throw ConfigError("paths.labels: label " + std::to_string(v) + " outside the codebook");
    }
    TrainingUtterance u;
    u.utt_id = l.utt_id;
    u.features = model_rate[i].data;
    if (l.frame_period_ms == logmel[i].frame_period_ms) {
      for (auto& t : make_targets(l, cfg.train.frame_variant, cfg.train.dual_targets, logmel[i].num_frames())) {
        u.targets.push_back(std::move(t.labels));
      }
    } else if (l.frame_period_ms == period) {
      if (cfg.train.dual_targets) throw ConfigError("train.dual_targets: needs 10 ms labels");
      if (static_cast<Eigen::Index>(l.labels.size()) != u.features.rows()) {
        throw ConfigError("paths.labels: " + l.utt_id + " has " + std::to_string(l.labels.size()) + " labels for " +
                          std::to_string(u.features.rows()) + " frames");
      }
      u.targets.push_back(l.labels);
    } else {
      throw ConfigError("paths.labels: frame period " + fmt(l.frame_period_ms, 1) + " ms does not fit the " +
                        to_string(cfg.train.frame_variant) + " model");
    }
    data.push_back(std::move(u));
  }
  return data;
}

void cmd_pretrain(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  rec.input("paths.features", cfg.paths.features);
  rec.input("paths.norm", cfg.paths.norm);
  rec.input("paths.labels", cfg.paths.labels);
  rec.input("paths.codebook", cfg.paths.codebook);
  const FeatureSet fsets = load_features(cfg.paths.features);
  if (fsets.logmel.empty()) throw Error("paths.features: no utterances");
  if (fsets.logmel.front().dim() != cfg.mel.n_mels) {
    throw ConfigError("mel.n_mels: " + std::to_string(cfg.mel.n_mels) + " but the features have " +
                      std::to_string(fsets.logmel.front().dim()) + " bins");
  }
  const NormStats norm = read_norm_stats(cfg.paths.norm);
  const auto model_rate = to_model_rate(fsets.logmel, norm, cfg.train.frame_variant);
  const Codebook cb = read_codebook(cfg.paths.codebook);
  const auto data = training_data(cfg, fsets.logmel, model_rate, cb.k());

  std::optional<Checkpoint> init;
  if (cfg.plan.stage == 2) {
    rec.input("paths.init_checkpoint", cfg.paths.init_checkpoint);
    init = load_checkpoint(cfg.paths.init_checkpoint);
  }
  const std::size_t held = heldout_count(data.size(), cfg.train_heldout_fraction);
  const std::span<const TrainingUtterance> all(data);
  const auto train = all.first(data.size() - held);
  const auto heldout = all.last(held);

  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;
  PretrainOptions po;
  po.out_dir = cfg.run_dir;
  po.checkpoint_every_epoch = cfg.checkpoint_every_epoch;
  po.mel = fsets.mel;
  po.norm = norm;
  // Content digest rather than the path, so equal inputs give equal checkpoints.
  po.codebooks = {cfg.paths.codebook.filename().string() + " fnv1a64:" + hex64(fnv1a(read_file(cfg.paths.codebook)))};
  const auto r = pretrain(cfg.plan, tc, derived_model(cfg, fsets.mel.n_mels), train, cb.k(), init ? &*init : nullptr, po);
  rec.output("checkpoint.mhck");
  rec.output("metrics.csv");

  json ev = {{"train_utts", train.size()}, {"heldout_utts", held}, {"steps", r.checkpoint.step}};
  out << "pretrain: stage " << cfg.plan.stage << ", " << r.checkpoint.step << " steps, final loss "
      << (r.metrics.empty() ? 0.0 : r.metrics.back().loss) << '\n';
  if (held > 0) {
    const EvalResult e = evaluate_masked(r.checkpoint, heldout, train, cfg.seed);
    ev["masked_acc"] = e.masked_acc;
    ev["unigram_acc"] = e.unigram_acc;
    ev["loss"] = e.loss;
    ev["frames"] = e.frames;
    out << "held-out masked accuracy " << fmt(e.masked_acc) << " (unigram baseline " << fmt(e.unigram_acc) << ")\n";
  }
  write_json(rec.output("eval.json"), ev);
}

struct Upstream {
  Checkpoint ckpt;
  std::vector<FeatureMatrix> model_rate;
};

Upstream load_upstream(const PipelineConfig& cfg, RunRecord& rec, bool allow_random) {
  rec.input("paths.features", cfg.paths.features);
  const FeatureSet fsets = load_features(cfg.paths.features);
  Upstream u;
  if (allow_random && cfg.probe_upstream == "random") {
    rec.input("paths.norm", cfg.paths.norm);
    StagePlan plan = cfg.plan;
    plan.stage = 1;
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    tc.dual_targets = false;
    u.ckpt = initial_checkpoint(plan, tc, derived_model(cfg, fsets.mel.n_mels), cfg.kmeans.k, nullptr);
    u.ckpt.mel = fsets.mel;
    u.ckpt.norm = read_norm_stats(cfg.paths.norm);
  } else {
    rec.input("paths.checkpoint", cfg.paths.checkpoint);
    u.ckpt = load_checkpoint(cfg.paths.checkpoint);
  }
  NormStats norm = u.ckpt.norm;
  if (!cfg.paths.norm.empty()) {
    if (!(allow_random && cfg.probe_upstream == "random")) rec.input("paths.norm", cfg.paths.norm);
    norm = read_norm_stats(cfg.paths.norm);
  }
  if (!fsets.logmel.empty() && fsets.logmel.front().dim() * frame_factor(u.ckpt.train.frame_variant) !=
                                   u.ckpt.encoder_config.input_dim) {
    throw ConfigError("paths.features: feature size does not match the upstream's input");
  }
  u.model_rate = to_model_rate(fsets.logmel, norm, u.ckpt.train.frame_variant);
  return u;
}

void cmd_relabel(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  const Upstream u = load_upstream(cfg, rec, false);
  const RelabelResult r = relabel(u.ckpt, u.model_rate, cfg.plan.target_layer, cfg.plan.stage2_k, cfg.seed,
                                  cfg.kmeans.max_frames);
  write_codebook(rec.output("codebook.cb"), r.codebook);
  write_labels(rec.output("labels.txt"), r.labels);
  out << "relabel: layer " << cfg.plan.target_layer << ", k=" << r.codebook.k() << ", " << r.labels.size()
      << " utterances\n";
}

void cmd_probe(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  const Upstream u = load_upstream(cfg, rec, true);
  rec.input("paths.corpus", manifest_path(cfg.paths.corpus).parent_path());
  const LayerActivations acts = extract_all_layers(u.ckpt, u.model_rate);
  ProbeLabels labels;
  switch (cfg.probe.task) {
    case ProbeTask::kPhoneFrame:
      labels = phone_frame_labels(acts, load_alignments(cfg.paths.corpus));
      break;
    case ProbeTask::kSpeaker: {
      const fs::path spk = manifest_path(cfg.paths.corpus).parent_path() / "speakers.tsv";
      labels = speaker_labels(acts, read_utt_labels(spk));
      break;
    }
    case ProbeTask::kF0: {
      const Corpus c = load_corpus(manifest_path(cfg.paths.corpus));
      std::map<std::string, std::size_t> pos;
      for (std::size_t i = 0; i < c.manifest.entries.size(); ++i) pos[c.manifest.entries[i].utt_id] = i;
      std::vector<std::vector<double>> tracks(acts.utt_ids.size());
      parallel_for(acts.utt_ids.size(), cfg.workers, [&](std::size_t i) {
        auto it = pos.find(acts.utt_ids[i]);
        if (it == pos.end()) throw Error("paths.corpus: no audio for " + acts.utt_ids[i]);
        tracks[i] = estimate_f0(c.waves[it->second]).log_f0;
      });
      labels = f0_labels(acts, tracks);
      break;
    }
  }
  ProbeConfig pc = cfg.probe;
  pc.seed = cfg.seed;
  const FrozenProbeResult r = probe_train(u.ckpt, u.model_rate, labels, pc);
  write_probe_metrics_csv(rec.output("probe_metrics.csv"), r.probe);
  write_layer_weights_csv(rec.output("layer_weights.csv"), r.probe.layer_weights);
  write_json(rec.output("probe.json"), {{"task", to_string(r.probe.task)},
                                         {"metric", r.probe.metric_name},
                                         {"heldout", r.probe.heldout_metric},
                                         {"train", r.probe.train_metric},
                                         {"lr", r.probe.lr},
                                         {"upstream", cfg.probe_upstream},
                                         {"upstream_hash_before", hex64(r.upstream_hash_before)},
                                         {"upstream_hash_after", hex64(r.upstream_hash_after)}});
  out << "probe: " << to_string(r.probe.task) << " " << r.probe.metric_name << " " << fmt(r.probe.heldout_metric)
      << " held-out (" << fmt(r.probe.train_metric) << " train, lr " << r.probe.lr << ")\n";
}

void cmd_cca(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  const Upstream u = load_upstream(cfg, rec, false);
  const LayerActivations acts = extract_all_layers(u.ckpt, u.model_rate);
  std::map<std::string, std::vector<LayerScore>> series;
  auto report = [&](const std::string& name, const std::vector<LayerScore>& s) {
    write_scores_csv(rec.output("cca_" + name + ".csv"), s);
    out << "cca " << name << ":";
    for (const auto& x : s) out << ' ' << x.layer << '=' << fmt(x.score, 3);
    out << '\n';
    series[name] = s;
  };
  if (cfg.analysis.cca != "mel") {
    rec.input("paths.corpus", manifest_path(cfg.paths.corpus).parent_path() / "alignments.txt");
    report("phone", phone_cca(acts, load_alignments(cfg.paths.corpus), cfg.analysis.cca_cfg));
  }
  if (cfg.analysis.cca != "phone") {
    report("mel", mel_cca(acts, u.model_rate, cfg.analysis.cca_cfg, cfg.analysis.cca_max_frames, cfg.seed));
  }
  std::ofstream(rec.output("cca.svg")) << scores_svg(series, "CCA similarity per layer");
}

void cmd_macs(const PipelineConfig& cfg, RunRecord& rec, std::ostream& out) {
  ArchSpec spec;
  if (!cfg.paths.arch.empty()) {
    rec.input("paths.arch", cfg.paths.arch);
    spec = read_arch_spec(cfg.paths.arch);
  } else {
    spec = arch_preset(cfg.analysis.arch_preset);
  }
  const MacsReport r = macs_count(spec);
  std::ofstream(rec.output("macs.json")) << macs_report_json(r);
  out << "macs: " << r.arch << '\n';
  for (const auto& [group, macs] : r.groups) {
    out << "  " << group << ": " << fmt(static_cast<double>(macs) / 1e9, 4) << " G/s (" << fmt(100.0 * r.share(group), 2)
        << "%)\n";
  }
  out << "  total: " << fmt(static_cast<double>(r.total) / 1e9, 4) << " G/s\n";
}

using Command = void (*)(const PipelineConfig&, RunRecord&, std::ostream&);

const std::vector<std::pair<std::string, Command>>& commands() {
  static const std::vector<std::pair<std::string, Command>> all = {
      {"synth", cmd_synth},     {"mel", cmd_mel},     {"kmeans", cmd_kmeans}, {"pretrain", cmd_pretrain},
      {"relabel", cmd_relabel}, {"probe", cmd_probe}, {"cca", cmd_cca},       {"macs", cmd_macs},
      {"purity", cmd_purity}};
  return all;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = build_keys();
  return keys;
}

std::vector<std::string> pipeline_preset_names() {
  std::vector<std::string> out;
  for (const auto& p : presets()) out.push_back(p.name);
  return out;
}

void apply_preset(PipelineConfig& cfg, const std::string& name) {
  for (const auto& p : presets()) {
    if (p.name != name) continue;
    for (const auto& [key, value] : p.values) find_key(key)->set(cfg, value);
    cfg.macs_only = p.macs_only;
    cfg.preset = name;
    return;
  }
  std::string known;
  for (const auto& n : pipeline_preset_names()) known += (known.empty() ? "" : ", ") + n;
  throw ConfigError("unknown preset '" + name + "' (known: " + known + ")");
}

PipelineConfig parse_config_text(const std::string& ini_text, PipelineConfig base, const std::string& origin) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(ini_text);
  try {
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(origin + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  std::vector<std::string> errors;
  for (const auto& [section, body] : tree) {
    if (body.empty()) {
      errors.push_back("unknown key '" + section + "' (keys belong to a [section])");
      continue;
    }
    for (const auto& [name, value] : body) {
      const std::string full = section + "." + name;
      const ConfigKey* key = find_key(full);
      if (key == nullptr) {
        errors.push_back("unknown key '" + full + "'");
        continue;
      }
      try {
        key->set(base, value.data());
      } catch (const ConfigError& e) {
        errors.push_back(e.what());
      }
    }
  }
  if (!errors.empty()) throw_all(errors);
  return base;
}

PipelineConfig resolve_config(const std::optional<fs::path>& config_file, const std::vector<std::string>& preset_names,
                              const std::vector<std::string>& overrides) {
  PipelineConfig cfg;
  for (const auto& p : preset_names) apply_preset(cfg, p);
  if (config_file) {
    std::ifstream in(*config_file);
    if (!in) throw ConfigError("cannot read config file " + config_file->string());
    std::ostringstream ss;
    ss << in.rdbuf();
    cfg = parse_config_text(ss.str(), cfg, config_file->string());
  }
  std::vector<std::string> errors;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) {
      errors.push_back("override '" + o + "' is not section.key=value");
      continue;
    }
    const std::string name = trim(o.substr(0, eq));
    const ConfigKey* key = find_key(name);
    if (key == nullptr) {
      errors.push_back("unknown key '" + name + "'");
      continue;
    }
    try {
      key->set(cfg, o.substr(eq + 1));
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  }
  if (!errors.empty()) throw_all(errors);
  return cfg;
}

std::string format_config(const PipelineConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& k : config_keys()) {
    const auto dot = k.name.find('.');
    const std::string s = k.name.substr(0, dot);
    if (s != section) {
      out << (section.empty() ? "" : "\n") << '[' << s << "]\n";
      section = s;
    }
    out << k.name.substr(dot + 1) << " = " << k.get(cfg) << '\n';
  }
  return out.str();
}

std::vector<std::string> pipeline_commands() {
  std::vector<std::string> out;
  for (const auto& c : commands()) out.push_back(c.first);
  return out;
}

void validate_for(const std::string& command, const PipelineConfig& cfg) {
  std::vector<std::string> errors;
  auto check = [&](auto&& f) {
    try {
      f();
    } catch (const ConfigError& e) {
      errors.push_back(e.what());
    }
  };
  const auto names = pipeline_commands();
  if (std::find(names.begin(), names.end(), command) == names.end()) {
    throw ConfigError("unknown command '" + command + "'");
  }
  if (cfg.macs_only && command != "macs") {
    errors.push_back("preset " + cfg.preset + " only describes an architecture for `macs`");
  }
  if (cfg.workers < 1) errors.push_back("run.workers must be >= 1");
  if (cfg.synth.num_utts < 1) errors.push_back("synth.num_utts must be >= 1");
  if (cfg.synth.classes < 2) errors.push_back("synth.classes must be >= 2");
  if (cfg.synth.num_speakers < 1) errors.push_back("synth.num_speakers must be >= 1");
  if (!(cfg.synth.noise_level >= 0)) errors.push_back("synth.noise_level must be >= 0");
  if (!(cfg.synth.formant_spread >= 0 && cfg.synth.formant_spread < 1)) {
    errors.push_back("synth.formant_spread must be in [0, 1)");
  }
  if (cfg.synth.sample_rate_hz < 8000) errors.push_back("synth.sample_rate_hz must be >= 8000");
  check([&] { cfg.mel.validate(); });
  if (cfg.kmeans.k < 1) errors.push_back("kmeans.k must be >= 1");
  if (cfg.kmeans.max_iters < 1) errors.push_back("kmeans.max_iters must be >= 1");
  if (!(cfg.kmeans.tol >= 0)) errors.push_back("kmeans.tol must be >= 0");
  if (cfg.kmeans.max_frames < 1) errors.push_back("kmeans.max_frames must be >= 1");
  const EncoderConfig enc = derived_model(cfg, cfg.mel.n_mels);
  check([&] { enc.validate(); });
  check([&] { cfg.train.validate(); });
  check([&] { cfg.plan.validate(enc); });
  if (cfg.plan.stage == 2 && cfg.train.dual_targets) errors.push_back("train.dual_targets must be false in stage 2");
  if (!(cfg.train_heldout_fraction >= 0 && cfg.train_heldout_fraction < 1)) {
    errors.push_back("train.heldout_fraction must be in [0, 1)");
  }
  if (cfg.analysis.cca != "phone" && cfg.analysis.cca != "mel" && cfg.analysis.cca != "both") {
    errors.push_back("analysis.cca must be phone, mel or both");
  }
  check([&] { cfg.analysis.cca_cfg.validate(); });
  if (cfg.analysis.cca_max_frames < 1) errors.push_back("analysis.cca_max_frames must be >= 1");
  if (command == "macs" && cfg.paths.arch.empty()) {
    const auto known = arch_preset_names();
    if (std::find(known.begin(), known.end(), cfg.analysis.arch_preset) == known.end()) {
      errors.push_back("analysis.arch_preset: unknown architecture '" + cfg.analysis.arch_preset + "'");
    }
  }
  check([&] { cfg.probe.validate(); });
  if (cfg.probe_upstream != "checkpoint" && cfg.probe_upstream != "random") {
    errors.push_back("probe.upstream must be checkpoint or random");
  }

  std::vector<std::pair<std::string, fs::path>> need;
  const auto& p = cfg.paths;
  if (command == "mel") need = {{"paths.corpus", p.corpus}};
  if (command == "kmeans") need = {{"paths.features", p.features}, {"paths.norm", p.norm}};
  if (command == "purity") need = {{"paths.labels", p.labels}, {"paths.corpus", p.corpus}};
  if (command == "pretrain") {
    need = {{"paths.features", p.features}, {"paths.norm", p.norm}, {"paths.labels", p.labels}, {"paths.codebook", p.codebook}};
    if (cfg.plan.stage == 2) need.emplace_back("paths.init_checkpoint", p.init_checkpoint);
  }
  if (command == "relabel") need = {{"paths.checkpoint", p.checkpoint}, {"paths.features", p.features}};
  if (command == "probe") {
    need = {{"paths.features", p.features}, {"paths.corpus", p.corpus}};
    need.emplace_back(cfg.probe_upstream == "random" ? std::pair{std::string("paths.norm"), p.norm}
                                                     : std::pair{std::string("paths.checkpoint"), p.checkpoint});
  }
  if (command == "cca") {
    need = {{"paths.checkpoint", p.checkpoint}, {"paths.features", p.features}};
    if (cfg.analysis.cca != "mel") need.emplace_back("paths.corpus", p.corpus);
  }
  for (const auto& [key, path] : need) {
    if (path.empty()) {
      errors.push_back(key + " is required by `" + command + "`");
    } else if (!fs::exists(path)) {
      errors.push_back(key + ": " + path.string() + " does not exist");
    }
  }
  if (!errors.empty()) throw_all(errors);
}

void run_command(const std::string& command, const PipelineConfig& cfg, std::ostream& out) {
  validate_for(command, cfg);
  for (const auto& [name, fn] : commands()) {
    if (name != command) continue;
    RunRecord rec(command, cfg);
    fn(cfg, rec, out);
    rec.finish();
    return;
  }
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"MelHuBERT desk pipeline: synthetic corpora, log-Mel features, k-means targets, masked-prediction "
               "pre-training, probes and analysis"};
  app.name("melhubert");
  app.require_subcommand(1);

  struct Options {
    std::string config;
    std::vector<std::string> presets;
    std::vector<std::string> sets;
    std::string run_dir;
    int workers = 0;
    bool dry_run = false;
  } opt;

  const std::map<std::string, std::string> help = {
      {"synth", "generate a synthetic corpus with phone alignments"},
      {"mel", "log-Mel features and normalization statistics"},
      {"kmeans", "fit a codebook on normalized 10 ms features and write labels"},
      {"pretrain", "masked-prediction pre-training (stage 1 or 2)"},
      {"relabel", "quantize one layer of a checkpoint into stage-2 labels"},
      {"probe", "train a frozen-upstream probe (phone_frame, speaker, f0)"},
      {"cca", "layer-wise CCA against phones and model inputs"},
      {"macs", "multiply-accumulate count of an architecture"},
      {"purity", "phone/cluster purity of a label file"}};
  for (const auto& name : pipeline_commands()) {
    CLI::App* sub = app.add_subcommand(name, help.at(name));
    sub->add_option("-c,--config", opt.config, "INI config file");
    sub->add_option("-p,--preset", opt.presets, "named preset, applied before the config file");
    sub->add_option("-s,--set", opt.sets, "override as section.key=value (repeatable)");
    sub->add_option("-o,--run-dir", opt.run_dir, "artifact directory (run.run_dir)");
    sub->add_option("-j,--workers", opt.workers, "threads for feature extraction and assignment (run.workers)");
    sub->add_flag("-n,--dry-run", opt.dry_run, "validate and print the resolved config; write nothing");
  }
  CLI::App* keys = app.add_subcommand("keys", "list every config key with its default");
  CLI::App* preset_list = app.add_subcommand("presets", "list named presets");

  std::vector<const char*> argv{"melhubert"};
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (keys->parsed()) {
      const PipelineConfig defaults;
      for (const auto& k : config_keys()) out << k.name << " = " << k.get(defaults) << "    # " << k.doc << '\n';
      return 0;
    }
    if (preset_list->parsed()) {
      for (const auto& n : pipeline_preset_names()) out << n << '\n';
      return 0;
    }
    const std::string command = app.get_subcommands().front()->get_name();
    std::vector<std::string> sets = opt.sets;
    if (!opt.run_dir.empty()) sets.push_back("run.run_dir=" + opt.run_dir);
    if (opt.workers != 0) sets.push_back("run.workers=" + std::to_string(opt.workers));
    PipelineConfig cfg = resolve_config(opt.config.empty() ? std::nullopt : std::optional<fs::path>(opt.config),
                                        opt.presets, sets);
    validate_for(command, cfg);
    if (opt.dry_run) {
      out << "# " << command << " (dry run: nothing written)\n" << format_config(cfg);
      return 0;
    }
    run_command(command, cfg, out);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
}

}  // namespace melhubert
