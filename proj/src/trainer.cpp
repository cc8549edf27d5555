#include "melhubert/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "binary_io.hpp"
#include "json.hpp"

namespace melhubert {

namespace fs = std::filesystem;
using nlohmann::json;

int frame_factor(FrameVariant v) { return v == FrameVariant::k20ms ? 2 : 1; }

std::string to_string(FrameVariant v) { return v == FrameVariant::k20ms ? "20ms" : "10ms"; }

FrameVariant frame_variant_from_string(const std::string& s) {
  if (s == "10ms") return FrameVariant::k10ms;
  if (s == "20ms") return FrameVariant::k20ms;
  throw ConfigError("frame_variant must be 10ms or 20ms, got '" + s + "'");
}

std::string to_string(LossKind k) { return k == LossKind::kHubert ? "cosine" : "ce"; }

LossKind loss_kind_from_string(const std::string& s) {
  if (s == "cosine") return LossKind::kHubert;
  if (s == "ce") return LossKind::kCrossEntropy;
  throw ConfigError("loss must be cosine or ce, got '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(lr >= 0) || !std::isfinite(lr)) throw ConfigError("train.lr must be finite and non-negative");
  if (batch_utts < 1) throw ConfigError("train.batch_utts must be >= 1");
  if (accum_steps < 1) throw ConfigError("train.accum_steps must be >= 1");
  if (epochs < 0) throw ConfigError("train.epochs must be >= 0");
  if (max_steps < 0) throw ConfigError("train.max_steps must be >= 0");
  if (!(adam_beta1 >= 0 && adam_beta1 < 1) || !(adam_beta2 >= 0 && adam_beta2 < 1)) {
    throw ConfigError("train: Adam betas must lie in [0, 1)");
  }
  if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be positive");
  if (weight_decay != 0.0) throw ConfigError("train.weight_decay: only 0 is supported");
  if (dual_targets && frame_variant != FrameVariant::k20ms) {
    throw ConfigError("train.dual_targets needs frame_variant 20ms");
  }
  if (hubert_proj_dim < 1) throw ConfigError("train.hubert_proj_dim must be >= 1");
  if (!(hubert_tau > 0)) throw ConfigError("train.hubert_tau must be positive");
  mask.validate();
}

void StagePlan::validate(const EncoderConfig& enc) const {
  if (stage != 1 && stage != 2) throw ConfigError("stage must be 1 or 2");
  if (target_layer < 1 || target_layer > enc.n_layers) {
    throw ConfigError("target_layer " + std::to_string(target_layer) + " outside [1, " +
                      std::to_string(enc.n_layers) + "]");
  }
  if (stage2_k < 2) throw ConfigError("stage2_k must be >= 2");
}

std::vector<LabelSeq> make_targets(const LabelSeq& labels10ms, FrameVariant variant, bool dual, int feature_frames) {
  const int t = static_cast<int>(labels10ms.labels.size());
  if (feature_frames >= 0 && feature_frames != t) {
    throw Error("make_targets: " + labels10ms.utt_id + " has " + std::to_string(t) + " labels but " +
                std::to_string(feature_frames) + " feature frames");
  }
  if (variant == FrameVariant::k10ms) {
    if (dual) throw ConfigError("make_targets: dual targets need the 20ms variant");
    return {labels10ms};
  }
  const int n = t / 2;
  LabelSeq first{labels10ms.utt_id, std::vector<int>(static_cast<std::size_t>(n)), labels10ms.frame_period_ms * 2};
  LabelSeq second = first;
  for (int i = 0; i < n; ++i) {
    first.labels[static_cast<std::size_t>(i)] = labels10ms.labels[static_cast<std::size_t>(2 * i)];
    second.labels[static_cast<std::size_t>(i)] = labels10ms.labels[static_cast<std::size_t>(2 * i + 1)];
  }
  if (!dual) return {first};
  return {first, second};
}

std::vector<FeatureMatrix> compute_corpus_features(const Corpus& corpus, const MelConfig& mel) {
  std::vector<FeatureMatrix> out;
  out.reserve(corpus.waves.size());
  for (std::size_t i = 0; i < corpus.waves.size(); ++i) {
    out.push_back(compute_logmel(corpus.waves[i], mel, corpus.manifest.entries[i].utt_id));
  }
  return out;
}

std::vector<FeatureMatrix> to_model_rate(std::span<const FeatureMatrix> logmel10ms, const NormStats& stats,
                                         FrameVariant variant) {
  std::vector<FeatureMatrix> out;
  out.reserve(logmel10ms.size());
  for (const auto& f : logmel10ms) {
    FeatureMatrix g = f;
    apply_norm(g, stats);
    out.push_back(variant == FrameVariant::k20ms ? concat_frames(g, 2) : std::move(g));
  }
  return out;
}

// ---- checkpoint ----

std::vector<ad::Parameter<float>*> Checkpoint::parameters() {
  auto ps = encoder.parameters();
  for (auto& h : hubert_heads) {
    for (auto* p : h.parameters()) ps.push_back(p);
  }
  for (auto& h : ce_heads) {
    for (auto* p : h.parameters()) ps.push_back(p);
  }
  return ps;
}

namespace {

json encoder_to_json(const EncoderConfig& c) {
  return {{"input_dim", c.input_dim}, {"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"ffn_dim", c.ffn_dim},     {"dropout", c.dropout}, {"max_positions", c.max_positions},
          {"pos_conv_kernel", c.pos_conv_kernel}, {"pos_conv_groups", c.pos_conv_groups}};
}

EncoderConfig encoder_from_json(const json& j) {
  EncoderConfig c;
  c.input_dim = j.at("input_dim");
  c.d_model = j.at("d_model");
  c.n_layers = j.at("n_layers");
  c.n_heads = j.at("n_heads");
  c.ffn_dim = j.at("ffn_dim");
  c.dropout = j.at("dropout");
  c.max_positions = j.at("max_positions");
  c.pos_conv_kernel = j.at("pos_conv_kernel");
  c.pos_conv_groups = j.at("pos_conv_groups");
  return c;
}

json mel_to_json(const MelConfig& m) {
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

json vec_to_json(const VectorD& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

VectorD vec_from_json(const json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const VectorD>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

json train_to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"batch_utts", t.batch_utts},
          {"accum_steps", t.accum_steps},
          {"epochs", t.epochs},
          {"max_steps", t.max_steps},
          {"adam_beta1", t.adam_beta1},
          {"adam_beta2", t.adam_beta2},
          {"adam_eps", t.adam_eps},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed},
          {"loss", to_string(t.loss)},
          {"dual_targets", t.dual_targets},
          {"frame_variant", to_string(t.frame_variant)},
          {"mask",
           {{"mask_start_prob", t.mask.mask_start_prob},
            {"span_len", t.mask.span_len},
            {"min_masked_frames", t.mask.min_masked_frames},
            {"stream", t.mask.stream}}},
          {"hubert_proj_dim", t.hubert_proj_dim},
          {"hubert_tau", t.hubert_tau}};
}

TrainConfig train_from_json(const json& j) {
  TrainConfig t;
  t.lr = j.at("lr");
  t.batch_utts = j.at("batch_utts");
  t.accum_steps = j.at("accum_steps");
  t.epochs = j.at("epochs");
  t.max_steps = j.at("max_steps");
  t.adam_beta1 = j.at("adam_beta1");
  t.adam_beta2 = j.at("adam_beta2");
  t.adam_eps = j.at("adam_eps");
  t.weight_decay = j.at("weight_decay");
  t.seed = j.at("seed");
  t.loss = loss_kind_from_string(j.at("loss"));
  t.dual_targets = j.at("dual_targets");
  t.frame_variant = frame_variant_from_string(j.at("frame_variant"));
  const json& m = j.at("mask");
  t.mask.mask_start_prob = m.at("mask_start_prob");
  t.mask.span_len = m.at("span_len");
  t.mask.min_masked_frames = m.at("min_masked_frames");
  t.mask.stream = m.at("stream");
  t.hubert_proj_dim = j.at("hubert_proj_dim");
  t.hubert_tau = j.at("hubert_tau");
  return t;
}

json plan_to_json(const StagePlan& p) {
  return {{"stage", p.stage},
          {"stage2_mode", p.stage2_mode == StagePlan::Mode::kContinued ? "continued" : "scratch"},
          {"target_layer", p.target_layer},
          {"stage2_k", p.stage2_k}};
}

StagePlan plan_from_json(const json& j) {
  StagePlan p;
  p.stage = j.at("stage");
  const std::string mode = j.at("stage2_mode");
  if (mode != "continued" && mode != "scratch") throw FormatError("checkpoint: bad stage2_mode " + mode);
  p.stage2_mode = mode == "continued" ? StagePlan::Mode::kContinued : StagePlan::Mode::kScratch;
  p.target_layer = j.at("target_layer");
  p.stage2_k = j.at("stage2_k");
  return p;
}

void put_tensor(detail::BinaryWriter& w, const ad::Parameter<float>& p) {
  w.str(p.name);
  w.u32(static_cast<std::uint32_t>(p.value.rows()));
  w.u32(static_cast<std::uint32_t>(p.value.cols()));
  w.f32_array(p.value.data(), static_cast<std::size_t>(p.value.size()));
}

std::vector<const ad::Parameter<float>*> const_params(const Checkpoint& c) {
  auto ps = c.encoder.parameters();
  for (const auto& h : c.hubert_heads) {
    ps.push_back(&h.proj);
    ps.push_back(&h.codebook);
  }
  for (const auto& h : c.ce_heads) ps.push_back(&h.weight);
  return ps;
}

std::string head_name(LossKind kind, int i) {
  return (kind == LossKind::kHubert ? "hubert_head." : "ce_head.") + std::to_string(i);
}

void build_heads(Checkpoint& c, int num_heads, int k, std::uint64_t seed) {
  c.hubert_heads.clear();
  c.ce_heads.clear();
  const int d = c.encoder_config.d_model;
  for (int i = 0; i < num_heads; ++i) {
    if (c.train.loss == LossKind::kHubert) {
      c.hubert_heads.emplace_back(d, c.train.hubert_proj_dim, k, c.train.hubert_tau, seed,
                                  head_name(LossKind::kHubert, i));
    } else {
      c.ce_heads.emplace_back(d, k, seed, head_name(LossKind::kCrossEntropy, i));
    }
  }
}

int head_classes(const Checkpoint& c) {
  if (!c.hubert_heads.empty()) return c.hubert_heads.front().k();
  if (!c.ce_heads.empty()) return c.ce_heads.front().k();
  return 0;
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& c) {
  json cfg;
  cfg["encoder"] = encoder_to_json(c.encoder_config);
  cfg["mel"] = mel_to_json(c.mel);
  cfg["norm"] = {{"mean", vec_to_json(c.norm.mean)}, {"std", vec_to_json(c.norm.std)}};
  cfg["train"] = train_to_json(c.train);
  cfg["plan"] = plan_to_json(c.plan);
  cfg["codebooks"] = c.codebooks;
  cfg["step"] = c.step;
  cfg["epoch"] = c.epoch;
  cfg["rng_state"] = c.rng_state;
  cfg["heads"] = {{"count", c.num_heads()}, {"k", head_classes(c)}};

  detail::BinaryWriter w;
  w.bytes("MHCK", 4);
  w.u32(1);
  w.str(cfg.dump());
  const auto ps = const_params(c);
  w.u32(static_cast<std::uint32_t>(ps.size()));
  for (const auto* p : ps) put_tensor(w, *p);
  return w.buffer();
}

Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin) {
  detail::BinaryReader r(bytes, origin);
  r.expect_magic("MHCK");
  const std::uint32_t version = r.u32();
  if (version != 1) throw UnsupportedError(origin + ": checkpoint version " + std::to_string(version));
  Checkpoint c;
  int num_heads = 0;
  int k = 0;
  try {
    const json cfg = json::parse(r.str());
    c.encoder_config = encoder_from_json(cfg.at("encoder"));
    c.mel = mel_from_json(cfg.at("mel"));
    c.norm.mean = vec_from_json(cfg.at("norm").at("mean"));
    c.norm.std = vec_from_json(cfg.at("norm").at("std"));
    c.train = train_from_json(cfg.at("train"));
    c.plan = plan_from_json(cfg.at("plan"));
    c.codebooks = cfg.at("codebooks").get<std::vector<std::string>>();
    c.step = cfg.at("step");
    c.epoch = cfg.at("epoch");
    c.rng_state = cfg.at("rng_state").get<std::map<std::string, std::string>>();
    num_heads = cfg.at("heads").at("count");
    k = cfg.at("heads").at("k");
  } catch (const json::exception& e) {
    throw FormatError(origin + ": bad config blob: " + e.what());
  }
  c.encoder_config.validate();
  c.encoder = Encoder<float>(c.encoder_config, 0);
  if (num_heads > 0) build_heads(c, num_heads, k, 0);

  std::map<std::string, ad::Parameter<float>*> by_name;
  for (auto* p : c.parameters()) by_name[p->name] = p;
  const std::uint32_t count = r.u32();
  if (count != by_name.size()) {
    throw FormatError(origin + ": expected " + std::to_string(by_name.size()) + " tensors, found " +
                      std::to_string(count));
  }
  std::set<std::string> seen;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str();
    const auto rows = r.u32();
    const auto cols = r.u32();
    auto it = by_name.find(name);
    if (it == by_name.end() || !seen.insert(name).second) {
      throw FormatError(origin + ": unexpected tensor '" + name + "'");
    }
    ad::Parameter<float>& p = *it->second;
    if (rows != p.value.rows() || cols != p.value.cols()) {
      throw FormatError(origin + ": tensor '" + name + "' has shape " + std::to_string(rows) + "x" +
                        std::to_string(cols));
    }
    r.f32_array(p.value.data(), static_cast<std::size_t>(p.value.size()));
    p.zero_grad();
  }
  r.expect_end();
  return c;
}

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  detail::BinaryWriter w;
  const std::string bytes = serialize_checkpoint(ckpt);
  w.bytes(bytes.data(), bytes.size());
  w.save_atomic(path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path.string());
}

std::uint64_t checkpoint_hash(const Checkpoint& ckpt) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : serialize_checkpoint(ckpt)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

// ---- training ----

Checkpoint initial_checkpoint(const StagePlan& plan, const TrainConfig& cfg, const EncoderConfig& enc,
                              int num_classes, const Checkpoint* init) {
  cfg.validate();
  enc.validate();
  plan.validate(enc);
  if (plan.stage == 2 && init == nullptr) throw ConfigError("stage 2 requires a stage-1 checkpoint");
  if (plan.stage == 2 && cfg.dual_targets) throw ConfigError("stage 2 uses a single target stream");
  const int expect_dim = enc.input_dim;
  if (cfg.frame_variant == FrameVariant::k20ms && expect_dim % 2 != 0) {
    throw ConfigError("20ms variant needs an even input_dim (two stacked frames)");
  }

  Checkpoint c;
  c.train = cfg;
  c.plan = plan;
  c.encoder_config = enc;
  if (plan.stage == 2 && plan.stage2_mode == StagePlan::Mode::kContinued) {
    if (init->encoder_config.input_dim != enc.input_dim || init->encoder_config.d_model != enc.d_model ||
        init->encoder_config.n_layers != enc.n_layers || init->encoder_config.n_heads != enc.n_heads ||
        init->encoder_config.ffn_dim != enc.ffn_dim || init->encoder_config.max_positions != enc.max_positions ||
        init->encoder_config.pos_conv_kernel != enc.pos_conv_kernel ||
        init->encoder_config.pos_conv_groups != enc.pos_conv_groups) {
      throw ConfigError("continued stage 2 needs the stage-1 encoder architecture");
    }
    c.encoder = Encoder<float>(enc, cfg.seed);
    auto dst = c.encoder.parameters();
    auto src = init->encoder.parameters();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i]->value = src[i]->value;
  } else {
    c.encoder = Encoder<float>(enc, cfg.seed);
  }
  build_heads(c, cfg.dual_targets ? 2 : 1, num_classes, cfg.seed);
  if (init != nullptr) {
    c.mel = init->mel;
    c.norm = init->norm;
  }
  return c;
}

Trainer::Trainer(Checkpoint& ckpt)
    : ckpt_(ckpt),
      params_(ckpt.parameters()),
      mask_rng_(make_stream(ckpt.train.seed, ckpt.train.mask.stream)),
      dropout_rng_(make_stream(ckpt.train.seed, "dropout")) {
  for (auto* p : params_) {
    m_.push_back(MatrixF::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(MatrixF::Zero(p->value.rows(), p->value.cols()));
  }
  auto restore = [&](const char* key, Rng& rng) {
    auto it = ckpt.rng_state.find(key);
    if (it == ckpt.rng_state.end()) return;
    std::istringstream in(it->second);
    in >> rng;
    if (!in) throw FormatError(std::string("checkpoint: bad rng state for ") + key);
  };
  restore("masking", mask_rng_);
  restore("dropout", dropout_rng_);
}

void Trainer::sync_rng_state() {
  std::ostringstream a, b;
  a << mask_rng_;
  b << dropout_rng_;
  ckpt_.rng_state["masking"] = a.str();
  ckpt_.rng_state["dropout"] = b.str();
}

StepMetrics Trainer::step(std::span<const TrainingUtterance> data, std::span<const std::size_t> batch) {
  const TrainConfig& cfg = ckpt_.train;
  if (batch.empty()) throw Error("train step: empty batch");
  if (batch.size() > static_cast<std::size_t>(cfg.effective_batch())) throw Error("train step: batch too large");
  const std::size_t streams = static_cast<std::size_t>(ckpt_.num_heads());

  std::vector<std::vector<int>> masks;
  std::int64_t total = 0;
  for (std::size_t idx : batch) {
    const auto& u = data[idx];
    if (u.targets.size() != streams) {
      throw Error("train step: " + u.utt_id + " has " + std::to_string(u.targets.size()) + " target streams, model has " +
                  std::to_string(streams) + " heads");
    }
    masks.push_back(sample_mask(static_cast<int>(u.features.rows()), cfg.mask, mask_rng_));
    total += static_cast<std::int64_t>(masks.back().size() * streams);
  }

  for (auto* p : params_) p->zero_grad();
  const float inv = 1.0f / static_cast<float>(total);
  double loss_sum = 0.0;
  std::int64_t correct = 0;
  const std::size_t micro = static_cast<std::size_t>(cfg.batch_utts);
  for (std::size_t start = 0; start < batch.size(); start += micro) {
    const std::size_t end = std::min(batch.size(), start + micro);
    for (std::size_t i = start; i < end; ++i) {
      const auto& u = data[batch[i]];
      ad::Tape<float> tape;
      auto out = ckpt_.encoder.forward(tape, u.features, masks[i], &dropout_rng_);
      ad::Var<float> sum;
      for (std::size_t s = 0; s < streams; ++s) {
        LossTerms<float> terms =
            cfg.loss == LossKind::kHubert
                ? hubert_loss_terms(tape, out.hidden.back(), out.masked_indices, u.targets[s], ckpt_.hubert_heads[s])
                : ce_loss_terms(tape, out.hidden.back(), out.masked_indices, u.targets[s], ckpt_.ce_heads[s]);
        sum = s == 0 ? terms.sum : ad::add(sum, terms.sum);
        correct += terms.correct;
      }
      loss_sum += sum.scalar();
      tape.backward(sum, inv);
    }
  }

  const double loss = loss_sum / static_cast<double>(total);
  if (!std::isfinite(loss)) {
    std::string ids;
    for (std::size_t idx : batch) ids += (ids.empty() ? "" : ",") + data[idx].utt_id;
    throw NumericError("non-finite loss at step " + std::to_string(ckpt_.step + 1) + " (utts: " + ids + ")");
  }

  ++t_;
  const float lr = static_cast<float>(cfg.lr);
  const float b1 = static_cast<float>(cfg.adam_beta1);
  const float b2 = static_cast<float>(cfg.adam_beta2);
  const float eps = static_cast<float>(cfg.adam_eps);
  const float c1 = 1.0f - static_cast<float>(std::pow(cfg.adam_beta1, static_cast<double>(t_)));
  const float c2 = 1.0f - static_cast<float>(std::pow(cfg.adam_beta2, static_cast<double>(t_)));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = *params_[i];
    m_[i] = b1 * m_[i] + (1.0f - b1) * p.grad;
    v_[i] = b2 * v_[i] + (1.0f - b2) * p.grad.cwiseAbs2();
    const auto update = (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    p.value.array() -= lr * update;
  }

  ++ckpt_.step;
  return {ckpt_.step, ckpt_.epoch, loss, static_cast<double>(correct) / static_cast<double>(total), cfg.lr};
}

void write_metrics_csv(const fs::path& path, std::span<const StepMetrics> metrics) {
  std::ostringstream out;
  out << "step,epoch,loss,masked_acc,lr\n";
  char line[160];
  for (const auto& m : metrics) {
    std::snprintf(line, sizeof line, "%lld,%d,%.9g,%.9g,%.9g\n", static_cast<long long>(m.step), m.epoch, m.loss,
                  m.masked_acc, m.lr);
    out << line;
  }
  detail::BinaryWriter w;
  const std::string s = out.str();
  w.bytes(s.data(), s.size());
  w.save_atomic(path);
}

PretrainResult pretrain(const StagePlan& plan, const TrainConfig& cfg, const EncoderConfig& enc,
                        std::span<const TrainingUtterance> data, int num_classes, const Checkpoint* init,
                        const PretrainOptions& opts) {
  if (data.empty()) throw Error("pretrain: no training utterances");
  PretrainResult res{initial_checkpoint(plan, cfg, enc, num_classes, init), {}};
  Checkpoint& ckpt = res.checkpoint;
  ckpt.mel = opts.mel;
  ckpt.norm = opts.norm;
  ckpt.codebooks = opts.codebooks;

  Trainer trainer(ckpt);
  const std::size_t eff = static_cast<std::size_t>(cfg.effective_batch());
  const fs::path ckpt_path = opts.out_dir / "checkpoint.mhck";
  const fs::path csv_path = opts.out_dir / "metrics.csv";
  auto persist = [&] {
    if (opts.out_dir.empty()) return;
    trainer.sync_rng_state();
    save_checkpoint(ckpt_path, ckpt);
    write_metrics_csv(csv_path, res.metrics);
  };

  bool done = false;
  for (int epoch = 0; epoch < cfg.epochs && !done; ++epoch) {
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle = make_stream(cfg.seed, "shuffle/epoch" + std::to_string(epoch));
    // Fisher-Yates with the portable index helper.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle, i)]);

    ckpt.epoch = epoch;
    for (std::size_t start = 0; start < order.size(); start += eff) {
      if (cfg.max_steps > 0 && ckpt.step >= cfg.max_steps) {
        done = true;
        break;
      }
      const std::size_t end = std::min(order.size(), start + eff);
      res.metrics.push_back(trainer.step(data, std::span(order).subspan(start, end - start)));
    }
    if (!done) ckpt.epoch = epoch + 1;
    if (opts.checkpoint_every_epoch) persist();
  }
  trainer.sync_rng_state();
  persist();
  return res;
}

EvalResult evaluate_masked(const Checkpoint& ckpt, std::span<const TrainingUtterance> heldout,
                           std::span<const TrainingUtterance> train_labels, std::uint64_t seed) {
  auto& c = const_cast<Checkpoint&>(ckpt);  // forward without gradient tracking only reads parameters
  const int k = head_classes(ckpt);
  std::vector<std::int64_t> freq(static_cast<std::size_t>(k), 0);
  for (const auto& u : train_labels) {
    for (const auto& stream : u.targets) {
      for (int l : stream) {
        if (l >= 0 && l < k) ++freq[static_cast<std::size_t>(l)];
      }
    }
  }
  const int majority = static_cast<int>(std::max_element(freq.begin(), freq.end()) - freq.begin());

  Rng rng = make_stream(seed, "eval-masking");
  EvalResult r;
  double loss = 0.0;
  std::int64_t correct = 0, unigram = 0;
  for (const auto& u : heldout) {
    const auto mask = sample_mask(static_cast<int>(u.features.rows()), ckpt.train.mask, rng);
    ad::Tape<float> tape;
    auto out = c.encoder.forward(tape, u.features, mask, nullptr, false);
    for (std::size_t s = 0; s < u.targets.size() && s < static_cast<std::size_t>(ckpt.num_heads()); ++s) {
      LossTerms<float> t = ckpt.train.loss == LossKind::kHubert
                               ? hubert_loss_terms(tape, out.hidden.back(), mask, u.targets[s], c.hubert_heads[s], false)
                               : ce_loss_terms(tape, out.hidden.back(), mask, u.targets[s], c.ce_heads[s], false);
      loss += t.sum.scalar();
      correct += t.correct;
      r.frames += t.count;
      for (int f : mask) unigram += u.targets[s][static_cast<std::size_t>(f)] == majority;
    }
  }
  if (r.frames > 0) {
    r.masked_acc = static_cast<double>(correct) / static_cast<double>(r.frames);
    r.unigram_acc = static_cast<double>(unigram) / static_cast<double>(r.frames);
    r.loss = loss / static_cast<double>(r.frames);
  }
  return r;
}

LayerActivations extract_all_layers(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features) {
  auto& enc = const_cast<Encoder<float>&>(ckpt.encoder);  // read-only forward
  LayerActivations out;
  out.layers.resize(static_cast<std::size_t>(ckpt.encoder_config.n_layers + 1));
  for (const auto& f : model_rate_features) {
    ad::Tape<float> tape;
    auto o = enc.forward(tape, f.data, {}, nullptr, false);
    for (std::size_t l = 0; l < o.hidden.size(); ++l) out.layers[l].push_back(o.hidden[l].value());
    out.utt_ids.push_back(f.utt_id);
    out.frame_period_ms = f.frame_period_ms;
  }
  return out;
}

std::vector<FeatureMatrix> extract_hidden(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features,
                                          int layer) {
  if (layer < 1 || layer > ckpt.encoder_config.n_layers) {
    throw ConfigError("extract_hidden: layer " + std::to_string(layer) + " outside [1, " +
                      std::to_string(ckpt.encoder_config.n_layers) + "]");
  }
  auto& enc = const_cast<Encoder<float>&>(ckpt.encoder);
  std::vector<FeatureMatrix> out;
  out.reserve(model_rate_features.size());
  for (const auto& f : model_rate_features) {
    ad::Tape<float> tape;
    auto o = enc.forward(tape, f.data, {}, nullptr, false);
    out.push_back({o.hidden[static_cast<std::size_t>(layer)].value(), f.frame_period_ms, f.utt_id});
  }
  return out;
}

RelabelResult relabel(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features, int layer, int k,
                      std::uint64_t seed, std::int64_t max_frames) {
  const auto hidden = extract_hidden(ckpt, model_rate_features, layer);
  KMeansOptions opts;
  opts.k = k;
  opts.seed = seed;
  opts.max_frames = max_frames;
  CodebookSource src{CodebookSource::Kind::kHidden, layer};
  RelabelResult r{kmeans_fit(hidden, opts, src), {}};
  for (const auto& h : hidden) r.labels.push_back(assign(r.codebook, h));
  return r;
}

}  // namespace melhubert
