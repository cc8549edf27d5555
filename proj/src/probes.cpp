#include "melhubert/probes.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>

namespace melhubert {

namespace fs = std::filesystem;

VectorD LayerWeights::weights() const {
  if (logits.size() == 0) return {};
  const VectorD e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

MatrixD weighted_sum(std::span<const MatrixD> hidden, const LayerWeights& w) {
  if (hidden.empty()) throw Error("weighted_sum: no layers");
  if (static_cast<Eigen::Index>(hidden.size()) != w.logits.size()) {
    throw Error("weighted_sum: " + std::to_string(hidden.size()) + " layers but " + std::to_string(w.logits.size()) +
                " logits");
  }
  const VectorD p = w.weights();
  MatrixD out = MatrixD::Zero(hidden[0].rows(), hidden[0].cols());
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    if (hidden[l].rows() != out.rows() || hidden[l].cols() != out.cols()) {
      throw Error("weighted_sum: layer " + std::to_string(l) + " shape differs from layer 0");
    }
    out += p(static_cast<Eigen::Index>(l)) * hidden[l];
  }
  return out;
}

template <typename S>
ad::Var<S> weighted_sum(std::span<const ad::Var<S>> hidden, ad::Var<S> logits) {
  if (hidden.empty()) throw Error("weighted_sum: no layers");
  if (logits.rows() != 1 || logits.cols() != static_cast<Eigen::Index>(hidden.size())) {
    throw Error("weighted_sum: logits must be 1 x " + std::to_string(hidden.size()));
  }
  ad::Var<S> w = ad::softmax_rows(logits);
  ad::Var<S> out;
  for (std::size_t l = 0; l < hidden.size(); ++l) {
    if (hidden[l].rows() != hidden[0].rows() || hidden[l].cols() != hidden[0].cols()) {
      throw Error("weighted_sum: layer " + std::to_string(l) + " shape differs from layer 0");
    }
    ad::Var<S> term = ad::scale_by(hidden[l], w, static_cast<int>(l));
    out = l == 0 ? term : ad::add(out, term);
  }
  return out;
}

template ad::Var<float> weighted_sum(std::span<const ad::Var<float>>, ad::Var<float>);
template ad::Var<double> weighted_sum(std::span<const ad::Var<double>>, ad::Var<double>);

std::string to_string(ProbeTask t) {
  switch (t) {
    case ProbeTask::kPhoneFrame: return "phone_frame";
    case ProbeTask::kSpeaker: return "speaker";
    case ProbeTask::kF0: return "f0";
  }
  return "?";
}

ProbeTask probe_task_from_string(const std::string& s) {
  if (s == "phone_frame") return ProbeTask::kPhoneFrame;
  if (s == "speaker") return ProbeTask::kSpeaker;
  if (s == "f0") return ProbeTask::kF0;
  throw ConfigError("probe task must be phone_frame, speaker or f0, got '" + s + "'");
}

void ProbeConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("probe.lr must be positive");
  for (double g : lr_grid) {
    if (!(g > 0)) throw ConfigError("probe.lr_grid entries must be positive");
  }
  if (epochs < 1) throw ConfigError("probe.epochs must be >= 1");
  if (batch_utts < 1) throw ConfigError("probe.batch_utts must be >= 1");
  if (!(heldout_fraction > 0 && heldout_fraction < 1)) throw ConfigError("probe.heldout_fraction must be in (0, 1)");
}

ProbeLabels phone_frame_labels(const LayerActivations& acts, const AlignmentFile& alignments) {
  AlignmentFile ali = alignments;
  const double ratio = acts.frame_period_ms / ali.frame_period_ms;
  const int factor = static_cast<int>(std::lround(ratio));
  if (factor < 1 || std::abs(ratio - factor) > 1e-9) throw Error("phone labels: incompatible frame periods");
  if (factor > 1) ali = ali.downsample(factor);
  ProbeLabels out;
  for (std::size_t u = 0; u < acts.utt_ids.size(); ++u) {
    if (!ali.utterances.count(acts.utt_ids[u])) throw Error("phone labels: no alignment for " + acts.utt_ids[u]);
    out.frame_classes.push_back(
        ali.frame_labels(acts.utt_ids[u], static_cast<int>(acts.layers.front()[u].rows())));
  }
  return out;
}

ProbeLabels speaker_labels(const LayerActivations& acts, const std::map<std::string, int>& speakers) {
  std::map<int, int> dense;
  for (const auto& id : acts.utt_ids) {
    auto it = speakers.find(id);
    if (it == speakers.end()) throw Error("speaker labels: no speaker for " + id);
    dense.emplace(it->second, 0);
  }
  int next = 0;
  for (auto& [spk, idx] : dense) idx = next++;
  ProbeLabels out;
  for (const auto& id : acts.utt_ids) out.utt_classes.push_back(dense.at(speakers.at(id)));
  return out;
}

ProbeLabels f0_labels(const LayerActivations& acts, std::span<const std::vector<double>> log_f0_10ms) {
  if (log_f0_10ms.size() != acts.utt_ids.size()) throw Error("f0 labels: one pitch track per utterance required");
  const int factor = static_cast<int>(std::lround(acts.frame_period_ms / 10.0));
  if (factor < 1) throw Error("f0 labels: activation period below 10 ms");
  const double nan = std::numeric_limits<double>::quiet_NaN();
  ProbeLabels out;
  for (std::size_t u = 0; u < acts.utt_ids.size(); ++u) {
    const auto t = static_cast<std::size_t>(acts.layers.front()[u].rows());
    const auto& src = log_f0_10ms[u];
    std::vector<double> v(t, nan);
    for (std::size_t i = 0; i < t; ++i) {
      double sum = 0.0;
      bool voiced = true;
      for (int j = 0; j < factor; ++j) {
        const std::size_t k = i * static_cast<std::size_t>(factor) + static_cast<std::size_t>(j);
        if (k >= src.size() || std::isnan(src[k])) {
          voiced = false;
          break;
        }
        sum += src[k];
      }
      if (voiced) v[i] = sum / factor;
    }
    out.frame_values.push_back(std::move(v));
  }
  return out;
}

namespace {

struct AdamD {
  std::vector<ad::Parameter<double>*> params;
  std::vector<MatrixD> m, v;
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  int t = 0;

  AdamD(std::vector<ad::Parameter<double>*> ps, double lr_) : params(std::move(ps)), lr(lr_) {
    for (auto* p : params) {
      m.push_back(MatrixD::Zero(p->value.rows(), p->value.cols()));
      v.push_back(MatrixD::Zero(p->value.rows(), p->value.cols()));
    }
  }
  void step() {
    ++t;
    const double c1 = 1.0 - std::pow(b1, t), c2 = 1.0 - std::pow(b2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = *params[i];
      m[i] = b1 * m[i] + (1 - b1) * p.grad;
      v[i] = b2 * v[i] + (1 - b2) * p.grad.cwiseAbs2();
      p.value.array() -= lr * (m[i].array() / c1) / ((v[i].array() / c2).sqrt() + eps);
    }
  }
};

// Activations of one utterance as doubles, [layer].
using UttLayers = std::vector<MatrixD>;

class ProbeModel {
 public:
  ProbeModel(int layers, int dim, int outputs, double bias0, std::uint64_t seed)
      : logits_("probe.layer_logits", MatrixD::Zero(1, layers)),
        w_("probe.head.weight", MatrixD::Zero(dim, outputs)),
        b_("probe.head.bias", MatrixD::Constant(1, outputs, bias0)) {
    Rng rng = make_stream(seed, "probe/init");
    const double sd = 1.0 / std::sqrt(static_cast<double>(dim));
    for (Eigen::Index i = 0; i < w_.value.size(); ++i) w_.value.data()[i] = sd * normal01(rng);
  }

  std::vector<ad::Parameter<double>*> parameters() { return {&logits_, &w_, &b_}; }
  LayerWeights layer_weights() const { return {logits_.value.row(0).transpose()}; }

  // Head output for all frames (or the pooled row for utterance tasks).
  ad::Var<double> forward(ad::Tape<double>& tape, const UttLayers& layers, bool pool) {
    std::vector<ad::Var<double>> hs;
    for (const auto& h : layers) hs.push_back(tape.constant(h));
    ad::Var<double> x = weighted_sum<double>(hs, tape.param(logits_));
    if (pool) {
      const double t = static_cast<double>(layers[0].rows());
      x = ad::matmul(tape.constant(MatrixD::Constant(1, layers[0].rows(), 1.0 / t)), x);
    }
    return ad::add_row(ad::matmul(x, tape.param(w_)), tape.param(b_));
  }

  MatrixD predict(const UttLayers& layers, bool pool) const {
    MatrixD x = weighted_sum(layers, layer_weights());
    if (pool) x = x.colwise().mean().eval();
    return (x * w_.value).rowwise() + b_.value.row(0);
  }

 private:
  ad::Parameter<double> logits_, w_, b_;
};

std::vector<int> voiced_rows(const std::vector<double>& v) {
  std::vector<int> rows;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isnan(v[i])) rows.push_back(static_cast<int>(i));
  }
  return rows;
}

// Number of loss terms an utterance contributes.
std::int64_t term_count(ProbeTask task, const ProbeLabels& labels, std::size_t u) {
  switch (task) {
    case ProbeTask::kPhoneFrame: {
      const auto& c = labels.frame_classes[u];
      return std::count_if(c.begin(), c.end(), [](int x) { return x >= 0; });
    }
    case ProbeTask::kSpeaker: return 1;
    case ProbeTask::kF0: return static_cast<std::int64_t>(voiced_rows(labels.frame_values[u]).size());
  }
  return 0;
}

struct Metric {
  double sum = 0.0;
  std::int64_t count = 0;
  double value() const { return count > 0 ? sum / static_cast<double>(count) : 0.0; }
};

Metric evaluate(ProbeModel& model, ProbeTask task, const std::vector<UttLayers>& data, const ProbeLabels& labels,
                std::span<const std::size_t> idx) {
  Metric m;
  for (std::size_t u : idx) {
    const MatrixD out = model.predict(data[u], task == ProbeTask::kSpeaker);
    if (task == ProbeTask::kF0) {
      for (int r : voiced_rows(labels.frame_values[u])) {
        const double d = out(r, 0) - labels.frame_values[u][static_cast<std::size_t>(r)];
        m.sum += d * d;
        ++m.count;
      }
      continue;
    }
    auto wrong = [&](Eigen::Index row, int target) {
      Eigen::Index best;
      out.row(row).maxCoeff(&best);
      m.sum += static_cast<int>(best) != target;
      ++m.count;
    };
    if (task == ProbeTask::kSpeaker) {
      wrong(0, labels.utt_classes[u]);
    } else {
      const auto& c = labels.frame_classes[u];
      for (std::size_t r = 0; r < c.size(); ++r) {
        if (c[r] >= 0) wrong(static_cast<Eigen::Index>(r), c[r]);
      }
    }
  }
  return m;
}

struct TrainOutcome {
  ProbeModel model;
  std::vector<double> epoch_loss;
};

TrainOutcome train_one(ProbeTask task, const std::vector<UttLayers>& data, const ProbeLabels& labels,
                       std::span<const std::size_t> train, int outputs, double lr, const ProbeConfig& cfg) {
  double bias0 = 0.0;
  if (task == ProbeTask::kF0) {
    Metric mean;
    for (std::size_t u : train) {
      for (int r : voiced_rows(labels.frame_values[u])) {
        mean.sum += labels.frame_values[u][static_cast<std::size_t>(r)];
        ++mean.count;
      }
    }
    bias0 = mean.value();
  }
  const int layers = static_cast<int>(data.front().size());
  const int dim = static_cast<int>(data.front().front().cols());
  TrainOutcome res{ProbeModel(layers, dim, outputs, bias0, cfg.seed), {}};
  ProbeModel& model = res.model;
  AdamD opt(model.parameters(), lr);
  std::vector<std::size_t> order(train.begin(), train.end());
  const std::size_t bs = static_cast<std::size_t>(cfg.batch_utts);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng shuffle = make_stream(cfg.seed, "probe/shuffle" + std::to_string(epoch));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[uniform_index(shuffle, i)]);
    double epoch_sum = 0.0;
    std::int64_t epoch_count = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::int64_t count = 0;
      for (std::size_t i = start; i < end; ++i) count += term_count(task, labels, order[i]);
      if (count == 0) continue;
      for (auto* p : opt.params) p->zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const std::size_t u = order[i];
        ad::Tape<double> tape;
        ad::Var<double> out = model.forward(tape, data[u], task == ProbeTask::kSpeaker);
        ad::Var<double> loss;
        if (task == ProbeTask::kF0) {
          const auto rows = voiced_rows(labels.frame_values[u]);
          if (rows.empty()) continue;
          MatrixD target(static_cast<Eigen::Index>(rows.size()), 1);
          for (std::size_t r = 0; r < rows.size(); ++r) {
            target(static_cast<Eigen::Index>(r), 0) = labels.frame_values[u][static_cast<std::size_t>(rows[r])];
          }
          ad::Var<double> diff = ad::sub(ad::gather_rows(out, std::span<const int>(rows)), tape.constant(target));
          loss = ad::sum(ad::mul(diff, diff));
        } else if (task == ProbeTask::kSpeaker) {
          const int target = labels.utt_classes[u];
          loss = ad::cross_entropy_sum(out, std::span<const int>(&target, 1));
        } else {
          loss = ad::cross_entropy_sum(out, std::span<const int>(labels.frame_classes[u]));
        }
        epoch_sum += loss.scalar();
        tape.backward(loss, 1.0 / static_cast<double>(count));
      }
      epoch_count += count;
      opt.step();
    }
    const double mean = epoch_count > 0 ? epoch_sum / static_cast<double>(epoch_count) : 0.0;
    if (!std::isfinite(mean)) throw NumericError("probe: non-finite loss in epoch " + std::to_string(epoch));
    res.epoch_loss.push_back(mean);
  }
  return res;
}

}  // namespace

ProbeResult probe_train(const LayerActivations& acts, const ProbeLabels& labels, const ProbeConfig& cfg) {
  cfg.validate();
  const std::size_t n = acts.utt_ids.size();
  if (n < 2) throw Error("probe: need at least two utterances");
  if (acts.layers.empty()) throw Error("probe: no layers");

  int outputs = 1;
  switch (cfg.task) {
    case ProbeTask::kPhoneFrame:
      if (labels.frame_classes.size() != n) throw Error("probe: phone_frame task needs per-frame phone labels");
      for (std::size_t u = 0; u < n; ++u) {
        if (labels.frame_classes[u].size() != static_cast<std::size_t>(acts.layers.front()[u].rows())) {
          throw Error("probe: label count differs from frame count for " + acts.utt_ids[u]);
        }
        for (int c : labels.frame_classes[u]) outputs = std::max(outputs, c + 1);
      }
      break;
    case ProbeTask::kSpeaker:
      if (labels.utt_classes.size() != n) throw Error("probe: speaker task needs one label per utterance");
      for (int c : labels.utt_classes) {
        if (c < 0) throw Error("probe: negative speaker class");
        outputs = std::max(outputs, c + 1);
      }
      break;
    case ProbeTask::kF0:
      if (labels.frame_values.size() != n) throw Error("probe: f0 task needs per-frame log-F0 values");
      for (std::size_t u = 0; u < n; ++u) {
        if (labels.frame_values[u].size() != static_cast<std::size_t>(acts.layers.front()[u].rows())) {
          throw Error("probe: log-F0 count differs from frame count for " + acts.utt_ids[u]);
        }
      }
      break;
  }

  std::vector<UttLayers> data(n);
  for (std::size_t u = 0; u < n; ++u) {
    for (const auto& layer : acts.layers) data[u].push_back(layer[u].cast<double>());
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng split = make_stream(cfg.seed, "probe/split");
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[uniform_index(split, i)]);
  const std::size_t held = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(cfg.heldout_fraction * static_cast<double>(n))), 1, n - 1);
  const std::span<const std::size_t> heldout(order.data(), held);
  std::span<const std::size_t> train(order.data() + held, n - held);

  double lr = cfg.lr;
  if (cfg.lr_grid.size() > 1 && train.size() >= 2) {
    const std::size_t dev = std::clamp<std::size_t>(train.size() / 5, 1, train.size() - 1);
    const auto dev_idx = train.first(dev);
    const auto fit_idx = train.subspan(dev);
    double best = std::numeric_limits<double>::infinity();
    for (double candidate : cfg.lr_grid) {
      auto trial = train_one(cfg.task, data, labels, fit_idx, outputs, candidate, cfg);
      const double score = evaluate(trial.model, cfg.task, data, labels, dev_idx).value();
      if (score < best) {
        best = score;
        lr = candidate;
      }
    }
  } else if (cfg.lr_grid.size() == 1) {
    lr = cfg.lr_grid.front();
  }

  auto trained = train_one(cfg.task, data, labels, train, outputs, lr, cfg);
  ProbeResult r;
  r.task = cfg.task;
  r.metric_name = cfg.task == ProbeTask::kPhoneFrame ? "frame_error"
                  : cfg.task == ProbeTask::kSpeaker  ? "speaker_error"
                                                     : "log_f0_mse";
  r.heldout_metric = evaluate(trained.model, cfg.task, data, labels, heldout).value();
  r.train_metric = evaluate(trained.model, cfg.task, data, labels, train).value();
  r.lr = lr;
  r.epoch_loss = std::move(trained.epoch_loss);
  r.layer_weights = trained.model.layer_weights();
  r.train_utts = train.size();
  r.heldout_utts = heldout.size();
  return r;
}

FrozenProbeResult probe_train(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features,
                              const ProbeLabels& labels, const ProbeConfig& cfg) {
  FrozenProbeResult r;
  r.upstream_hash_before = checkpoint_hash(ckpt);
  const LayerActivations acts = extract_all_layers(ckpt, model_rate_features);
  r.probe = probe_train(acts, labels, cfg);
  r.upstream_hash_after = checkpoint_hash(ckpt);
  if (r.upstream_hash_after != r.upstream_hash_before) throw Error("probe: upstream checkpoint changed during probing");
  return r;
}

void write_layer_weights_csv(const fs::path& path, const LayerWeights& w) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << "layer,weight\n";
  const VectorD p = w.weights();
  char buf[64];
  for (Eigen::Index l = 0; l < p.size(); ++l) {
    std::snprintf(buf, sizeof buf, "%.9g", p(l));
    out << LayerActivations::layer_name(static_cast<int>(l)) << ',' << buf << '\n';
  }
}

void write_probe_metrics_csv(const fs::path& path, const ProbeResult& r) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  char buf[256];
  out << "task,metric,heldout,train,lr,train_utts,heldout_utts\n";
  std::snprintf(buf, sizeof buf, "%s,%s,%.9g,%.9g,%.9g,%zu,%zu\n", to_string(r.task).c_str(), r.metric_name.c_str(),
                r.heldout_metric, r.train_metric, r.lr, r.train_utts, r.heldout_utts);
  out << buf;
}

F0Track estimate_f0(const WaveBuffer& wave, const F0Config& cfg) {
  const double sr = wave.sample_rate_hz;
  const auto hop = static_cast<std::ptrdiff_t>(std::lround(cfg.hop_ms * sr / 1000.0));
  const auto win = static_cast<std::ptrdiff_t>(std::lround(cfg.win_ms * sr / 1000.0));
  const auto align = static_cast<std::ptrdiff_t>(std::lround(cfg.align_win_ms * sr / 1000.0));
  const auto min_lag = static_cast<std::ptrdiff_t>(std::floor(sr / cfg.fmax_hz));
  const auto max_lag = static_cast<std::ptrdiff_t>(std::ceil(sr / cfg.fmin_hz));
  const auto n = static_cast<std::ptrdiff_t>(wave.samples.size());
  const std::ptrdiff_t frames = n < align ? 0 : 1 + (n - align) / hop;

  F0Track out;
  out.log_f0.assign(static_cast<std::size_t>(frames), std::numeric_limits<double>::quiet_NaN());
  out.voiced.assign(static_cast<std::size_t>(frames), false);
  std::vector<double> x(static_cast<std::size_t>(win));
  std::vector<double> r(static_cast<std::size_t>(max_lag + 2), 0.0);
  for (std::ptrdiff_t t = 0; t < frames; ++t) {
    // Window centred on the log-Mel frame centre; zero outside the signal.
    const std::ptrdiff_t start = t * hop + align / 2 - win / 2;
    double mean = 0.0;
    for (std::ptrdiff_t i = 0; i < win; ++i) {
      const std::ptrdiff_t k = start + i;
      x[static_cast<std::size_t>(i)] = (k >= 0 && k < n) ? wave.samples[static_cast<std::size_t>(k)] : 0.0;
      mean += x[static_cast<std::size_t>(i)];
    }
    mean /= static_cast<double>(win);
    for (double& v : x) v -= mean;

    double best = -1.0;
    for (std::ptrdiff_t lag = std::max<std::ptrdiff_t>(1, min_lag - 1); lag <= max_lag + 1 && lag < win; ++lag) {
      double xy = 0.0, xx = 0.0, yy = 0.0;
      for (std::ptrdiff_t i = 0; i + lag < win; ++i) {
        const double a = x[static_cast<std::size_t>(i)], b = x[static_cast<std::size_t>(i + lag)];
        xy += a * b;
        xx += a * a;
        yy += b * b;
      }
      const double v = (xx > 1e-12 && yy > 1e-12) ? xy / std::sqrt(xx * yy) : 0.0;
      r[static_cast<std::size_t>(lag)] = v;
      if (lag >= min_lag && lag <= max_lag) best = std::max(best, v);
    }
    if (best < cfg.voicing_threshold) continue;
    // Shortest lag whose local peak is close to the global one; avoids
    // locking onto multiples of the period.
    std::ptrdiff_t pick = -1;
    for (std::ptrdiff_t lag = min_lag; lag <= max_lag && lag + 1 < win; ++lag) {
      const double v = r[static_cast<std::size_t>(lag)];
      if (v >= 0.9 * best && v >= r[static_cast<std::size_t>(lag - 1)] && v >= r[static_cast<std::size_t>(lag + 1)]) {
        pick = lag;
        break;
      }
    }
    if (pick < 0) continue;
    const double a = r[static_cast<std::size_t>(pick - 1)], b = r[static_cast<std::size_t>(pick)],
                 c = r[static_cast<std::size_t>(pick + 1)];
    const double denom = a - 2 * b + c;
    const double shift = std::abs(denom) > 1e-12 ? std::clamp(0.5 * (a - c) / denom, -0.5, 0.5) : 0.0;
    const double f0 = sr / (static_cast<double>(pick) + shift);
    if (f0 < cfg.fmin_hz || f0 > cfg.fmax_hz) continue;
    out.log_f0[static_cast<std::size_t>(t)] = std::log(f0);
    out.voiced[static_cast<std::size_t>(t)] = true;
  }
  return out;
}

}  // namespace melhubert
