#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "melhubert/probes.hpp"
#include "test_util.hpp"
#include "train_fixture.hpp"

using namespace melhubert;

namespace {

MatrixD gaussian(Rng& rng, Eigen::Index n, Eigen::Index d) {
  MatrixD m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
  return m;
}

double median_hz(const F0Track& t) {
  std::vector<double> f;
  for (std::size_t i = 0; i < t.voiced.size(); ++i) {
    if (t.voiced[i]) f.push_back(std::exp(t.log_f0[i]));
  }
  if (f.empty()) return 0.0;
  std::nth_element(f.begin(), f.begin() + static_cast<std::ptrdiff_t>(f.size() / 2), f.end());
  return f[f.size() / 2];
}

double voiced_fraction(const F0Track& t) {
  if (t.voiced.empty()) return 0.0;
  return static_cast<double>(std::count(t.voiced.begin(), t.voiced.end(), true)) / static_cast<double>(t.voiced.size());
}

const test::DeskData& desk() {
  static const test::DeskData d = test::make_desk_data(12, 8, 4);
  return d;
}

}  // namespace

TEST_CASE("weighted_sum: saturated and uniform logits") {
  Rng rng = make_stream(1, "ws");
  std::vector<MatrixD> h;
  for (int l = 0; l < 4; ++l) h.push_back(gaussian(rng, 7, 5));
  for (int j = 0; j < 4; ++j) {
    LayerWeights w{VectorD::Zero(4)};
    w.logits(j) = 30.0;
    CHECK((weighted_sum(h, w) - h[static_cast<std::size_t>(j)]).cwiseAbs().maxCoeff() < 1e-6);
  }
  LayerWeights uniform{VectorD::Constant(4, 0.3)};
  const MatrixD mean = (h[0] + h[1] + h[2] + h[3]) / 4.0;
  CHECK((weighted_sum(h, uniform) - mean).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(uniform.weights().sum() == doctest::Approx(1.0));

  h[2] = gaussian(rng, 6, 5);
  CHECK_THROWS_AS(weighted_sum(h, uniform), Error);
  CHECK_THROWS_AS(weighted_sum(std::span(h).first(3), uniform), Error);
}

TEST_CASE("weighted_sum: differentiable form matches and passes grad_check") {
  Rng rng = make_stream(2, "ws-grad");
  std::vector<MatrixD> h;
  for (int l = 0; l < 3; ++l) h.push_back(gaussian(rng, 6, 4));
  ad::Parameter<double> logits("logits", gaussian(rng, 1, 3));
  ad::Parameter<double> probe("probe", gaussian(rng, 4, 2));

  ad::Tape<double> tape;
  std::vector<ad::Var<double>> hv;
  for (const auto& m : h) hv.push_back(tape.constant(m));
  const MatrixD plain = weighted_sum(h, LayerWeights{logits.value.row(0).transpose()});
  CHECK((weighted_sum<double>(hv, tape.param(logits)).value() - plain).cwiseAbs().maxCoeff() < 1e-12);

  auto f = [&](ad::Tape<double>& t) {
    std::vector<ad::Var<double>> vs;
    for (const auto& m : h) vs.push_back(t.constant(m));
    ad::Var<double> s = weighted_sum<double>(vs, t.param(logits));
    ad::Var<double> z = ad::matmul(s, t.param(probe));
    return ad::sum(ad::mul(z, z));
  };
  ad::Parameter<double>* ps[] = {&logits, &probe};
  const auto res = ad::grad_check<double>(f, ps, {.num_coords = 64, .seed = 3});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("estimate_f0 on constructed signals") {
  for (double f0 : {100.0, 220.0, 330.0}) {
    const auto t = estimate_f0(synth_sawtooth(f0, 1.0));
    CHECK(voiced_fraction(t) > 0.9);
    CHECK(std::abs(median_hz(t) - f0) <= 3.0);
  }
  WaveBuffer noise;
  noise.sample_rate_hz = 16000;
  Rng rng = make_stream(4, "noise");
  for (int i = 0; i < 16000; ++i) noise.samples.push_back(static_cast<float>(0.3 * normal01(rng)));
  CHECK(voiced_fraction(estimate_f0(noise)) <= 0.1);

  WaveBuffer silence{std::vector<float>(16000, 0.0f), 16000};
  const auto s = estimate_f0(silence);
  CHECK(s.voiced.size() == 98);  // same count as 25/10 ms log-Mel framing
  CHECK(voiced_fraction(s) == 0.0);
  CHECK(estimate_f0(WaveBuffer{std::vector<float>(100, 0.1f), 16000}).voiced.empty());
}

TEST_CASE("f0 probe on Mel features of sawtooth utterances") {
  Rng rng = make_stream(5, "f0-probe");
  MelConfig mel;
  std::vector<FeatureMatrix> feats;
  std::vector<std::vector<double>> tracks;
  for (int u = 0; u < 60; ++u) {
    const double f0 = 80.0 * std::pow(300.0 / 80.0, uniform01(rng));
    const auto wave = synth_sawtooth(f0, 0.5);
    feats.push_back(compute_logmel(wave, mel, "saw" + std::to_string(u)));
    tracks.push_back(estimate_f0(wave).log_f0);
  }
  const auto stats = estimate_norm_stats(feats);
  LayerActivations acts;
  acts.frame_period_ms = 10.0;
  acts.layers.resize(1);
  for (auto& f : feats) {
    apply_norm(f, stats);
    acts.utt_ids.push_back(f.utt_id);
    acts.layers[0].push_back(f.data);
  }
  ProbeConfig cfg;
  cfg.task = ProbeTask::kF0;
  cfg.lr = 1e-2;
  cfg.epochs = 50;
  const auto r = probe_train(acts, f0_labels(acts, tracks), cfg);
  CHECK(r.metric_name == "log_f0_mse");
  CHECK(r.heldout_metric < 0.05);
  CHECK(r.epoch_loss.back() < r.epoch_loss.front());
}

TEST_CASE("speaker probe with one class has zero error") {
  Checkpoint c = initial_checkpoint(StagePlan{.target_layer = 1}, TrainConfig{}, test::desk_encoder(), 8, nullptr);
  const auto acts = extract_all_layers(c, desk().model_rate);
  std::map<std::string, int> one;
  for (const auto& id : acts.utt_ids) one[id] = 7;
  ProbeConfig cfg;
  cfg.task = ProbeTask::kSpeaker;
  cfg.epochs = 2;
  const auto r = probe_train(acts, speaker_labels(acts, one), cfg);
  CHECK(r.heldout_metric == 0.0);
  CHECK(r.train_metric == 0.0);
}

TEST_CASE("probing keeps the upstream frozen and learns layer weights") {
  Checkpoint c = initial_checkpoint(StagePlan{.target_layer = 1}, TrainConfig{}, test::desk_encoder(), 8, nullptr);
  const auto acts = extract_all_layers(c, desk().model_rate);
  ProbeConfig cfg;
  cfg.task = ProbeTask::kPhoneFrame;
  cfg.epochs = 5;
  cfg.lr_grid = {1e-2, 1e-3};
  const auto r = probe_train(c, desk().model_rate, phone_frame_labels(acts, desk().corpus.alignments), cfg);
  CHECK(r.upstream_hash_before == r.upstream_hash_after);
  CHECK(r.upstream_hash_before == checkpoint_hash(c));
  CHECK(r.probe.layer_weights.logits.size() == 3);
  CHECK(r.probe.layer_weights.weights().sum() == doctest::Approx(1.0));
  CHECK((r.probe.lr == 1e-2 || r.probe.lr == 1e-3));
  CHECK(r.probe.heldout_metric >= 0.0);
  CHECK(r.probe.heldout_metric < 2.0 / 3.0);  // better than chance over 3 phones

  test::TempDir dir("probes");
  write_layer_weights_csv(dir / "w.csv", r.probe.layer_weights);
  const std::string w = test::slurp(dir / "w.csv");
  CHECK(w.rfind("layer,weight\nfeat,", 0) == 0);
  CHECK(std::count(w.begin(), w.end(), '\n') == 4);
  write_probe_metrics_csv(dir / "m.csv", r.probe);
  CHECK(test::slurp(dir / "m.csv").find("phone_frame,frame_error,") != std::string::npos);
}

TEST_CASE("probe input validation") {
  Checkpoint c = initial_checkpoint(StagePlan{.target_layer = 1}, TrainConfig{}, test::desk_encoder(), 8, nullptr);
  const auto acts = extract_all_layers(c, desk().model_rate);
  ProbeConfig cfg;
  cfg.task = ProbeTask::kSpeaker;
  CHECK_THROWS_AS(probe_train(acts, phone_frame_labels(acts, desk().corpus.alignments), cfg), Error);
  cfg.task = ProbeTask::kF0;
  CHECK_THROWS_AS(probe_train(acts, ProbeLabels{}, cfg), Error);
  ProbeLabels short_labels = phone_frame_labels(acts, desk().corpus.alignments);
  short_labels.frame_classes[0].pop_back();
  cfg.task = ProbeTask::kPhoneFrame;
  CHECK_THROWS_AS(probe_train(acts, short_labels, cfg), Error);
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK_THROWS_AS(probe_task_from_string("asr"), ConfigError);
  CHECK_THROWS_AS(speaker_labels(acts, {}), Error);
}
