#pragma once

// Small synthetic pre-training setup shared by the trainer, probe and
// acceptance tests: corpus -> log-Mel -> norm -> k-means labels -> targets.

#include <vector>

#include "melhubert/corpus_io.hpp"
#include "melhubert/mel_frontend.hpp"
#include "melhubert/quantizer.hpp"
#include "melhubert/trainer.hpp"

namespace melhubert::test {

struct DeskData {
  melhubert::Corpus corpus;
  melhubert::MelConfig mel;
  melhubert::NormStats norm;
  std::vector<melhubert::FeatureMatrix> logmel;      // 10 ms, unnormalized
  std::vector<melhubert::FeatureMatrix> model_rate;  // normalized, at the variant's rate
  melhubert::Codebook codebook;
  std::vector<melhubert::LabelSeq> labels10ms;
  std::vector<melhubert::TrainingUtterance> utts;
};

inline DeskData make_desk_data(int num_utts, int k, std::uint64_t seed,
                               melhubert::FrameVariant variant = melhubert::FrameVariant::k20ms, bool dual = false) {
  using namespace melhubert;
  DeskData d;
  SynthOptions so;
  so.num_utts = num_utts;
  so.classes = 3;
  so.seed = seed;
  d.corpus = synth_corpus(so);
  d.logmel = compute_corpus_features(d.corpus, d.mel);
  d.norm = estimate_norm_stats(d.logmel);
  const auto normed = to_model_rate(d.logmel, d.norm, FrameVariant::k10ms);
  KMeansOptions ko;
  ko.k = k;
  ko.seed = seed;
  d.codebook = kmeans_fit(normed, ko);
  for (const auto& f : normed) d.labels10ms.push_back(assign(d.codebook, f));
  d.model_rate = to_model_rate(d.logmel, d.norm, variant);
  for (std::size_t i = 0; i < normed.size(); ++i) {
    TrainingUtterance u;
    u.utt_id = normed[i].utt_id;
    u.features = d.model_rate[i].data;
    for (auto& t : make_targets(d.labels10ms[i], variant, dual, normed[i].num_frames())) {
      u.targets.push_back(std::move(t.labels));
    }
    d.utts.push_back(std::move(u));
  }
  return d;
}

inline melhubert::EncoderConfig desk_encoder(melhubert::FrameVariant variant = melhubert::FrameVariant::k20ms) {
  melhubert::EncoderConfig e;
  e.input_dim = variant == melhubert::FrameVariant::k20ms ? 80 : 40;
  return e;
}

// Desk training settings; the per-utterance k, steps and seed are set by callers.
inline melhubert::TrainConfig desk_train() {
  melhubert::TrainConfig c;
  c.lr = 1e-3;
  c.batch_utts = 8;
  c.accum_steps = 1;
  return c;
}

}  // namespace melhubert::test
