#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"
#include "melhubert/diff_core.hpp"

namespace melhubert {

struct EncoderConfig {
  int input_dim = 40;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 4;
  int ffn_dim = 256;
  double dropout = 0.1;
  int max_positions = 512;
  // Grouped convolution over time whose GELU output is added after the
  // absolute positions; kernel 0 disables it.
  int pos_conv_kernel = 16;
  int pos_conv_groups = 4;

  void validate() const;
  /// Closed-form parameter count of Encoder (see Encoder::Encoder for the blocks).
  std::int64_t parameter_count() const;
};

struct MaskPolicy {
  double mask_start_prob = 0.08;
  int span_len = 10;
  int min_masked_frames = 1;
  std::string stream = "masking";

  void validate() const;
};

/// Span masking: every frame starts a span with probability mask_start_prob;
/// spans are clipped at the sequence end. When fewer than min_masked_frames
/// frames are covered, random spans are added until the minimum is met.
/// Returns sorted unique indices; empty only when num_frames == 0.
std::vector<int> sample_mask(int num_frames, const MaskPolicy& policy, Rng& rng);

enum class LossKind { kHubert, kCrossEntropy };

template <typename S>
struct EncoderOutput {
  // hidden[0] is the projected input ("feat"), hidden[l] the output of layer l.
  std::vector<ad::Var<S>> hidden;
  std::vector<int> masked_indices;
};

/// Pre-norm Transformer encoder over feature frames. Masked frames are
/// replaced after the input projection by one learned vector.
template <typename S>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const EncoderConfig& cfg, std::uint64_t seed);

  const EncoderConfig& config() const { return cfg_; }

  /// `dropout_rng` null disables dropout. With `track_grad` false parameters
  /// enter the tape as constants (no gradient bookkeeping).
  EncoderOutput<S> forward(ad::Tape<S>& tape, const Mat<S>& features, std::span<const int> masked, Rng* dropout_rng,
                           bool track_grad = true);

  /// Parameters in a fixed order with stable names.
  std::vector<ad::Parameter<S>*> parameters();
  std::vector<const ad::Parameter<S>*> parameters() const;

  template <typename T>
  Encoder<T> cast() const;

 private:
  struct Layer {
    ad::Parameter<S> ln1_gain, ln1_bias;
    ad::Parameter<S> wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Parameter<S> ln2_gain, ln2_bias;
    ad::Parameter<S> fc1_w, fc1_b, fc2_w, fc2_b;
  };

  template <typename T>
  friend class Encoder;

  ad::Var<S> use(ad::Tape<S>& tape, ad::Parameter<S>& p, bool track_grad);
  ad::Var<S> pos_conv(ad::Tape<S>& tape, ad::Var<S> x, bool track_grad);

  EncoderConfig cfg_;
  ad::Parameter<S> in_w, in_b, mask_emb, pos_emb;
  ad::Parameter<S> pos_conv_w, pos_conv_b;  // (kernel * d/groups) x d, row = offset * d/groups + channel
  std::vector<Layer> layers_;
  ad::Parameter<S> final_gain, final_bias;
};

/// Cosine-similarity head: logits_c = cos(o W, m_c) / tau.
template <typename S>
struct HubertHead {
  ad::Parameter<S> proj;      // d_model x e
  ad::Parameter<S> codebook;  // k x e
  double tau = 0.1;

  HubertHead() = default;
  HubertHead(int d_model, int proj_dim, int k, double tau, std::uint64_t seed, const std::string& name = "hubert_head");
  int k() const { return static_cast<int>(codebook.value.rows()); }
  std::vector<ad::Parameter<S>*> parameters() { return {&proj, &codebook}; }
};

/// Linear classification head: logits_c = w_c . o.
template <typename S>
struct CeHead {
  ad::Parameter<S> weight;  // k x d_model

  CeHead() = default;
  CeHead(int d_model, int k, std::uint64_t seed, const std::string& name = "ce_head");
  int k() const { return static_cast<int>(weight.value.rows()); }
  std::vector<ad::Parameter<S>*> parameters() { return {&weight}; }
};

/// Summed loss over the selected frames plus bookkeeping for normalization and
/// masked-prediction accuracy.
template <typename S>
struct LossTerms {
  ad::Var<S> sum;
  int count = 0;    // number of (frame, target) terms in `sum`
  int correct = 0;  // argmax hits among those terms
};

/// Cosine/temperature loss summed over `frames` of `out_last`.
template <typename S>
LossTerms<S> hubert_loss_terms(ad::Tape<S>& tape, ad::Var<S> out_last, std::span<const int> frames,
                               std::span<const int> labels, HubertHead<S>& head, bool track_grad = true);

/// Cross-entropy summed over `frames` of `out_last`.
template <typename S>
LossTerms<S> ce_loss_terms(ad::Tape<S>& tape, ad::Var<S> out_last, std::span<const int> frames,
                           std::span<const int> labels, CeHead<S>& head, bool track_grad = true);

/// Mean over masked frames of the cosine/temperature loss.
template <typename S>
ad::Var<S> loss_hubert(ad::Tape<S>& tape, const EncoderOutput<S>& out, std::span<const int> labels,
                       HubertHead<S>& head);

/// Mean over masked frames of the cross-entropy; with `second` set, the mean of
/// the two heads' losses (odd and even sub-frame targets).
template <typename S>
ad::Var<S> loss_ce(ad::Tape<S>& tape, const EncoderOutput<S>& out, std::span<const int> labels, CeHead<S>& head,
                   std::span<const int> labels2 = {}, CeHead<S>* head2 = nullptr);

}  // namespace melhubert
