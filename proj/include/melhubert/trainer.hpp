#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"
#include "melhubert/corpus_io.hpp"
#include "melhubert/mel_frontend.hpp"
#include "melhubert/model.hpp"
#include "melhubert/quantizer.hpp"

namespace melhubert {

enum class FrameVariant { k10ms, k20ms };

int frame_factor(FrameVariant v);
std::string to_string(FrameVariant v);
FrameVariant frame_variant_from_string(const std::string& s);
std::string to_string(LossKind k);
LossKind loss_kind_from_string(const std::string& s);

struct TrainConfig {
  double lr = 1e-4;
  int batch_utts = 8;
  int accum_steps = 4;
  int epochs = 200;
  std::int64_t max_steps = 0;  // 0: no cap beyond `epochs`
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.98;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::kCrossEntropy;
  bool dual_targets = false;
  FrameVariant frame_variant = FrameVariant::k20ms;
  MaskPolicy mask;
  int hubert_proj_dim = 32;
  double hubert_tau = 0.1;

  void validate() const;
  int effective_batch() const { return batch_utts * accum_steps; }
};

struct StagePlan {
  enum class Mode { kScratch, kContinued };
  int stage = 1;
  Mode stage2_mode = Mode::kScratch;
  int target_layer = 6;
  int stage2_k = 512;

  void validate(const EncoderConfig& enc) const;
};

/// Model-rate targets from 10 ms labels: identity at 10 ms; at 20 ms the label
/// of the first frame of each pair, plus the second frame's label when dual.
/// Output length floor(T/2) matches concat_frames. When `feature_frames` is
/// non-negative it must equal the label count.
std::vector<LabelSeq> make_targets(const LabelSeq& labels10ms, FrameVariant variant, bool dual,
                                   int feature_frames = -1);

/// One utterance ready for training: normalized features at the model frame
/// rate and one or two target streams of the same length.
struct TrainingUtterance {
  std::string utt_id;
  MatrixF features;
  std::vector<std::vector<int>> targets;
};

/// Normalized log-Mel at 10 ms for every utterance of a corpus.
std::vector<FeatureMatrix> compute_corpus_features(const Corpus& corpus, const MelConfig& mel);
/// Applies norm stats and, for 20 ms, frame concatenation.
std::vector<FeatureMatrix> to_model_rate(std::span<const FeatureMatrix> logmel10ms, const NormStats& stats,
                                         FrameVariant variant);

struct Checkpoint {
  EncoderConfig encoder_config;
  MelConfig mel;
  NormStats norm;
  TrainConfig train;
  StagePlan plan;
  std::vector<std::string> codebooks;  // provenance of the targets, e.g. file paths
  std::int64_t step = 0;
  int epoch = 0;
  std::map<std::string, std::string> rng_state;

  Encoder<float> encoder;
  // One head per target stream; which vector is used follows train.loss.
  std::vector<HubertHead<float>> hubert_heads;
  std::vector<CeHead<float>> ce_heads;

  int num_heads() const { return static_cast<int>(hubert_heads.size() + ce_heads.size()); }

  std::vector<ad::Parameter<float>*> parameters();
};

/// Binary layout, little-endian:
///   "MHCK" u32 version(=1)
///   str config_json
///   u32 tensor_count, then per tensor: str name, u32 rows, u32 cols, rows*cols f32
/// where str is u32 byte length + bytes.
std::string serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::string& bytes, const std::string& origin = "checkpoint");
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);
/// FNV-1a of the serialized checkpoint.
std::uint64_t checkpoint_hash(const Checkpoint& ckpt);

struct StepMetrics {
  std::int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double masked_acc = 0.0;
  double lr = 0.0;
};

struct PretrainOptions {
  std::filesystem::path out_dir;  // empty: no files written
  bool checkpoint_every_epoch = true;
  // Copied into the checkpoint so it can be used without the run directory.
  MelConfig mel;
  NormStats norm;
  std::vector<std::string> codebooks;
};

struct PretrainResult {
  Checkpoint checkpoint;
  std::vector<StepMetrics> metrics;
};

/// Builds a fresh checkpoint (scratch) or one continuing from `init`.
Checkpoint initial_checkpoint(const StagePlan& plan, const TrainConfig& cfg, const EncoderConfig& enc,
                              int num_classes, const Checkpoint* init);

/// Masked-prediction pre-training. `data` targets must carry one stream, or two
/// when cfg.dual_targets. Stage 2 requires `init` (the stage-1 checkpoint).
PretrainResult pretrain(const StagePlan& plan, const TrainConfig& cfg, const EncoderConfig& enc,
                        std::span<const TrainingUtterance> data, int num_classes, const Checkpoint* init,
                        const PretrainOptions& opts = {});

/// Optimizer owner for one checkpoint. Each step() draws masks for the whole
/// effective batch first, so the loss is normalized by the batch's total number
/// of masked targets, then accumulates per-utterance gradients micro-batch by
/// micro-batch and applies one Adam update.
class Trainer {
 public:
  explicit Trainer(Checkpoint& ckpt);

  /// `batch` holds utterance indices into `data`, at most effective_batch().
  StepMetrics step(std::span<const TrainingUtterance> data, std::span<const std::size_t> batch);
  /// Stores the mask/dropout stream states into the checkpoint.
  void sync_rng_state();

 private:
  Checkpoint& ckpt_;
  std::vector<ad::Parameter<float>*> params_;
  std::vector<MatrixF> m_, v_;
  std::int64_t t_ = 0;
  Rng mask_rng_, dropout_rng_;
};

struct EvalResult {
  double masked_acc = 0.0;
  double unigram_acc = 0.0;  // most frequent training label as the prediction
  double loss = 0.0;
  std::int64_t frames = 0;
};

/// Held-out masked prediction with dropout off and a dedicated mask stream.
/// `train_labels` supplies the unigram baseline's most frequent label.
EvalResult evaluate_masked(const Checkpoint& ckpt, std::span<const TrainingUtterance> heldout,
                           std::span<const TrainingUtterance> train_labels, std::uint64_t seed);

/// Activations of `layer` (1..n_layers) for every utterance; no mask, no dropout.
std::vector<FeatureMatrix> extract_hidden(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features,
                                          int layer);
/// Every layer's activations over a set of utterances.
struct LayerActivations {
  std::vector<std::string> utt_ids;
  double frame_period_ms = 20.0;
  std::vector<std::vector<MatrixF>> layers;  // [layer][utt]; layer 0 is the projected input

  int num_layers() const { return static_cast<int>(layers.size()); }
  static std::string layer_name(int layer) { return layer == 0 ? "feat" : "layer" + std::to_string(layer); }
};

/// All n_layers + 1 activations; no mask, no dropout.
LayerActivations extract_all_layers(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features);

struct RelabelResult {
  Codebook codebook;
  std::vector<LabelSeq> labels;
};

RelabelResult relabel(const Checkpoint& ckpt, std::span<const FeatureMatrix> model_rate_features, int layer, int k,
                      std::uint64_t seed, std::int64_t max_frames = 2'000'000);

void write_metrics_csv(const std::filesystem::path& path, std::span<const StepMetrics> metrics);

}  // namespace melhubert
