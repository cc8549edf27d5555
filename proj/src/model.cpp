#include "melhubert/model.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace melhubert {

using ad::Parameter;
using ad::Tape;
using ad::Var;

void EncoderConfig::validate() const {
  if (input_dim < 1) throw ConfigError("model.input_dim must be positive");
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
  }
  if (n_layers < 1) throw ConfigError("model.n_layers must be positive");
  if (ffn_dim < 1) throw ConfigError("model.ffn_dim must be positive");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model.dropout must be in [0, 1)");
  if (max_positions < 1) throw ConfigError("model.max_positions must be positive");
  if (pos_conv_kernel < 0) throw ConfigError("model.pos_conv_kernel must be >= 0");
  if (pos_conv_groups < 1 || d_model % pos_conv_groups != 0) {
    throw ConfigError("model.pos_conv_groups must divide model.d_model");
  }
}

std::int64_t EncoderConfig::parameter_count() const {
  const std::int64_t d = d_model, f = ffn_dim;
  const std::int64_t input = static_cast<std::int64_t>(input_dim) * d + d;  // projection
  const std::int64_t mask = d;
  const std::int64_t pos = static_cast<std::int64_t>(max_positions) * d +
                           (pos_conv_kernel > 0 ? static_cast<std::int64_t>(pos_conv_kernel) * (d / pos_conv_groups) * d + d : 0);
  const std::int64_t attention = 4 * (d * d + d);
  const std::int64_t norms = 2 * 2 * d;
  const std::int64_t ffn = d * f + f + f * d + d;
  const std::int64_t final_norm = 2 * d;
  return input + mask + pos + n_layers * (attention + norms + ffn) + final_norm;
}

void MaskPolicy::validate() const {
  if (!(mask_start_prob >= 0.0 && mask_start_prob <= 1.0)) throw ConfigError("mask.start_prob must be in [0, 1]");
  if (span_len < 1) throw ConfigError("mask.span_len must be >= 1");
  if (min_masked_frames < 1) throw ConfigError("mask.min_masked_frames must be >= 1");
}

std::vector<int> sample_mask(int num_frames, const MaskPolicy& policy, Rng& rng) {
  if (num_frames <= 0) return {};
  std::vector<char> covered(static_cast<std::size_t>(num_frames), 0);
  auto mark = [&](int start) {
    for (int t = start; t < std::min(num_frames, start + policy.span_len); ++t) covered[static_cast<std::size_t>(t)] = 1;
  };
  for (int t = 0; t < num_frames; ++t) {
    if (uniform01(rng) < policy.mask_start_prob) mark(t);
  }
  const int needed = std::min(policy.min_masked_frames, num_frames);
  while (std::count(covered.begin(), covered.end(), 1) < needed) {
    mark(static_cast<int>(uniform_index(rng, static_cast<std::size_t>(num_frames))));
  }
  std::vector<int> idx;
  for (int t = 0; t < num_frames; ++t) {
    if (covered[static_cast<std::size_t>(t)]) idx.push_back(t);
  }
  return idx;
}

namespace {

template <typename S>
Mat<S> normal_init(Rng& rng, Eigen::Index rows, Eigen::Index cols, double std) {
  Mat<S> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(std * normal01(rng));
  return m;
}

// Xavier-normal for a fan_in x fan_out weight.
template <typename S>
Parameter<S> linear_weight(const std::string& name, Rng& rng, int fan_in, int fan_out) {
  return Parameter<S>(name, normal_init<S>(rng, fan_in, fan_out, std::sqrt(2.0 / (fan_in + fan_out))));
}

template <typename S>
Parameter<S> filled(const std::string& name, Eigen::Index rows, Eigen::Index cols, S value) {
  return Parameter<S>(name, Mat<S>::Constant(rows, cols, value));
}

template <typename To, typename From>
Parameter<To> cast_param(const Parameter<From>& p) {
  Parameter<To> out(p.name, p.value.template cast<To>());
  return out;
}

}  // namespace

template <typename S>
Encoder<S>::Encoder(const EncoderConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng = make_stream(seed, "init");
  const int d = cfg_.d_model;
  in_w = linear_weight<S>("input.weight", rng, cfg_.input_dim, d);
  in_b = filled<S>("input.bias", 1, d, S(0));
  mask_emb = Parameter<S>("mask_embedding", normal_init<S>(rng, 1, d, 1.0 / std::sqrt(static_cast<double>(d))));
  pos_emb = Parameter<S>("position_embedding", normal_init<S>(rng, cfg_.max_positions, d, 0.02));
  if (cfg_.pos_conv_kernel > 0) {
    const int fan_in = cfg_.pos_conv_kernel * (d / cfg_.pos_conv_groups);
    pos_conv_w = Parameter<S>("pos_conv.weight", normal_init<S>(rng, fan_in, d, std::sqrt(2.0 / (fan_in + d / cfg_.pos_conv_groups))));
    pos_conv_b = filled<S>("pos_conv.bias", 1, d, S(0));
  }
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    Layer layer{
        filled<S>(p + "ln1.gain", 1, d, S(1)),
        filled<S>(p + "ln1.bias", 1, d, S(0)),
        linear_weight<S>(p + "attn.q.weight", rng, d, d),
        filled<S>(p + "attn.q.bias", 1, d, S(0)),
        linear_weight<S>(p + "attn.k.weight", rng, d, d),
        filled<S>(p + "attn.k.bias", 1, d, S(0)),
        linear_weight<S>(p + "attn.v.weight", rng, d, d),
        filled<S>(p + "attn.v.bias", 1, d, S(0)),
        linear_weight<S>(p + "attn.out.weight", rng, d, d),
        filled<S>(p + "attn.out.bias", 1, d, S(0)),
        filled<S>(p + "ln2.gain", 1, d, S(1)),
        filled<S>(p + "ln2.bias", 1, d, S(0)),
        linear_weight<S>(p + "ffn.fc1.weight", rng, d, cfg_.ffn_dim),
        filled<S>(p + "ffn.fc1.bias", 1, cfg_.ffn_dim, S(0)),
        linear_weight<S>(p + "ffn.fc2.weight", rng, cfg_.ffn_dim, d),
        filled<S>(p + "ffn.fc2.bias", 1, d, S(0)),
    };
    layers_.push_back(std::move(layer));
  }
  final_gain = filled<S>("final_ln.gain", 1, d, S(1));
  final_bias = filled<S>("final_ln.bias", 1, d, S(0));
}

template <typename S>
Var<S> Encoder<S>::use(Tape<S>& tape, Parameter<S>& p, bool track_grad) {
  return track_grad ? tape.param(p) : tape.constant(p.value);
}

template <typename S>
Var<S> Encoder<S>::pos_conv(Tape<S>& tape, Var<S> x, bool track_grad) {
  const int kernel = cfg_.pos_conv_kernel;
  const int groups = cfg_.pos_conv_groups;
  const int dg = cfg_.d_model / groups;
  Var<S> w = use(tape, pos_conv_w, track_grad);
  std::vector<Var<S>> outs;
  for (int g = 0; g < groups; ++g) {
    Var<S> xg = slice_cols(x, g * dg, dg);
    std::vector<Var<S>> taps;
    // output t sees inputs t - kernel/2 .. t + kernel - 1 - kernel/2
    for (int j = 0; j < kernel; ++j) taps.push_back(shift_rows(xg, j - kernel / 2));
    Var<S> cols = kernel == 1 ? taps[0] : concat_cols(std::span<const Var<S>>(taps));
    outs.push_back(matmul(cols, slice_cols(w, g * dg, dg)));
  }
  Var<S> y = groups == 1 ? outs[0] : concat_cols(std::span<const Var<S>>(outs));
  return gelu(add_row(y, use(tape, pos_conv_b, track_grad)));
}

template <typename S>
EncoderOutput<S> Encoder<S>::forward(Tape<S>& tape, const Mat<S>& features, std::span<const int> masked,
                                     Rng* dropout_rng, bool track_grad) {
  if (features.cols() != cfg_.input_dim && features.rows() > 0) {
    throw Error("forward: feature dim " + std::to_string(features.cols()) + " != model input_dim " +
                std::to_string(cfg_.input_dim));
  }
  const int frames = static_cast<int>(features.rows());
  if (frames > cfg_.max_positions) {
    throw Error("forward: " + std::to_string(frames) + " frames exceed max_positions " +
                std::to_string(cfg_.max_positions));
  }
  const double p = cfg_.dropout;
  const int d = cfg_.d_model;
  const int heads = cfg_.n_heads;
  const int dh = d / heads;
  const S attn_scale = S(1) / std::sqrt(static_cast<S>(dh));

  EncoderOutput<S> out;
  out.masked_indices.assign(masked.begin(), masked.end());

  Mat<S> input = features;
  if (frames == 0) input.resize(0, cfg_.input_dim);
  Var<S> x = add_row(matmul(tape.constant(std::move(input)), use(tape, in_w, track_grad)), use(tape, in_b, track_grad));
  if (!masked.empty()) x = replace_rows(x, masked, use(tape, mask_emb, track_grad));
  out.hidden.push_back(x);

  x = add(x, slice_rows(use(tape, pos_emb, track_grad), 0, frames));
  if (cfg_.pos_conv_kernel > 0 && frames > 0) x = add(x, pos_conv(tape, x, track_grad));
  for (auto& layer : layers_) {
    auto linear = [&](Var<S> in, Parameter<S>& w, Parameter<S>& b) {
      return add_row(matmul(in, use(tape, w, track_grad)), use(tape, b, track_grad));
    };
    Var<S> h = layer_norm(x, use(tape, layer.ln1_gain, track_grad), use(tape, layer.ln1_bias, track_grad));
    Var<S> q = dropout(linear(h, layer.wq, layer.bq), p, dropout_rng);
    Var<S> k = dropout(linear(h, layer.wk, layer.bk), p, dropout_rng);
    Var<S> v = dropout(linear(h, layer.wv, layer.bv), p, dropout_rng);
    std::vector<Var<S>> contexts;
    for (int hd = 0; hd < heads; ++hd) {
      Var<S> qh = slice_cols(q, hd * dh, dh);
      Var<S> kh = slice_cols(k, hd * dh, dh);
      Var<S> vh = slice_cols(v, hd * dh, dh);
      Var<S> attn = softmax_rows(scale(matmul_nt(qh, kh), attn_scale));
      contexts.push_back(matmul(attn, vh));
    }
    Var<S> ctx = heads == 1 ? contexts[0] : concat_cols(std::span<const Var<S>>(contexts));
    x = add(x, linear(ctx, layer.wo, layer.bo));

    Var<S> h2 = layer_norm(x, use(tape, layer.ln2_gain, track_grad), use(tape, layer.ln2_bias, track_grad));
    Var<S> f = dropout(gelu(linear(h2, layer.fc1_w, layer.fc1_b)), p, dropout_rng);
    f = dropout(linear(f, layer.fc2_w, layer.fc2_b), p, dropout_rng);
    x = add(x, f);
    out.hidden.push_back(x);
  }
  out.hidden.back() = layer_norm(out.hidden.back(), use(tape, final_gain, track_grad), use(tape, final_bias, track_grad));
  return out;
}

template <typename S>
std::vector<Parameter<S>*> Encoder<S>::parameters() {
  std::vector<Parameter<S>*> ps{&in_w, &in_b, &mask_emb, &pos_emb};
  if (cfg_.pos_conv_kernel > 0) {
    ps.push_back(&pos_conv_w);
    ps.push_back(&pos_conv_b);
  }
  for (auto& l : layers_) {
    for (auto* p : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv, &l.wo, &l.bo, &l.ln2_gain,
                    &l.ln2_bias, &l.fc1_w, &l.fc1_b, &l.fc2_w, &l.fc2_b}) {
      ps.push_back(p);
    }
  }
  ps.push_back(&final_gain);
  ps.push_back(&final_bias);
  return ps;
}

template <typename S>
std::vector<const Parameter<S>*> Encoder<S>::parameters() const {
  auto mutable_ps = const_cast<Encoder<S>*>(this)->parameters();
  return {mutable_ps.begin(), mutable_ps.end()};
}

template <typename S>
template <typename T>
Encoder<T> Encoder<S>::cast() const {
  Encoder<T> out;
  out.cfg_ = cfg_;
  out.in_w = cast_param<T>(in_w);
  out.in_b = cast_param<T>(in_b);
  out.mask_emb = cast_param<T>(mask_emb);
  out.pos_emb = cast_param<T>(pos_emb);
  out.pos_conv_w = cast_param<T>(pos_conv_w);
  out.pos_conv_b = cast_param<T>(pos_conv_b);
  for (const auto& l : layers_) {
    out.layers_.push_back({cast_param<T>(l.ln1_gain), cast_param<T>(l.ln1_bias), cast_param<T>(l.wq),
                           cast_param<T>(l.bq), cast_param<T>(l.wk), cast_param<T>(l.bk), cast_param<T>(l.wv),
                           cast_param<T>(l.bv), cast_param<T>(l.wo), cast_param<T>(l.bo), cast_param<T>(l.ln2_gain),
                           cast_param<T>(l.ln2_bias), cast_param<T>(l.fc1_w), cast_param<T>(l.fc1_b),
                           cast_param<T>(l.fc2_w), cast_param<T>(l.fc2_b)});
  }
  out.final_gain = cast_param<T>(final_gain);
  out.final_bias = cast_param<T>(final_bias);
  return out;
}

template <typename S>
HubertHead<S>::HubertHead(int d_model, int proj_dim, int k, double tau_, std::uint64_t seed, const std::string& name)
    : tau(tau_) {
  if (!(tau_ > 0)) throw ConfigError("hubert head: tau must be positive");
  if (k < 2) throw ConfigError("hubert head: k must be >= 2");
  Rng rng = make_stream(seed, "init/" + name);
  proj = linear_weight<S>(name + ".proj", rng, d_model, proj_dim);
  codebook = Parameter<S>(name + ".codebook", normal_init<S>(rng, k, proj_dim, 1.0));
}

template <typename S>
CeHead<S>::CeHead(int d_model, int k, std::uint64_t seed, const std::string& name) {
  if (k < 2) throw ConfigError("ce head: k must be >= 2");
  Rng rng = make_stream(seed, "init/" + name);
  weight = linear_weight<S>(name + ".weight", rng, k, d_model);
}

namespace {

template <typename S>
std::vector<int> targets_at(std::span<const int> frames, std::span<const int> labels, int k) {
  std::vector<int> t;
  t.reserve(frames.size());
  for (int f : frames) {
    if (f < 0 || static_cast<std::size_t>(f) >= labels.size()) throw Error("loss: frame index outside label sequence");
    const int l = labels[static_cast<std::size_t>(f)];
    if (l < 0 || l >= k) throw Error("loss: label " + std::to_string(l) + " outside [0, " + std::to_string(k) + ")");
    t.push_back(l);
  }
  return t;
}

template <typename S>
int count_correct(const Mat<S>& logits, const std::vector<int>& targets) {
  int hits = 0;
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best;
    logits.row(r).maxCoeff(&best);
    hits += static_cast<int>(best) == targets[static_cast<std::size_t>(r)];
  }
  return hits;
}

template <typename S>
void check_label_length(const Var<S>& out_last, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != out_last.rows()) {
    throw Error("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(out_last.rows()) +
                " frames");
  }
}

}  // namespace

template <typename S>
LossTerms<S> hubert_loss_terms(Tape<S>& tape, Var<S> out_last, std::span<const int> frames,
                               std::span<const int> labels, HubertHead<S>& head, bool track_grad) {
  check_label_length(out_last, labels);
  const std::vector<int> targets = targets_at<S>(frames, labels, head.k());
  auto use = [&](Parameter<S>& p) { return track_grad ? tape.param(p) : tape.constant(p.value); };
  Var<S> o = gather_rows(out_last, frames);
  Var<S> projected = l2_normalize_rows(matmul(o, use(head.proj)));
  Var<S> codes = l2_normalize_rows(use(head.codebook));
  Var<S> logits = scale(matmul_nt(projected, codes), static_cast<S>(1.0 / head.tau));
  return {cross_entropy_sum(logits, targets), static_cast<int>(targets.size()), count_correct(logits.value(), targets)};
}

template <typename S>
LossTerms<S> ce_loss_terms(Tape<S>& tape, Var<S> out_last, std::span<const int> frames, std::span<const int> labels,
                           CeHead<S>& head, bool track_grad) {
  check_label_length(out_last, labels);
  const std::vector<int> targets = targets_at<S>(frames, labels, head.k());
  Var<S> o = gather_rows(out_last, frames);
  Var<S> logits = matmul_nt(o, track_grad ? tape.param(head.weight) : tape.constant(head.weight.value));
  return {cross_entropy_sum(logits, targets), static_cast<int>(targets.size()), count_correct(logits.value(), targets)};
}

template <typename S>
Var<S> loss_hubert(Tape<S>& tape, const EncoderOutput<S>& out, std::span<const int> labels, HubertHead<S>& head) {
  if (out.masked_indices.empty()) throw Error("loss_hubert: no masked frames");
  auto terms = hubert_loss_terms(tape, out.hidden.back(), out.masked_indices, labels, head);
  return scale(terms.sum, S(1) / static_cast<S>(terms.count));
}

template <typename S>
Var<S> loss_ce(Tape<S>& tape, const EncoderOutput<S>& out, std::span<const int> labels, CeHead<S>& head,
               std::span<const int> labels2, CeHead<S>* head2) {
  if (out.masked_indices.empty()) throw Error("loss_ce: no masked frames");
  auto terms = ce_loss_terms(tape, out.hidden.back(), out.masked_indices, labels, head);
  if (head2 == nullptr) return scale(terms.sum, S(1) / static_cast<S>(terms.count));
  auto second = ce_loss_terms(tape, out.hidden.back(), out.masked_indices, labels2, *head2);
  return scale(add(terms.sum, second.sum), S(1) / static_cast<S>(terms.count + second.count));
}

#define MELHUBERT_INSTANTIATE(S)                                                                                   \
  template class Encoder<S>;                                                                                       \
  template struct HubertHead<S>;                                                                                   \
  template struct CeHead<S>;                                                                                       \
  template LossTerms<S> hubert_loss_terms(Tape<S>&, Var<S>, std::span<const int>, std::span<const int>,            \
                                          HubertHead<S>&, bool);                                                   \
  template LossTerms<S> ce_loss_terms(Tape<S>&, Var<S>, std::span<const int>, std::span<const int>, CeHead<S>&,    \
                                      bool);                                                                       \
  template Var<S> loss_hubert(Tape<S>&, const EncoderOutput<S>&, std::span<const int>, HubertHead<S>&);            \
  template Var<S> loss_ce(Tape<S>&, const EncoderOutput<S>&, std::span<const int>, CeHead<S>&, std::span<const int>, \
                          CeHead<S>*);

MELHUBERT_INSTANTIATE(float)
MELHUBERT_INSTANTIATE(double)

#undef MELHUBERT_INSTANTIATE

template Encoder<double> Encoder<float>::cast<double>() const;
template Encoder<float> Encoder<double>::cast<float>() const;
template Encoder<float> Encoder<float>::cast<float>() const;

}  // namespace melhubert
