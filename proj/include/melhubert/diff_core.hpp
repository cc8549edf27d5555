#pragma once

// Reverse-mode differentiation over row-major matrices.
//
// A Tape records every primitive applied during one forward pass. Nodes are
// appended in evaluation order, so walking them backwards is a valid reverse
// topological order. Trainable tensors live outside the tape as Parameters;
// backward() adds their gradients into Parameter::grad, so several tapes (one
// per utterance) can accumulate into the same parameters.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "melhubert/common.hpp"

namespace melhubert::ad {

template <typename S>
struct Parameter {
  std::string name;
  Mat<S> value;
  Mat<S> grad;

  Parameter() = default;
  Parameter(std::string n, Mat<S> v) : name(std::move(n)), value(std::move(v)), grad(Mat<S>::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
  Eigen::Index size() const { return value.size(); }
};

template <typename S>
class Tape;

template <typename S>
struct Var {
  Tape<S>* tape = nullptr;
  int id = -1;

  const Mat<S>& value() const;
  const Mat<S>& grad() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  S scalar() const { return value()(0, 0); }
};

template <typename S>
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat<S>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<S> constant(Mat<S> value);
  Var<S> input(Mat<S> value);  // leaf that receives a gradient
  Var<S> param(Parameter<S>& p);

  // Appends a node; `inputs` are the nodes the closure may send gradient to.
  Var<S> push(Mat<S> value, std::initializer_list<Var<S>> inputs, Backward backward);
  Var<S> push(Mat<S> value, std::span<const Var<S>> inputs, Backward backward);

  const Mat<S>& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  const Mat<S>& grad(int id) const { return nodes_[static_cast<std::size_t>(id)].grad; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  void accumulate(int id, const Mat<S>& g);

  /// Seeds d(out)/d(out) = seed and propagates to every reachable node.
  /// `out` must be 1x1.
  void backward(Var<S> out, S seed = S(1));

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat<S> value;
    Mat<S> grad;
    bool requires_grad = false;
    Backward backward;
    Parameter<S>* param = nullptr;
  };
  std::vector<Node> nodes_;
};

template <typename S>
const Mat<S>& Var<S>::value() const {
  return tape->value(id);
}
template <typename S>
const Mat<S>& Var<S>::grad() const {
  return tape->grad(id);
}

// Primitives. Shapes are checked and violations throw melhubert::Error.

template <typename S> Var<S> matmul(Var<S> a, Var<S> b);
template <typename S> Var<S> matmul_nt(Var<S> a, Var<S> b);  // a * b^T
template <typename S> Var<S> add(Var<S> a, Var<S> b);
template <typename S> Var<S> sub(Var<S> a, Var<S> b);
template <typename S> Var<S> mul(Var<S> a, Var<S> b);  // elementwise
template <typename S> Var<S> add_row(Var<S> a, Var<S> row);  // broadcast a 1 x n row
template <typename S> Var<S> scale(Var<S> a, S s);
// a * s(0, index), where s is a row of scalars.
template <typename S> Var<S> scale_by(Var<S> a, Var<S> s, int index);
template <typename S> Var<S> sum(Var<S> a);
template <typename S> Var<S> mean(Var<S> a);
template <typename S> Var<S> concat_cols(std::span<const Var<S>> parts);
template <typename S> Var<S> slice_cols(Var<S> a, int start, int count);
template <typename S> Var<S> slice_rows(Var<S> a, int start, int count);
// out.row(t) = a.row(t + offset), zero where t + offset falls outside a.
template <typename S> Var<S> shift_rows(Var<S> a, int offset);
template <typename S> Var<S> gather_rows(Var<S> a, std::span<const int> rows);  // also embedding lookup
// Rows listed in `rows` are replaced by the 1 x n vector `fill`.
template <typename S> Var<S> replace_rows(Var<S> a, std::span<const int> rows, Var<S> fill);
template <typename S> Var<S> softmax_rows(Var<S> a);
template <typename S> Var<S> log_softmax_rows(Var<S> a);
template <typename S> Var<S> layer_norm(Var<S> a, Var<S> gain, Var<S> bias, S eps = S(1e-5));
template <typename S> Var<S> gelu(Var<S> a);
// Inverted dropout; identity when rng is null or p == 0.
template <typename S> Var<S> dropout(Var<S> a, double p, Rng* rng);
template <typename S> Var<S> l2_normalize_rows(Var<S> a, S eps = S(1e-8));
// Row-wise cosine similarity of equally shaped a and b, T x 1.
template <typename S> Var<S> cosine_similarity(Var<S> a, Var<S> b);
// Sum over rows with target >= 0 of -log softmax(logits)[target]; rows with a
// negative target are ignored. Returns 1x1.
template <typename S> Var<S> cross_entropy_sum(Var<S> logits, std::span<const int> targets);

/// Row-wise softmax / log-softmax on plain matrices (max-shifted).
template <typename S> Mat<S> softmax_rows(const Mat<S>& a);
template <typename S> Mat<S> log_softmax_rows(const Mat<S>& a);

struct GradCheckOptions {
  double eps = 1e-5;
  int num_coords = 128;  // coordinates sampled across all parameters (at least 64)
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  int coords_checked = 0;
  std::string worst;  // parameter name and flat index of the worst coordinate
};

/// Compares analytic gradients of the scalar `f` against central finite
/// differences on a random subset of coordinates of `params`. The relative
/// error denominator is max(|analytic|, |numeric|, 1e-8).
template <typename S>
GradCheckResult grad_check(const std::function<Var<S>(Tape<S>&)>& f, std::span<Parameter<S>* const> params,
                           const GradCheckOptions& opts = {});

}  // namespace melhubert::ad
