#include "melhubert/diff_core.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace melhubert::ad {

namespace {

template <typename S>
void check_same_shape(const Mat<S>& a, const Mat<S>& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw Error(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
  }
}

template <typename S>
void check_same_tape(Var<S> a, Var<S> b) {
  if (a.tape != b.tape || a.tape == nullptr) throw Error("variables belong to different tapes");
}

}  // namespace

template <typename S>
Var<S> Tape<S>::constant(Mat<S> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::input(Mat<S> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::param(Parameter<S>& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = true;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::push(Mat<S> value, std::span<const Var<S>> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  for (const auto& v : inputs) {
    if (v.tape != this) throw Error("variable from another tape");
    n.requires_grad = n.requires_grad || requires_grad(v.id);
  }
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename S>
Var<S> Tape<S>::push(Mat<S> value, std::initializer_list<Var<S>> inputs, Backward backward) {
  return push(std::move(value), std::span<const Var<S>>(inputs.begin(), inputs.size()), std::move(backward));
}

template <typename S>
void Tape<S>::accumulate(int id, const Mat<S>& g) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

template <typename S>
void Tape<S>::backward(Var<S> out, S seed) {
  if (out.tape != this) throw Error("backward: variable from another tape");
  if (value(out.id).rows() != 1 || value(out.id).cols() != 1) throw Error("backward: output must be a scalar");
  Mat<S> g(1, 1);
  g(0, 0) = seed;
  accumulate(out.id, g);
  for (int i = out.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.backward) n.backward(*this, n.grad);
    if (n.param) {
      if (n.param->grad.size() == 0) n.param->grad = Mat<S>::Zero(n.value.rows(), n.value.cols());
      n.param->grad += n.grad;
    }
  }
}

template <typename S>
Var<S> matmul(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  if (a.cols() != b.rows()) throw Error("matmul: inner dimensions differ");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() * b.value(), {a, b}, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename S>
Var<S> matmul_nt(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  if (a.cols() != b.cols()) throw Error("matmul_nt: inner dimensions differ");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() * b.value().transpose(), {a, b}, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib));
    if (t.requires_grad(ib)) t.accumulate(ib, g.transpose() * t.value(ia));
  });
}

template <typename S>
Var<S> add(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "add");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), {a, b}, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

template <typename S>
Var<S> sub(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "sub");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), {a, b}, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ib)) t.accumulate(ib, -g);
  });
}

template <typename S>
Var<S> mul(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "mul");
  const int ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), {a, b}, [ia, ib](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
    if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
  });
}

template <typename S>
Var<S> add_row(Var<S> a, Var<S> row) {
  check_same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw Error("add_row: bias must be 1 x cols");
  const int ia = a.id, ir = row.id;
  Mat<S> out = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(out), {a, row}, [ia, ir](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g);
    if (t.requires_grad(ir)) t.accumulate(ir, g.colwise().sum());
  });
}

template <typename S>
Var<S> scale(Var<S> a, S s) {
  const int ia = a.id;
  return a.tape->push(a.value() * s, {a}, [ia, s](Tape<S>& t, const Mat<S>& g) { t.accumulate(ia, g * s); });
}

template <typename S>
Var<S> scale_by(Var<S> a, Var<S> s, int index) {
  check_same_tape(a, s);
  if (s.rows() != 1 || index < 0 || index >= s.cols()) throw Error("scale_by: index out of range");
  const int ia = a.id, is = s.id;
  return a.tape->push(a.value() * s.value()(0, index), {a, s}, [ia, is, index](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(is)(0, index));
    if (t.requires_grad(is)) {
      Mat<S> gs = Mat<S>::Zero(1, t.value(is).cols());
      gs(0, index) = g.cwiseProduct(t.value(ia)).sum();
      t.accumulate(is, gs);
    }
  });
}

template <typename S>
Var<S> sum(Var<S> a) {
  const int ia = a.id;
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->push(std::move(out), {a}, [ia](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, Mat<S>::Constant(t.value(ia).rows(), t.value(ia).cols(), g(0, 0)));
  });
}

template <typename S>
Var<S> mean(Var<S> a) {
  if (a.value().size() == 0) throw Error("mean: empty input");
  return scale(sum(a), S(1) / static_cast<S>(a.value().size()));
}

template <typename S>
Var<S> concat_cols(std::span<const Var<S>> parts) {
  if (parts.empty()) throw Error("concat_cols: no inputs");
  Tape<S>* tape = parts[0].tape;
  const Eigen::Index rows = parts[0].rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  std::vector<Eigen::Index> offsets;
  for (const auto& p : parts) {
    if (p.tape != tape) throw Error("concat_cols: variables from different tapes");
    if (p.rows() != rows) throw Error("concat_cols: row counts differ");
    ids.push_back(p.id);
    offsets.push_back(cols);
    cols += p.cols();
  }
  Mat<S> out(rows, cols);
  for (std::size_t i = 0; i < parts.size(); ++i) out.middleCols(offsets[i], parts[i].cols()) = parts[i].value();
  return tape->push(std::move(out), parts, [ids, offsets](Tape<S>& t, const Mat<S>& g) {
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (t.requires_grad(ids[i])) t.accumulate(ids[i], g.middleCols(offsets[i], t.value(ids[i]).cols()));
    }
  });
}

template <typename S>
Var<S> slice_cols(Var<S> a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw Error("slice_cols: out of range");
  const int ia = a.id;
  return a.tape->push(a.value().middleCols(start, count), {a}, [ia, start, count](Tape<S>& t, const Mat<S>& g) {
    Mat<S> full = Mat<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    full.middleCols(start, count) = g;
    t.accumulate(ia, full);
  });
}

template <typename S>
Var<S> slice_rows(Var<S> a, int start, int count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw Error("slice_rows: out of range");
  const int ia = a.id;
  return a.tape->push(a.value().middleRows(start, count), {a}, [ia, start, count](Tape<S>& t, const Mat<S>& g) {
    Mat<S> full = Mat<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    full.middleRows(start, count) = g;
    t.accumulate(ia, full);
  });
}

template <typename S>
Var<S> shift_rows(Var<S> a, int offset) {
  const int rows = a.rows();
  const int lo = std::clamp(-offset, 0, rows);     // first output row with a source
  const int hi = std::clamp(rows - offset, 0, rows);  // one past the last
  Mat<S> out = Mat<S>::Zero(rows, a.cols());
  if (hi > lo) out.middleRows(lo, hi - lo) = a.value().middleRows(lo + offset, hi - lo);
  const int ia = a.id;
  return a.tape->push(std::move(out), {a}, [ia, offset, lo, hi](Tape<S>& t, const Mat<S>& g) {
    Mat<S> full = Mat<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    if (hi > lo) full.middleRows(lo + offset, hi - lo) = g.middleRows(lo, hi - lo);
    t.accumulate(ia, full);
  });
}

template <typename S>
Var<S> gather_rows(Var<S> a, std::span<const int> rows) {
  std::vector<int> idx(rows.begin(), rows.end());
  Mat<S> out(static_cast<Eigen::Index>(idx.size()), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw Error("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = a.value().row(idx[i]);
  }
  const int ia = a.id;
  return a.tape->push(std::move(out), {a}, [ia, idx](Tape<S>& t, const Mat<S>& g) {
    Mat<S> full = Mat<S>::Zero(t.value(ia).rows(), t.value(ia).cols());
    for (std::size_t i = 0; i < idx.size(); ++i) full.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
    t.accumulate(ia, full);
  });
}

template <typename S>
Var<S> replace_rows(Var<S> a, std::span<const int> rows, Var<S> fill) {
  check_same_tape(a, fill);
  if (fill.rows() != 1 || fill.cols() != a.cols()) throw Error("replace_rows: fill must be 1 x cols");
  std::vector<int> idx(rows.begin(), rows.end());
  Mat<S> out = a.value();
  for (int r : idx) {
    if (r < 0 || r >= a.rows()) throw Error("replace_rows: index out of range");
    out.row(r) = fill.value().row(0);
  }
  const int ia = a.id, ifill = fill.id;
  return a.tape->push(std::move(out), {a, fill}, [ia, ifill, idx](Tape<S>& t, const Mat<S>& g) {
    if (t.requires_grad(ia)) {
      Mat<S> ga = g;
      for (int r : idx) ga.row(r).setZero();
      t.accumulate(ia, ga);
    }
    if (t.requires_grad(ifill)) {
      Mat<S> gf = Mat<S>::Zero(1, g.cols());
      for (int r : idx) gf.row(0) += g.row(r);
      t.accumulate(ifill, gf);
    }
  });
}

template <typename S>
Mat<S> softmax_rows(const Mat<S>& a) {
  Mat<S> out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const S m = a.row(r).maxCoeff();
    out.row(r) = (a.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

template <typename S>
Mat<S> log_softmax_rows(const Mat<S>& a) {
  Mat<S> out(a.rows(), a.cols());
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    const S m = a.row(r).maxCoeff();
    const S lse = m + std::log((a.row(r).array() - m).exp().sum());
    out.row(r) = a.row(r).array() - lse;
  }
  return out;
}

template <typename S>
Var<S> softmax_rows(Var<S> a) {
  const int ia = a.id;
  Mat<S> y = softmax_rows<S>(a.value());
  Mat<S> ycopy = y;
  return a.tape->push(std::move(y), {a}, [ia, y = std::move(ycopy)](Tape<S>& t, const Mat<S>& g) {
    Vec<S> dots = g.cwiseProduct(y).rowwise().sum();
    t.accumulate(ia, (y.array() * (g.array().colwise() - dots.array())).matrix());
  });
}

template <typename S>
Var<S> log_softmax_rows(Var<S> a) {
  const int ia = a.id;
  Mat<S> y = log_softmax_rows<S>(a.value());
  Mat<S> p = y.array().exp();
  return a.tape->push(std::move(y), {a}, [ia, p = std::move(p)](Tape<S>& t, const Mat<S>& g) {
    Mat<S> gx = g - (p.array().colwise() * g.rowwise().sum().array()).matrix();
    t.accumulate(ia, gx);
  });
}

template <typename S>
Var<S> layer_norm(Var<S> a, Var<S> gain, Var<S> bias, S eps) {
  check_same_tape(a, gain);
  check_same_tape(a, bias);
  const Eigen::Index n = a.cols();
  if (gain.rows() != 1 || gain.cols() != n || bias.rows() != 1 || bias.cols() != n) {
    throw Error("layer_norm: gain and bias must be 1 x cols");
  }
  const Mat<S>& x = a.value();
  Mat<S> xhat(x.rows(), n);
  Vec<S> inv_std(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const S mu = x.row(r).mean();
    const S var = (x.row(r).array() - mu).square().mean();
    inv_std[r] = S(1) / std::sqrt(var + eps);
    xhat.row(r) = (x.row(r).array() - mu) * inv_std[r];
  }
  Mat<S> y = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
  const int ia = a.id, ig = gain.id, ib = bias.id;
  return a.tape->push(std::move(y), {a, gain, bias},
                      [ia, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<S>& t, const Mat<S>& g) {
                        if (t.requires_grad(ig)) t.accumulate(ig, g.cwiseProduct(xhat).colwise().sum());
                        if (t.requires_grad(ib)) t.accumulate(ib, g.colwise().sum());
                        if (t.requires_grad(ia)) {
                          Mat<S> dxhat = g.array().rowwise() * t.value(ig).row(0).array();
                          Mat<S> dx(dxhat.rows(), dxhat.cols());
                          for (Eigen::Index r = 0; r < dxhat.rows(); ++r) {
                            const S m1 = dxhat.row(r).mean();
                            const S m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
                            dx.row(r) = (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2) * inv_std[r];
                          }
                          t.accumulate(ia, dx);
                        }
                      });
}

template <typename S>
Var<S> gelu(Var<S> a) {
  const S inv_sqrt2 = S(0.7071067811865476);
  const S inv_sqrt_2pi = S(0.3989422804014327);
  const Mat<S>& x = a.value();
  Mat<S> y = x.unaryExpr([inv_sqrt2](S v) { return S(0.5) * v * (S(1) + std::erf(v * inv_sqrt2)); });
  const int ia = a.id;
  return a.tape->push(std::move(y), {a}, [ia, inv_sqrt2, inv_sqrt_2pi](Tape<S>& t, const Mat<S>& g) {
    Mat<S> d = t.value(ia).unaryExpr([inv_sqrt2, inv_sqrt_2pi](S v) {
      return S(0.5) * (S(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt_2pi * std::exp(S(-0.5) * v * v);
    });
    t.accumulate(ia, g.cwiseProduct(d));
  });
}

template <typename S>
Var<S> dropout(Var<S> a, double p, Rng* rng) {
  if (p < 0.0 || p >= 1.0) throw Error("dropout: p must be in [0, 1)");
  if (rng == nullptr || p == 0.0) return a;
  const S keep_scale = S(1) / static_cast<S>(1.0 - p);
  Mat<S> mask(a.rows(), a.cols());
  for (Eigen::Index i = 0; i < mask.size(); ++i) mask.data()[i] = uniform01(*rng) < p ? S(0) : keep_scale;
  const int ia = a.id;
  Mat<S> y = a.value().cwiseProduct(mask);
  return a.tape->push(std::move(y), {a}, [ia, mask = std::move(mask)](Tape<S>& t, const Mat<S>& g) {
    t.accumulate(ia, g.cwiseProduct(mask));
  });
}

template <typename S>
Var<S> l2_normalize_rows(Var<S> a, S eps) {
  const Mat<S>& x = a.value();
  Vec<S> norms = x.rowwise().norm().cwiseMax(eps);
  Mat<S> y = x.array().colwise() / norms.array();
  const int ia = a.id;
  Mat<S> ycopy = y;
  return a.tape->push(std::move(y), {a}, [ia, norms = std::move(norms), ycopy = std::move(ycopy)](Tape<S>& t, const Mat<S>& g) {
    Vec<S> dots = g.cwiseProduct(ycopy).rowwise().sum();
    Mat<S> dx = ((g - (ycopy.array().colwise() * dots.array()).matrix()).array().colwise() / norms.array()).matrix();
    t.accumulate(ia, dx);
  });
}

template <typename S>
Var<S> cosine_similarity(Var<S> a, Var<S> b) {
  check_same_tape(a, b);
  check_same_shape(a.value(), b.value(), "cosine_similarity");
  Var<S> prod = mul(l2_normalize_rows(a), l2_normalize_rows(b));
  const int ip = prod.id;
  Mat<S> out = prod.value().rowwise().sum();
  return a.tape->push(std::move(out), {prod}, [ip](Tape<S>& t, const Mat<S>& g) {
    Mat<S> full = g.replicate(1, t.value(ip).cols());
    t.accumulate(ip, full);
  });
}

template <typename S>
Var<S> cross_entropy_sum(Var<S> logits, std::span<const int> targets) {
  if (static_cast<Eigen::Index>(targets.size()) != logits.rows()) {
    throw Error("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(logits.rows()) +
                " rows");
  }
  std::vector<int> tg(targets.begin(), targets.end());
  const Mat<S>& z = logits.value();
  Mat<S> logp = log_softmax_rows<S>(z);
  S total = 0;
  for (std::size_t r = 0; r < tg.size(); ++r) {
    if (tg[r] < 0) continue;
    if (tg[r] >= z.cols()) throw Error("cross_entropy: target " + std::to_string(tg[r]) + " out of range");
    total -= logp(static_cast<Eigen::Index>(r), tg[r]);
  }
  Mat<S> out(1, 1);
  out(0, 0) = total;
  const int il = logits.id;
  return logits.tape->push(std::move(out), {logits}, [il, tg = std::move(tg), logp = std::move(logp)](Tape<S>& t, const Mat<S>& g) {
    Mat<S> d = Mat<S>::Zero(logp.rows(), logp.cols());
    for (std::size_t r = 0; r < tg.size(); ++r) {
      if (tg[r] < 0) continue;
      const auto row = static_cast<Eigen::Index>(r);
      d.row(row) = logp.row(row).array().exp();
      d(row, tg[r]) -= S(1);
    }
    t.accumulate(il, d * g(0, 0));
  });
}

template <typename S>
GradCheckResult grad_check(const std::function<Var<S>(Tape<S>&)>& f, std::span<Parameter<S>* const> params,
                           const GradCheckOptions& opts) {
  for (auto* p : params) p->zero_grad();
  {
    Tape<S> tape;
    Var<S> out = f(tape);
    if (!std::isfinite(static_cast<double>(out.scalar()))) throw NumericError("grad_check: non-finite output");
    tape.backward(out);
  }

  std::vector<std::pair<std::size_t, Eigen::Index>> coords;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (Eigen::Index i = 0; i < params[p]->value.size(); ++i) coords.emplace_back(p, i);
  }
  const std::size_t want = static_cast<std::size_t>(std::max(opts.num_coords, 64));
  if (coords.size() > want) {
    Rng rng = make_stream(opts.seed, "grad_check");
    for (std::size_t i = 0; i < want; ++i) std::swap(coords[i], coords[i + uniform_index(rng, coords.size() - i)]);
    coords.resize(want);
  }

  auto eval = [&f]() {
    Tape<S> tape;
    const double v = static_cast<double>(f(tape).scalar());
    if (!std::isfinite(v)) throw NumericError("grad_check: non-finite output");
    return v;
  };

  GradCheckResult result;
  const S eps = static_cast<S>(opts.eps);
  for (const auto& [p, i] : coords) {
    S& x = params[p]->value.data()[i];
    const S saved = x;
    x = saved + eps;
    const double up = eval();
    x = saved - eps;
    const double down = eval();
    x = saved;
    const double numeric = (up - down) / (2.0 * opts.eps);
    const double analytic = static_cast<double>(params[p]->grad.data()[i]);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    if (result.worst.empty() || rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst = params[p]->name + "[" + std::to_string(i) + "]";
    }
    ++result.coords_checked;
  }
  return result;
}

#define MELHUBERT_INSTANTIATE(S)                                                                          \
  template class Tape<S>;                                                                                 \
  template Var<S> matmul(Var<S>, Var<S>);                                                                 \
  template Var<S> matmul_nt(Var<S>, Var<S>);                                                              \
  template Var<S> add(Var<S>, Var<S>);                                                                    \
  template Var<S> sub(Var<S>, Var<S>);                                                                    \
  template Var<S> mul(Var<S>, Var<S>);                                                                    \
  template Var<S> add_row(Var<S>, Var<S>);                                                                \
  template Var<S> scale(Var<S>, S);                                                                       \
  template Var<S> scale_by(Var<S>, Var<S>, int);                                                          \
  template Var<S> sum(Var<S>);                                                                            \
  template Var<S> mean(Var<S>);                                                                           \
  template Var<S> concat_cols(std::span<const Var<S>>);                                                   \
  template Var<S> slice_cols(Var<S>, int, int);                                                           \
  template Var<S> slice_rows(Var<S>, int, int);                                                           \
  template Var<S> shift_rows(Var<S>, int);                                                                \
  template Var<S> gather_rows(Var<S>, std::span<const int>);                                              \
  template Var<S> replace_rows(Var<S>, std::span<const int>, Var<S>);                                     \
  template Mat<S> softmax_rows(const Mat<S>&);                                                            \
  template Mat<S> log_softmax_rows(const Mat<S>&);                                                        \
  template Var<S> softmax_rows(Var<S>);                                                                   \
  template Var<S> log_softmax_rows(Var<S>);                                                               \
  template Var<S> layer_norm(Var<S>, Var<S>, Var<S>, S);                                                  \
  template Var<S> gelu(Var<S>);                                                                           \
  template Var<S> dropout(Var<S>, double, Rng*);                                                          \
  template Var<S> l2_normalize_rows(Var<S>, S);                                                           \
  template Var<S> cosine_similarity(Var<S>, Var<S>);                                                      \
  template Var<S> cross_entropy_sum(Var<S>, std::span<const int>);                                        \
  template GradCheckResult grad_check(const std::function<Var<S>(Tape<S>&)>&, std::span<Parameter<S>* const>, \
                                      const GradCheckOptions&);

MELHUBERT_INSTANTIATE(float)
MELHUBERT_INSTANTIATE(double)

#undef MELHUBERT_INSTANTIATE

}  // namespace melhubert::ad
