#pragma once

// One grad-check case per differentiable primitive, shared by the unit tests
// and the acceptance suite. Each case reduces the primitive's output to a
// scalar through a fixed random projection so every output entry matters.

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "melhubert/diff_core.hpp"

namespace melhubert::test {

struct PrimitiveCase {
  std::string name;
  std::vector<std::unique_ptr<ad::Parameter<double>>> params;
  std::function<ad::Var<double>(ad::Tape<double>&, std::vector<ad::Var<double>>&)> body;

  std::vector<ad::Parameter<double>*> raw() const {
    std::vector<ad::Parameter<double>*> out;
    for (const auto& p : params) out.push_back(p.get());
    return out;
  }

  ad::GradCheckResult check(std::uint64_t seed = 0) const {
    auto f = [this](ad::Tape<double>& tape) {
      std::vector<ad::Var<double>> vars;
      for (const auto& p : params) vars.push_back(tape.param(*p));
      return body(tape, vars);
    };
    auto ps = raw();
    return ad::grad_check<double>(f, ps, {.eps = 1e-5, .num_coords = 128, .seed = seed});
  }
};

inline MatrixD random_matrix(Rng& rng, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
  MatrixD m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = scale * normal01(rng);
  return m;
}

// sum(out .* R) for a fixed R drawn from `seed`.
inline ad::Var<double> project(ad::Tape<double>& tape, ad::Var<double> out, std::uint64_t seed) {
  Rng rng(seed);
  return ad::sum(ad::mul(out, tape.constant(random_matrix(rng, out.rows(), out.cols()))));
}

inline std::vector<PrimitiveCase> primitive_cases() {
  using V = ad::Var<double>;
  using P = ad::Parameter<double>;
  std::vector<PrimitiveCase> cases;
  Rng rng(2024);
  auto param = [&rng](const std::string& name, Eigen::Index r, Eigen::Index c, double scale = 1.0) {
    return std::make_unique<P>(name, random_matrix(rng, r, c, scale));
  };
  auto add_case = [&cases](std::string name, std::vector<std::unique_ptr<P>> ps,
                           std::function<V(ad::Tape<double>&, std::vector<V>&)> body) {
    PrimitiveCase c;
    c.name = std::move(name);
    c.params = std::move(ps);
    c.body = std::move(body);
    cases.push_back(std::move(c));
  };
  auto list = [](auto... ps) {
    std::vector<std::unique_ptr<P>> v;
    (v.push_back(std::move(ps)), ...);
    return v;
  };

  add_case("matmul", list(param("a", 4, 3), param("b", 3, 5)),
           [](auto& t, auto& v) { return project(t, ad::matmul(v[0], v[1]), 1); });
  add_case("matmul_nt", list(param("a", 4, 3), param("b", 5, 3)),
           [](auto& t, auto& v) { return project(t, ad::matmul_nt(v[0], v[1]), 2); });
  add_case("add", list(param("a", 3, 4), param("b", 3, 4)),
           [](auto& t, auto& v) { return project(t, ad::add(v[0], v[1]), 3); });
  add_case("sub", list(param("a", 3, 4), param("b", 3, 4)),
           [](auto& t, auto& v) { return project(t, ad::sub(v[0], v[1]), 4); });
  add_case("mul", list(param("a", 3, 4), param("b", 3, 4)),
           [](auto& t, auto& v) { return project(t, ad::mul(v[0], v[1]), 5); });
  add_case("add_row", list(param("a", 3, 4), param("bias", 1, 4)),
           [](auto& t, auto& v) { return project(t, ad::add_row(v[0], v[1]), 6); });
  add_case("scale", list(param("a", 3, 4)), [](auto& t, auto& v) { return project(t, ad::scale(v[0], -2.5), 7); });
  add_case("scale_by", list(param("a", 3, 4), param("s", 1, 3)),
           [](auto& t, auto& v) { return project(t, ad::scale_by(v[0], v[1], 1), 8); });
  add_case("sum", list(param("a", 3, 4)), [](auto&, auto& v) { return ad::sum(ad::mul(v[0], v[0])); });
  add_case("mean", list(param("a", 3, 4)), [](auto&, auto& v) { return ad::mean(ad::mul(v[0], v[0])); });
  add_case("concat_cols", list(param("a", 3, 2), param("b", 3, 4)), [](auto& t, auto& v) {
    std::vector<V> parts{v[0], v[1], v[0]};
    return project(t, ad::concat_cols<double>(parts), 9);
  });
  add_case("slice_cols", list(param("a", 3, 6)), [](auto& t, auto& v) { return project(t, ad::slice_cols(v[0], 2, 3), 10); });
  add_case("slice_rows", list(param("a", 6, 3)), [](auto& t, auto& v) { return project(t, ad::slice_rows(v[0], 1, 4), 11); });
  add_case("shift_rows (down)", list(param("a", 6, 3)), [](auto& t, auto& v) { return project(t, ad::shift_rows(v[0], -2), 40); });
  add_case("shift_rows (up)", list(param("a", 6, 3)), [](auto& t, auto& v) { return project(t, ad::shift_rows(v[0], 3), 41); });
  add_case("gather_rows (embedding lookup)", list(param("table", 6, 3)), [](auto& t, auto& v) {
    std::vector<int> idx{4, 0, 4, 2};
    return project(t, ad::gather_rows<double>(v[0], idx), 12);
  });
  add_case("replace_rows (mask embedding)", list(param("a", 6, 3), param("fill", 1, 3)), [](auto& t, auto& v) {
    std::vector<int> idx{1, 2, 5};
    return project(t, ad::replace_rows<double>(v[0], idx, v[1]), 13);
  });
  add_case("softmax_rows", list(param("a", 4, 5, 2.0)),
           [](auto& t, auto& v) { return project(t, ad::softmax_rows(v[0]), 14); });
  add_case("log_softmax_rows", list(param("a", 4, 5, 2.0)),
           [](auto& t, auto& v) { return project(t, ad::log_softmax_rows(v[0]), 15); });
  add_case("layer_norm", list(param("a", 4, 6), param("gain", 1, 6), param("bias", 1, 6)),
           [](auto& t, auto& v) { return project(t, ad::layer_norm(v[0], v[1], v[2]), 16); });
  add_case("gelu", list(param("a", 4, 5, 2.0)), [](auto& t, auto& v) { return project(t, ad::gelu(v[0]), 17); });
  add_case("dropout (train, fixed stream)", list(param("a", 4, 5)), [](auto& t, auto& v) {
    Rng r(77);
    return project(t, ad::dropout(v[0], 0.1, &r), 18);
  });
  add_case("l2_normalize_rows", list(param("a", 4, 5)),
           [](auto& t, auto& v) { return project(t, ad::l2_normalize_rows(v[0]), 19); });
  add_case("cosine_similarity", list(param("a", 4, 5), param("b", 4, 5)),
           [](auto& t, auto& v) { return project(t, ad::cosine_similarity(v[0], v[1]), 20); });
  add_case("cross_entropy_sum", list(param("logits", 5, 7, 2.0)), [](auto&, auto& v) {
    std::vector<int> targets{3, -1, 0, 6, 2};
    return ad::cross_entropy_sum<double>(v[0], targets);
  });
  return cases;
}

}  // namespace melhubert::test
