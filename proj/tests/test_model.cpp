#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <algorithm>
#include <numeric>

#include "melhubert/model.hpp"
#include "primitive_cases.hpp"

using namespace melhubert;
using melhubert::test::random_matrix;

namespace {

EncoderConfig tiny_config() {
  return {.input_dim = 6, .d_model = 8, .n_layers = 2, .n_heads = 2, .ffn_dim = 12, .dropout = 0.1, .max_positions = 16};
}

std::int64_t enumerate(const std::vector<ad::Parameter<float>*>& ps) {
  std::int64_t n = 0;
  for (auto* p : ps) n += p->size();
  return n;
}

}  // namespace

TEST_CASE("mask policy degenerate cases") {
  Rng rng(1);
  MaskPolicy none{.mask_start_prob = 0.0, .span_len = 10};
  auto idx = sample_mask(100, none, rng);
  REQUIRE(!idx.empty());
  CHECK(idx.size() <= 10);
  CHECK(idx.back() - idx.front() + 1 == static_cast<int>(idx.size()));  // one contiguous span
  CHECK(sample_mask(1, {}, rng) == std::vector<int>{0});
  CHECK(sample_mask(0, {}, rng).empty());
  MaskPolicy all{.mask_start_prob = 1.0, .span_len = 1};
  CHECK(sample_mask(7, all, rng).size() == 7);
}

TEST_CASE("masked fraction matches an independent simulation") {
  // Oracle: start spans with a Bernoulli draw per frame and paint span_len
  // frames, using a different generator than the implementation.
  std::mt19937 oracle_rng(123);
  std::bernoulli_distribution start(0.08);
  double oracle = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    std::vector<char> m(1000, 0);
    for (int t = 0; t < 1000; ++t) {
      if (start(oracle_rng)) {
        for (int j = t; j < std::min(1000, t + 10); ++j) m[static_cast<std::size_t>(j)] = 1;
      }
    }
    oracle += std::accumulate(m.begin(), m.end(), 0) / 1000.0;
  }
  oracle /= 1000.0;

  Rng rng = make_stream(5, "masking");
  double fraction = 0.0;
  for (int draw = 0; draw < 1000; ++draw) fraction += sample_mask(1000, {}, rng).size() / 1000.0;
  fraction /= 1000.0;
  MESSAGE("implementation " << fraction << " oracle " << oracle);
  CHECK(std::abs(fraction - oracle) < 0.03);
  CHECK(std::abs(fraction - (1.0 - std::pow(0.92, 10))) < 0.03);
}

TEST_CASE("encoder config validation and parameter count") {
  EncoderConfig bad = tiny_config();
  bad.n_heads = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.dropout = 1.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  bad = tiny_config();
  bad.pos_conv_groups = 3;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = tiny_config();
  bad.pos_conv_kernel = -1;
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  for (EncoderConfig cfg : {tiny_config(), EncoderConfig{}, EncoderConfig{.input_dim = 80, .pos_conv_kernel = 0}}) {
    Encoder<float> enc(cfg, 0);
    const std::size_t pos_conv = cfg.pos_conv_kernel > 0 ? 2 : 0;
    CHECK(enc.parameters().size() == 4 + pos_conv + 16 * static_cast<std::size_t>(cfg.n_layers) + 2);
    CHECK(enumerate(enc.parameters()) == cfg.parameter_count());
  }
}

TEST_CASE("forward shapes, empty input and determinism") {
  EncoderConfig cfg = tiny_config();
  Encoder<float> enc(cfg, 3);
  Rng rng(2);
  MatrixF x = random_matrix(rng, 10, 6).cast<float>();
  std::vector<int> masked{2, 3, 4};

  ad::Tape<float> t1, t2;
  auto a = enc.forward(t1, x, masked, nullptr);
  auto b = enc.forward(t2, x, masked, nullptr);
  REQUIRE(a.hidden.size() == 3);
  for (std::size_t l = 0; l < a.hidden.size(); ++l) {
    CHECK(a.hidden[l].rows() == 10);
    CHECK(a.hidden[l].cols() == 8);
    CHECK(a.hidden[l].value() == b.hidden[l].value());
  }
  CHECK(a.masked_indices == masked);

  ad::Tape<float> t3;
  auto empty = enc.forward(t3, MatrixF(0, 6), {}, nullptr);
  for (const auto& h : empty.hidden) CHECK(h.rows() == 0);

  ad::Tape<float> t4;
  CHECK_THROWS_AS(enc.forward(t4, MatrixF::Zero(17, 6), {}, nullptr), Error);
  CHECK_THROWS_AS(enc.forward(t4, MatrixF::Zero(3, 5), {}, nullptr), Error);

  // Dropout changes outputs in training mode.
  ad::Tape<float> t5;
  Rng drop(4);
  auto c = enc.forward(t5, x, masked, &drop);
  CHECK(c.hidden.back().value() != a.hidden.back().value());
}

TEST_CASE("masked frames see the mask embedding, not their input") {
  Encoder<float> enc(tiny_config(), 3);
  Rng rng(7);
  MatrixF x = random_matrix(rng, 10, 6).cast<float>();
  MatrixF y = x;
  y.row(4) *= -3.0f;
  std::vector<int> masked{4};
  ad::Tape<float> t1, t2;
  auto a = enc.forward(t1, x, masked, nullptr);
  auto b = enc.forward(t2, y, masked, nullptr);
  CHECK(a.hidden.back().value() == b.hidden.back().value());
}

TEST_CASE("CE loss: uniform logits, hand value, dual mode") {
  for (int k : {2, 7, 100, 512}) {
    ad::Tape<double> tape;
    CeHead<double> head(4, k, 1);
    head.weight.value.setZero();
    EncoderOutput<double> out;
    Rng rng(k);
    out.hidden.push_back(tape.constant(random_matrix(rng, 6, 4)));
    out.masked_indices = {0, 2, 5};
    std::vector<int> labels{0, 1, k - 1, 1, 0, 1};
    CHECK(std::abs(loss_ce(tape, out, labels, head).scalar() - std::log(static_cast<double>(k))) < 1e-6);
  }

  ad::Tape<double> tape;
  CeHead<double> head(1, 3, 1);
  head.weight.value << 2, 0, 0;
  EncoderOutput<double> out;
  out.hidden.push_back(tape.constant(MatrixD::Constant(2, 1, 1.0)));
  out.masked_indices = {1};
  std::vector<int> labels{2, 0};
  const double expected = -std::log(std::exp(2.0) / (std::exp(2.0) + 2.0));
  CHECK(expected == doctest::Approx(0.2395).epsilon(1e-3));
  CHECK(loss_ce(tape, out, labels, head).scalar() == doctest::Approx(expected).epsilon(1e-12));

  // Dual mode with tied heads and identical streams equals single-target.
  CeHead<double> twin = head;
  CHECK(loss_ce(tape, out, labels, head, labels, &twin).scalar() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("cosine loss: identical codewords give ln k; closed form for k=2") {
  ad::Tape<double> tape;
  HubertHead<double> head(4, 3, 5, 0.1, 2);
  for (int c = 1; c < 5; ++c) head.codebook.value.row(c) = head.codebook.value.row(0);
  EncoderOutput<double> out;
  Rng rng(3);
  out.hidden.push_back(tape.constant(random_matrix(rng, 4, 4)));
  out.masked_indices = {1, 3};
  std::vector<int> labels{0, 4, 2, 3};
  CHECK(loss_hubert(tape, out, labels, head).scalar() == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  // One-dimensional projection: cos(W o, m) is +1 / -1 for m = +1 / -1.
  HubertHead<double> two(1, 1, 2, 0.1, 2);
  two.proj.value << 2.0;
  two.codebook.value << 1.0, -1.0;
  EncoderOutput<double> o;
  o.hidden.push_back(tape.constant(MatrixD::Constant(1, 1, 0.5)));
  o.masked_indices = {0};
  std::vector<int> target{0};
  const double expected = -std::log(std::exp(10.0) / (std::exp(10.0) + std::exp(-10.0)));
  CHECK(expected == doctest::Approx(2.06e-9).epsilon(1e-2));
  CHECK(loss_hubert(tape, o, target, two).scalar() == doctest::Approx(expected).epsilon(1e-6));
}

TEST_CASE("cosine loss is scale invariant and tends to ln k at high temperature") {
  Rng rng(11);
  MatrixD o = random_matrix(rng, 8, 6);
  std::vector<int> labels{0, 1, 2, 3, 4, 5, 6, 0};
  std::vector<int> masked{0, 3, 4, 7};
  auto eval = [&](HubertHead<double>& head) {
    ad::Tape<double> tape;
    EncoderOutput<double> out;
    out.hidden.push_back(tape.constant(o));
    out.masked_indices = masked;
    return loss_hubert(tape, out, labels, head).scalar();
  };
  HubertHead<double> head(6, 4, 7, 0.1, 5);
  const double base = eval(head);
  HubertHead<double> scaled = head;
  scaled.proj.value *= 3.7;
  scaled.codebook.value *= 0.02;
  CHECK(std::abs(eval(scaled) - base) < 1e-5);
  HubertHead<double> hot = head;
  hot.tau = 1e6;
  CHECK(std::abs(eval(hot) - std::log(7.0)) < 1e-3);
}

TEST_CASE("loss ignores unmasked targets") {
  Encoder<double> enc(tiny_config().input_dim == 6 ? tiny_config() : EncoderConfig{}, 1);
  CeHead<double> head(8, 5, 2);
  HubertHead<double> hh(8, 4, 5, 0.1, 3);
  Rng rng(9);
  MatrixD x = random_matrix(rng, 12, 6);
  std::vector<int> masked{1, 2, 3, 9};
  std::vector<int> labels{0, 1, 2, 3, 4, 0, 1, 2, 3, 4, 0, 1};
  std::vector<int> mutated = labels;
  for (int t = 0; t < 12; ++t) {
    if (std::find(masked.begin(), masked.end(), t) == masked.end()) mutated[static_cast<std::size_t>(t)] = (labels[static_cast<std::size_t>(t)] + 2) % 5;
  }
  ad::Tape<double> tape;
  auto out = enc.forward(tape, x, masked, nullptr);
  CHECK(loss_ce(tape, out, labels, head).scalar() == loss_ce(tape, out, mutated, head).scalar());
  CHECK(loss_hubert(tape, out, labels, hh).scalar() == loss_hubert(tape, out, mutated, hh).scalar());
}

TEST_CASE("loss error paths") {
  ad::Tape<double> tape;
  CeHead<double> head(2, 3, 1);
  EncoderOutput<double> out;
  out.hidden.push_back(tape.constant(MatrixD::Ones(3, 2)));
  out.masked_indices = {0};
  std::vector<int> too_big{3, 0, 0};
  CHECK_THROWS_AS(loss_ce(tape, out, too_big, head), Error);
  std::vector<int> short_labels{0, 0};
  CHECK_THROWS_AS(loss_ce(tape, out, short_labels, head), Error);
  HubertHead<double> hh(2, 2, 3, 0.1, 1);
  CHECK_THROWS_AS(loss_hubert(tape, out, too_big, hh), Error);
  CHECK_THROWS_AS(HubertHead<double>(2, 2, 3, 0.0, 1), ConfigError);
}

TEST_CASE("CE gradient on random logits (k=7, T=5)") {
  Rng rng(21);
  ad::Parameter<double> o("o", random_matrix(rng, 5, 4));
  CeHead<double> head(4, 7, 3);
  std::vector<int> labels{1, 6, 0, 3, 2};
  std::vector<int> frames{0, 1, 2, 3, 4};
  std::vector<ad::Parameter<double>*> ps{&o, &head.weight};
  auto r = ad::grad_check<double>([&](ad::Tape<double>& t) {
    auto terms = ce_loss_terms(t, t.param(o), frames, labels, head);
    return ad::scale(terms.sum, 1.0 / terms.count);
  }, ps);
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("cosine-loss gradient w.r.t. o, W and m") {
  Rng rng(22);
  ad::Parameter<double> o("o", random_matrix(rng, 5, 6));
  HubertHead<double> head(6, 4, 7, 0.1, 4);
  std::vector<int> labels{1, 6, 0, 3, 2};
  std::vector<int> frames{0, 2, 3, 4};
  std::vector<ad::Parameter<double>*> ps{&o, &head.proj, &head.codebook};
  auto r = ad::grad_check<double>([&](ad::Tape<double>& t) {
    auto terms = hubert_loss_terms(t, t.param(o), frames, labels, head);
    return ad::scale(terms.sum, 1.0 / terms.count);
  }, ps, {.num_coords = 200});
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("end-to-end encoder gradients for both losses and dual targets") {
  EncoderConfig cfg = tiny_config();
  Encoder<double> enc = Encoder<float>(cfg, 5).cast<double>();
  CeHead<double> h1(8, 5, 6, "h1"), h2(8, 5, 7, "h2");
  HubertHead<double> hh(8, 4, 5, 0.1, 8);
  Rng rng(23);
  MatrixD x = random_matrix(rng, 9, 6);
  std::vector<int> masked{2, 3, 4, 7};
  std::vector<int> l1{0, 1, 2, 3, 4, 0, 1, 2, 3}, l2{4, 3, 2, 1, 0, 4, 3, 2, 1};

  // Key biases shift every score in a row equally, so softmax makes their
  // gradient identically zero; finite differences there only measure roundoff.
  auto without_key_bias = [](std::vector<ad::Parameter<double>*> all) {
    std::erase_if(all, [](auto* p) { return p->name.find("attn.k.bias") != std::string::npos; });
    return all;
  };
  auto ps = without_key_bias(enc.parameters());
  for (auto* p : h1.parameters()) ps.push_back(p);
  for (auto* p : h2.parameters()) ps.push_back(p);
  auto dual = ad::grad_check<double>([&](ad::Tape<double>& t) {
    auto out = enc.forward(t, x, masked, nullptr);
    return loss_ce(t, out, l1, h1, l2, &h2);
  }, ps, {.num_coords = 300, .seed = 1});
  INFO("dual worst " << dual.worst);
  CHECK(dual.max_rel_error < 1e-4);

  for (auto* p : enc.parameters()) {
    if (p->name.find("attn.k.bias") != std::string::npos) CHECK(p->grad.cwiseAbs().maxCoeff() < 1e-12);
  }

  auto hps = without_key_bias(enc.parameters());
  for (auto* p : hh.parameters()) hps.push_back(p);
  auto cosine = ad::grad_check<double>([&](ad::Tape<double>& t) {
    auto out = enc.forward(t, x, masked, nullptr);
    return loss_hubert(t, out, l1, hh);
  }, hps, {.num_coords = 300, .seed = 2});
  INFO("cosine worst " << cosine.worst);
  CHECK(cosine.max_rel_error < 1e-4);
}
