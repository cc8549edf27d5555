#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "melhubert/analysis.hpp"
#include "test_util.hpp"
#include "train_fixture.hpp"

using namespace melhubert;

namespace {

MatrixD gaussian(Rng& rng, Eigen::Index n, Eigen::Index d) {
  MatrixD m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal01(rng);
  return m;
}

double pearson(const VectorD& a, const VectorD& b) {
  const VectorD x = a.array() - a.mean();
  const VectorD y = b.array() - b.mean();
  return x.dot(y) / std::sqrt(x.squaredNorm() * y.squaredNorm());
}

const test::DeskData& desk() {
  static const test::DeskData d = test::make_desk_data(16, 8, 2);
  return d;
}

Checkpoint random_model() {
  StagePlan p;
  p.target_layer = 1;
  return initial_checkpoint(p, TrainConfig{}, test::desk_encoder(), 8, nullptr);
}

}  // namespace

TEST_CASE("cca self-similarity, symmetry and affine invariance") {
  Rng rng = make_stream(1, "cca");
  for (int trial = 0; trial < 3; ++trial) {
    const MatrixD x = gaussian(rng, 500, 6);
    CHECK(cca_score(x, x) == doctest::Approx(1.0).epsilon(1e-6));

    MatrixD a = gaussian(rng, 6, 6);
    a.diagonal().array() += 3.0;  // keep it well conditioned
    const Eigen::RowVectorXd b = gaussian(rng, 1, 6);
    const MatrixD y = (x * a).rowwise() + b;
    CHECK(cca_score(x, y) == doctest::Approx(1.0).epsilon(1e-3));

    const MatrixD z = gaussian(rng, 500, 4);
    const MatrixD mixed = x.leftCols(4) + 0.7 * z;
    const double s = cca_score(x, mixed);
    CHECK(s == doctest::Approx(cca_score(mixed, x)).epsilon(1e-6));
    MatrixD c = gaussian(rng, 4, 4);
    c.diagonal().array() += 3.0;
    CHECK(cca_score(x, (mixed * c).array() + 5.0) == doctest::Approx(s).epsilon(1e-3));
    CHECK(s > 0.0);
    CHECK(s < 1.0);
  }
}

TEST_CASE("cca of one column each is the absolute Pearson correlation") {
  Rng rng = make_stream(2, "cca-1d");
  const MatrixD x = gaussian(rng, 2000, 1);
  const MatrixD noise = gaussian(rng, 2000, 1);
  const MatrixD y = -0.5 * x + noise;
  CHECK(cca_score(x, y) == doctest::Approx(std::abs(pearson(x.col(0), y.col(0)))).epsilon(1e-6));
}

TEST_CASE("cca null score on independent data") {
  Rng rng = make_stream(3, "cca-null");
  const MatrixD x = gaussian(rng, 10000, 8);
  const MatrixD y = gaussian(rng, 10000, 8);
  const double s = cca_score(x, y);
  CHECK(s >= 0.0);
  CHECK(s < 0.1);
}

TEST_CASE("cca errors") {
  Rng rng = make_stream(4, "cca-err");
  const MatrixD x = gaussian(rng, 15, 5);
  CHECK_THROWS_AS(cca_score(x, x), Error);  // N must exceed max(D) + 10
  MatrixD y = gaussian(rng, 100, 3);
  CHECK_THROWS_AS(cca_score(gaussian(rng, 100, 3), gaussian(rng, 99, 3)), Error);
  MatrixD bad = y;
  bad(3, 1) = std::nan("");
  CHECK_THROWS_AS(cca_score(bad, y), NumericError);
  MatrixD flat = y;
  flat.col(2).setConstant(4.0);  // no variance in one direction
  CHECK_THROWS_AS(cca_score(flat, flat), NumericError);
  CHECK_THROWS_AS(cca_score(y, y, CcaConfig{.reg = 0.0}), ConfigError);
}

TEST_CASE("phone_cca: one-hot activations score 1, random activations sit at the null level") {
  const auto& ali = desk().corpus.alignments;
  LayerActivations acts;
  acts.frame_period_ms = 10.0;
  acts.layers.resize(2);
  Rng rng = make_stream(5, "phone-cca");
  for (const auto& [utt, segs] : ali.utterances) {
    const int t = segs.back().end_frame;
    MatrixF onehot = MatrixF::Zero(t, 3);
    for (const auto& s : segs) onehot.middleRows(s.start_frame, s.end_frame - s.start_frame).col(s.phone_id).setOnes();
    acts.utt_ids.push_back(utt);
    acts.layers[0].push_back(onehot);
    acts.layers[1].push_back(gaussian(rng, t, 3).cast<float>());
  }
  const auto scores = phone_cca(acts, ali);
  REQUIRE(scores.size() == 2);
  CHECK(scores[0].layer == "feat");
  CHECK(scores[1].layer == "layer1");
  CHECK(scores[0].score == doctest::Approx(1.0).epsilon(1e-6));
  // Null baseline by Monte Carlo: segment means of noise against the same phones.
  CHECK(scores[1].score < 0.3);

  LayerActivations halved = acts;
  halved.frame_period_ms = 15.0;
  CHECK_THROWS_AS(phone_cca(halved, ali), Error);
}

TEST_CASE("phone_cca and mel_cca on a random-weight model") {
  Checkpoint c = random_model();
  const auto acts = extract_all_layers(c, desk().model_rate);
  const auto phone = phone_cca(acts, desk().corpus.alignments);
  REQUIRE(phone.size() == 3);
  for (const auto& s : phone) CHECK((s.score >= 0.0 && s.score <= 1.0));

  const auto mel = mel_cca(acts, desk().model_rate);
  REQUIRE(mel.size() == 3);
  for (const auto& s : mel) CHECK((s.score >= 0.0 && s.score <= 1.0));
  // feat is an affine image of the input, so it is the most Mel-like layer.
  CHECK(mel[0].score > 0.999);
  CHECK(mel[0].score > mel[1].score);
  CHECK(mel[0].score > mel[2].score);

  // The frame cap draws the same subset for the same seed.
  const auto capped = mel_cca(acts, desk().model_rate, {}, 500, 7);
  const auto again = mel_cca(acts, desk().model_rate, {}, 500, 7);
  for (std::size_t i = 0; i < capped.size(); ++i) CHECK(capped[i].score == again[i].score);
}

TEST_CASE("scores csv and svg") {
  test::TempDir dir("analysis");
  std::vector<LayerScore> s{{"feat", 0.5}, {"layer1", 0.25}, {"layer2", 0.125}};
  write_scores_csv(dir / "s.csv", s);
  CHECK(test::slurp(dir / "s.csv") == "layer,score\nfeat,0.5\nlayer1,0.25\nlayer2,0.125\n");
  const auto back = read_scores_csv(dir / "s.csv");
  REQUIRE(back.size() == 3);
  CHECK(back[2].layer == "layer2");
  CHECK(back[2].score == 0.125);
  const std::string svg = scores_svg({{"trained", s}}, "phone CCA");
  CHECK(svg.find("<svg") == 0);
  CHECK(svg.find("polyline") != std::string::npos);
  CHECK(svg.find("layer1") != std::string::npos);
}

TEST_CASE("macs: definitions") {
  auto one = [](const std::string& text) { return macs_count(parse_arch_spec(text)).total; };
  CHECK(one("input frames=100\nlinear in=40 out=100\n") == 400'000);
  CHECK(one("input frames=10\nffn d_model=4 hidden=8\n") == 10 * 2 * 4 * 8);
  CHECK(one("input frames=10\nattention d_model=4 heads=2 context=6\n") == 10 * 4 * 16 + 2 * 10 * 6 * 4);
  CHECK(one("input frames=10\nattention d_model=4\n") == 10 * 4 * 16 + 2 * 10 * 10 * 4);
  // 100 samples, kernel 10 stride 5: (100 - 10) / 5 + 1 = 19 outputs.
  CHECK(one("input samples=100\nconv1d in=1 out=3 kernel=10 stride=5\n") == 19 * 3 * 1 * 10);
  CHECK(one("input frames=20 dim=8\nconv1d in=8 out=8 kernel=4 padding=2 groups=4 trim=1\n") == 20 * 8 * 2 * 4);
  CHECK(one("input frames=10\nlinear in=4 out=4 repeat=3\n") == 3 * 10 * 16);
}

TEST_CASE("macs: presets against hand-computed counts and reference totals") {
  // Independent count of the waveform frontend.
  std::int64_t len = 16000, conv = 0;
  const int kernels[] = {10, 3, 3, 3, 3, 2, 2};
  const int strides[] = {5, 2, 2, 2, 2, 2, 2};
  for (int i = 0; i < 7; ++i) {
    len = (len - kernels[i]) / strides[i] + 1;
    conv += len * 512 * (i == 0 ? 1 : 512) * kernels[i];
  }
  CHECK(len == 49);
  auto transformer = [](std::int64_t frames, std::int64_t in) {
    const std::int64_t d = 768;
    return frames * in * d + frames * d * (d / 16) * 128 + 12 * (frames * 4 * d * d + 2 * frames * frames * d) +
           12 * frames * 2 * d * 3072;
  };
  const auto hubert = macs_count(arch_preset("hubert-base-macs"));
  const auto mel20 = macs_count(arch_preset("melhubert-20ms"));
  const auto mel10 = macs_count(arch_preset("melhubert-10ms"));
  CHECK(hubert.groups.at("conv frontend") == conv);
  CHECK(hubert.total == conv + transformer(50, 512));
  CHECK(mel20.total == transformer(50, 80));
  CHECK(mel10.total == transformer(100, 40));

  const double share = hubert.share("conv frontend");
  CHECK(share >= 0.30);
  CHECK(share <= 0.36);
  CHECK(std::abs(mel20.total / 1e9 - 4.93) <= 0.15 * 4.93);
  CHECK(std::abs(hubert.total / 1e9 - 7.42) <= 0.15 * 7.42);
  const double saving = 1.0 - static_cast<double>(mel20.total) / static_cast<double>(hubert.total);
  CHECK(std::abs(saving - 0.335) <= 0.03);
  CHECK(mel10.total > 2 * mel20.total);
  CHECK(macs_count(arch_preset("melhubert-20ms-best")).total == mel20.total);
  CHECK_THROWS_AS(arch_preset("resnet"), ConfigError);
}

TEST_CASE("macs: report totals equal the sum of parts") {
  for (const auto& name : arch_preset_names()) {
    const auto r = macs_count(arch_preset(name));
    std::int64_t sum = 0, gsum = 0;
    for (const auto& e : r.entries) sum += e.macs;
    for (const auto& [g, m] : r.groups) gsum += m;
    CHECK(sum == r.total);
    CHECK(gsum == r.total);
  }
}

TEST_CASE("macs: additivity under splitting (random specs)") {
  Rng rng = make_stream(8, "macs-split");
  for (int trial = 0; trial < 200; ++trial) {
    const int frames = 1 + static_cast<int>(uniform_index(rng, 200));
    int dim = 1 + static_cast<int>(uniform_index(rng, 64));
    std::vector<std::string> lines;
    std::vector<int> dims_before;
    const int n = 1 + static_cast<int>(uniform_index(rng, 8));
    for (int i = 0; i < n; ++i) {
      dims_before.push_back(dim);
      switch (uniform_index(rng, 3)) {
        case 0: {
          const int out = 1 + static_cast<int>(uniform_index(rng, 64));
          lines.push_back("linear in=" + std::to_string(dim) + " out=" + std::to_string(out));
          dim = out;
          break;
        }
        case 1:
          lines.push_back("attention d_model=" + std::to_string(dim) + " repeat=" +
                          std::to_string(1 + uniform_index(rng, 3)));
          break;
        default:
          lines.push_back("ffn d_model=" + std::to_string(dim) + " hidden=" + std::to_string(1 + uniform_index(rng, 99)));
      }
    }
    const std::size_t cut = uniform_index(rng, lines.size() + 1);
    const std::string head = "input frames=" + std::to_string(frames) + " dim=" + std::to_string(dims_before[0]) + "\n";
    std::string all = head, first = head;
    std::string second = "input frames=" + std::to_string(frames) + " dim=" +
                         std::to_string(cut < lines.size() ? dims_before[cut] : dim) + "\n";
    for (std::size_t i = 0; i < lines.size(); ++i) {
      all += lines[i] + "\n";
      (i < cut ? first : second) += lines[i] + "\n";
    }
    CHECK(macs_count(parse_arch_spec(all)).total ==
          macs_count(parse_arch_spec(first)).total + macs_count(parse_arch_spec(second)).total);
  }
}

TEST_CASE("arch spec text round trip and errors") {
  for (const auto& name : arch_preset_names()) {
    const ArchSpec a = arch_preset(name);
    const std::string text = format_arch_spec(a);
    CHECK(format_arch_spec(parse_arch_spec(text)) == text);
    CHECK(macs_count(parse_arch_spec(text)).total == macs_count(a).total);
  }
  test::TempDir dir("arch");
  test::spit(dir / "a.arch", "# comment\nname tiny\ngroup g\ninput frames=10 # per second\nlinear in=4 out=2\n");
  const ArchSpec t = read_arch_spec(dir / "a.arch");
  CHECK(t.name == "tiny");
  CHECK(t.layers.at(1).group == "g");
  CHECK(macs_count(t).total == 80);

  CHECK_THROWS_AS(parse_arch_spec("input frames=10\nlstm in=3\n"), ConfigError);
  CHECK_THROWS_AS(parse_arch_spec("linear in=3 out=x\n"), ConfigError);
  CHECK_THROWS_AS(parse_arch_spec("linear in=3 out=4 colour=2\n"), ConfigError);
  CHECK_THROWS_AS(parse_arch_spec("linear in=3\n"), ConfigError);
  CHECK_THROWS_AS(macs_count(parse_arch_spec("input frames=10 dim=4\nlinear in=3 out=4\n")), ConfigError);
  CHECK_THROWS_AS(macs_count(parse_arch_spec("linear in=3 out=4\n")), ConfigError);
  CHECK_THROWS_AS(macs_count(parse_arch_spec("input frames=10\nattention d_model=10 heads=3\n")), ConfigError);
  CHECK_THROWS_AS(macs_count(parse_arch_spec("input samples=5\nconv1d in=1 out=1 kernel=10\n")), ConfigError);
  CHECK_THROWS_AS(macs_count(parse_arch_spec("input frames=0\nlinear in=1 out=1\n")), ConfigError);
}

TEST_CASE("macs report json") {
  const auto r = macs_count(arch_preset("hubert-base-macs"));
  const std::string j = macs_report_json(r);
  CHECK(j.find("\"conv frontend\"") != std::string::npos);
  CHECK(j.find(std::to_string(r.total)) != std::string::npos);
}
