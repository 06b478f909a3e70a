#include <cmath>

#include "doctest.h"
#include "semcom/attack_ttalm.hpp"

using namespace semcom;

namespace {

struct Setup {
  DatasetSplit data;
  CodecModel codec, vq;
  ScorerModel scorer;
  LatentStats stats, vq_stats;
};

LatentStats stats_of(const CodecModel& c, const std::vector<ImageSample>& samples) {
  const auto lat = c.encode_batch(stack_pixels(samples));
  Tensor z(Shape{lat.size(), c.latent_dim()});
  for (std::size_t i = 0; i < lat.size(); ++i) {
    const auto row = c.decoder_input(lat[i]);
    std::copy(row.begin(), row.end(), z.data().begin() + i * row.size());
  }
  return fit_stats(z);
}

const Setup& setup() {
  static const Setup s = [] {
    Setup s;
    s.data = generate_dataset(41, 60, 0.8);
    CodecConfig cc;
    cc.epochs = 3;
    cc.hidden = 64;
    s.codec = train_codec(s.data.train, cc);
    cc.id = CodecId::vq_mlp;
    s.vq = train_codec(s.data.train, cc);
    ScorerConfig sc;
    sc.hidden = {32};
    sc.epochs = 3;
    s.scorer = train_scorer(s.data.train, sc);
    s.stats = stats_of(s.codec, s.data.train);
    s.vq_stats = stats_of(s.vq, s.data.train);
    return s;
  }();
  return s;
}

// Mean of the chi distribution with k degrees of freedom.
double chi_mean(double k) { return std::sqrt(2.0) * std::exp(std::lgamma((k + 1) / 2) - std::lgamma(k / 2)); }

}  // namespace

TEST_CASE("eta = 0 and K = 0 are exact identities") {
  const auto& s = setup();
  for (std::size_t i = 0; i < 5; ++i) {
    const Latent z = s.codec.encode(s.data.test[i].pixels);
    TtaConfig c;
    c.target = int(i % 6);
    c.eta = 0.0;
    const auto r0 = tta_attack(z, s.codec, s.scorer, s.stats, c);
    CHECK(r0.latent == z);
    CHECK(r0.trace.steps.size() == 1);
    c.eta = 0.05;
    c.max_steps = 0;
    const auto r1 = tta_attack(z, s.codec, s.scorer, s.stats, c);
    CHECK(r1.latent == z);
    CHECK(r1.trace.steps.size() == 1);

    const Latent q = s.vq.encode(s.data.test[i].pixels);
    c.max_steps = 10;
    c.eta = 0.0;
    CHECK(tta_attack_quantized(q, s.vq, s.scorer, s.vq_stats, c).latent == q);
  }
}

TEST_CASE("trace shape, loss decrease and index range") {
  const auto& s = setup();
  TtaConfig c;
  c.max_steps = 40;
  c.lambda = 0.0;
  c.target = 3;
  const Latent z = s.codec.encode(s.data.test[0].pixels);
  const auto r = tta_attack(z, s.codec, s.scorer, s.stats, c);
  CHECK(r.trace.steps.size() <= c.max_steps + 1);
  CHECK(r.latent.values.size() == z.values.size());
  CHECK(r.trace.final_latent == r.latent);
  CHECK(r.trace.steps.back().l_sem < r.trace.steps.front().l_sem);
  for (const auto& st : r.trace.steps) {
    CHECK(std::isfinite(st.total));
    CHECK(st.total == doctest::Approx(st.l_sem + c.lambda * st.reg));
  }

  c.eta = 0.5;
  const Latent q = s.vq.encode(s.data.test[0].pixels);
  const auto rq = tta_attack_quantized(q, s.vq, s.scorer, s.vq_stats, c);
  CHECK(rq.latent.kind == LatentKind::quantized);
  CHECK(rq.latent.indices.size() == q.indices.size());
  for (auto k : rq.latent.indices) CHECK(k < 64);
  CHECK(rq.trace.steps.size() == c.max_steps + 1);
}

TEST_CASE("tolerance stop ends the iteration early") {
  const auto& s = setup();
  TtaConfig c;
  c.max_steps = 300;
  c.stop_tol = 1e-1;
  c.lambda = 0.0;
  const auto r = tta_attack(s.codec.encode(s.data.test[1].pixels), s.codec, s.scorer, s.stats, c);
  CHECK(r.trace.early_stop);
  CHECK(r.trace.steps.size() < 301);
}

TEST_CASE("a diverging step size surfaces a non-finite error") {
  const auto& s = setup();
  TtaConfig c;
  c.eta = 1e6;
  c.lambda = 1.0;
  CHECK_THROWS_AS(tta_attack(s.codec.encode(s.data.test[0].pixels), s.codec, s.scorer, s.stats, c),
                  NonFiniteError);
}

TEST_CASE("backtracking keeps the trace non-increasing") {
  const auto& s = setup();
  TtaConfig c;
  c.eta = 5.0;  // large enough that plain steps overshoot
  c.max_steps = 30;
  c.backtracking = true;
  c.stop_tol = 0.0;
  for (std::size_t i = 0; i < 5; ++i) {
    c.target = int(i);
    const auto r = tta_attack(s.codec.encode(s.data.test[i].pixels), s.codec, s.scorer, s.stats, c);
    for (std::size_t k = 1; k < r.trace.steps.size(); ++k) CHECK(r.trace.steps[k].total <= r.trace.steps[k - 1].total);
  }
}

TEST_CASE("contract errors") {
  const auto& s = setup();
  const Latent z = s.codec.encode(s.data.test[0].pixels);
  TtaConfig c;
  c.target = 6;
  CHECK_THROWS_AS(tta_attack(z, s.codec, s.scorer, s.stats, c), ContractError);
  c.target = 1;
  c.eta = -1;
  CHECK_THROWS_AS(tta_attack(z, s.codec, s.scorer, s.stats, c), ContractError);
  c.eta = 0.05;
  CHECK_THROWS_AS(tta_attack(z, s.codec, s.scorer, s.vq_stats, c), ShapeError);
  CHECK_THROWS_AS(tta_attack(s.vq.encode(s.data.test[0].pixels), s.codec, s.scorer, s.stats, c), ContractError);
  CHECK_THROWS_AS(tta_attack(z, s.codec, ScorerModel(), s.stats, c), ModelStateError);
  const CodecModel unfrozen = CodecModel::initialize(CodecConfig{});
  CHECK_THROWS_AS(tta_attack(z, unfrozen, s.scorer, s.stats, c), ModelStateError);
}

TEST_CASE("noise baseline") {
  const Latent z = Latent::continuous(0, std::vector<float>(16, 0.3f));
  CHECK(noise_baseline(z, 0.0, 1) == z);
  CHECK(noise_baseline(z, 0.2, 1, 5) == noise_baseline(z, 0.2, 1, 5));
  CHECK_THROWS_AS(noise_baseline(Latent::quantized(1, {1}), 0.1, 1), ContractError);
  const double sigma = 0.2;
  double mean_norm = 0.0;
  const int n = 4000;
  for (int i = 0; i < n; ++i) {
    const Latent out = noise_baseline(z, sigma, 9, std::uint64_t(i));
    double s = 0;
    for (std::size_t j = 0; j < 16; ++j) s += std::pow(out.values[j] - z.values[j], 2);
    mean_norm += std::sqrt(s) / n;
  }
  // chi(16) has mean 3.938 and variance 0.49; 4000 draws give a standard error under 0.3%
  CHECK(mean_norm == doctest::Approx(sigma * chi_mean(16)).epsilon(0.01));
}

TEST_CASE("trace csv") {
  AttackTrace t;
  t.steps = {{0, 0.5, 2.0, 0.7}, {1, 0.25, 1.0, 0.35}};
  CHECK(trace_csv(t) == "step,l_sem,reg,total\n0,0.5,2,0.7\n1,0.25,1,0.35\n");
}
