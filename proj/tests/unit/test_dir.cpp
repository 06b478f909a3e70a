#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "semcom/attack_dir.hpp"

using namespace semcom;

namespace {

constexpr std::size_t kDim = 16;

Tensor normal_rows(std::size_t n, std::size_t d, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t(Shape{n, d});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal());
  return t;
}

std::vector<float> normal_vec(std::size_t d, Rng& rng) {
  std::vector<float> v(d);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

Tensor class_table() {
  Tensor t(Shape{6, 8});
  for (std::size_t c = 0; c < 6; ++c) t.at(c, c) = 1.0f;
  return t;
}

std::vector<int> cyclic_labels(std::size_t n) {
  std::vector<int> l(n);
  for (std::size_t i = 0; i < n; ++i) l[i] = int(i % 6);
  return l;
}

// Denoiser trained on unit-Gaussian latents, so every conditional target
// distribution is N(0, I).
struct GaussianSetup {
  Tensor latents;
  std::vector<int> labels;
  DenoiserModel model;
  DenoiserReport report;
};

const GaussianSetup& gaussian() {
  static const GaussianSetup g = [] {
    GaussianSetup g;
    g.latents = normal_rows(40000, kDim, 17);
    g.labels = cyclic_labels(40000);
    DenoiserConfig c;
    c.epochs = 20;
    g.model = train_denoiser(g.latents, g.labels, class_table(), DiffusionSchedule::standard(), c, &g.report);
    return g;
  }();
  return g;
}

double norm_diff(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(double(a[i]) - b[i], 2);
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("schedule identities hold exactly") {
  for (const auto& s : {DiffusionSchedule::standard(), DiffusionSchedule::linear(100, 1e-4, 0.02),
                        DiffusionSchedule::from_betas({0.1, 0.2, 0.5})}) {
    CHECK(s.alpha_bars[0] == 1.0);
    CHECK(s.sigmas[1] == 0.0);
    for (std::size_t t = 1; t <= s.steps; ++t) {
      CHECK(s.alphas[t] == 1.0 - s.betas[t]);
      CHECK(s.alpha_bars[t] == s.alpha_bars[t - 1] * s.alphas[t]);
      CHECK(s.alpha_bars[t] < s.alpha_bars[t - 1]);
      CHECK(s.sigmas[t] * s.sigmas[t] ==
            doctest::Approx(s.betas[t] * (1 - s.alpha_bars[t - 1]) / (1 - s.alpha_bars[t])).epsilon(1e-12));
    }
  }
  const auto s = DiffusionSchedule::standard();
  CHECK(s.steps == 1000);
  CHECK(s.betas[1] == doctest::Approx(1e-4));
  CHECK(s.betas[1000] == doctest::Approx(0.02));
  CHECK(s.alpha_bars[1000] < 1e-4);

  CHECK_THROWS_AS(DiffusionSchedule::from_betas({}), ContractError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({0.1, 0.1}), ContractError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({0.2, 0.1}), ContractError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({0.0, 0.1}), ContractError);
  CHECK_THROWS_AS(DiffusionSchedule::from_betas({0.5, 1.0}), ContractError);
  CHECK_THROWS_AS(DiffusionSchedule::linear(10, 0.02, 1e-4), ContractError);
}

TEST_CASE("forward noise examples and range") {
  const auto s = DiffusionSchedule::standard(50);
  Rng rng(1);
  const auto z = normal_vec(kDim, rng), eps = normal_vec(kDim, rng);
  CHECK(forward_noise(s, z, 0, eps) == z);

  const std::vector<float> zero(3, 0.0f), e1{1.0f, 0.0f, 0.0f};
  CHECK(forward_noise(0.75, zero, e1) == std::vector<float>{0.5f, 0.0f, 0.0f});

  CHECK_THROWS_AS(forward_noise(s, z, 51, eps), ContractError);
  CHECK_THROWS_AS(forward_noise(s, z, 3, std::vector<float>(15)), ShapeError);
}

TEST_CASE("forward noise is linear by superposition") {
  const auto s = DiffusionSchedule::standard();
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t t = 1 + rng.below(s.steps);
    const auto z1 = normal_vec(kDim, rng), z2 = normal_vec(kDim, rng);
    const auto e1 = normal_vec(kDim, rng), e2 = normal_vec(kDim, rng);
    const float a = static_cast<float>(rng.uniform(-2, 2)), b = static_cast<float>(rng.uniform(-2, 2));
    std::vector<float> zc(kDim), ec(kDim);
    for (std::size_t j = 0; j < kDim; ++j) {
      zc[j] = a * z1[j] + b * z2[j];
      ec[j] = a * e1[j] + b * e2[j];
    }
    const auto lhs = forward_noise(s, zc, t, ec);
    const auto r1 = forward_noise(s, z1, t, e1), r2 = forward_noise(s, z2, t, e2);
    for (std::size_t j = 0; j < kDim; ++j) CHECK(lhs[j] == doctest::Approx(a * r1[j] + b * r2[j]).epsilon(1e-5));
  }
}

TEST_CASE("forward noise second moment matches the analytic trace") {
  const auto s = DiffusionSchedule::standard();
  const std::size_t t = 300, n = 100000, d = 8;
  std::vector<float> z(d, 0.0f);
  z[2] = 0.6f;
  z[5] = 0.8f;  // unit norm
  Rng rng(3);
  std::vector<double> sum(d, 0.0), sq(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto zt = forward_noise(s, z, t, normal_vec(d, rng));
    for (std::size_t j = 0; j < d; ++j) {
      sum[j] += zt[j];
      sq[j] += double(zt[j]) * zt[j];
    }
  }
  // trace E[z_t z_t^T] = alpha_bar ||z||^2 + (1 - alpha_bar) d
  double trace = 0.0;
  for (std::size_t j = 0; j < d; ++j) trace += sq[j] / n;
  const double ab = s.alpha_bars[t];
  CHECK(trace == doctest::Approx(ab + (1 - ab) * d).epsilon(0.01));
  CHECK(sum[5] / n == doctest::Approx(std::sqrt(ab) * 0.8).epsilon(0.02));
}

TEST_CASE("reverse update examples") {
  const std::vector<float> z{1.0f, -2.0f, 0.5f}, zero(3, 0.0f), xi{3.0f, 3.0f, 3.0f};
  CHECK(reverse_update(1.0, 1.0, 0.0, z, zero, zero) == z);
  const std::vector<float> e1{1.0f, 0.0f, 0.0f};
  const auto out = reverse_update(0.81, 0.5, 0.0, e1, zero, zero);
  CHECK(out[0] == doctest::Approx(1.0 / 0.9));
  CHECK(out[1] == 0.0f);
  // standard posterior-mean coefficient (1 - alpha) / sqrt(1 - alpha_bar)
  const auto with_eps = reverse_update(0.81, 0.64, 0.0, zero, e1, zero);
  CHECK(with_eps[0] == doctest::Approx(-(0.19 / 0.6) / 0.9));
  const auto noisy = reverse_update(1.0, 1.0, 0.5, z, zero, xi);
  CHECK(noisy[0] == doctest::Approx(2.5));
  CHECK_THROWS_AS(reverse_update(0.9, 0.5, 0.0, z, zero, std::vector<float>(2)), ShapeError);
}

TEST_CASE("timestep embedding") {
  const auto e = timestep_embedding(0, 16);
  for (std::size_t k = 0; k < 8; ++k) {
    CHECK(e[k] == 0.0f);
    CHECK(e[8 + k] == 1.0f);
  }
  const auto e7 = timestep_embedding(7, 4);
  CHECK(e7[0] == doctest::Approx(std::sin(7.0)));
  CHECK(e7[1] == doctest::Approx(std::sin(7.0 / 100.0)));
  CHECK_THROWS_AS(timestep_embedding(1, 3), ContractError);
}

TEST_CASE("untrained loss is near d and training halves it") {
  const auto& g = gaussian();
  CHECK(g.report.initial_loss == doctest::Approx(double(kDim)).epsilon(0.3));
  CHECK(g.report.final_loss <= 0.5 * g.report.initial_loss);
  CHECK(g.model.frozen());
  MESSAGE("loss " << g.report.initial_loss << " -> " << g.report.final_loss);
}

TEST_CASE("reverse step contracts") {
  const auto& m = gaussian().model;
  Rng rng(4);
  const auto z = normal_vec(kDim, rng), xi = normal_vec(kDim, rng);
  // xi is suppressed at t = 1
  CHECK(m.reverse_step(z, 1, 0, xi) == m.reverse_step(z, 1, 0, std::vector<float>(kDim, 0.0f)));
  CHECK(m.reverse_step(z, 2, 0, xi) != m.reverse_step(z, 2, 0, std::vector<float>(kDim, 0.0f)));
  CHECK_THROWS_AS(m.reverse_step(z, 0, 0, xi), ContractError);
  CHECK_THROWS_AS(m.reverse_step(z, 1001, 0, xi), ContractError);
  CHECK_THROWS_AS(m.reverse_step(z, 5, 6, xi), ContractError);
  CHECK_THROWS_AS(m.reverse_step(std::vector<float>(15), 5, 0, xi), ShapeError);
  CHECK_THROWS_AS(DenoiserModel().sample(0, rng), ModelStateError);
}

TEST_CASE("sampling a unit-Gaussian-trained denoiser recovers N(0, I)") {
  const auto& m = gaussian().model;
  const std::size_t n = 5000;
  Rng rng(5);
  const Tensor z = m.sample_batch(cyclic_labels(n), rng);
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::size_t j = 0; j < kDim; ++j) {
    double s = 0.0, sq = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      s += z.at(i, j);
      sq += double(z.at(i, j)) * z.at(i, j);
    }
    const double mean = s / n, var = sq / n - mean * mean;
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_var = std::max(worst_var, std::abs(var - 1.0));
    CHECK(std::abs(mean) <= 0.05);
    CHECK(std::abs(var - 1.0) <= 0.10);
  }
  MESSAGE("worst |mean| " << worst_mean << ", worst |var - 1| " << worst_var);

  // the batched path follows the same recursion as the single-row one
  Rng a(6), b(6);
  const Tensor one = m.sample_batch(std::vector<int>{2}, a);
  const auto single = m.sample(2, b);
  for (std::size_t j = 0; j < kDim; ++j) CHECK(one[j] == doctest::Approx(single[j]).epsilon(1e-5));
}

TEST_CASE("edit strength: small keeps the source, full discards it") {
  const auto& m = gaussian().model;
  const Tensor src = normal_rows(500, kDim, 8);
  Rng rng(9);
  std::size_t closer = 0;
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < 500; ++i) {
    std::span<const float> z(src.data().data() + i * kDim, kDim);
    const auto near = m.edit(z, int(i % 6), 1e-4, rng);
    const auto full = m.edit(z, int(i % 6), 1.0, rng);
    closer += norm_diff(near, z) < norm_diff(full, z);
    for (std::size_t j = 0; j < kDim; ++j) {
      xs.push_back(z[j]);
      ys.push_back(full[j]);
    }
  }
  CHECK(closer >= 450);
  // Pearson correlation over all (z_j, z'_j) pairs
  const double n = double(xs.size());
  double mx = 0, my = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    mx += xs[k] / n;
    my += ys[k] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    sxy += (xs[k] - mx) * (ys[k] - my);
    sxx += (xs[k] - mx) * (xs[k] - mx);
    syy += (ys[k] - my) * (ys[k] - my);
  }
  const double corr = sxy / std::sqrt(sxx * syy);
  MESSAGE("s=1 correlation " << corr);
  CHECK(std::abs(corr) < 0.2);

  std::span<const float> z(src.data().data(), kDim);
  CHECK_THROWS_AS(m.edit(z, 0, 0.0, rng), ContractError);
  CHECK_THROWS_AS(m.edit(z, 0, 1.5, rng), ContractError);
  CHECK_THROWS_AS(m.edit(z, 6, 0.5, rng), ContractError);
}

TEST_CASE("checkpoint round-trip and reproducible training") {
  const Tensor lat = normal_rows(300, kDim, 11);
  const auto labels = cyclic_labels(300);
  DenoiserConfig c;
  c.epochs = 2;
  const auto sched = DiffusionSchedule::standard(100);
  const DenoiserModel a = train_denoiser(lat, labels, class_table(), sched, c);
  const DenoiserModel b = train_denoiser(lat, labels, class_table(), sched, c);
  CHECK(a.to_checkpoint().serialize() == b.to_checkpoint().serialize());

  const auto path = std::filesystem::temp_directory_path() / "semcom_test_denoiser.ckpt";
  a.save(path);
  const DenoiserModel back = DenoiserModel::load(path);
  CHECK(back.schedule().alpha_bars == a.schedule().alpha_bars);
  Rng r1(12), r2(12);
  std::span<const float> z(lat.data().data(), kDim);
  CHECK(a.edit(z, 3, 0.5, r1) == back.edit(z, 3, 0.5, r2));
  CHECK_THROWS_AS(CodecModel::from_checkpoint(Checkpoint::load(path)), CheckpointError);

  c.epochs = 0;
  CHECK_THROWS_AS(train_denoiser(lat, labels, class_table(), sched, c), ContractError);
  CHECK_THROWS_AS(train_denoiser(lat, cyclic_labels(299), class_table(), sched, c), ShapeError);
}

TEST_CASE("dir_attack on codec latents") {
  const DatasetSplit data = generate_dataset(51, 30, 0.8);
  CodecConfig cc;
  cc.epochs = 2;
  cc.hidden = 64;
  const CodecModel codec = train_codec(data.train, cc);
  cc.id = CodecId::vq_mlp;
  const CodecModel vq = train_codec(data.train, cc);
  DenoiserConfig dc;
  dc.epochs = 1;
  const auto sched = DiffusionSchedule::standard(50);
  const auto labels = cyclic_labels(8);
  const DenoiserModel den = train_denoiser(normal_rows(8, 16, 1), labels, class_table(), sched, dc);
  const DenoiserModel den_vq = train_denoiser(normal_rows(8, 256, 1), labels, class_table(), sched, dc);

  for (std::size_t i = 0; i < 5; ++i) {
    const Latent z = codec.encode(data.test[i].pixels);
    const Latent out = dir_attack(z, codec, den, 2, 0.8, 7, i);
    CHECK(out.kind == LatentKind::continuous);
    CHECK(out.values.size() == 16);
    CHECK(out == dir_attack(z, codec, den, 2, 0.8, 7, i));
    CHECK_NOTHROW(codec.decode(out));

    const Latent q = vq.encode(data.test[i].pixels);
    const Latent qo = dir_attack(q, vq, den_vq, 2, 0.8, 7, i);
    CHECK(qo.kind == LatentKind::quantized);
    CHECK(qo.indices.size() == 16);
    CHECK_NOTHROW(vq.decode(qo));
  }
  const Latent z = codec.encode(data.test[0].pixels);
  CHECK_THROWS_AS(dir_attack(z, codec, den_vq, 2, 0.8, 7, 0), CodecMismatchError);
  CHECK_THROWS_AS(dir_attack(z, codec, den, -1, 0.8, 7, 0), ContractError);
}
