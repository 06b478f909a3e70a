#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "json.hpp"
#include "semcom/detection.hpp"
#include "semcom/rng.hpp"

using namespace semcom;

namespace {

Tensor normal_batch(std::size_t n, std::size_t d, std::uint64_t seed, double mean = 0.0, double sd = 1.0) {
  Rng rng(seed);
  Tensor t(Shape{n, d});
  for (auto& v : t.data()) v = static_cast<float>(rng.normal(mean, sd));
  return t;
}

// Smallest and largest k whose binomial tail masses stay above 0.005.
std::pair<int, int> binomial_99_interval(int n, double p) {
  std::vector<double> pmf(n + 1);
  for (int k = 0; k <= n; ++k) {
    pmf[k] = std::exp(std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0) +
                      k * std::log(p) + (n - k) * std::log1p(-p));
  }
  int lo = 0, hi = n;
  double cum = 0.0;
  for (int k = 0; k <= n; ++k) {
    cum += pmf[k];
    if (cum > 0.005) {
      lo = k;
      break;
    }
  }
  cum = 0.0;
  for (int k = n; k >= 0; --k) {
    cum += pmf[k];
    if (cum > 0.005) {
      hi = k;
      break;
    }
  }
  return {lo, hi};
}

double brute_auroc(const std::vector<double>& a, const std::vector<double>& l) {
  double s = 0.0;
  for (double x : a)
    for (double y : l) s += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return s / double(a.size() * l.size());
}

}  // namespace

TEST_CASE("fit_stats contracts") {
  Tensor same(Shape{20, 4}, 0.5f);
  CHECK_THROWS_AS(fit_stats(same), ContractError);
  CHECK_THROWS_AS(fit_stats(normal_batch(4, 4, 1)), ContractError);
  CHECK_NOTHROW(fit_stats(normal_batch(5, 4, 1)));

  const Tensor b = normal_batch(300, 6, 2);
  const LatentStats s1 = fit_stats(b), s2 = fit_stats(b);
  CHECK(s1.mean == s2.mean);
  CHECK(s1.precision == s2.precision);
  CHECK(s1.n_fit == 300);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(s1.covariance[i * 6 + j] == s1.covariance[j * 6 + i]);
}

TEST_CASE("fit_stats recovers standard-normal moments") {
  const LatentStats s = fit_stats(normal_batch(10000, 8, 3));
  for (std::size_t j = 0; j < 8; ++j) {
    CHECK(std::abs(s.mean[j]) <= 0.05);
    CHECK(std::abs(s.covariance[j * 8 + j] - 1.0) <= 0.10);
  }
}

TEST_CASE("mahalanobis examples") {
  const LatentStats s = fit_stats(normal_batch(200, 5, 4, 1.0, 2.0));
  std::vector<float> mu(s.mean.begin(), s.mean.end());
  // float rounding of the mean is the only source of a nonzero value here
  std::vector<double> md(mu.begin(), mu.end());
  LatentStats exact = s;
  exact.mean = md;
  CHECK(mahalanobis(exact, mu) == 0.0);

  LatentStats unit;
  unit.dim = 3;
  unit.n_fit = 4;
  unit.mean = {0.5, -1.0, 2.0};
  unit.precision = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  CHECK(mahalanobis(unit, std::vector<float>{1.5f, -1.0f, 2.0f}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(mahalanobis(unit, std::vector<float>{1.0f, 2.0f}), ShapeError);
}

TEST_CASE("mahalanobis agrees with an explicit linear solve") {
  Rng rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t d = 3 + trial;
    // correlated batch: x = A g
    Tensor g = normal_batch(400, d, 100 + trial);
    Eigen::MatrixXd a = Eigen::MatrixXd::Random(long(d), long(d));
    Tensor x(Shape{400, d});
    for (std::size_t i = 0; i < 400; ++i)
      for (std::size_t r = 0; r < d; ++r) {
        double v = 0;
        for (std::size_t c = 0; c < d; ++c) v += a(long(r), long(c)) * g.at(i, c);
        x.at(i, r) = static_cast<float>(v);
      }
    const LatentStats s = fit_stats(x);
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(long(d), long(d));
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov(long(i), long(j)) = s.covariance[i * d + j];
    cov += s.ridge * Eigen::MatrixXd::Identity(long(d), long(d));
    const Eigen::LDLT<Eigen::MatrixXd> solver(cov);
    for (int k = 0; k < 5; ++k) {
      std::vector<float> z(d);
      Eigen::VectorXd c = Eigen::VectorXd::Zero(long(d));
      for (std::size_t j = 0; j < d; ++j) {
        z[j] = static_cast<float>(rng.normal(0.0, 3.0));
        c(long(j)) = double(z[j]) - s.mean[j];
      }
      const double oracle = std::sqrt(c.dot(solver.solve(c)));
      CHECK(mahalanobis(s, z) == doctest::Approx(oracle).epsilon(1e-6));
      CHECK(mahalanobis(s, z) >= 0.0);
    }
  }
}

TEST_CASE("ks examples and survival function") {
  const std::vector<double> a{0.3, -1.2, 0.8, 0.8, 2.0};
  CHECK(ks_two_sample(a, a).statistic == 0.0);
  CHECK(ks_two_sample(a, a).p_value == doctest::Approx(1.0));
  const std::vector<double> lo(50, -1.0), hi(70, 1.0);
  CHECK(ks_two_sample(lo, hi).statistic == 1.0);
  CHECK(ks_two_sample(lo, hi).p_value < 1e-6);
  CHECK_THROWS_AS(ks_two_sample(std::vector<double>{}, a), ContractError);

  CHECK(kolmogorov_survival(0.5) == doctest::Approx(0.9639452).epsilon(1e-6));
  CHECK(kolmogorov_survival(1.0) == doctest::Approx(0.2699996).epsilon(1e-6));
  CHECK(kolmogorov_survival(1.3581) == doctest::Approx(0.05).epsilon(1e-3));
  // the two series branches meet continuously
  CHECK(kolmogorov_survival(1.18 - 1e-9) == doctest::Approx(kolmogorov_survival(1.18)).epsilon(1e-8));
}

TEST_CASE("ks false-positive rate is calibrated") {
  const int trials = 1000;
  const std::size_t n = 500;
  int rejections = 0;
  for (int t = 0; t < trials; ++t) {
    Rng ra(Rng::derive(71, t, 0)), rb(Rng::derive(71, t, 1));
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = ra.normal();
    for (auto& v : y) v = rb.normal();
    rejections += ks_two_sample(x, y).p_value < 0.05;
  }
  const auto [lo, hi] = binomial_99_interval(trials, 0.05);
  MESSAGE("rejections " << rejections << " / 1000, 99% interval [" << lo << ", " << hi << "]");
  CHECK(rejections >= lo);
  CHECK(rejections <= hi);
}

TEST_CASE("auroc") {
  const std::vector<double> s{1, 2, 2, 3, 5};
  CHECK(auroc(s, s) == 0.5);
  CHECK(auroc(std::vector<double>{5, 6}, std::vector<double>{1, 2, 3}) == 1.0);
  CHECK_THROWS_AS(auroc(std::vector<double>{}, s), ContractError);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> a(1 + trial * 9), l(200 - trial * 5);
    // coarse rounding forces ties
    for (auto& v : a) v = std::round(rng.normal(0.5, 1.0) * 4) / 4;
    for (auto& v : l) v = std::round(rng.normal() * 4) / 4;
    CHECK(auroc(a, l) == doctest::Approx(brute_auroc(a, l)).epsilon(1e-12));
    std::vector<double> fa(a.size()), fl(l.size());
    for (auto& v : fa) v = rng.normal();
    for (auto& v : fl) v = rng.normal();
    CHECK(auroc(fa, fl) + auroc(fl, fa) == doctest::Approx(1.0));
  }
}

TEST_CASE("codebook membership") {
  Tensor cb(Shape{4, 2});
  for (std::size_t i = 0; i < 8; ++i) cb[i] = float(i);
  const auto ok = codebook_membership(cb, std::vector<std::uint16_t>{0, 3, 1});
  CHECK(ok.valid);
  CHECK(ok.distances == std::vector<double>{0, 0, 0});
  CHECK_FALSE(codebook_membership(cb, std::vector<std::uint16_t>{0, 4}).valid);

  const auto rows = codebook_membership(cb, std::vector<float>{2, 3, 6, 7});
  CHECK(rows.distances == std::vector<double>{0, 0});
  const auto off = codebook_membership(cb, std::vector<float>{2, 4});
  CHECK(off.distances[0] == doctest::Approx(1.0));
}

TEST_CASE("marginal tail score and mean distance") {
  const LatentStats s = fit_stats(normal_batch(1000, 3, 9));
  std::vector<float> mu(s.mean.begin(), s.mean.end());
  CHECK(mean_distance(s, mu) == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(marginal_tail_score(s, mu) < 0.1);
  CHECK(marginal_tail_score(s, std::vector<float>{0.0f, 0.0f, 100.0f}) == doctest::Approx(1.0));
}

TEST_CASE("report thresholds, JSON and ROC") {
  Rng rng(10);
  std::vector<double> a(200), l(200);
  for (auto& v : a) v = rng.normal(1.0, 1.0);
  for (auto& v : l) v = rng.normal();
  DetectionReport rep;
  rep.detectors.push_back(score_detector("mahalanobis", a, l));
  const auto& d = rep.detector("mahalanobis");
  REQUIRE(d.thresholds.size() == 3);
  for (const auto& row : d.thresholds) {
    CHECK(row.fpr <= row.target_fpr);
    CHECK(row.tpr >= 0.0);
  }
  const auto j = nlohmann::json::parse(rep.to_json());
  CHECK(j["detectors"][0]["auroc"].get<double>() == doctest::Approx(d.auroc));
  const std::string csv = rep.roc_csv();
  CHECK(csv.rfind("detector,threshold,fpr,tpr\n", 0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 1 + 400);
  CHECK_THROWS_AS(rep.detector("nope"), ContractError);
}
