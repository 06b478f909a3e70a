#include "semcom/detection.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "semcom/checkpoint.hpp"
#include "semcom/error.hpp"

namespace semcom {

namespace {

// In-place lower Cholesky factor of a symmetric [n, n] matrix.
void cholesky(std::vector<double>& a, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (std::size_t k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (!(d > 0.0)) throw ContractError("covariance is not positive definite (degenerate latent batch)");
    const double l = std::sqrt(d);
    a[j * n + j] = l;
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (std::size_t k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / l;
    }
    for (std::size_t k = j + 1; k < n; ++k) a[j * n + k] = 0.0;
  }
}

// Inverse of L L^T given the lower factor L.
std::vector<double> cholesky_inverse(const std::vector<double>& l, std::size_t n) {
  std::vector<double> inv(n * n, 0.0);
  std::vector<double> y(n), x(n);
  for (std::size_t c = 0; c < n; ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = i == c ? 1.0 : 0.0;
      for (std::size_t k = 0; k < i; ++k) s -= l[i * n + k] * y[k];
      y[i] = s / l[i * n + i];
    }
    for (std::size_t i = n; i-- > 0;) {
      double s = y[i];
      for (std::size_t k = i + 1; k < n; ++k) s -= l[k * n + i] * x[k];
      x[i] = s / l[i * n + i];
    }
    for (std::size_t i = 0; i < n; ++i) inv[i * n + c] = x[i];
  }
  // Symmetrize away rounding asymmetry.
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) inv[i * n + j] = inv[j * n + i] = 0.5 * (inv[i * n + j] + inv[j * n + i]);
  return inv;
}

void require_dim(const LatentStats& stats, std::size_t n) {
  if (stats.dim == 0) throw ContractError("latent stats are not fitted");
  if (n != stats.dim) {
    throw ShapeError("latent length " + std::to_string(n) + " does not match fitted dimension " +
                     std::to_string(stats.dim));
  }
}

std::vector<double> column(const Tensor& t, std::size_t dim) {
  if (t.rank() != 2 || dim >= t.dim(1)) throw ShapeError("ks: column out of range");
  std::vector<double> out(t.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t.at(i, dim);
  return out;
}

}  // namespace

Tensor LatentStats::precision_tensor() const {
  Tensor t(Shape{dim, dim});
  for (std::size_t i = 0; i < precision.size(); ++i) t[i] = static_cast<float>(precision[i]);
  return t;
}

Tensor LatentStats::mean_tensor() const {
  Tensor t(Shape{dim});
  for (std::size_t i = 0; i < dim; ++i) t[i] = static_cast<float>(mean[i]);
  return t;
}

LatentStats fit_stats(const Tensor& batch, bool keep_reference) {
  if (batch.rank() != 2 || batch.dim(1) == 0) throw ShapeError("fit_stats: expected a [n, d] batch");
  batch.check_finite("fit_stats batch");
  const std::size_t n = batch.dim(0), d = batch.dim(1);
  if (n < d + 1) {
    throw ContractError("fit_stats: need at least d + 1 = " + std::to_string(d + 1) + " latents, got " +
                        std::to_string(n));
  }
  LatentStats s;
  s.dim = d;
  s.n_fit = n;
  s.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += batch.at(i, j);
  for (double& m : s.mean) m /= double(n);
  s.covariance.assign(d * d, 0.0);
  std::vector<double> c(d);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) c[j] = batch.at(i, j) - s.mean[j];
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) s.covariance[a * d + b] += c[a] * c[b];
  }
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      s.covariance[a * d + b] /= double(n - 1);
      s.covariance[b * d + a] = s.covariance[a * d + b];
    }
  }
  double trace = 0.0;
  for (std::size_t j = 0; j < d; ++j) trace += s.covariance[j * d + j];
  if (!(trace > 0.0)) throw ContractError("fit_stats: covariance has rank 0 (identical latents)");
  s.ridge = 1e-6 * trace / double(d);
  std::vector<double> a = s.covariance;
  for (std::size_t j = 0; j < d; ++j) a[j * d + j] += s.ridge;
  cholesky(a, d);
  s.precision = cholesky_inverse(a, d);
  if (keep_reference) {
    TensorD ref(Shape{n, d});
    for (std::size_t j = 0; j < d; ++j) {
      std::vector<double> col = column(batch, j);
      std::sort(col.begin(), col.end());
      for (std::size_t i = 0; i < n; ++i) ref.at(i, j) = col[i];
    }
    s.reference = std::move(ref);
  }
  return s;
}

double mahalanobis_squared(const LatentStats& stats, std::span<const float> z) {
  require_dim(stats, z.size());
  const std::size_t d = stats.dim;
  std::vector<double> c(d);
  for (std::size_t j = 0; j < d; ++j) c[j] = double(z[j]) - stats.mean[j];
  double q = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    double row = 0.0;
    for (std::size_t b = 0; b < d; ++b) row += stats.precision[a * d + b] * c[b];
    q += c[a] * row;
  }
  return std::max(q, 0.0);
}

double mahalanobis(const LatentStats& stats, std::span<const float> z) {
  return std::sqrt(mahalanobis_squared(stats, z));
}

double mean_distance(const LatentStats& stats, std::span<const float> z) {
  require_dim(stats, z.size());
  double s = 0.0;
  for (std::size_t j = 0; j < stats.dim; ++j) {
    const double c = double(z[j]) - stats.mean[j];
    s += c * c;
  }
  return std::sqrt(s);
}

double marginal_tail_score(const LatentStats& stats, std::span<const float> z) {
  require_dim(stats, z.size());
  if (!stats.reference) throw ContractError("marginal_tail_score: stats were fitted without a reference");
  const TensorD& ref = *stats.reference;
  const std::size_t n = ref.dim(0);
  double worst = 0.0;
  std::vector<double> col(n);
  for (std::size_t j = 0; j < stats.dim; ++j) {
    for (std::size_t i = 0; i < n; ++i) col[i] = ref.at(i, j);
    const double x = z[j];
    const auto lo = std::lower_bound(col.begin(), col.end(), x);
    const auto hi = std::upper_bound(lo, col.end(), x);
    const double f = (double(lo - col.begin()) + 0.5 * double(hi - lo)) / double(n);
    worst = std::max(worst, std::abs(2.0 * f - 1.0));
  }
  return worst;
}

double kolmogorov_survival(double lambda) {
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Jacobi-theta form, fast for small lambda.
    const double w = std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
    double series = 0.0;
    for (int k = 1; k <= 6; ++k) series += std::exp(-double((2 * k - 1) * (2 * k - 1)) * w);
    const double cdf = std::sqrt(2.0 * std::numbers::pi) / lambda * series;
    return std::clamp(1.0 - cdf, 0.0, 1.0);
  }
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = std::exp(-2.0 * k * k * lambda * lambda);
    sum += (k % 2 == 1 ? 1.0 : -1.0) * term;
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) throw ContractError("ks_two_sample: empty batch");
  std::vector<double> x(a.begin(), a.end()), y(b.begin(), b.end());
  std::sort(x.begin(), x.end());
  std::sort(y.begin(), y.end());
  const double na = double(x.size()), nb = double(y.size());
  std::size_t i = 0, j = 0;
  double d = 0.0;
  while (i < x.size() && j < y.size()) {
    const double v = std::min(x[i], y[j]);
    while (i < x.size() && x[i] == v) ++i;
    while (j < y.size() && y[j] == v) ++j;
    d = std::max(d, std::abs(double(i) / na - double(j) / nb));
  }
  KsResult r;
  r.statistic = d;
  const double ne = std::sqrt(na * nb / (na + nb));
  r.p_value = kolmogorov_survival((ne + 0.12 + 0.11 / ne) * d);
  return r;
}

KsResult ks_two_sample(const Tensor& reference, const Tensor& test, std::size_t dim) {
  const auto a = column(reference, dim);
  const auto b = column(test, dim);
  return ks_two_sample(a, b);
}

double ks_rejection_rate(const Tensor& reference, const Tensor& test, double alpha) {
  if (reference.rank() != 2 || test.rank() != 2 || reference.dim(1) != test.dim(1)) {
    throw ShapeError("ks_rejection_rate: batches must share their column count");
  }
  const std::size_t d = reference.dim(1);
  std::size_t rejected = 0;
  for (std::size_t j = 0; j < d; ++j) rejected += ks_two_sample(reference, test, j).p_value < alpha;
  return double(rejected) / double(d);
}

MembershipResult codebook_membership(const Tensor& codebook, std::span<const std::uint16_t> indices) {
  MembershipResult r;
  r.distances.assign(indices.size(), 0.0);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= codebook.dim(0)) {
      r.valid = false;
      r.distances[i] = std::numeric_limits<double>::infinity();
    }
  }
  return r;
}

MembershipResult codebook_membership(const Tensor& codebook, std::span<const float> vectors) {
  const std::size_t m = codebook.dim(0), d = codebook.dim(1);
  if (vectors.size() % d != 0) throw ShapeError("codebook_membership: vector length not a multiple of codeword width");
  MembershipResult r;
  for (std::size_t s = 0; s < vectors.size() / d; ++s) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < m; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double c = double(vectors[s * d + j]) - codebook.at(k, j);
        dist += c * c;
      }
      best = std::min(best, dist);
    }
    r.distances.push_back(std::sqrt(best));
  }
  return r;
}

double auroc(std::span<const double> attacked, std::span<const double> legit) {
  if (attacked.empty() || legit.empty()) throw ContractError("auroc: empty score set");
  std::vector<double> l(legit.begin(), legit.end());
  std::sort(l.begin(), l.end());
  double wins = 0.0;
  for (double a : attacked) {
    const auto lo = std::lower_bound(l.begin(), l.end(), a);
    const auto hi = std::upper_bound(lo, l.end(), a);
    wins += double(lo - l.begin()) + 0.5 * double(hi - lo);
  }
  return wins / (double(attacked.size()) * double(l.size()));
}

std::vector<ThresholdRow> threshold_table(std::span<const double> attacked, std::span<const double> legit,
                                          std::span<const double> fprs) {
  if (attacked.empty() || legit.empty()) throw ContractError("threshold_table: empty score set");
  std::vector<double> l(legit.begin(), legit.end()), a(attacked.begin(), attacked.end());
  std::sort(l.begin(), l.end());
  std::sort(a.begin(), a.end());
  auto above = [](const std::vector<double>& v, double t) {
    return double(v.end() - std::upper_bound(v.begin(), v.end(), t)) / double(v.size());
  };
  std::vector<ThresholdRow> rows;
  for (double f : fprs) {
    // Lowest legit score whose exceedance rate is within the target.
    double thr = l.back();
    for (double t : l) {
      if (above(l, t) <= f) {
        thr = t;
        break;
      }
    }
    rows.push_back({f, thr, above(l, thr), above(a, thr)});
  }
  return rows;
}

DetectorResult score_detector(std::string name, std::vector<double> attacked, std::vector<double> legit) {
  static const double kFprs[] = {0.01, 0.05, 0.10};
  DetectorResult r;
  r.name = std::move(name);
  r.auroc = auroc(attacked, legit);
  r.thresholds = threshold_table(attacked, legit, kFprs);
  r.attacked = std::move(attacked);
  r.legit = std::move(legit);
  return r;
}

const DetectorResult& DetectionReport::detector(const std::string& name) const {
  for (const auto& d : detectors)
    if (d.name == name) return d;
  throw ContractError("no detector named '" + name + "' in report");
}

std::string DetectionReport::to_json() const {
  nlohmann::ordered_json j;
  j["note"] = note;
  j["ks_alpha"] = ks_alpha;
  j["ks_rejection_attacked"] = ks_rejection_attacked;
  j["ks_rejection_legit"] = ks_rejection_legit;
  j["detectors"] = nlohmann::ordered_json::array();
  for (const auto& d : detectors) {
    nlohmann::ordered_json e;
    e["name"] = d.name;
    e["auroc"] = d.auroc;
    e["n_attacked"] = d.attacked.size();
    e["n_legit"] = d.legit.size();
    e["thresholds"] = nlohmann::ordered_json::array();
    for (const auto& t : d.thresholds) {
      e["thresholds"].push_back({{"target_fpr", t.target_fpr}, {"threshold", t.threshold}, {"fpr", t.fpr}, {"tpr", t.tpr}});
    }
    j["detectors"].push_back(std::move(e));
  }
  return j.dump(2) + "\n";
}

std::string DetectionReport::roc_csv() const {
  std::ostringstream os;
  os.precision(9);
  os << "detector,threshold,fpr,tpr\n";
  for (const auto& d : detectors) {
    std::vector<double> all = d.attacked;
    all.insert(all.end(), d.legit.begin(), d.legit.end());
    std::sort(all.begin(), all.end());
    all.erase(std::unique(all.begin(), all.end()), all.end());
    std::vector<double> l = d.legit, a = d.attacked;
    std::sort(l.begin(), l.end());
    std::sort(a.begin(), a.end());
    auto above = [](const std::vector<double>& v, double t) {
      return double(v.end() - std::upper_bound(v.begin(), v.end(), t)) / double(v.size());
    };
    os << d.name << ",-inf,1,1\n";
    for (double t : all) os << d.name << ',' << t << ',' << above(l, t) << ',' << above(a, t) << '\n';
  }
  return os.str();
}

void DetectionReport::write(const std::filesystem::path& dir) const {
  write_file_bytes(dir / "detection.json", to_json());
  write_file_bytes(dir / "roc.csv", roc_csv());
}

}  // namespace semcom
