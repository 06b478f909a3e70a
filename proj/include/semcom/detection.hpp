#pragma once

// Statistical detectors over latents: Mahalanobis distance under fitted
// Gaussian statistics, two-sample Kolmogorov-Smirnov per dimension,
// codebook membership, and AUROC-based reporting.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "semcom/tensor.hpp"

namespace semcom {

struct LatentStats {
  std::size_t dim = 0;
  std::size_t n_fit = 0;
  double ridge = 0.0;                 // 1e-6 * trace(cov) / dim
  std::vector<double> mean;           // [dim]
  std::vector<double> covariance;     // [dim * dim], row-major, unregularized
  std::vector<double> precision;      // inverse of covariance + ridge * I
  std::optional<TensorD> reference;   // the fitted batch, sorted per column

  // Precision as a float tensor [dim, dim], for attack graphs.
  Tensor precision_tensor() const;
  Tensor mean_tensor() const;
};

// Sample mean and (n-1)-normalized covariance of rows of `batch` [n, d].
// Throws ContractError when n < d + 1 or the covariance is degenerate.
LatentStats fit_stats(const Tensor& batch, bool keep_reference = true);

double mahalanobis_squared(const LatentStats& stats, std::span<const float> z);
// sqrt((z - mu)^T P (z - mu)) with the regularized precision P.
double mahalanobis(const LatentStats& stats, std::span<const float> z);

// Euclidean distance from the fitted mean.
double mean_distance(const LatentStats& stats, std::span<const float> z);

// max_j |2 F_j(z_j) - 1| where F_j is the reference marginal CDF of dimension j.
double marginal_tail_score(const LatentStats& stats, std::span<const float> z);

struct KsResult {
  double statistic = 0.0;  // sup |F_a - F_b|
  double p_value = 1.0;    // asymptotic Kolmogorov approximation
};

KsResult ks_two_sample(std::span<const double> a, std::span<const double> b);
// Column `dim` of two batches [n, d].
KsResult ks_two_sample(const Tensor& reference, const Tensor& test, std::size_t dim);
// Q_KS(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2).
double kolmogorov_survival(double lambda);
// Fraction of the d dimensions whose KS test rejects at level alpha.
double ks_rejection_rate(const Tensor& reference, const Tensor& test, double alpha);

struct MembershipResult {
  bool valid = true;               // every index < M
  std::vector<double> distances;  // per slot, distance to the nearest codeword
};

// Index form: invalid if any index >= M; distances are 0 for valid slots.
MembershipResult codebook_membership(const Tensor& codebook, std::span<const std::uint16_t> indices);
// Dequantized form: distance of each code_dim-wide slot to its nearest codeword.
MembershipResult codebook_membership(const Tensor& codebook, std::span<const float> vectors);

// P(attacked > legit) + 0.5 P(attacked == legit). Throws on empty input.
double auroc(std::span<const double> attacked, std::span<const double> legit);

struct ThresholdRow {
  double target_fpr = 0.0;
  double threshold = 0.0;  // flag when score > threshold
  double fpr = 0.0;
  double tpr = 0.0;
};

struct DetectorResult {
  std::string name;
  std::vector<double> attacked;
  std::vector<double> legit;
  double auroc = 0.5;
  std::vector<ThresholdRow> thresholds;  // at FPR 1%, 5%, 10%
};

struct DetectionReport {
  std::string note;
  std::vector<DetectorResult> detectors;
  // Batch-level KS: rejection fraction over dimensions at alpha.
  double ks_alpha = 0.05;
  double ks_rejection_attacked = 0.0;
  double ks_rejection_legit = 0.0;

  const DetectorResult& detector(const std::string& name) const;
  std::string to_json() const;
  // Rows: detector,threshold,fpr,tpr.
  std::string roc_csv() const;
  void write(const std::filesystem::path& dir) const;
};

DetectorResult score_detector(std::string name, std::vector<double> attacked, std::vector<double> legit);
std::vector<ThresholdRow> threshold_table(std::span<const double> attacked, std::span<const double> legit,
                                          std::span<const double> fprs);

}  // namespace semcom
