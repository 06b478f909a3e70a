#pragma once

// Test-time latent manipulation: gradient descent on an intercepted latent
// toward a target class,
//   z <- z - eta * grad_z [ L_sem(decode(z), t) + lambda * mahalanobis^2(z) ],
// where L_sem = 1 - cos(e_x, e_t) is evaluated on the decoded image.

#include <cstdint>
#include <string>
#include <vector>

#include "semcom/codec.hpp"
#include "semcom/detection.hpp"
#include "semcom/scorer.hpp"

namespace semcom {

struct TtaConfig {
  double eta = 0.05;        // step size; 0 makes the attack the identity
  std::size_t max_steps = 300;
  double stop_tol = 1e-6;   // stop when |total_k - total_{k-1}| < stop_tol
  double lambda = 0.1;      // weight of the squared-Mahalanobis penalty
  int target = 0;
  bool backtracking = false;  // halve eta until the loss decreases, at most 10 times
};

struct TraceStep {
  std::size_t step = 0;
  double l_sem = 0.0;
  double reg = 0.0;  // squared Mahalanobis distance
  double total = 0.0;
};

struct AttackTrace {
  std::vector<TraceStep> steps;  // losses at z^(0) .. z^(k), at most K + 1 rows
  bool early_stop = false;
  Latent final_latent;
};

struct AttackResult {
  Latent latent;
  AttackTrace trace;
};

// Continuous-codec attack. `stats` must be fitted on legitimate latents of
// the same codec (dimension d).
AttackResult tta_attack(const Latent& z, const CodecModel& codec, const ScorerModel& scorer,
                        const LatentStats& stats, const TtaConfig& config);

// Quantized-codec attack: the continuous iterate starts at the dequantized
// codeword rows; each step re-quantizes it, decodes the codewords, and
// passes the gradient straight through the quantizer. The loss is piecewise
// constant in the iterate, so the tolerance stop is not used and all
// max_steps updates run. `stats` is fitted on dequantized vectors.
AttackResult tta_attack_quantized(const Latent& z, const CodecModel& codec, const ScorerModel& scorer,
                                  const LatentStats& stats, const TtaConfig& config);

// Dispatches on the latent kind.
AttackResult tta_attack_any(const Latent& z, const CodecModel& codec, const ScorerModel& scorer,
                            const LatentStats& stats, const TtaConfig& config);

// z + N(0, sigma^2 I) from a stream derived from (seed, index).
Latent noise_baseline(const Latent& z, double sigma, std::uint64_t seed, std::uint64_t index = 0);
// Any codec: quantized latents get the noise on their codeword rows, then
// are re-quantized.
Latent noise_baseline(const Latent& z, const CodecModel& codec, double sigma, std::uint64_t seed,
                      std::uint64_t index = 0);

// CSV with header step,l_sem,reg,total.
std::string trace_csv(const AttackTrace& trace);

}  // namespace semcom
