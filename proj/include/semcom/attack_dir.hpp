#pragma once

// Diffusion re-encoding: a class-conditional latent DDPM. The attacker
// noises an intercepted latent to step t0 = ceil(s * T) and denoises it
// under the target class, then substitutes the result.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "semcom/codec.hpp"
#include "semcom/nn.hpp"
#include "semcom/rng.hpp"

namespace semcom {

struct DiffusionSchedule {
  std::size_t steps = 0;            // T
  std::vector<double> betas;        // index 1..T (index 0 unused, 0)
  std::vector<double> alphas;       // 1 - beta, index 0 := 1
  std::vector<double> alpha_bars;   // cumulative product, index 0 := 1
  std::vector<double> sigmas;       // posterior std, index 0 := 0

  // Linear betas; throws unless 0 < beta_start < beta_end < 1.
  static DiffusionSchedule linear(std::size_t steps, double beta_start, double beta_end);
  // Linear betas 1e-4 .. 0.02; at the default 1000 steps alpha_bar_T is about 4e-5.
  static DiffusionSchedule standard(std::size_t steps = 1000);
  // From beta_1 .. beta_T; throws unless they lie in (0, 1) strictly increasing.
  static DiffusionSchedule from_betas(std::vector<double> betas);

  void check_step(std::size_t t, std::size_t lowest) const;
};

// sqrt(alpha_bar) z + sqrt(1 - alpha_bar) eps.
std::vector<float> forward_noise(double alpha_bar, std::span<const float> z, std::span<const float> eps);
// Same with alpha_bar_t of the schedule; t = 0 is the identity.
std::vector<float> forward_noise(const DiffusionSchedule& s, std::span<const float> z, std::size_t t,
                                 std::span<const float> eps);

// (z_t - (1 - alpha) / sqrt(1 - alpha_bar) * eps_pred) / sqrt(alpha) + sigma * xi.
std::vector<float> reverse_update(double alpha, double alpha_bar, double sigma, std::span<const float> z_t,
                                  std::span<const float> eps_pred, std::span<const float> xi);

// Sinusoidal embedding of step t: [sin(t w_k), cos(t w_k)], w_k = 10000^(-k/(dim/2)).
std::vector<float> timestep_embedding(std::size_t t, std::size_t dim);

struct DenoiserConfig {
  std::size_t hidden = 128;
  std::size_t layers = 3;  // dense layers
  std::size_t time_dim = 16;
  std::size_t epochs = 150;
  std::size_t batch_size = 128;
  double learning_rate = 1e-3;  // cosine-decayed to 0 over the epochs
  std::uint64_t seed = 3;
};

class DenoiserModel {
 public:
  DenoiserModel() = default;

  bool frozen() const { return frozen_; }
  std::size_t latent_dim() const { return net_.output_dim(); }
  std::size_t time_dim() const { return time_dim_; }
  const Mlp& network() const { return net_; }
  const Tensor& class_embeddings() const { return class_table_; }
  const DiffusionSchedule& schedule() const { return schedule_; }

  // eps_psi(z_t, t, e_label) for rows of z_t [n, d].
  Tensor predict(const Tensor& z_t, std::span<const std::size_t> t, std::span<const int> labels) const;
  // Network input rows [n, d + time_dim + m].
  Tensor conditioning_input(const Tensor& z_t, std::span<const std::size_t> t, std::span<const int> labels) const;

  // One reverse step z_t -> z_{t-1}; xi is ignored at t = 1.
  std::vector<float> reverse_step(std::span<const float> z_t, std::size_t t, int label,
                                  std::span<const float> xi) const;

  // Pure-noise sampling through all T steps.
  std::vector<float> sample(int label, Rng& rng) const;
  // Same for many rows at once, [labels.size(), d]; rows share one noise stream.
  Tensor sample_batch(std::span<const int> labels, Rng& rng) const;

  // Noise z to t0 = ceil(strength * T) with fresh noise, then denoise under
  // `target` down to step 0. 0 < strength <= 1.
  std::vector<float> edit(std::span<const float> z, int target, double strength, Rng& rng) const;

  Checkpoint to_checkpoint() const;
  static DenoiserModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static DenoiserModel load(const std::filesystem::path& path);

  static DenoiserModel initialize(std::size_t latent_dim, const Tensor& class_table,
                                  const DiffusionSchedule& schedule, const DenoiserConfig& config);
  Mlp& mutable_network();
  void freeze() { frozen_ = true; }

 private:
  void require_frozen(const char* op) const;

  Mlp net_;
  Tensor class_table_;  // [kNumClasses, m], frozen copy of the scorer table
  DiffusionSchedule schedule_;
  std::size_t time_dim_ = 16;
  bool frozen_ = false;
};

struct DenoiserReport {
  double initial_loss = 0.0;  // mean ||eps - eps_psi||^2 at initialization
  double final_loss = 0.0;    // same estimate after training
  std::vector<double> epoch_losses;
};

// Standard epsilon-prediction training on latents [n, d] with class labels.
DenoiserModel train_denoiser(const Tensor& latents, std::span<const int> labels, const Tensor& class_table,
                             const DiffusionSchedule& schedule, const DenoiserConfig& config,
                             DenoiserReport* report = nullptr);

// Monte-Carlo estimate of the training loss with a fixed noise stream.
double denoiser_loss(const DenoiserModel& model, const Tensor& latents, std::span<const int> labels,
                     std::uint64_t seed);

// DiR on a transmitted latent. Quantized latents are edited as dequantized
// codeword rows and re-quantized. Noise comes from (seed, index).
Latent dir_attack(const Latent& z, const CodecModel& codec, const DenoiserModel& denoiser, int target,
                  double strength, std::uint64_t seed, std::uint64_t index);

}  // namespace semcom
