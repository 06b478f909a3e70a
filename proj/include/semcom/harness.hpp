#pragma once

// Experiment orchestration behind the `semcom` command line: model
// training with a hash manifest, attack cells, detection, loopback
// end-to-end runs and the default experiment matrix.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "semcom/wire.hpp"

namespace semcom {

// Flat JSON keys; see docs/config.md. Negative eta / noise_sigma mean
// "choose automatically".
struct ExperimentConfig {
  // dataset
  std::uint64_t data_seed = 1;
  std::size_t per_class = 1000;
  double train_fraction = 0.8;
  // global seed for attack and channel noise streams
  std::uint64_t seed = 7;
  std::string out = "out";
  std::string models = "";  // checkpoint directory; empty = <out>/models

  // training
  std::size_t codec_epochs = 20;
  std::size_t codec_hidden = 128;
  std::size_t vq_hidden = 256;
  std::size_t scorer_epochs = 12;
  std::size_t denoiser_epochs = 150;
  std::size_t vq_denoiser_epochs = 60;
  std::size_t vq_denoiser_hidden = 256;
  std::size_t diffusion_steps = 1000;

  // cell
  std::string codec = "continuous-mlp";
  std::string channel = "ideal";
  double channel_sigma = 0.0;
  std::string attack = "ttalm";  // none | noise | ttalm | dir
  std::size_t n_attack = 200;
  std::string target = "rotate";  // rotate | class index
  double eta = -1.0;              // < 0: 0.05 continuous, 0.5 quantized
  std::size_t max_steps = 300;
  double stop_tol = 1e-6;
  double lambda = 0.1;
  bool backtracking = false;
  double noise_sigma = -1.0;  // < 0: match the mean TTA-LM perturbation norm
  double strength = 0.8;
  std::vector<std::string> detectors = {"mahalanobis", "mean_distance", "marginal_tail", "codebook"};
  double ks_alpha = 0.05;
  std::size_t trace_attacks = 16;  // attacks whose loss traces are written
  std::size_t grid_columns = 12;

  // e2e
  std::size_t max_write = 0;
  std::vector<std::size_t> corrupt_frames;

  static ExperimentConfig from_json(const nlohmann::json& j);  // unknown keys are errors
  static ExperimentConfig load(const std::filesystem::path& path);
  nlohmann::ordered_json to_json() const;

  std::filesystem::path models_dir() const;
  CodecId codec_id() const;
  double effective_eta() const;
  ChannelConfig channel_config() const;
  TargetRule target_rule() const;
  void validate() const;
};

std::string sha256_hex(const std::string& bytes);

struct TrainSummary {
  nlohmann::ordered_json manifest;  // reproducible: hashes and settings only
  nlohmann::ordered_json timings;   // wall-clock seconds per model
};

// Trains both codecs, the guidance and second scorers and one denoiser per
// codec; writes checkpoints, manifest.json and timings.json to models_dir().
TrainSummary cmd_train(const ExperimentConfig& config);

// Everything a cell needs for one codec variant, loaded from models_dir().
struct ModelSet {
  DatasetSplit data;
  CodecModel codec;
  ScorerModel scorer, second;
  DenoiserModel denoiser;
  LatentStats stats;  // fitted on the codec's training latents
};
ModelSet load_models(const ExperimentConfig& config);

// Latent populations of a cell.
struct CellLatents {
  std::vector<Latent> clean;     // test [0, n) after the channel
  std::vector<Latent> attacked;  // clean after the attack
  std::vector<Latent> legit;     // test [n, 2n) after the channel
  std::vector<int> labels;
  std::vector<int> targets;
};

struct AttackOutcome {
  nlohmann::ordered_json metrics;  // byte-reproducible
  nlohmann::ordered_json timing;
  CellLatents latents;
  DetectionReport detection;
  double mean_perturbation_norm = 0.0;
};

// Runs one attack cell on loaded models and writes metrics.json,
// timing.json, detection.json, roc.csv, traces.csv, grid.pgm and
// latents.ckpt into `dir`.
AttackOutcome run_attack_cell(const ExperimentConfig& config, const ModelSet& models,
                              const std::filesystem::path& dir);
AttackOutcome cmd_attack(const ExperimentConfig& config);

// Scores the latent dump of a finished cell in config.out.
DetectionReport detect_latents(const ExperimentConfig& config, const ModelSet& models, const CellLatents& cell);
DetectionReport cmd_detect(const ExperimentConfig& config);

// Sender, proxy and receiver on loopback; compares online with offline.
nlohmann::ordered_json cmd_e2e(const ExperimentConfig& config);

// The default matrix; writes one directory per cell plus summary.json and
// summary.csv under config.out.
nlohmann::ordered_json cmd_report(const ExperimentConfig& config);

}  // namespace semcom
