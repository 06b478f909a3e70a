// semcom: train models, run attack cells, detection, loopback e2e runs and
// the default experiment matrix.

#include <iostream>

#include "CLI11.hpp"
#include "semcom/harness.hpp"

using namespace semcom;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> models;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config, "JSON config file (see docs/config.md)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "Global seed for training and attack streams");
  app->add_option("--out", c.out, "Output directory");
  app->add_option("--models", c.models, "Checkpoint directory (default <out>/models)");
}

ExperimentConfig resolve(const Common& c) {
  ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : ExperimentConfig::load(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.out) cfg.out = *c.out;
  if (c.models) cfg.models = *c.models;
  cfg.validate();
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Semantic latent channel attacks: training, attacks, detection"};
  app.require_subcommand(1);

  Common train_opts, attack_opts, detect_opts, e2e_opts, report_opts;
  std::string codec, attack, channel, target;
  std::optional<double> channel_sigma, lambda, strength, eta, noise_sigma;
  std::optional<std::size_t> n_attack;

  auto* train = app.add_subcommand("train", "Train codecs, scorers and denoisers");
  add_common(train, train_opts);

  auto add_cell = [&](CLI::App* cmd) {
    cmd->add_option("--codec", codec, "continuous-mlp | vq-mlp");
    cmd->add_option("--attack", attack, "none | noise | ttalm | dir");
    cmd->add_option("--channel", channel, "ideal | awgn");
    cmd->add_option("--channel-sigma", channel_sigma, "AWGN standard deviation");
    cmd->add_option("--target", target, "rotate | class index 0..5");
    cmd->add_option("--n", n_attack, "Number of attacked latents");
    cmd->add_option("--lambda", lambda, "TTA-LM regularizer weight");
    cmd->add_option("--eta", eta, "TTA-LM step size");
    cmd->add_option("--strength", strength, "DiR edit strength in (0, 1]");
    cmd->add_option("--noise-sigma", noise_sigma, "Noise baseline sigma");
  };
  auto* attack_cmd = app.add_subcommand("attack", "Run one attack cell");
  add_common(attack_cmd, attack_opts);
  add_cell(attack_cmd);
  auto* detect = app.add_subcommand("detect", "Score the latent dump of a finished cell");
  add_common(detect, detect_opts);
  add_cell(detect);
  auto* e2e = app.add_subcommand("e2e", "Sender, proxy and receiver over loopback TCP");
  add_common(e2e, e2e_opts);
  add_cell(e2e);
  std::size_t max_write = 0;
  std::vector<std::size_t> corrupt;
  e2e->add_option("--max-write", max_write, "Split writes into random 1..N byte chunks");
  e2e->add_option("--corrupt", corrupt, "Frame indices to corrupt after the CRC");
  auto* report = app.add_subcommand("report", "Run the default experiment matrix");
  add_common(report, report_opts);

  CLI11_PARSE(app, argc, argv);

  auto cell = [&](const Common& c) {
    ExperimentConfig cfg = resolve(c);
    if (!codec.empty()) cfg.codec = codec;
    if (!attack.empty()) cfg.attack = attack;
    if (!channel.empty()) cfg.channel = channel;
    if (!target.empty()) cfg.target = target;
    if (channel_sigma) cfg.channel_sigma = *channel_sigma;
    if (n_attack) cfg.n_attack = *n_attack;
    if (lambda) cfg.lambda = *lambda;
    if (eta) cfg.eta = *eta;
    if (strength) cfg.strength = *strength;
    if (noise_sigma) cfg.noise_sigma = *noise_sigma;
    cfg.validate();
    return cfg;
  };

  try {
    if (*train) {
      const TrainSummary s = cmd_train(resolve(train_opts));
      std::cout << s.manifest["reports"].dump(2) << "\n";
    } else if (*attack_cmd) {
      const AttackOutcome o = cmd_attack(cell(attack_opts));
      std::cout << o.metrics.dump(2) << "\n";
    } else if (*detect) {
      const DetectionReport r = cmd_detect(cell(detect_opts));
      for (const auto& d : r.detectors) std::cout << d.name << " auroc=" << d.auroc << "\n";
      std::cout << "ks_rejection attacked=" << r.ks_rejection_attacked << " legit=" << r.ks_rejection_legit << "\n";
    } else if (*e2e) {
      ExperimentConfig cfg = cell(e2e_opts);
      cfg.max_write = max_write;
      cfg.corrupt_frames = corrupt;
      std::cout << cmd_e2e(cfg).dump(2) << "\n";
    } else if (*report) {
      const auto s = cmd_report(resolve(report_opts));
      std::cout << "wrote " << s["cells"].size() << " cells to " << resolve(report_opts).out << "\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "semcom: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
