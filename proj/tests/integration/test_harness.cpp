#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "semcom/harness.hpp"

using namespace semcom;
namespace fs = std::filesystem;

namespace {

const fs::path kWork = SEMCOM_TEST_WORK_DIR;

ExperimentConfig small(const std::string& out) {
  ExperimentConfig c = ExperimentConfig::load(SEMCOM_SMALL_CONFIG);
  c.out = (kWork / out).string();
  c.models = (kWork / "models").string();
  return c;
}

// Trained once per process.
const TrainSummary& trained() {
  static const TrainSummary s = [] {
    fs::remove_all(kWork);
    return cmd_train(small("train"));
  }();
  return s;
}

std::string slurp(const fs::path& p) { return read_file_bytes(p); }

}  // namespace

TEST_CASE("config parsing") {
  const ExperimentConfig d;
  CHECK(ExperimentConfig::from_json(nlohmann::json::parse(d.to_json().dump())).to_json() == d.to_json());
  CHECK(d.effective_eta() == 0.05);
  ExperimentConfig vq;
  vq.codec = "vq-mlp";
  CHECK(vq.effective_eta() == 0.5);
  vq.eta = 0.3;
  CHECK(vq.effective_eta() == 0.3);

  const auto with = [](const char* key, nlohmann::json v) {
    nlohmann::json j = nlohmann::json::object();
    j[key] = std::move(v);
    return j;
  };
  CHECK(ExperimentConfig::from_json(with("n_attack", 7)).n_attack == 7);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("n_atack", 7)), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("n_attack", "seven")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("codec", "continuous-conv")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("codec", "jpeg")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("attack", "replay")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("strength", 0.0)), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("target", "9")), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(with("detectors", {"entropy"})), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::from_json(nlohmann::json::array()), ContractError);
  CHECK_THROWS_AS(ExperimentConfig::load(kWork / "missing.json"), IoError);
}

TEST_CASE("sha256") {
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("loading before training is an error") {
  ExperimentConfig c = small("untrained");
  c.models = (kWork / "nothing_here").string();
  CHECK_THROWS_AS(load_models(c), IoError);
}

TEST_CASE("train writes checkpoints matching the manifest") {
  const TrainSummary& s = trained();
  const fs::path dir = small("train").models_dir();
  CHECK(s.manifest["files"].size() == 6);
  for (const auto& [name, hash] : s.manifest["files"].items()) {
    INFO(name);
    CHECK(sha256_hex(slurp(dir / name)) == hash.get<std::string>());
  }
  CHECK(fs::exists(dir / "timings.json"));
  CHECK(nlohmann::json::parse(slurp(dir / "manifest.json")) == nlohmann::json::parse(s.manifest.dump()));
  CHECK(s.manifest["schedule"]["steps"] == 50);

  // A second training run with the same config is bit-identical.
  ExperimentConfig again = small("train_again");
  again.models = (kWork / "models_again").string();
  const TrainSummary s2 = cmd_train(again);
  CHECK(s2.manifest["files"] == s.manifest["files"]);
}

TEST_CASE("attack cells are byte-reproducible") {
  trained();
  for (const std::string codec : {"continuous-mlp", "vq-mlp"}) {
    for (const std::string attack : {"none", "noise", "ttalm", "dir"}) {
      INFO(codec << " " << attack);
      ExperimentConfig a = small("cell_a_" + codec + attack);
      a.codec = codec;
      a.attack = attack;
      ExperimentConfig b = a;
      b.out = (kWork / ("cell_b_" + codec + attack)).string();
      const AttackOutcome oa = cmd_attack(a);
      cmd_attack(b);
      for (const char* file : {"metrics.json", "detection.json", "roc.csv", "traces.csv", "grid.pgm", "latents.ckpt"}) {
        INFO(file);
        CHECK(slurp(fs::path(a.out) / file) == slurp(fs::path(b.out) / file));
      }
      const auto& m = oa.metrics;
      CHECK(m["n"] == 20);
      // The rotate rule never picks the clean class.
      CHECK(m["target_base_rate"].get<double>() == 0.0);
      CHECK(oa.latents.attacked.size() == 20);
      CHECK(oa.latents.legit.size() == 20);
      CHECK(m["auroc"].contains("codebook") == (codec == "vq-mlp"));
      if (attack == "none") {
        CHECK(m["mean_perturbation_norm"].get<double>() == 0.0);
        CHECK(m["success_rate"].get<double>() == 0.0);
        CHECK(m["attacked_accuracy"] == m["clean_accuracy"]);
      } else if (codec == "continuous-mlp") {
        // Quantized cells may legitimately re-quantize back to the input.
        CHECK(m["mean_perturbation_norm"].get<double>() > 0.0);
      }
      CHECK(m.contains("l_sem_decreased") == (attack == "ttalm"));
      CHECK_FALSE(m.dump().find("seconds") != std::string::npos);

      const DetectionReport again = cmd_detect(a);
      CHECK(again.to_json() == oa.detection.to_json());
    }
  }
}

TEST_CASE("e2e online matches offline and counts injected corruption") {
  trained();
  for (const std::string attack : {"none", "ttalm", "noise"}) {
    INFO(attack);
    ExperimentConfig c = small("e2e_" + attack);
    c.attack = attack;
    c.max_write = 9;
    c.corrupt_frames = {3, 11};
    const auto j = cmd_e2e(c);
    CHECK(j["frames_sent"] == 20);
    CHECK(j["frames_received"] == 18);
    CHECK(j["rejections_match_injections"] == true);
    CHECK(j["latent_mismatches"] == 0);
    CHECK(j["online_equals_offline"] == true);
    CHECK(fs::exists(fs::path(c.out) / "proxy_log.jsonl"));
    if (attack == "none") {
      CHECK(j["receiver_rejections"] == 2);
    } else {
      CHECK(j["proxy_drops"] == 2);
    }
  }
}

TEST_CASE("codec mismatch between config and dump is reported") {
  trained();
  ExperimentConfig a = small("mismatch");
  a.attack = "noise";
  cmd_attack(a);
  a.codec = "vq-mlp";
  CHECK_THROWS_AS(cmd_detect(a), CodecMismatchError);
}

TEST_CASE("the Mahalanobis penalty does not raise the mean final distance") {
  trained();
  for (const std::string codec : {"continuous-mlp", "vq-mlp"}) {
    INFO(codec);
    ExperimentConfig c = small("penalty");
    c.codec = codec;
    const ModelSet m = load_models(c);
    double with = 0.0, without = 0.0;
    const std::size_t n = 100;
    for (std::size_t i = 0; i < n; ++i) {
      const Latent z = m.codec.encode(m.data.train[i].pixels);
      TtaConfig tc;
      tc.eta = c.effective_eta();
      tc.max_steps = c.max_steps;
      tc.backtracking = c.backtracking;
      tc.target = static_cast<int>((m.data.train[i].label + 1) % kNumClasses);
      tc.lambda = 0.1;
      with += mahalanobis_squared(m.stats, m.codec.decoder_input(tta_attack_any(z, m.codec, m.scorer, m.stats, tc).latent));
      tc.lambda = 0.0;
      without +=
          mahalanobis_squared(m.stats, m.codec.decoder_input(tta_attack_any(z, m.codec, m.scorer, m.stats, tc).latent));
    }
    MESSAGE(codec << " mean squared Mahalanobis: lambda 0.1 " << with / n << ", lambda 0 " << without / n);
    CHECK(with <= without);
  }
}
