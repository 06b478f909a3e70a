#include "semcom/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <future>
#include <iomanip>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

namespace semcom {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExperimentConfig, data_seed, per_class, train_fraction, seed, out,
                                                models, codec_epochs, codec_hidden, vq_hidden, scorer_epochs,
                                                denoiser_epochs, vq_denoiser_epochs, vq_denoiser_hidden,
                                                diffusion_steps, codec, channel, channel_sigma, attack, n_attack,
                                                target, eta, max_steps, stop_tol, lambda, backtracking, noise_sigma,
                                                strength, detectors, ks_alpha, trace_attacks, grid_columns,
                                                max_write, corrupt_frames)

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed: " + path.string());
}

void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j) { write_text(path, j.dump(2) + "\n"); }

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

constexpr CodecId kTrainedCodecs[] = {CodecId::continuous_mlp, CodecId::vq_mlp};

CodecId parse_codec_id(const std::string& name) {
  for (CodecId id : {CodecId::continuous_mlp, CodecId::vq_mlp, CodecId::continuous_conv, CodecId::vq_conv}) {
    if (name == codec_name(id)) return id;
  }
  throw ContractError("unknown codec '" + name + "'");
}

std::string codec_file(CodecId id) { return std::string("codec_") + codec_name(id) + ".ckpt"; }
std::string denoiser_file(CodecId id) { return std::string("denoiser_") + codec_name(id) + ".ckpt"; }

// Rows of decoder inputs for a list of latents, [n, D].
Tensor latent_rows(const CodecModel& codec, std::span<const Latent> latents) {
  const std::size_t d = codec.latent_dim();
  Tensor t(Shape{latents.size(), d});
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const auto row = codec.decoder_input(latents[i]);
    std::copy(row.begin(), row.end(), t.data().begin() + i * d);
  }
  return t;
}

// Pearson correlation of the pooled coordinates of two equally shaped tensors.
double pooled_correlation(const Tensor& a, const Tensor& b) {
  const std::size_t n = a.size();
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= double(n);
  mb /= double(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  return saa > 0.0 && sbb > 0.0 ? sab / std::sqrt(saa * sbb) : 1.0;
}

double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
}

}  // namespace

// ------------------------------------------------------------------ config

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractError("config must be a JSON object");
  const nlohmann::json known = ExperimentConfig{}.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!known.contains(key)) throw ContractError("unknown config key '" + key + "'");
  }
  ExperimentConfig c;
  try {
    c = j.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("bad config value: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::parse_error& e) {
    throw ContractError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

nlohmann::ordered_json ExperimentConfig::to_json() const {
  nlohmann::json j = *this;
  return nlohmann::ordered_json::parse(j.dump());
}

std::filesystem::path ExperimentConfig::models_dir() const {
  return models.empty() ? std::filesystem::path(out) / "models" : std::filesystem::path(models);
}

CodecId ExperimentConfig::codec_id() const { return parse_codec_id(codec); }

double ExperimentConfig::effective_eta() const {
  if (eta >= 0.0) return eta;
  return is_quantized(codec_id()) ? 0.5 : 0.05;
}

ChannelConfig ExperimentConfig::channel_config() const {
  return {parse_channel_mode(channel), channel_sigma, Rng::derive(seed, 0xc4a)};
}

TargetRule ExperimentConfig::target_rule() const { return parse_target_rule(target); }

void ExperimentConfig::validate() const {
  const CodecId id = codec_id();
  if (std::find(std::begin(kTrainedCodecs), std::end(kTrainedCodecs), id) == std::end(kTrainedCodecs)) {
    throw ContractError("codec '" + codec + "' is not built; use continuous-mlp or vq-mlp");
  }
  parse_channel_mode(channel);
  parse_target_rule(target);
  if (attack != "none") parse_mitm_mode(attack);
  if (per_class < 2 || !(train_fraction > 0.0 && train_fraction < 1.0)) throw ContractError("bad dataset sizes");
  if (n_attack == 0) throw ContractError("n_attack must be positive");
  if (!(strength > 0.0 && strength <= 1.0)) throw ContractError("strength must lie in (0, 1]");
  if (!(ks_alpha > 0.0 && ks_alpha < 1.0)) throw ContractError("ks_alpha must lie in (0, 1)");
  if (diffusion_steps < 2) throw ContractError("diffusion_steps must be >= 2");
  static const std::set<std::string> names{"mahalanobis", "mean_distance", "marginal_tail", "codebook"};
  for (const auto& d : detectors) {
    if (!names.count(d)) throw ContractError("unknown detector '" + d + "'");
  }
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw IoError("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

// ------------------------------------------------------------------- train

TrainSummary cmd_train(const ExperimentConfig& config) {
  config.validate();
  const auto dir = config.models_dir();
  ensure_dir(dir);
  TrainSummary s;
  nlohmann::ordered_json files, reports;
  const auto total0 = Clock::now();

  auto t0 = Clock::now();
  const DatasetSplit data = generate_dataset(config.data_seed, config.per_class, config.train_fraction);
  s.timings["dataset"] = seconds_since(t0);

  auto save = [&](const std::string& name, const Checkpoint& ck) {
    const std::string bytes = ck.serialize();
    write_file_bytes(dir / name, bytes);
    files[name] = sha256_hex(bytes);
  };

  t0 = Clock::now();
  ScorerConfig sc;
  sc.epochs = config.scorer_epochs;
  sc.seed = Rng::derive(config.seed, 0x5c0);
  const ScorerModel scorer = train_scorer(data.train, sc);
  save("scorer_primary.ckpt", scorer.to_checkpoint());
  s.timings["scorer_primary"] = seconds_since(t0);
  reports["scorer_primary"] = {{"test_accuracy", scorer_accuracy(scorer, data.test)}};

  t0 = Clock::now();
  ScorerConfig sc2 = second_scorer_config();
  sc2.epochs = config.scorer_epochs;
  sc2.seed = Rng::derive(config.seed, 0x5c1);
  const ScorerModel second = train_scorer(data.train, sc2);
  save("scorer_second.ckpt", second.to_checkpoint());
  s.timings["scorer_second"] = seconds_since(t0);
  reports["scorer_second"] = {{"test_accuracy", scorer_accuracy(second, data.test)}};

  const DiffusionSchedule schedule = DiffusionSchedule::standard(config.diffusion_steps);
  for (CodecId id : kTrainedCodecs) {
    const std::string name = codec_name(id);
    t0 = Clock::now();
    CodecConfig cc;
    cc.id = id;
    cc.epochs = config.codec_epochs;
    cc.hidden = is_quantized(id) ? config.vq_hidden : config.codec_hidden;
    cc.seed = Rng::derive(config.seed, 0xc0, static_cast<std::uint64_t>(id));
    TrainReport rep;
    const CodecModel codec = train_codec(data.train, cc, &rep);
    save(codec_file(id), codec.to_checkpoint());
    s.timings["codec_" + name] = seconds_since(t0);
    const Tensor test_images = stack_pixels(data.test);
    const auto test_lat = codec.encode_batch(test_images);
    const Tensor recon = codec.decode_vectors(latent_rows(codec, test_lat));
    reports["codec_" + name] = {{"initial_loss", rep.initial_loss},
                                {"final_loss", rep.final_loss},
                                {"test_mse", reconstruction_mse(codec, data.test)},
                                {"reconstruction_accuracy", scorer_accuracy(scorer, recon, labels_of(data.test))}};

    t0 = Clock::now();
    const Tensor train_rows = latent_rows(codec, codec.encode_batch(stack_pixels(data.train)));
    DenoiserConfig dc;
    dc.epochs = is_quantized(id) ? config.vq_denoiser_epochs : config.denoiser_epochs;
    if (is_quantized(id)) dc.hidden = config.vq_denoiser_hidden;
    dc.seed = Rng::derive(config.seed, 0xd0, static_cast<std::uint64_t>(id));
    DenoiserReport drep;
    const auto labels = labels_of(data.train);
    const DenoiserModel den = train_denoiser(train_rows, labels, scorer.class_embeddings(), schedule, dc, &drep);
    save(denoiser_file(id), den.to_checkpoint());
    s.timings["denoiser_" + name] = seconds_since(t0);
    reports["denoiser_" + name] = {{"initial_loss", drep.initial_loss}, {"final_loss", drep.final_loss}};
  }
  s.manifest["files"] = files;
  s.manifest["reports"] = reports;
  s.manifest["schedule"] = {{"steps", schedule.steps},
                            {"beta_start", schedule.betas[1]},
                            {"beta_end", schedule.betas[schedule.steps]},
                            {"alpha_bar_T", schedule.alpha_bars[schedule.steps]}};
  s.manifest["config"] = config.to_json();
  s.timings["total"] = seconds_since(total0);
  write_json(dir / "manifest.json", s.manifest);
  write_json(dir / "timings.json", s.timings);
  return s;
}

ModelSet load_models(const ExperimentConfig& config) {
  config.validate();
  const auto dir = config.models_dir();
  if (!std::filesystem::exists(dir / "manifest.json")) {
    throw IoError("no trained models in " + dir.string() + "; run `semcom train` first");
  }
  ModelSet m;
  m.data = generate_dataset(config.data_seed, config.per_class, config.train_fraction);
  const CodecId id = config.codec_id();
  m.codec = CodecModel::load(dir / codec_file(id), id);
  m.scorer = ScorerModel::load(dir / "scorer_primary.ckpt");
  m.second = ScorerModel::load(dir / "scorer_second.ckpt");
  m.denoiser = DenoiserModel::load(dir / denoiser_file(id));
  if (m.denoiser.latent_dim() != m.codec.latent_dim()) throw CodecMismatchError("denoiser does not match the codec");
  m.stats = fit_stats(latent_rows(m.codec, m.codec.encode_batch(stack_pixels(m.data.train))));
  return m;
}

// ------------------------------------------------------------------ attack

namespace {

MitmPolicy make_policy(const ExperimentConfig& config, const ModelSet& m, double sigma) {
  MitmPolicy p;
  p.mode = config.attack == "none" ? MitmMode::passthrough : parse_mitm_mode(config.attack);
  p.sigma = sigma;
  p.tta.eta = config.effective_eta();
  p.tta.max_steps = config.max_steps;
  p.tta.stop_tol = config.stop_tol;
  p.tta.lambda = config.lambda;
  p.tta.backtracking = config.backtracking;
  p.strength = config.strength;
  p.target = config.target_rule();
  p.seed = Rng::derive(config.seed, 0xa77);
  p.codec = &m.codec;
  p.scorer = &m.scorer;
  p.stats = &m.stats;
  p.denoiser = &m.denoiser;
  return p;
}

// Clean (first n) and legitimate (next n) test latents after the channel.
void transmitted_test_latents(const ExperimentConfig& config, const ModelSet& m, CellLatents& cell) {
  const std::size_t n = config.n_attack;
  if (m.data.test.size() < 2 * n) {
    throw ContractError("test split has " + std::to_string(m.data.test.size()) + " samples, need " +
                        std::to_string(2 * n));
  }
  const ChannelConfig ch = config.channel_config();
  for (std::size_t i = 0; i < 2 * n; ++i) {
    const Latent z = transmit(ch, m.codec.encode(m.data.test[i].pixels), i);
    (i < n ? cell.clean : cell.legit).push_back(z);
    if (i < n) cell.labels.push_back(m.data.test[i].label);
  }
}

// Mean perturbation norm of TTA-LM with the cell's settings, used to match
// the noise baseline: sigma = mean ||z' - z|| / sqrt(D).
double matched_noise_sigma(const ExperimentConfig& config, const ModelSet& m, std::span<const Latent> clean) {
  ExperimentConfig tta = config;
  tta.attack = "ttalm";
  const MitmPolicy p = make_policy(tta, m, 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < clean.size(); ++i) total += apply_policy(p, clean[i], i).perturbation_norm;
  return total / double(clean.size()) / std::sqrt(double(m.codec.latent_dim()));
}

Checkpoint latents_checkpoint(const CodecModel& codec, const CellLatents& cell) {
  Checkpoint ck;
  ck.put_meta("model", "cell_latents");
  ck.put_meta("codec_id", std::to_string(static_cast<int>(codec.id())));
  auto put_set = [&](const std::string& name, const std::vector<Latent>& v) {
    ck.put(name, latent_rows(codec, v));
    if (is_quantized(codec.id())) {
      TensorD idx(Shape{v.size(), v.empty() ? 0 : v[0].indices.size()});
      for (std::size_t i = 0; i < v.size(); ++i)
        for (std::size_t j = 0; j < v[i].indices.size(); ++j) idx.at(i, j) = v[i].indices[j];
      ck.put(name + ".indices", std::move(idx));
    }
  };
  put_set("clean", cell.clean);
  put_set("attacked", cell.attacked);
  put_set("legit", cell.legit);
  TensorD labels(Shape{cell.labels.size()}), targets(Shape{cell.targets.size()});
  for (std::size_t i = 0; i < cell.labels.size(); ++i) labels[i] = cell.labels[i];
  for (std::size_t i = 0; i < cell.targets.size(); ++i) targets[i] = cell.targets[i];
  ck.put("labels", std::move(labels));
  ck.put("targets", std::move(targets));
  return ck;
}

CellLatents latents_from_checkpoint(const CodecModel& codec, const Checkpoint& ck) {
  if (!ck.has_meta("model") || ck.meta("model") != "cell_latents") throw CheckpointError("not a latent dump");
  if (std::stoi(ck.meta("codec_id")) != static_cast<int>(codec.id())) {
    throw CodecMismatchError("latent dump was written for another codec");
  }
  const auto code = static_cast<std::uint16_t>(codec.id());
  auto get_set = [&](const std::string& name) {
    std::vector<Latent> out;
    const Tensor& rows = ck.tensor(name);
    for (std::size_t i = 0; i < rows.dim(0); ++i) {
      if (is_quantized(codec.id())) {
        const TensorD& idx = ck.tensor_f64(name + ".indices");
        std::vector<std::uint16_t> k(idx.dim(1));
        for (std::size_t j = 0; j < k.size(); ++j) k[j] = static_cast<std::uint16_t>(idx.at(i, j));
        out.push_back(Latent::quantized(code, std::move(k)));
      } else {
        out.push_back(Latent::continuous(
            code, std::vector<float>(rows.data().begin() + i * rows.dim(1), rows.data().begin() + (i + 1) * rows.dim(1))));
      }
    }
    return out;
  };
  CellLatents cell;
  cell.clean = get_set("clean");
  cell.attacked = get_set("attacked");
  cell.legit = get_set("legit");
  for (double v : ck.tensor_f64("labels").storage()) cell.labels.push_back(int(v));
  for (double v : ck.tensor_f64("targets").storage()) cell.targets.push_back(int(v));
  return cell;
}

std::vector<double> detector_scores(const std::string& name, const ModelSet& m, std::span<const Latent> latents) {
  std::vector<double> out;
  out.reserve(latents.size());
  for (const Latent& z : latents) {
    const auto v = m.codec.decoder_input(z);
    if (name == "mahalanobis") {
      out.push_back(mahalanobis(m.stats, v));
    } else if (name == "mean_distance") {
      out.push_back(mean_distance(m.stats, v));
    } else if (name == "marginal_tail") {
      out.push_back(marginal_tail_score(m.stats, v));
    } else {
      const MembershipResult r = codebook_membership(m.codec.codebook(), z.indices);
      out.push_back(r.valid ? mean_of(r.distances) : std::numeric_limits<double>::infinity());
    }
  }
  return out;
}

}  // namespace

DetectionReport detect_latents(const ExperimentConfig& config, const ModelSet& m, const CellLatents& cell) {
  if (cell.attacked.size() < 2 || cell.legit.size() < 2) throw ContractError("detection needs at least 2 samples each");
  DetectionReport rep;
  rep.note = "attacked: test latents [0, n) after the attack; legit: test latents [n, 2n); statistics fitted on "
             "the training latents";
  for (const auto& name : config.detectors) {
    if (name == "codebook" && !is_quantized(m.codec.id())) continue;
    rep.detectors.push_back(
        score_detector(name, detector_scores(name, m, cell.attacked), detector_scores(name, m, cell.legit)));
  }
  rep.ks_alpha = config.ks_alpha;
  const Tensor legit = latent_rows(m.codec, cell.legit);
  rep.ks_rejection_attacked = ks_rejection_rate(legit, latent_rows(m.codec, cell.attacked), config.ks_alpha);
  rep.ks_rejection_legit = ks_rejection_rate(legit, latent_rows(m.codec, cell.clean), config.ks_alpha);
  return rep;
}

AttackOutcome run_attack_cell(const ExperimentConfig& config, const ModelSet& m, const std::filesystem::path& dir) {
  config.validate();
  ensure_dir(dir);
  AttackOutcome out;
  CellLatents& cell = out.latents;
  transmitted_test_latents(config, m, cell);
  const std::size_t n = config.n_attack;

  double sigma = config.noise_sigma;
  if (config.attack == "noise" && sigma < 0.0) sigma = matched_noise_sigma(config, m, cell.clean);
  const MitmPolicy policy = make_policy(config, m, std::max(sigma, 0.0));
  policy.validate();

  std::vector<double> norms, l_first, l_last, seconds;
  std::vector<AttackTrace> traces;
  std::vector<int> clean_cls;
  for (std::size_t i = 0; i < n; ++i) {
    AttackTrace trace;
    const auto t0 = Clock::now();
    AppliedAttack a = apply_policy(policy, cell.clean[i], i, &trace);
    seconds.push_back(seconds_since(t0));
    if (policy.mode == MitmMode::passthrough) {
      a.clean_class = m.scorer.classify(m.codec.decode(cell.clean[i]));
      a.target = choose_target(policy.target, a.clean_class, i);
    }
    clean_cls.push_back(a.clean_class);
    cell.targets.push_back(a.target);
    norms.push_back(a.perturbation_norm);
    if (!trace.steps.empty()) {
      l_first.push_back(trace.steps.front().l_sem);
      l_last.push_back(trace.steps.back().l_sem);
      if (traces.size() < config.trace_attacks) traces.push_back(std::move(trace));
    }
    cell.attacked.push_back(std::move(a.latent));
  }

  std::size_t clean_ok = 0, attacked_ok = 0, hits = 0, transfer = 0, base = 0, second_base = 0;
  std::vector<Tensor> grid_clean, grid_attacked;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor clean_img = m.codec.decode(cell.clean[i]);
    const Tensor img = m.codec.decode(cell.attacked[i]);
    const int pred = m.scorer.classify(img);
    clean_ok += clean_cls[i] == cell.labels[i];
    attacked_ok += pred == cell.labels[i];
    hits += pred == cell.targets[i];
    transfer += m.second.classify(img) == cell.targets[i];
    base += clean_cls[i] == cell.targets[i];
    second_base += m.second.classify(clean_img) == cell.targets[i];
    if (grid_clean.size() < config.grid_columns) {
      grid_clean.push_back(clean_img);
      grid_attacked.push_back(img);
    }
  }
  const double nn = double(n);
  out.detection = detect_latents(config, m, cell);
  out.mean_perturbation_norm = mean_of(norms);

  auto& j = out.metrics;
  j["codec"] = codec_name(m.codec.id());
  j["attack"] = config.attack;
  j["channel"] = {{"mode", config.channel}, {"sigma", config.channel_sigma}};
  j["n"] = n;
  j["seed"] = config.seed;
  j["target"] = config.target;
  nlohmann::ordered_json params;
  if (policy.mode == MitmMode::noise) params["sigma"] = policy.sigma;
  if (policy.mode == MitmMode::ttalm) {
    params["eta"] = policy.tta.eta;
    params["max_steps"] = policy.tta.max_steps;
    params["stop_tol"] = policy.tta.stop_tol;
    params["lambda"] = policy.tta.lambda;
    params["backtracking"] = policy.tta.backtracking;
  }
  if (policy.mode == MitmMode::dir) params["strength"] = policy.strength;
  j["params"] = params.is_null() ? nlohmann::ordered_json::object() : params;
  j["clean_accuracy"] = double(clean_ok) / nn;
  j["attacked_accuracy"] = double(attacked_ok) / nn;
  j["target_base_rate"] = double(base) / nn;
  j["success_rate"] = double(hits) / nn;
  j["transfer_target_base_rate"] = double(second_base) / nn;
  j["transfer_success_rate"] = double(transfer) / nn;
  j["mean_perturbation_norm"] = out.mean_perturbation_norm;
  j["input_output_correlation"] =
      pooled_correlation(latent_rows(m.codec, cell.clean), latent_rows(m.codec, cell.attacked));
  if (!l_first.empty()) {
    std::size_t dec = 0;
    for (std::size_t i = 0; i < l_first.size(); ++i) dec += l_last[i] < l_first[i];
    j["l_sem_decreased"] = double(dec) / double(l_first.size());
    j["mean_l_sem_initial"] = mean_of(l_first);
    j["mean_l_sem_final"] = mean_of(l_last);
  }
  nlohmann::ordered_json det;
  for (const auto& d : out.detection.detectors) det[d.name] = d.auroc;
  j["auroc"] = det;
  {
    const auto d = detector_scores("mahalanobis", m, cell.attacked);
    std::vector<double> sq(d.size());
    std::transform(d.begin(), d.end(), sq.begin(), [](double x) { return x * x; });
    j["mean_mahalanobis_attacked"] = mean_of(d);
    j["mean_mahalanobis_sq_attacked"] = mean_of(sq);
  }
  j["mean_mahalanobis_legit"] = mean_of(detector_scores("mahalanobis", m, cell.legit));
  j["ks_alpha"] = config.ks_alpha;
  j["ks_rejection_attacked"] = out.detection.ks_rejection_attacked;
  j["ks_rejection_legit"] = out.detection.ks_rejection_legit;

  out.timing["total_seconds"] = std::accumulate(seconds.begin(), seconds.end(), 0.0);
  out.timing["mean_seconds_per_attack"] = mean_of(seconds);
  out.timing["max_seconds_per_attack"] = seconds.empty() ? 0.0 : *std::max_element(seconds.begin(), seconds.end());

  write_json(dir / "metrics.json", out.metrics);
  write_json(dir / "timing.json", out.timing);
  out.detection.write(dir);
  std::ostringstream csv;
  csv.precision(9);
  csv << "attack,step,l_sem,reg,total\n";
  for (std::size_t a = 0; a < traces.size(); ++a)
    for (const auto& s : traces[a].steps) csv << a << ',' << s.step << ',' << s.l_sem << ',' << s.reg << ',' << s.total << '\n';
  write_text(dir / "traces.csv", csv.str());
  std::vector<Tensor> grid = grid_clean;
  grid.insert(grid.end(), grid_attacked.begin(), grid_attacked.end());
  render_grid(grid, std::max<std::size_t>(1, grid_clean.size()), dir / "grid.pgm");
  latents_checkpoint(m.codec, cell).save(dir / "latents.ckpt");
  return out;
}

AttackOutcome cmd_attack(const ExperimentConfig& config) {
  const ModelSet m = load_models(config);
  return run_attack_cell(config, m, config.out);
}

DetectionReport cmd_detect(const ExperimentConfig& config) {
  const ModelSet m = load_models(config);
  const auto path = std::filesystem::path(config.out) / "latents.ckpt";
  if (!std::filesystem::exists(path)) throw IoError("no latent dump at " + path.string() + "; run `semcom attack` first");
  const CellLatents cell = latents_from_checkpoint(m.codec, Checkpoint::load(path));
  DetectionReport rep = detect_latents(config, m, cell);
  rep.write(config.out);
  return rep;
}

// --------------------------------------------------------------------- e2e

nlohmann::ordered_json cmd_e2e(const ExperimentConfig& config) {
  const ModelSet m = load_models(config);
  ensure_dir(config.out);
  const std::size_t n = config.n_attack;
  if (m.data.test.size() < n) throw ContractError("test split too small for n_attack");

  CellLatents offline;
  transmitted_test_latents(config, m, offline);
  double sigma = config.noise_sigma;
  if (config.attack == "noise" && sigma < 0.0) sigma = matched_noise_sigma(config, m, offline.clean);
  const MitmPolicy policy = make_policy(config, m, std::max(sigma, 0.0));
  policy.validate();

  std::vector<Tensor> images;
  for (std::size_t i = 0; i < n; ++i) images.push_back(m.data.test[i].pixels);

  Listener rx(Endpoint{"127.0.0.1", 0});
  Listener px(Endpoint{"127.0.0.1", 0});
  std::ofstream log(std::filesystem::path(config.out) / "proxy_log.jsonl");
  const auto t0 = Clock::now();
  auto receiver = std::async(std::launch::async, [&] { return run_receiver(rx, m.codec, &m.scorer); });
  auto proxy = std::async(std::launch::async, [&] { return run_mitm(px, rx.endpoint(), policy, &log); });
  SenderConfig sc;
  sc.to = px.endpoint();
  sc.channel = config.channel_config();
  sc.max_write = config.max_write;
  sc.corrupt_frames = config.corrupt_frames;
  const SenderReport sent = run_sender(images, m.codec, sc);
  const auto records = proxy.get();
  const ReceiverReport got = receiver.get();
  const double wall = seconds_since(t0);

  // Offline reference for the same frame indices.
  std::size_t dropped = 0, online_hits = 0, offline_hits = 0, online_ok = 0, offline_ok = 0, mismatches = 0;
  // The receiver numbers the frames it sees; map back to sender indices
  // through the proxy's records, which skip nothing.
  std::vector<std::size_t> forwarded;
  for (const auto& r : records) {
    if (r.status == "dropped") ++dropped;
    else forwarded.push_back(r.index);
  }
  for (std::size_t k = 0; k < got.latents.size(); ++k) {
    const std::size_t i = forwarded.at(got.accepted_indices[k]);
    const AppliedAttack a = apply_policy(policy, offline.clean[i], i);
    const int clean_class = m.scorer.classify(m.codec.decode(offline.clean[i]));
    const int target = policy.mode == MitmMode::passthrough ? choose_target(policy.target, clean_class, i) : a.target;
    const int off_pred = m.scorer.classify(m.codec.decode(a.latent));
    mismatches += !(got.latents[k] == a.latent);
    online_hits += got.classes[k] == target;
    offline_hits += off_pred == target;
    online_ok += got.classes[k] == offline.labels[i];
    offline_ok += off_pred == offline.labels[i];
  }
  const double acc_n = std::max<double>(1.0, double(got.latents.size()));
  nlohmann::ordered_json j;
  j["codec"] = codec_name(m.codec.id());
  j["mode"] = mitm_mode_name(policy.mode);
  j["frames_sent"] = sent.frames.size();
  j["frames_received"] = got.latents.size();
  j["injected_corruptions"] = config.corrupt_frames.size();
  j["receiver_rejections"] = got.rejections.size();
  j["proxy_drops"] = dropped;
  j["rejections_match_injections"] = got.rejections.size() + dropped == config.corrupt_frames.size();
  j["online_success_rate"] = double(online_hits) / acc_n;
  j["offline_success_rate"] = double(offline_hits) / acc_n;
  j["online_accuracy"] = double(online_ok) / acc_n;
  j["offline_accuracy"] = double(offline_ok) / acc_n;
  j["latent_mismatches"] = mismatches;
  j["online_equals_offline"] = mismatches == 0 && online_hits == offline_hits;
  write_json(std::filesystem::path(config.out) / "e2e.json", j);
  write_json(std::filesystem::path(config.out) / "e2e_timing.json", {{"wall_seconds", wall}});
  return j;
}

// ------------------------------------------------------------------ report

nlohmann::ordered_json cmd_report(const ExperimentConfig& base) {
  const auto t_all = Clock::now();
  const std::filesystem::path root = base.out;
  ensure_dir(root);
  nlohmann::ordered_json summary, timings;
  summary["cells"] = nlohmann::ordered_json::array();
  std::ostringstream csv;
  csv << "cell,codec,attack,channel_sigma,param,success_rate,transfer_success_rate,clean_accuracy,"
         "attacked_accuracy,mean_perturbation_norm,auroc_mahalanobis,ks_rejection_attacked\n";

  auto run = [&](const ExperimentConfig& c, const ModelSet& m, const std::string& name, const std::string& param) {
    const auto t0 = Clock::now();
    AttackOutcome o = run_attack_cell(c, m, root / name);
    timings[name] = seconds_since(t0);
    nlohmann::ordered_json cell{{"cell", name}};
    cell.update(o.metrics);
    summary["cells"].push_back(cell);
    const auto& a = o.metrics["auroc"];
    csv << name << ',' << c.codec << ',' << c.attack << ',' << c.channel_sigma << ',' << param << ','
        << o.metrics["success_rate"].get<double>() << ',' << o.metrics["transfer_success_rate"].get<double>() << ','
        << o.metrics["clean_accuracy"].get<double>() << ',' << o.metrics["attacked_accuracy"].get<double>() << ','
        << o.mean_perturbation_norm << ',' << (a.contains("mahalanobis") ? a["mahalanobis"].get<double>() : 0.5)
        << ',' << o.metrics["ks_rejection_attacked"].get<double>() << '\n';
    return o;
  };

  for (CodecId id : kTrainedCodecs) {
    ExperimentConfig c = base;
    c.codec = codec_name(id);
    c.channel = "ideal";
    c.channel_sigma = 0.0;
    c.eta = -1.0;
    const ModelSet m = load_models(c);
    const std::string prefix = c.codec + "/";

    c.attack = "none";
    run(c, m, prefix + "clean", "");
    c.attack = "ttalm";
    c.lambda = 0.1;
    const AttackOutcome stealth = run(c, m, prefix + "ttalm_lambda0.1", "lambda=0.1");
    c.lambda = 0.0;
    run(c, m, prefix + "ttalm_lambda0", "lambda=0");
    c.lambda = base.lambda;
    c.attack = "noise";
    c.noise_sigma = stealth.mean_perturbation_norm / std::sqrt(double(m.codec.latent_dim()));
    run(c, m, prefix + "noise", "sigma=" + std::to_string(c.noise_sigma));
    c.noise_sigma = -1.0;
    c.attack = "dir";
    for (double s : {0.5, 0.8, 1.0}) {
      c.strength = s;
      std::ostringstream nm;
      nm << prefix << "dir_s" << s;
      run(c, m, nm.str(), "strength=" + nm.str().substr(nm.str().rfind("_s") + 2));
    }
    c.strength = base.strength;
    // Step-size sweep on a smaller batch around the per-codec default. The
    // continuous codec diverges (non-finite decode) beyond about 0.3.
    c.attack = "ttalm";
    c.n_attack = std::min<std::size_t>(base.n_attack, 100);
    const std::vector<double> etas =
        m.codec.quantized() ? std::vector<double>{0.1, 0.2, 0.5, 1.0} : std::vector<double>{0.01, 0.02, 0.05, 0.1, 0.2};
    for (double eta : etas) {
      c.eta = eta;
      std::ostringstream nm;
      nm << prefix << "eta_sweep/eta" << eta;
      run(c, m, nm.str(), "eta=" + nm.str().substr(nm.str().rfind("eta") + 3));
    }
  }

  // AWGN sweep on the continuous codec with default TTA-LM.
  {
    ExperimentConfig c = base;
    c.codec = codec_name(CodecId::continuous_mlp);
    c.eta = -1.0;
    const ModelSet m = load_models(c);
    for (double sigma : {0.05, 0.1, 0.2}) {
      c.channel = "awgn";
      c.channel_sigma = sigma;
      for (std::string attack : {"none", "ttalm"}) {
        c.attack = attack;
        std::ostringstream nm;
        nm << c.codec << "/awgn" << sigma << "_" << attack;
        run(c, m, nm.str(), "channel_sigma=" + nm.str().substr(nm.str().find("awgn") + 4));
      }
    }
  }

  // Derived comparisons across cells.
  {
    std::map<std::string, const nlohmann::ordered_json*> by_name;
    for (const auto& c : summary["cells"]) by_name[c["cell"].get<std::string>()] = &c;
    auto get = [&](const std::string& cell, const char* key) { return by_name.at(cell)->at(key).get<double>(); };
    nlohmann::ordered_json cmp;
    for (CodecId id : kTrainedCodecs) {
      const std::string p = std::string(codec_name(id)) + "/";
      const double reg = get(p + "ttalm_lambda0.1", "mean_mahalanobis_sq_attacked");
      const double bare = get(p + "ttalm_lambda0", "mean_mahalanobis_sq_attacked");
      cmp["lambda_penalty_" + std::string(codec_name(id))] = {
          {"mean_mahalanobis_sq_lambda0.1", reg}, {"mean_mahalanobis_sq_lambda0", bare}, {"not_increased", reg <= bare}};
    }
    for (const char* cell : {"ttalm_lambda0.1", "ttalm_lambda0"}) {
      const double c = get(std::string("continuous-mlp/") + cell, "success_rate");
      const double q = get(std::string("vq-mlp/") + cell, "success_rate");
      cmp[std::string("vq_gap_") + cell] = {
          {"continuous", c}, {"quantized", q}, {"gap", c - q}, {"within_15_points", std::abs(c - q) <= 0.15}};
    }
    summary["comparisons"] = cmp;
  }
  summary["config"] = base.to_json();
  timings["total"] = seconds_since(t_all);
  write_json(root / "summary.json", summary);
  write_text(root / "summary.csv", csv.str());
  write_json(root / "report_timing.json", timings);
  return summary;
}

}  // namespace semcom
