#include "semcom/attack_dir.hpp"

#include <cmath>
#include <numbers>
#include <numeric>

#include "semcom/optim.hpp"

namespace semcom {

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
  if (betas.empty()) throw ContractError("schedule: need at least one step");
  for (std::size_t i = 0; i < betas.size(); ++i) {
    if (!(betas[i] > 0.0 && betas[i] < 1.0)) throw ContractError("schedule: beta outside (0, 1)");
    if (i > 0 && !(betas[i] > betas[i - 1])) throw ContractError("schedule: betas must strictly increase");
  }
  DiffusionSchedule s;
  s.steps = betas.size();
  s.betas.assign(1, 0.0);
  s.betas.insert(s.betas.end(), betas.begin(), betas.end());
  s.alphas.assign(s.steps + 1, 1.0);
  s.alpha_bars.assign(s.steps + 1, 1.0);
  s.sigmas.assign(s.steps + 1, 0.0);
  for (std::size_t t = 1; t <= s.steps; ++t) {
    s.alphas[t] = 1.0 - s.betas[t];
    s.alpha_bars[t] = s.alpha_bars[t - 1] * s.alphas[t];
    s.sigmas[t] = std::sqrt(s.betas[t] * (1.0 - s.alpha_bars[t - 1]) / (1.0 - s.alpha_bars[t]));
  }
  return s;
}

DiffusionSchedule DiffusionSchedule::linear(std::size_t steps, double beta_start, double beta_end) {
  if (steps < 2) throw ContractError("schedule: linear schedule needs at least 2 steps");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0)) {
    throw ContractError("schedule: need 0 < beta_start < beta_end < 1");
  }
  std::vector<double> b(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    b[i] = beta_start + (beta_end - beta_start) * double(i) / double(steps - 1);
  }
  return from_betas(std::move(b));
}

DiffusionSchedule DiffusionSchedule::standard(std::size_t steps) { return linear(steps, 1e-4, 0.02); }

void DiffusionSchedule::check_step(std::size_t t, std::size_t lowest) const {
  if (t < lowest || t > steps) {
    throw ContractError("diffusion step " + std::to_string(t) + " outside [" + std::to_string(lowest) + ", " +
                        std::to_string(steps) + "]");
  }
}

std::vector<float> forward_noise(double alpha_bar, std::span<const float> z, std::span<const float> eps) {
  if (z.size() != eps.size()) throw ShapeError("forward_noise: noise shape does not match latent");
  if (!(alpha_bar >= 0.0 && alpha_bar <= 1.0)) throw ContractError("forward_noise: alpha_bar outside [0, 1]");
  const double a = std::sqrt(alpha_bar), b = std::sqrt(1.0 - alpha_bar);
  std::vector<float> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = static_cast<float>(a * z[i] + b * eps[i]);
  return out;
}

std::vector<float> forward_noise(const DiffusionSchedule& s, std::span<const float> z, std::size_t t,
                                 std::span<const float> eps) {
  s.check_step(t, 0);
  return forward_noise(s.alpha_bars[t], z, eps);
}

std::vector<float> reverse_update(double alpha, double alpha_bar, double sigma, std::span<const float> z_t,
                                  std::span<const float> eps_pred, std::span<const float> xi) {
  if (z_t.size() != eps_pred.size() || z_t.size() != xi.size()) throw ShapeError("reverse_update: shape mismatch");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ContractError("reverse_update: alpha outside (0, 1]");
  // c_t is 0 whenever beta_t is 0, including the alpha_bar = 1 corner.
  const double c = alpha == 1.0 ? 0.0 : (1.0 - alpha) / std::sqrt(1.0 - alpha_bar);
  const double inv = 1.0 / std::sqrt(alpha);
  std::vector<float> out(z_t.size());
  for (std::size_t i = 0; i < z_t.size(); ++i) {
    out[i] = static_cast<float>(inv * (z_t[i] - c * eps_pred[i]) + sigma * xi[i]);
  }
  return out;
}

std::vector<float> timestep_embedding(std::size_t t, std::size_t dim) {
  if (dim == 0 || dim % 2 != 0) throw ContractError("timestep_embedding: dim must be even and positive");
  const std::size_t half = dim / 2;
  std::vector<float> e(dim);
  for (std::size_t k = 0; k < half; ++k) {
    const double w = std::pow(10000.0, -double(k) / double(half));
    e[k] = static_cast<float>(std::sin(double(t) * w));
    e[half + k] = static_cast<float>(std::cos(double(t) * w));
  }
  return e;
}

void DenoiserModel::require_frozen(const char* op) const {
  if (!frozen_) throw ModelStateError(std::string(op) + ": denoiser is not trained and frozen");
}

Mlp& DenoiserModel::mutable_network() {
  if (frozen_) throw ModelStateError("denoiser is frozen");
  return net_;
}

DenoiserModel DenoiserModel::initialize(std::size_t latent_dim, const Tensor& class_table,
                                        const DiffusionSchedule& schedule, const DenoiserConfig& config) {
  if (class_table.rank() != 2 || class_table.dim(0) != kNumClasses) {
    throw ShapeError("denoiser: class table must be [6, m]");
  }
  if (config.layers < 2) throw ContractError("denoiser: need at least 2 layers");
  DenoiserModel m;
  m.class_table_ = class_table;
  m.schedule_ = schedule;
  m.time_dim_ = config.time_dim;
  std::vector<std::size_t> sizes{latent_dim + config.time_dim + class_table.dim(1)};
  for (std::size_t i = 0; i + 1 < config.layers; ++i) sizes.push_back(config.hidden);
  sizes.push_back(latent_dim);
  Rng rng(Rng::derive(config.seed, 0xd1ff));
  m.net_ = Mlp::init(sizes, Activation::relu, Activation::identity, rng);
  // Zero output layer: the untrained predictor outputs 0, so the initial
  // loss is E||eps||^2 = d.
  m.net_.layers.back().weight.fill(0.0f);
  return m;
}

Tensor DenoiserModel::conditioning_input(const Tensor& z_t, std::span<const std::size_t> t,
                                         std::span<const int> labels) const {
  const std::size_t d = latent_dim();
  if (z_t.rank() != 2 || z_t.dim(1) != d) throw ShapeError("denoiser: expected [n, " + std::to_string(d) + "]");
  const std::size_t n = z_t.dim(0), m = class_table_.dim(1), w = d + time_dim_ + m;
  if (t.size() != n || labels.size() != n) throw ShapeError("denoiser: step/label count mismatch");
  Tensor x(Shape{n, w});
  for (std::size_t i = 0; i < n; ++i) {
    schedule_.check_step(t[i], 1);
    const auto te = timestep_embedding(t[i], time_dim_);
    const std::size_t label = static_cast<std::size_t>(labels[i]);
    if (labels[i] < 0 || label >= kNumClasses) throw ContractError("denoiser: label out of range");
    float* row = x.data().data() + i * w;
    for (std::size_t j = 0; j < d; ++j) row[j] = z_t.at(i, j);
    for (std::size_t j = 0; j < time_dim_; ++j) row[d + j] = te[j];
    for (std::size_t j = 0; j < m; ++j) row[d + time_dim_ + j] = class_table_.at(label, j);
  }
  return x;
}

Tensor DenoiserModel::predict(const Tensor& z_t, std::span<const std::size_t> t, std::span<const int> labels) const {
  require_frozen("predict");
  return mlp_forward(net_, conditioning_input(z_t, t, labels));
}

std::vector<float> DenoiserModel::reverse_step(std::span<const float> z_t, std::size_t t, int label,
                                               std::span<const float> xi) const {
  schedule_.check_step(t, 1);
  if (z_t.size() != latent_dim()) throw ShapeError("reverse_step: latent dimension mismatch");
  const std::size_t steps[1] = {t};
  const int labels[1] = {label};
  const Tensor eps = predict(Tensor(Shape{1, z_t.size()}, std::vector<float>(z_t.begin(), z_t.end())), steps, labels);
  const double sigma = t == 1 ? 0.0 : schedule_.sigmas[t];
  return reverse_update(schedule_.alphas[t], schedule_.alpha_bars[t], sigma, z_t, eps.data(), xi);
}

namespace {

std::vector<float> normal_vector(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal());
  return v;
}

}  // namespace

std::vector<float> DenoiserModel::sample(int label, Rng& rng) const {
  require_frozen("sample");
  std::vector<float> z = normal_vector(latent_dim(), rng);
  for (std::size_t t = schedule_.steps; t >= 1; --t) z = reverse_step(z, t, label, normal_vector(z.size(), rng));
  return z;
}

Tensor DenoiserModel::sample_batch(std::span<const int> labels, Rng& rng) const {
  require_frozen("sample_batch");
  const std::size_t n = labels.size(), d = latent_dim();
  Tensor z(Shape{n, d});
  for (auto& v : z.data()) v = static_cast<float>(rng.normal());
  std::vector<std::size_t> ts(n);
  for (std::size_t t = schedule_.steps; t >= 1; --t) {
    std::fill(ts.begin(), ts.end(), t);
    const Tensor eps = predict(z, ts, labels);
    std::vector<float> xi(z.size());
    for (auto& v : xi) v = static_cast<float>(rng.normal());
    const double sigma = t == 1 ? 0.0 : schedule_.sigmas[t];
    const auto next = reverse_update(schedule_.alphas[t], schedule_.alpha_bars[t], sigma, z.data(), eps.data(), xi);
    std::copy(next.begin(), next.end(), z.data().begin());
  }
  return z;
}

std::vector<float> DenoiserModel::edit(std::span<const float> z, int target, double strength, Rng& rng) const {
  require_frozen("edit");
  if (!(strength > 0.0 && strength <= 1.0)) throw ContractError("edit: strength must lie in (0, 1]");
  if (z.size() != latent_dim()) throw ShapeError("edit: latent dimension mismatch");
  const std::size_t t0 = std::max<std::size_t>(
      1, std::min(schedule_.steps, static_cast<std::size_t>(std::ceil(strength * double(schedule_.steps) - 1e-9))));
  std::vector<float> x = forward_noise(schedule_, z, t0, normal_vector(z.size(), rng));
  for (std::size_t t = t0; t >= 1; --t) x = reverse_step(x, t, target, normal_vector(x.size(), rng));
  for (float v : x) {
    if (!std::isfinite(v)) throw NonFiniteError("edit: non-finite latent");
  }
  return x;
}

Checkpoint DenoiserModel::to_checkpoint() const {
  Checkpoint ck;
  ck.put_meta("model", "denoiser");
  ck.put_meta("time_dim", std::to_string(time_dim_));
  ck.put_meta("schedule.steps", std::to_string(schedule_.steps));
  TensorD betas(Shape{schedule_.steps}, std::vector<double>(schedule_.betas.begin() + 1, schedule_.betas.end()));
  ck.put("schedule.betas", std::move(betas));
  ck.put("class_embeddings", class_table_);
  net_.save(ck, "net");
  return ck;
}

DenoiserModel DenoiserModel::from_checkpoint(const Checkpoint& ck) {
  if (!ck.has_meta("model") || ck.meta("model") != "denoiser") {
    throw CheckpointError("checkpoint does not hold a denoiser");
  }
  DenoiserModel m;
  m.time_dim_ = std::stoul(ck.meta("time_dim"));
  const TensorD& b = ck.tensor_f64("schedule.betas");
  if (b.size() != std::stoul(ck.meta("schedule.steps"))) throw CheckpointError("schedule length mismatch");
  try {
    m.schedule_ = DiffusionSchedule::from_betas(b.storage());
  } catch (const ContractError& e) {
    throw CheckpointError(std::string("invalid schedule: ") + e.what());
  }
  m.class_table_ = ck.tensor("class_embeddings");
  m.net_ = Mlp::load(ck, "net");
  if (m.class_table_.rank() != 2 ||
      m.net_.input_dim() != m.net_.output_dim() + m.time_dim_ + m.class_table_.dim(1)) {
    throw CheckpointError("denoiser checkpoint has inconsistent widths");
  }
  m.frozen_ = true;
  return m;
}

void DenoiserModel::save(const std::filesystem::path& path) const {
  require_frozen("save");
  to_checkpoint().save(path);
}

DenoiserModel DenoiserModel::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

namespace {

struct NoisedBatch {
  Tensor input;  // conditioning rows
  Tensor eps;
};

NoisedBatch make_batch(const DenoiserModel& m, const Tensor& latents, std::span<const int> labels,
                       std::span<const std::size_t> rows, Rng& rng) {
  const std::size_t d = m.latent_dim(), n = rows.size();
  Tensor zt(Shape{n, d}), eps(Shape{n, d});
  std::vector<std::size_t> ts(n);
  std::vector<int> ls(n);
  const auto& s = m.schedule();
  for (std::size_t i = 0; i < n; ++i) {
    ts[i] = 1 + rng.below(s.steps);
    ls[i] = labels[rows[i]];
    const double a = std::sqrt(s.alpha_bars[ts[i]]), b = std::sqrt(1.0 - s.alpha_bars[ts[i]]);
    for (std::size_t j = 0; j < d; ++j) {
      const double e = rng.normal();
      eps.at(i, j) = static_cast<float>(e);
      zt.at(i, j) = static_cast<float>(a * latents.at(rows[i], j) + b * e);
    }
  }
  return {m.conditioning_input(zt, ts, ls), std::move(eps)};
}

double mc_loss(const DenoiserModel& m, const Mlp& net, const Tensor& latents, std::span<const int> labels,
               std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x1055));
  const std::size_t n = latents.dim(0);
  double total = 0.0;
  for (std::size_t start = 0; start < n; start += 512) {
    std::vector<std::size_t> rows(std::min<std::size_t>(512, n - start));
    std::iota(rows.begin(), rows.end(), start);
    const NoisedBatch b = make_batch(m, latents, labels, rows, rng);
    const Tensor pred = mlp_forward(net, b.input);
    for (std::size_t i = 0; i < pred.size(); ++i) total += std::pow(double(pred[i]) - b.eps[i], 2);
  }
  return total / double(n);
}

}  // namespace

double denoiser_loss(const DenoiserModel& model, const Tensor& latents, std::span<const int> labels,
                     std::uint64_t seed) {
  return mc_loss(model, model.network(), latents, labels, seed);
}

DenoiserModel train_denoiser(const Tensor& latents, std::span<const int> labels, const Tensor& class_table,
                             const DiffusionSchedule& schedule, const DenoiserConfig& config,
                             DenoiserReport* report) {
  if (latents.rank() != 2 || latents.dim(0) == 0) throw ContractError("train_denoiser: empty latent set");
  if (labels.size() != latents.dim(0)) throw ShapeError("train_denoiser: label count mismatch");
  if (config.epochs == 0) throw ContractError("train_denoiser: epochs must be positive");
  latents.check_finite("train_denoiser latents");
  DenoiserModel model = DenoiserModel::initialize(latents.dim(1), class_table, schedule, config);
  const std::size_t d = latents.dim(1);
  DenoiserReport rep;
  rep.initial_loss = mc_loss(model, model.network(), latents, labels, config.seed);

  Rng rng(Rng::derive(config.seed, 0x7a1d));
  std::vector<Tensor*> params = model.mutable_network().parameters();
  Optimizer opt({OptimizerConfig::Kind::adam, config.learning_rate});
  std::vector<std::size_t> order(latents.dim(0));
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    // Cosine decay: the sampler chains T predictions, so last-iterate weight
    // noise shows up as a bias in the samples.
    opt.set_learning_rate(config.learning_rate * 0.5 *
                          (1.0 + std::cos(std::numbers::pi * double(epoch) / double(config.epochs))));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      NoisedBatch b = make_batch(model, latents, labels, std::span(order).subspan(start, n), rng);
      Tape<float> tape;
      const auto net = bind(tape, model.network(), true);
      try {
        const auto pred = net(tape.constant(std::move(b.input)));
        // mean over rows of ||eps - pred||^2
        const auto loss = ag::scale(ag::mean(ag::square(ag::sub(pred, tape.constant(std::move(b.eps))))),
                                    static_cast<float>(d));
        tape.backward(loss);
        std::vector<Tensor> grads;
        for (const auto& v : net.leaves()) grads.push_back(tape.grad(v));
        opt.step(params, grads);
        total += loss.item();
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string("denoiser training diverged: ") + e.what());
      }
      ++batches;
    }
    rep.epoch_losses.push_back(total / double(batches));
  }
  rep.final_loss = mc_loss(model, model.network(), latents, labels, config.seed);
  if (!std::isfinite(rep.final_loss)) throw DivergenceError("denoiser training diverged");
  model.freeze();
  if (report) *report = std::move(rep);
  return model;
}

Latent dir_attack(const Latent& z, const CodecModel& codec, const DenoiserModel& denoiser, int target,
                  double strength, std::uint64_t seed, std::uint64_t index) {
  if (target < 0 || target >= kNumClasses) throw ContractError("dir_attack: target is not a class index");
  const std::vector<float> v = codec.decoder_input(z);
  if (v.size() != denoiser.latent_dim()) throw CodecMismatchError("dir_attack: denoiser was trained for another codec");
  Rng rng(Rng::derive(seed, 0xd12, index));
  std::vector<float> edited = denoiser.edit(v, target, strength, rng);
  if (z.kind == LatentKind::quantized) return Latent::quantized(z.codec_id, quantize(codec.codebook(), edited));
  return Latent::continuous(z.codec_id, std::move(edited));
}

}  // namespace semcom
