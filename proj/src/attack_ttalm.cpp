#include "semcom/attack_ttalm.hpp"

#include <cmath>
#include <sstream>

#include "semcom/rng.hpp"

namespace semcom {

namespace {

void validate(const TtaConfig& c) {
  if (!(c.eta >= 0.0) || !std::isfinite(c.eta)) throw ContractError("tta: eta must be finite and >= 0");
  if (!(c.lambda >= 0.0)) throw ContractError("tta: lambda must be >= 0");
  check_target(c.target);
}

// Loss graph over a single latent row, with model weights bound once.
class LossGraph {
 public:
  LossGraph(const CodecModel& codec, const ScorerModel& scorer, const LatentStats& stats, int target,
            const Tensor* codebook)
      : target_(target), codebook_(codebook) {
    if (!codec.frozen()) throw ModelStateError("tta: codec is not frozen");
    if (!scorer.frozen()) throw ModelStateError("tta: scorer is not frozen");
    const std::size_t d = codec.latent_dim();
    if (stats.dim != d) {
      throw ShapeError("tta: latent stats have dimension " + std::to_string(stats.dim) + ", codec uses " +
                       std::to_string(d));
    }
    decoder_ = bind(tape_, codec.decoder(), false);
    scorer_ = scorer.bind(tape_);
    mean_ = tape_.constant(stats.mean_tensor().reshaped({1, d}));
    precision_ = tape_.constant(stats.precision_tensor());
    base_ = tape_.size();
  }

  struct Eval {
    double l_sem, reg;
    Tensor grad;  // of l_sem + lambda * reg
  };

  // Losses at `u` and the gradient of the total with respect to `u`. With
  // a codebook, the forward pass uses the re-quantized rows.
  Eval operator()(const Tensor& u, float lambda, bool need_grad) {
    tape_.truncate(base_);
    const Var<float> leaf = tape_.leaf(u.reshaped({1, u.size()}));
    Var<float> z = leaf;
    if (codebook_) {
      const auto idx = quantize(*codebook_, u.data());
      Tensor q(Shape{1, u.size()});
      const std::size_t w = codebook_->dim(1);
      for (std::size_t s = 0; s < idx.size(); ++s)
        for (std::size_t j = 0; j < w; ++j) q[s * w + j] = codebook_->at(idx[s], j);
      z = ag::straight_through(leaf, std::move(q));
    }
    const Var<float> l_sem = scorer_.semantic_loss(decoder_(z), target_);
    const Var<float> diff = ag::sub(z, mean_);
    const Var<float> reg = ag::sum(ag::mul(ag::matmul(diff, precision_), diff));
    Eval e{l_sem.item(), reg.item(), {}};
    if (!std::isfinite(e.l_sem) || !std::isfinite(e.reg)) throw NonFiniteError("tta: non-finite loss");
    if (need_grad) {
      tape_.backward(ag::add(l_sem, ag::scale(reg, lambda)));
      e.grad = tape_.grad(leaf).reshaped({u.size()});
      e.grad.check_finite("tta gradient");
    }
    return e;
  }

 private:
  Tape<float> tape_;
  BoundMlp<float> decoder_;
  BoundScorer<float> scorer_;
  Var<float> mean_, precision_;
  std::size_t base_ = 0;
  int target_;
  const Tensor* codebook_;
};

struct IterateResult {
  Tensor u;
  AttackTrace trace;
};

IterateResult iterate(LossGraph& graph, Tensor u, const TtaConfig& config, bool use_tolerance) {
  IterateResult r;
  const float lambda = static_cast<float>(config.lambda);
  auto total_of = [&](const LossGraph::Eval& e) { return e.l_sem + config.lambda * e.reg; };
  LossGraph::Eval cur = graph(u, lambda, config.max_steps > 0 && config.eta > 0.0);
  r.trace.steps.push_back({0, cur.l_sem, cur.reg, total_of(cur)});
  if (config.eta == 0.0) {
    r.u = std::move(u);
    return r;
  }
  for (std::size_t k = 0; k < config.max_steps; ++k) {
    const Tensor g = cur.grad;
    double eta = config.eta;
    Tensor next = u;
    for (std::size_t i = 0; i < u.size(); ++i) next[i] = static_cast<float>(u[i] - eta * g[i]);
    const bool last = k + 1 == config.max_steps;
    LossGraph::Eval ev = graph(next, lambda, !last);
    if (config.backtracking) {
      int halvings = 0;
      while (!(total_of(ev) <= total_of(cur)) && halvings < 10) {
        eta *= 0.5;
        ++halvings;
        for (std::size_t i = 0; i < u.size(); ++i) next[i] = static_cast<float>(u[i] - eta * g[i]);
        ev = graph(next, lambda, !last);
      }
      if (!(total_of(ev) <= total_of(cur))) {
        r.trace.early_stop = true;
        break;
      }
    }
    const double delta = std::abs(total_of(ev) - total_of(cur));
    u = std::move(next);
    cur = std::move(ev);
    r.trace.steps.push_back({k + 1, cur.l_sem, cur.reg, total_of(cur)});
    if (use_tolerance && delta < config.stop_tol) {
      r.trace.early_stop = true;
      break;
    }
    if (last) break;
  }
  r.u = std::move(u);
  return r;
}

}  // namespace

AttackResult tta_attack(const Latent& z, const CodecModel& codec, const ScorerModel& scorer,
                        const LatentStats& stats, const TtaConfig& config) {
  validate(config);
  if (z.kind != LatentKind::continuous) throw ContractError("tta_attack: expected a continuous latent");
  if (z.codec_id != codec.codec_id()) throw CodecMismatchError("tta_attack: latent codec id mismatch");
  if (z.values.size() != codec.latent_dim()) throw ShapeError("tta_attack: latent dimension mismatch");
  AttackResult out;
  if (config.max_steps == 0 || config.eta == 0.0) {
    // Identity: still report the loss at the intercepted latent.
    LossGraph graph(codec, scorer, stats, config.target, nullptr);
    const auto e = graph(Tensor(Shape{z.values.size()}, z.values), 0.0f, false);
    out.trace.steps.push_back({0, e.l_sem, e.reg, e.l_sem + config.lambda * e.reg});
    out.latent = z;
    out.trace.final_latent = z;
    return out;
  }
  LossGraph graph(codec, scorer, stats, config.target, nullptr);
  IterateResult r = iterate(graph, Tensor(Shape{z.values.size()}, z.values), config, true);
  out.latent = Latent::continuous(z.codec_id, r.u.storage());
  out.trace = std::move(r.trace);
  out.trace.final_latent = out.latent;
  return out;
}

AttackResult tta_attack_quantized(const Latent& z, const CodecModel& codec, const ScorerModel& scorer,
                                  const LatentStats& stats, const TtaConfig& config) {
  validate(config);
  if (z.kind != LatentKind::quantized || !codec.quantized()) {
    throw ContractError("tta_attack_quantized: expected a quantized latent and codec");
  }
  if (z.codec_id != codec.codec_id()) throw CodecMismatchError("tta_attack_quantized: latent codec id mismatch");
  const std::vector<float> rows = codec.dequantize(z.indices);
  LossGraph graph(codec, scorer, stats, config.target, &codec.codebook());
  AttackResult out;
  if (config.max_steps == 0 || config.eta == 0.0) {
    const auto e = graph(Tensor(Shape{rows.size()}, rows), 0.0f, false);
    out.trace.steps.push_back({0, e.l_sem, e.reg, e.l_sem + config.lambda * e.reg});
    out.latent = z;
    out.trace.final_latent = z;
    return out;
  }
  IterateResult r = iterate(graph, Tensor(Shape{rows.size()}, rows), config, false);
  std::vector<std::uint16_t> idx = quantize(codec.codebook(), r.u.data());
  // A slot whose row never moved keeps its original index, even when
  // duplicate codewords would re-quantize it elsewhere.
  const std::size_t w = codec.code_dim();
  for (std::size_t s = 0; s < idx.size(); ++s) {
    bool same = true;
    for (std::size_t j = 0; j < w && same; ++j) same = r.u[s * w + j] == rows[s * w + j];
    if (same) idx[s] = z.indices[s];
  }
  out.latent = Latent::quantized(z.codec_id, std::move(idx));
  out.trace = std::move(r.trace);
  out.trace.final_latent = out.latent;
  return out;
}

AttackResult tta_attack_any(const Latent& z, const CodecModel& codec, const ScorerModel& scorer,
                            const LatentStats& stats, const TtaConfig& config) {
  return z.kind == LatentKind::quantized ? tta_attack_quantized(z, codec, scorer, stats, config)
                                         : tta_attack(z, codec, scorer, stats, config);
}

Latent noise_baseline(const Latent& z, double sigma, std::uint64_t seed, std::uint64_t index) {
  if (z.kind != LatentKind::continuous) throw ContractError("noise_baseline: expected a continuous latent");
  if (!(sigma >= 0.0)) throw ContractError("noise_baseline: sigma must be >= 0");
  Latent out = z;
  if (sigma == 0.0) return out;
  Rng rng(Rng::derive(seed, 0x7015e, index));
  for (auto& v : out.values) v = static_cast<float>(v + sigma * rng.normal());
  return out;
}

Latent noise_baseline(const Latent& z, const CodecModel& codec, double sigma, std::uint64_t seed,
                      std::uint64_t index) {
  if (z.kind == LatentKind::continuous) return noise_baseline(z, sigma, seed, index);
  Latent rows = Latent::continuous(z.codec_id, codec.decoder_input(z));
  rows = noise_baseline(rows, sigma, seed, index);
  return Latent::quantized(z.codec_id, quantize(codec.codebook(), rows.values));
}

std::string trace_csv(const AttackTrace& trace) {
  std::ostringstream os;
  os.precision(9);
  os << "step,l_sem,reg,total\n";
  for (const auto& s : trace.steps) os << s.step << ',' << s.l_sem << ',' << s.reg << ',' << s.total << '\n';
  return os.str();
}

}  // namespace semcom
