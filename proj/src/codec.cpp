#include "semcom/codec.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "semcom/optim.hpp"
#include "semcom/rng.hpp"

namespace semcom {

bool is_quantized(CodecId id) { return id == CodecId::vq_mlp || id == CodecId::vq_conv; }

const char* codec_name(CodecId id) {
  switch (id) {
    case CodecId::continuous_mlp:
      return "continuous-mlp";
    case CodecId::vq_mlp:
      return "vq-mlp";
    case CodecId::continuous_conv:
      return "continuous-conv";
    case CodecId::vq_conv:
      return "vq-conv";
  }
  return "unknown";
}

Latent Latent::continuous(std::uint16_t codec_id, std::vector<float> values) {
  Latent z;
  z.kind = LatentKind::continuous;
  z.codec_id = codec_id;
  z.values = std::move(values);
  return z;
}

Latent Latent::quantized(std::uint16_t codec_id, std::vector<std::uint16_t> indices) {
  Latent z;
  z.kind = LatentKind::quantized;
  z.codec_id = codec_id;
  z.indices = std::move(indices);
  return z;
}

std::vector<std::uint16_t> quantize(const Tensor& codebook, std::span<const float> latent) {
  if (codebook.rank() != 2 || codebook.dim(0) == 0) throw ContractError("quantize: empty codebook");
  const std::size_t m = codebook.dim(0), d = codebook.dim(1);
  if (m > 65536) throw ContractError("quantize: codebook too large for 16-bit indices");
  if (latent.size() % d != 0) {
    throw ShapeError("quantize: latent length " + std::to_string(latent.size()) +
                     " is not a multiple of codeword width " + std::to_string(d));
  }
  const std::size_t slots = latent.size() / d;
  std::vector<std::uint16_t> out(slots);
  for (std::size_t s = 0; s < slots; ++s) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t best_k = 0;
    for (std::size_t k = 0; k < m; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = static_cast<double>(latent[s * d + j]) - codebook.at(k, j);
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        best_k = k;
      }
    }
    out[s] = static_cast<std::uint16_t>(best_k);
  }
  return out;
}

const Tensor& CodecModel::codebook() const {
  if (!codebook_) throw ContractError("codec " + std::string(codec_name(id_)) + " has no codebook");
  return *codebook_;
}

Mlp& CodecModel::mutable_encoder() {
  if (frozen_) throw ModelStateError("codec is frozen; encoder parameters are immutable");
  return encoder_;
}

Mlp& CodecModel::mutable_decoder() {
  if (frozen_) throw ModelStateError("codec is frozen; decoder parameters are immutable");
  return decoder_;
}

Tensor& CodecModel::mutable_codebook() {
  if (frozen_) throw ModelStateError("codec is frozen; codebook is immutable");
  if (!codebook_) throw ContractError("codec has no codebook");
  return *codebook_;
}

void CodecModel::require_frozen(const char* op) const {
  if (!frozen_) throw ModelStateError(std::string(op) + ": codec is not trained and frozen");
}

CodecModel CodecModel::initialize(const CodecConfig& config) {
  if (config.id == CodecId::continuous_conv || config.id == CodecId::vq_conv) {
    throw ContractError("convolutional codec variants are not built");
  }
  CodecModel m;
  m.id_ = config.id;
  Rng rng(Rng::derive(config.seed, 0xc0dec));
  if (m.quantized()) {
    m.tokens_ = config.tokens;
    m.code_dim_ = config.code_dim;
    const std::size_t width = config.tokens * config.code_dim;
    m.encoder_ = Mlp::init({kImagePixels, config.hidden, width}, Activation::relu,
                           Activation::identity, rng);
    m.decoder_ = Mlp::init({width, config.hidden, kImagePixels}, Activation::relu,
                           Activation::sigmoid, rng);
    m.codebook_ = Tensor(Shape{config.codebook_size, config.code_dim});
    for (auto& v : m.codebook_->data()) v = static_cast<float>(rng.normal(0.0, 0.1));
  } else {
    m.tokens_ = 0;
    m.code_dim_ = 0;
    m.encoder_ = Mlp::init({kImagePixels, config.hidden, config.latent_dim}, Activation::relu,
                           Activation::identity, rng);
    m.decoder_ = Mlp::init({config.latent_dim, config.hidden, kImagePixels}, Activation::relu,
                           Activation::sigmoid, rng);
  }
  return m;
}

Tensor CodecModel::encode_vectors(const Tensor& images) const {
  const Tensor x = images.rank() == 2 ? images : images.reshaped({1, images.size()});
  return mlp_forward(encoder_, x);
}

Latent CodecModel::encode(const Tensor& image) const {
  require_frozen("encode");
  if (image.size() != kImagePixels) {
    throw ShapeError("encode: expected a 28x28 image, got " + shape_string(image.shape()));
  }
  return encode_batch(image.reshaped({1, kImagePixels})).front();
}

std::vector<Latent> CodecModel::encode_batch(const Tensor& images) const {
  require_frozen("encode");
  if (images.rank() != 2 || images.dim(1) != kImagePixels) {
    throw ShapeError("encode: expected [n, 784] images, got " + shape_string(images.shape()));
  }
  const Tensor z = encode_vectors(images);
  std::vector<Latent> out;
  out.reserve(z.dim(0));
  const std::size_t w = z.dim(1);
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    std::span<const float> row(z.data().data() + i * w, w);
    if (quantized()) {
      out.push_back(Latent::quantized(codec_id(), quantize(*codebook_, row)));
    } else {
      out.push_back(Latent::continuous(codec_id(), std::vector<float>(row.begin(), row.end())));
    }
  }
  return out;
}

std::vector<float> CodecModel::dequantize(std::span<const std::uint16_t> indices) const {
  const Tensor& cb = codebook();
  if (indices.size() != tokens_) {
    throw ShapeError("dequantize: expected " + std::to_string(tokens_) + " indices, got " +
                     std::to_string(indices.size()));
  }
  std::vector<float> out;
  out.reserve(tokens_ * code_dim_);
  for (std::uint16_t k : indices) {
    if (k >= cb.dim(0)) {
      throw ContractError("codebook index " + std::to_string(k) + " out of range (M = " +
                          std::to_string(cb.dim(0)) + ")");
    }
    for (std::size_t j = 0; j < code_dim_; ++j) out.push_back(cb.at(k, j));
  }
  return out;
}

std::vector<float> CodecModel::decoder_input(const Latent& latent) const {
  if (latent.codec_id != codec_id()) {
    throw CodecMismatchError("latent codec id " + std::to_string(latent.codec_id) +
                             " does not match model codec id " + std::to_string(codec_id()));
  }
  if (latent.kind == LatentKind::quantized) {
    if (!quantized()) throw CodecMismatchError("quantized latent for a continuous codec");
    return dequantize(latent.indices);
  }
  if (latent.values.size() != latent_dim()) {
    throw ShapeError("decode: latent length " + std::to_string(latent.values.size()) +
                     " does not match codec width " + std::to_string(latent_dim()));
  }
  return latent.values;
}

Tensor CodecModel::decode(const Latent& latent) const {
  require_frozen("decode");
  const std::vector<float> z = decoder_input(latent);
  Tensor x = decode_vectors(Tensor(Shape{1, z.size()}, z));
  return x.reshaped({kImageSide, kImageSide});
}

Tensor CodecModel::decode_vectors(const Tensor& z) const {
  require_frozen("decode");
  if (z.rank() != 2 || z.dim(1) != latent_dim()) {
    throw ShapeError("decode: expected [n, " + std::to_string(latent_dim()) + "], got " +
                     shape_string(z.shape()));
  }
  z.check_finite("decode input");
  Tensor x = mlp_forward(decoder_, z);
  for (auto& v : x.data()) v = std::clamp(v, 0.0f, 1.0f);
  return x;
}

Checkpoint CodecModel::to_checkpoint() const {
  Checkpoint ck;
  ck.put_meta("model", "codec");
  ck.put_meta("codec_id", std::to_string(codec_id()));
  ck.put_meta("codec_name", codec_name(id_));
  ck.put_meta("tokens", std::to_string(tokens_));
  ck.put_meta("code_dim", std::to_string(code_dim_));
  encoder_.save(ck, "encoder");
  decoder_.save(ck, "decoder");
  if (codebook_) ck.put("codebook", *codebook_);
  return ck;
}

CodecModel CodecModel::from_checkpoint(const Checkpoint& ck) {
  if (!ck.has_meta("model") || ck.meta("model") != "codec") {
    throw CheckpointError("checkpoint does not hold a codec");
  }
  CodecModel m;
  const unsigned long id = std::stoul(ck.meta("codec_id"));
  if (id > 3) throw CheckpointError("unknown codec id " + std::to_string(id));
  m.id_ = static_cast<CodecId>(id);
  m.tokens_ = std::stoul(ck.meta("tokens"));
  m.code_dim_ = std::stoul(ck.meta("code_dim"));
  m.encoder_ = Mlp::load(ck, "encoder");
  m.decoder_ = Mlp::load(ck, "decoder");
  if (m.quantized() != ck.has("codebook")) {
    throw CheckpointError("codebook presence does not match codec variant");
  }
  if (m.quantized()) {
    m.codebook_ = ck.tensor("codebook");
    if (m.codebook_->rank() != 2 || m.codebook_->dim(1) != m.code_dim_ ||
        m.tokens_ * m.code_dim_ != m.decoder_.input_dim()) {
      throw CheckpointError("codebook shape inconsistent with codec layout");
    }
  }
  if (m.encoder_.output_dim() != m.decoder_.input_dim() || m.encoder_.input_dim() != kImagePixels ||
      m.decoder_.output_dim() != kImagePixels) {
    throw CheckpointError("encoder/decoder widths inconsistent");
  }
  m.frozen_ = true;
  return m;
}

void CodecModel::save(const std::filesystem::path& path) const {
  require_frozen("save");
  to_checkpoint().save(path);
}

CodecModel CodecModel::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

CodecModel CodecModel::load(const std::filesystem::path& path, CodecId expected) {
  CodecModel m = load(path);
  if (m.id() != expected) {
    throw CodecMismatchError(std::string("checkpoint holds codec ") + codec_name(m.id()) +
                             ", expected " + codec_name(expected));
  }
  return m;
}

namespace {

Tensor gather_batch(const std::vector<ImageSample>& train, std::span<const std::size_t> idx) {
  Tensor x(Shape{idx.size(), kImagePixels});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const auto px = train[idx[i]].pixels.data();
    std::copy(px.begin(), px.end(), x.data().begin() + i * kImagePixels);
  }
  return x;
}

double dataset_recon_mse(const Mlp& enc, const Mlp& dec, const std::optional<Tensor>& codebook,
                         const std::vector<ImageSample>& samples) {
  double total = 0.0;
  const std::size_t chunk = 256;
  for (std::size_t start = 0; start < samples.size(); start += chunk) {
    const std::size_t n = std::min(chunk, samples.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor x = gather_batch(samples, idx);
    Tensor z = mlp_forward(enc, x);
    if (codebook) {
      const std::size_t d = codebook->dim(1);
      const auto q = quantize(*codebook, z.data());
      for (std::size_t s = 0; s < q.size(); ++s)
        for (std::size_t j = 0; j < d; ++j) z[s * d + j] = codebook->at(q[s], j);
    }
    const Tensor r = mlp_forward(dec, z);
    for (std::size_t i = 0; i < r.size(); ++i) {
      const double diff = std::clamp(r[i], 0.0f, 1.0f) - x[i];
      total += diff * diff;
    }
  }
  return total / (static_cast<double>(samples.size()) * kImagePixels);
}

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

// Re-expresses the latent space so training latents have zero mean and
// standard deviation `scale`: an affine map folded into the encoder output
// layer, undone in the decoder input layer. Per dimension for continuous
// codecs; one shared shift and scale for VQ codecs, which keeps every
// nearest-codeword assignment unchanged.
void standardize_latents(Mlp& enc, Mlp& dec, std::optional<Tensor>& codebook, std::size_t code_dim,
                         const std::vector<ImageSample>& train, double scale) {
  const std::size_t w = enc.output_dim();
  const std::size_t group = codebook ? code_dim : w;  // width sharing one shift vector
  std::vector<double> sum(group, 0.0), sq(group, 0.0);
  std::size_t count = 0;
  for (std::size_t start = 0; start < train.size(); start += 256) {
    const std::size_t n = std::min<std::size_t>(256, train.size() - start);
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor z = mlp_forward(enc, gather_batch(train, idx));
    for (std::size_t i = 0; i < z.size(); ++i) {
      sum[i % group] += z[i];
      sq[i % group] += double(z[i]) * z[i];
    }
    count += z.size() / group;
  }
  std::vector<double> shift(w), gain(w);
  if (codebook) {
    double var = 0.0;
    for (std::size_t j = 0; j < group; ++j) {
      const double m = sum[j] / double(count);
      var += sq[j] / double(count) - m * m;
    }
    const double g = scale / std::sqrt(std::max(var / double(group), 1e-12));
    for (std::size_t i = 0; i < w; ++i) {
      shift[i] = sum[i % group] / double(count);
      gain[i] = g;
    }
    Tensor& cb = *codebook;
    for (std::size_t k = 0; k < cb.dim(0); ++k)
      for (std::size_t j = 0; j < code_dim; ++j)
        cb.at(k, j) = static_cast<float>((cb.at(k, j) - shift[j]) * g);
  } else {
    for (std::size_t j = 0; j < w; ++j) {
      const double m = sum[j] / double(count);
      const double sd = std::sqrt(std::max(sq[j] / double(count) - m * m, 1e-12));
      shift[j] = m;
      gain[j] = scale / sd;
    }
  }
  Dense& last = enc.layers.back();
  for (std::size_t j = 0; j < w; ++j) {
    for (std::size_t r = 0; r < last.weight.dim(0); ++r)
      last.weight.at(r, j) = static_cast<float>(last.weight.at(r, j) * gain[j]);
    last.bias[j] = static_cast<float>((last.bias[j] - shift[j]) * gain[j]);
  }
  // z = z' / gain + shift, so z W + b = z' (W / gain) + (b + shift W).
  Dense& first = dec.layers.front();
  for (std::size_t c = 0; c < first.weight.dim(1); ++c) {
    double b = first.bias[c];
    for (std::size_t j = 0; j < w; ++j) b += shift[j] * first.weight.at(j, c);
    first.bias[c] = static_cast<float>(b);
  }
  for (std::size_t j = 0; j < w; ++j)
    for (std::size_t c = 0; c < first.weight.dim(1); ++c)
      first.weight.at(j, c) = static_cast<float>(first.weight.at(j, c) / gain[j]);
}

}  // namespace

CodecModel train_codec(const std::vector<ImageSample>& train, const CodecConfig& config,
                       TrainReport* report) {
  if (train.empty()) throw ContractError("train_codec: empty dataset");
  if (config.epochs == 0) throw ContractError("train_codec: epochs must be positive");
  CodecModel model = CodecModel::initialize(config);
  Rng rng(Rng::derive(config.seed, 0x7a1));
  const bool vq = model.quantized();
  const std::size_t d = config.code_dim;

  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  if (vq) {
    // Seed the codebook with encoder outputs so no codeword starts unused.
    shuffle_indices(order, rng);
    const std::size_t n = std::min<std::size_t>(train.size(), 256);
    const Tensor z = mlp_forward(model.encoder(), gather_batch(train, std::span(order).first(n)));
    const std::size_t rows = z.size() / d;
    Tensor& cb = model.mutable_codebook();
    for (std::size_t k = 0; k < cb.dim(0); ++k) {
      const std::size_t r = rng.below(rows);
      for (std::size_t j = 0; j < d; ++j) cb.at(k, j) = z[r * d + j];
    }
  }

  TrainReport rep;
  rep.initial_loss = dataset_recon_mse(model.encoder(), model.decoder(),
                                       vq ? std::optional<Tensor>(model.codebook()) : std::nullopt,
                                       train);

  std::vector<Tensor*> params = model.mutable_encoder().parameters();
  for (Tensor* p : model.mutable_decoder().parameters()) params.push_back(p);
  if (vq) params.push_back(&model.mutable_codebook());
  Optimizer opt({OptimizerConfig::Kind::adam, config.learning_rate});

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_indices(order, rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    std::vector<std::size_t> usage(vq ? model.codebook_size() : 0, 0);
    Tensor last_z;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const Tensor xb = gather_batch(train, std::span(order).subspan(start, n));
      Tape<float> tape;
      const auto enc = bind(tape, model.encoder(), true);
      const auto dec = bind(tape, model.decoder(), true);
      auto x = tape.constant(xb);
      try {
        auto z = enc(x);
        Var<float> loss;
        if (vq) {
          auto cb = tape.leaf(model.codebook());
          auto rows = ag::reshape(z, {n * config.tokens, d});
          const auto idx16 = quantize(model.codebook(), rows.value().data());
          std::vector<std::size_t> idx(idx16.begin(), idx16.end());
          for (std::size_t k : idx) ++usage[k];
          auto q = ag::gather_rows(cb, idx);
          auto st = ag::straight_through(rows, q.value());
          auto recon = dec(ag::reshape(st, {n, config.tokens * d}));
          auto rec_loss = ag::mean(ag::square(ag::sub(recon, x)));
          auto codebook_loss = ag::mean(ag::square(ag::sub(q, ag::stop_gradient(rows))));
          auto commit_loss = ag::mean(ag::square(ag::sub(rows, ag::stop_gradient(q))));
          loss = ag::add(ag::add(rec_loss, codebook_loss),
                         ag::scale(commit_loss, static_cast<float>(config.commitment)));
          tape.backward(loss);
          std::vector<Tensor> grads;
          for (const auto& v : enc.leaves()) grads.push_back(tape.grad(v));
          for (const auto& v : dec.leaves()) grads.push_back(tape.grad(v));
          grads.push_back(tape.grad(cb));
          last_z = z.value();
          opt.step(params, grads);
        } else {
          auto recon = dec(z);
          loss = ag::mean(ag::square(ag::sub(recon, x)));
          tape.backward(loss);
          std::vector<Tensor> grads;
          for (const auto& v : enc.leaves()) grads.push_back(tape.grad(v));
          for (const auto& v : dec.leaves()) grads.push_back(tape.grad(v));
          opt.step(params, grads);
        }
        epoch_loss += loss.item();
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string("codec training diverged: ") + e.what());
      }
      ++batches;
    }
    if (vq && epoch + 1 < config.epochs) {
      // Re-seed dead codewords from the last batch's encoder outputs.
      Tensor& cb = model.mutable_codebook();
      const std::size_t rows = last_z.size() / d;
      for (std::size_t k = 0; k < usage.size(); ++k) {
        if (usage[k] != 0) continue;
        const std::size_t r = rng.below(rows);
        for (std::size_t j = 0; j < d; ++j) cb.at(k, j) = last_z[r * d + j];
      }
    }
    rep.epoch_losses.push_back(epoch_loss / static_cast<double>(batches));
  }

  if (config.latent_scale > 0.0) {
    std::optional<Tensor> cb;
    if (vq) cb = model.codebook();
    standardize_latents(model.mutable_encoder(), model.mutable_decoder(), cb, d, train,
                        config.latent_scale);
    if (vq) model.mutable_codebook() = *cb;
  }
  rep.final_loss = dataset_recon_mse(model.encoder(), model.decoder(),
                                     vq ? std::optional<Tensor>(model.codebook()) : std::nullopt,
                                     train);
  if (!std::isfinite(rep.final_loss)) throw DivergenceError("codec training diverged");
  model.freeze();
  if (report) *report = std::move(rep);
  return model;
}

double reconstruction_mse(const CodecModel& codec, const std::vector<ImageSample>& samples) {
  if (!codec.frozen()) throw ModelStateError("reconstruction_mse: codec is not frozen");
  return dataset_recon_mse(codec.encoder(), codec.decoder(),
                           codec.quantized() ? std::optional<Tensor>(codec.codebook()) : std::nullopt,
                           samples);
}

}  // namespace semcom
