#include "semcom/scorer.hpp"

#include <cmath>
#include <limits>
#include <numeric>

#include "semcom/optim.hpp"
#include "semcom/rng.hpp"

namespace semcom {

ScorerConfig second_scorer_config() {
  ScorerConfig c;
  c.hidden = {96, 48};
  c.activation = Activation::tanh;
  c.seed = 1002;
  return c;
}

int check_target(int target) {
  if (target < 0 || target >= kNumClasses) {
    throw ContractError("semantic target " + std::to_string(target) + " is not a class index");
  }
  return target;
}

namespace {

void normalize_rows(Tensor& t) {
  const std::size_t m = t.dim(1);
  for (std::size_t i = 0; i < t.dim(0); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m; ++j) s += double(t.at(i, j)) * t.at(i, j);
    const double n = std::sqrt(s) + ag::kNormEpsilon;
    for (std::size_t j = 0; j < m; ++j) t.at(i, j) = static_cast<float>(t.at(i, j) / n);
  }
}

double cosine(std::span<const float> a, std::span<const float> b) {
  double d = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += double(a[i]) * b[i];
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  return d / ((std::sqrt(na) + ag::kNormEpsilon) * (std::sqrt(nb) + ag::kNormEpsilon));
}

}  // namespace

void ScorerModel::require_frozen(const char* op) const {
  if (!frozen_) throw ModelStateError(std::string(op) + ": scorer is not trained and frozen");
}

Tensor ScorerModel::embed_images(const Tensor& images) const {
  require_frozen("embed_images");
  if (images.rank() != 2 || images.dim(1) != kImagePixels) {
    throw ShapeError("embed_images: expected [n, 784], got " + shape_string(images.shape()));
  }
  return mlp_forward(encoder_, images);
}

std::vector<float> ScorerModel::embed_image(const Tensor& image) const {
  if (image.size() != kImagePixels) {
    throw ShapeError("embed_image: expected a 28x28 image, got " + shape_string(image.shape()));
  }
  return embed_images(image.reshaped({1, kImagePixels})).storage();
}

double ScorerModel::semantic_loss_of_embedding(std::span<const float> ex, int target) const {
  return 1.0 - cosine(ex, class_embeddings_.row(static_cast<std::size_t>(check_target(target))).data());
}

double ScorerModel::semantic_loss(const Tensor& image, int target) const {
  return semantic_loss_of_embedding(embed_image(image), target);
}

int ScorerModel::classify_embedding(std::span<const float> ex) const {
  int best = 0;
  double best_cos = -std::numeric_limits<double>::infinity();
  for (int c = 0; c < kNumClasses; ++c) {
    const double v = cosine(ex, class_embeddings_.row(static_cast<std::size_t>(c)).data());
    if (v > best_cos) {
      best_cos = v;
      best = c;
    }
  }
  return best;
}

int ScorerModel::classify(const Tensor& image) const { return classify_embedding(embed_image(image)); }

std::vector<int> ScorerModel::classify_batch(const Tensor& images) const {
  const Tensor e = embed_images(images);
  const std::size_t m = e.dim(1);
  std::vector<int> out(e.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = classify_embedding(std::span<const float>(e.data().data() + i * m, m));
  return out;
}

Checkpoint ScorerModel::to_checkpoint() const {
  Checkpoint ck;
  ck.put_meta("model", "scorer");
  encoder_.save(ck, "image_encoder");
  ck.put("class_embeddings", class_embeddings_);
  return ck;
}

ScorerModel ScorerModel::from_checkpoint(const Checkpoint& ck) {
  if (!ck.has_meta("model") || ck.meta("model") != "scorer") {
    throw CheckpointError("checkpoint does not hold a scorer");
  }
  Mlp enc = Mlp::load(ck, "image_encoder");
  const Tensor& table = ck.tensor("class_embeddings");
  if (table.rank() != 2 || table.dim(0) != kNumClasses || table.dim(1) != enc.output_dim() ||
      enc.input_dim() != kImagePixels) {
    throw CheckpointError("scorer checkpoint has inconsistent shapes");
  }
  ScorerModel s;
  s.encoder_ = std::move(enc);
  s.class_embeddings_ = table;
  s.frozen_ = true;
  return s;
}

ScorerModel ScorerModel::from_parts(Mlp encoder, Tensor class_embeddings) {
  if (class_embeddings.rank() != 2 || class_embeddings.dim(0) != kNumClasses ||
      class_embeddings.dim(1) != encoder.output_dim()) {
    throw ShapeError("from_parts: class table must be [6, embed_dim]");
  }
  ScorerModel s;
  s.encoder_ = std::move(encoder);
  s.class_embeddings_ = std::move(class_embeddings);
  normalize_rows(s.class_embeddings_);
  s.frozen_ = true;
  return s;
}

void ScorerModel::save(const std::filesystem::path& path) const {
  require_frozen("save");
  to_checkpoint().save(path);
}

ScorerModel ScorerModel::load(const std::filesystem::path& path) {
  return from_checkpoint(Checkpoint::load(path));
}

ScorerModel train_scorer(const std::vector<ImageSample>& train, const ScorerConfig& config,
                         std::vector<double>* epoch_losses) {
  if (train.empty()) throw ContractError("train_scorer: empty dataset");
  if (config.epochs == 0) throw ContractError("train_scorer: epochs must be positive");
  Rng rng(Rng::derive(config.seed, 0x5c0e));
  std::vector<std::size_t> sizes{kImagePixels};
  sizes.insert(sizes.end(), config.hidden.begin(), config.hidden.end());
  sizes.push_back(config.embed_dim);
  ScorerModel model;
  model.encoder_ = Mlp::init(sizes, config.activation, Activation::identity, rng);
  model.class_embeddings_ = Tensor(Shape{std::size_t(kNumClasses), config.embed_dim});
  for (auto& v : model.class_embeddings_.data()) v = static_cast<float>(rng.normal());

  std::vector<Tensor*> params = model.encoder_.parameters();
  params.push_back(&model.class_embeddings_);
  Optimizer opt({OptimizerConfig::Kind::adam, config.learning_rate});
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const float temp = static_cast<float>(config.temperature);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      Tensor xb(Shape{n, kImagePixels});
      std::vector<int> labels(n);
      for (std::size_t i = 0; i < n; ++i) {
        const ImageSample& s = train[order[start + i]];
        labels[i] = s.label;
        const long sr = config.max_shift ? long(rng.below(2 * config.max_shift + 1)) - long(config.max_shift) : 0;
        const long sc = config.max_shift ? long(rng.below(2 * config.max_shift + 1)) - long(config.max_shift) : 0;
        for (long r = 0; r < long(kImageSide); ++r) {
          for (long c = 0; c < long(kImageSide); ++c) {
            const long rr = r - sr, cc = c - sc;
            const bool inside = rr >= 0 && rr < long(kImageSide) && cc >= 0 && cc < long(kImageSide);
            const double px = inside ? s.pixels[std::size_t(rr) * kImageSide + std::size_t(cc)] : 0.0;
            const double v = px + config.input_noise * rng.normal();
            xb[i * kImagePixels + std::size_t(r) * kImageSide + std::size_t(c)] =
                static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }
      }
      Tape<float> tape;
      const auto enc = bind(tape, model.encoder_, true);
      const auto table = tape.leaf(model.class_embeddings_);
      try {
        const auto ex = ag::row_normalize(enc(tape.constant(std::move(xb))));
        const auto et = ag::row_normalize(table);
        const auto logits = ag::scale(ag::matmul(ex, ag::transpose(et)), temp);
        const auto loss = ag::softmax_cross_entropy(logits, std::span<const int>(labels));
        tape.backward(loss);
        std::vector<Tensor> grads;
        for (const auto& v : enc.leaves()) grads.push_back(tape.grad(v));
        grads.push_back(tape.grad(table));
        opt.step(params, grads);
        total += loss.item();
      } catch (const NonFiniteError& e) {
        throw DivergenceError(std::string("scorer training diverged: ") + e.what());
      }
      ++batches;
    }
    if (!std::isfinite(total)) throw DivergenceError("scorer training diverged");
    if (epoch_losses) epoch_losses->push_back(total / double(batches));
  }
  normalize_rows(model.class_embeddings_);
  model.frozen_ = true;
  return model;
}

double scorer_accuracy(const ScorerModel& scorer, const Tensor& images, std::span<const int> labels) {
  if (images.dim(0) != labels.size()) throw ShapeError("scorer_accuracy: label count mismatch");
  if (labels.empty()) throw ContractError("scorer_accuracy: no samples");
  const auto pred = scorer.classify_batch(images);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
  return double(hits) / double(labels.size());
}

double scorer_accuracy(const ScorerModel& scorer, const std::vector<ImageSample>& samples) {
  const auto labels = labels_of(samples);
  return scorer_accuracy(scorer, stack_pixels(samples), labels);
}

}  // namespace semcom
