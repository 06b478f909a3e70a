#pragma once

// Image-embedding network and class-embedding table. Supplies the image
// embedding e_x, the class embedding e_t, the semantic loss
// 1 - cos(e_x, e_t), and the nearest-class oracle classifier.
//
// Class vocabulary (index -> name): 0 disk, 1 square, 2 triangle, 3 cross,
// 4 ring, 5 bar.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "semcom/autograd.hpp"
#include "semcom/checkpoint.hpp"
#include "semcom/data.hpp"
#include "semcom/nn.hpp"

namespace semcom {

struct ScorerConfig {
  std::vector<std::size_t> hidden{128, 64};
  Activation activation = Activation::relu;
  std::size_t embed_dim = 8;
  std::size_t epochs = 12;
  std::size_t batch_size = 64;
  double learning_rate = 2e-3;
  double temperature = 10.0;  // logits are temperature * cos(e_x, e_t)
  double input_noise = 0.05;  // pixel noise added to training images
  std::size_t max_shift = 2;  // random translation of training images, in pixels
  std::uint64_t seed = 2;
};

// Configuration of the independent transfer scorer: different width,
// depth, activation and seed.
ScorerConfig second_scorer_config();

// Throws ContractError unless 0 <= target < kNumClasses.
int check_target(int target);

class ScorerModel;

// Scorer weights bound onto a tape as constants, for attack graphs.
template <typename T>
struct BoundScorer {
  BoundMlp<T> encoder;
  BasicTensor<T> class_embeddings;

  // Mean over rows of images [n, 784] of 1 - cos(e_x, e_target).
  Var<T> semantic_loss(const Var<T>& images, int target) const {
    Tape<T>& tape = images.tape();
    const Var<T> ex = encoder(images);
    const std::size_t n = ex.value().dim(0), m = ex.value().dim(1);
    BasicTensor<T> et(Shape{n, m});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < m; ++j) et.at(i, j) = class_embeddings.at(check_target(target), j);
    const Var<T> cos = ag::cosine_similarity(ex, tape.constant(std::move(et)));
    return ag::mean(ag::sub(tape.constant(BasicTensor<T>(Shape{n}, T{1})), cos));
  }
};

class ScorerModel {
 public:
  ScorerModel() = default;

  bool frozen() const { return frozen_; }
  std::size_t embed_dim() const { return class_embeddings_.dim(1); }
  const Mlp& image_encoder() const { return encoder_; }
  // [kNumClasses, embed_dim], unit rows.
  const Tensor& class_embeddings() const { return class_embeddings_; }

  // e_x for rows of images [n, 784]; returns [n, embed_dim].
  Tensor embed_images(const Tensor& images) const;
  std::vector<float> embed_image(const Tensor& image) const;

  // 1 - cos(e_x, e_target), in [0, 2].
  double semantic_loss(const Tensor& image, int target) const;
  double semantic_loss_of_embedding(std::span<const float> ex, int target) const;

  // argmax_t cos(e_x, e_t), lowest index on ties.
  int classify(const Tensor& image) const;
  std::vector<int> classify_batch(const Tensor& images) const;
  int classify_embedding(std::span<const float> ex) const;

  template <typename T>
  BoundScorer<T> bind(Tape<T>& tape) const {
    require_frozen("bind");
    return {semcom::bind(tape, encoder_, false), BasicTensor<T>::cast(class_embeddings_)};
  }

  Checkpoint to_checkpoint() const;
  static ScorerModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static ScorerModel load(const std::filesystem::path& path);

  // Assembles a frozen scorer from parts (class rows are normalized).
  static ScorerModel from_parts(Mlp encoder, Tensor class_embeddings);

 private:
  void require_frozen(const char* op) const;

  Mlp encoder_;
  Tensor class_embeddings_;
  bool frozen_ = false;

  friend ScorerModel train_scorer(const std::vector<ImageSample>&, const ScorerConfig&,
                                  std::vector<double>*);
};

// Cross-entropy training of encoder and class table on temperature-scaled
// cosine logits. Optional per-epoch mean losses.
ScorerModel train_scorer(const std::vector<ImageSample>& train, const ScorerConfig& config,
                         std::vector<double>* epoch_losses = nullptr);

// Fraction of samples whose classify() equals the label.
double scorer_accuracy(const ScorerModel& scorer, const std::vector<ImageSample>& samples);
// Same, with each image replaced by its rows in `images` [n, 784].
double scorer_accuracy(const ScorerModel& scorer, const Tensor& images, std::span<const int> labels);

}  // namespace semcom
