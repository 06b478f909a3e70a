#include <cmath>

#include "doctest.h"
#include "semcom/codec.hpp"
#include "semcom/gradcheck.hpp"
#include "semcom/rng.hpp"
#include "semcom/scorer.hpp"

using namespace semcom;

namespace {

// Scorer whose class embeddings are the first six standard basis vectors
// of R^8, with an arbitrary random encoder.
ScorerModel basis_scorer() {
  Rng rng(4);
  Mlp enc = Mlp::init({kImagePixels, 16, 8}, Activation::relu, Activation::identity, rng);
  Tensor table(Shape{6, 8});
  for (std::size_t c = 0; c < 6; ++c) table.at(c, c) = 1.0f;
  return ScorerModel::from_parts(std::move(enc), std::move(table));
}

const DatasetSplit& small_data() {
  static const DatasetSplit d = generate_dataset(31, 30, 0.8);
  return d;
}

ScorerConfig quick_config() {
  ScorerConfig c;
  c.hidden = {32};
  c.epochs = 3;
  return c;
}

std::vector<float> basis(std::size_t i, float scale = 1.0f) {
  std::vector<float> e(8, 0.0f);
  e[i] = scale;
  return e;
}

}  // namespace

TEST_CASE("semantic loss at parallel, orthogonal and antiparallel embeddings") {
  const ScorerModel s = basis_scorer();
  CHECK(s.semantic_loss_of_embedding(basis(2), 2) == doctest::Approx(0.0).epsilon(1e-7));
  CHECK(s.semantic_loss_of_embedding(basis(4), 2) == doctest::Approx(1.0));
  CHECK(s.semantic_loss_of_embedding(basis(2, -3.0f), 2) == doctest::Approx(2.0).epsilon(1e-7));
  CHECK_THROWS_AS(s.semantic_loss_of_embedding(basis(2), 6), ContractError);
  CHECK_THROWS_AS(s.semantic_loss_of_embedding(basis(2), -1), ContractError);
}

TEST_CASE("classify rules") {
  const ScorerModel s = basis_scorer();
  CHECK(s.classify_embedding(basis(3)) == 3);
  // equal cosine to classes 1 and 4: lowest index wins
  std::vector<float> tie(8, 0.0f);
  tie[1] = tie[4] = 1.0f;
  CHECK(s.classify_embedding(tie) == 1);

  Rng rng(12);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> e(8);
    for (auto& v : e) v = static_cast<float>(rng.normal());
    std::vector<float> scaled = e;
    const float c = static_cast<float>(rng.uniform(0.01, 100.0));
    for (auto& v : scaled) v *= c;
    const int k = s.classify_embedding(e);
    CHECK(s.classify_embedding(scaled) == k);
    // brute-force scan over the six cosines
    int best = 0;
    double best_cos = -2;
    for (int t = 0; t < 6; ++t) {
      const double cos = 1.0 - s.semantic_loss_of_embedding(e, t);
      if (cos > best_cos + 1e-12) {
        best_cos = cos;
        best = t;
      }
    }
    CHECK(k == best);
  }
}

TEST_CASE("embedding is deterministic, finite and bounded in loss") {
  const ScorerModel s = basis_scorer();
  const Tensor zero(Shape{28, 28});
  const auto e0 = s.embed_image(zero);
  CHECK(e0.size() == 8);
  for (float v : e0) CHECK(std::isfinite(v));
  for (const auto& sample : small_data().test) {
    CHECK(s.embed_image(sample.pixels) == s.embed_image(sample.pixels));
    for (int t = 0; t < 6; ++t) {
      const double l = s.semantic_loss(sample.pixels, t);
      CHECK(l >= 0.0);
      CHECK(l <= 2.0);
    }
  }
  CHECK_THROWS_AS(s.embed_image(Tensor(Shape{28, 27})), ShapeError);
  CHECK_THROWS_AS(ScorerModel().embed_image(zero), ModelStateError);
}

TEST_CASE("semantic loss through the decoder matches finite differences") {
  auto cfg = CodecConfig{};
  cfg.hidden = 32;
  CodecModel codec = CodecModel::initialize(cfg);
  codec.freeze();
  const ScorerModel scorer = basis_scorer();
  Rng rng(8);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    TensorD z(Shape{1, 16});
    for (auto& v : z.data()) v = rng.normal();
    const int target = trial % 6;
    GraphFn<double> fn = [&](Tape<double>& tape, const VarMap<double>& in) {
      const auto dec = bind(tape, codec.decoder(), false);
      const auto sc = scorer.bind(tape);
      return sc.semantic_loss(codec.decode_graph(dec, in.at("z")), target);
    };
    const Inputs<double> inputs{{"z", z}};
    const auto analytic = grad(fn, inputs, {"z"});
    const auto numeric = finite_diff_grad(fn, inputs, {"z"}, 1e-5);
    CHECK(analytic.value == doctest::Approx(numeric.value));
    worst = std::max(worst, max_relative_error(analytic, numeric));
  }
  MESSAGE("worst relative error " << worst);
  CHECK(worst <= 1e-3);
}

TEST_CASE("training is reproducible and normalizes the class table") {
  const ScorerModel a = train_scorer(small_data().train, quick_config());
  const ScorerModel b = train_scorer(small_data().train, quick_config());
  CHECK(a.frozen());
  CHECK(a.to_checkpoint().serialize() == b.to_checkpoint().serialize());
  const Tensor& t = a.class_embeddings();
  for (std::size_t c = 0; c < 6; ++c) {
    double n = 0;
    for (std::size_t j = 0; j < t.dim(1); ++j) n += double(t.at(c, j)) * t.at(c, j);
    CHECK(std::sqrt(n) == doctest::Approx(1.0).epsilon(1e-6));
  }
  auto bad = quick_config();
  bad.epochs = 0;
  CHECK_THROWS_AS(train_scorer(small_data().train, bad), ContractError);
  CHECK_THROWS_AS(train_scorer({}, quick_config()), ContractError);
}

TEST_CASE("checkpoint round-trip") {
  const ScorerModel a = train_scorer(small_data().train, quick_config());
  const auto path = std::filesystem::temp_directory_path() / "semcom_test_scorer.ckpt";
  a.save(path);
  const ScorerModel b = ScorerModel::load(path);
  for (const auto& s : small_data().test) {
    CHECK(a.embed_image(s.pixels) == b.embed_image(s.pixels));
    CHECK(a.classify(s.pixels) == b.classify(s.pixels));
  }
  CHECK_THROWS_AS(CodecModel::from_checkpoint(Checkpoint::load(path)), CheckpointError);
}
