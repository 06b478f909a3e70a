#pragma once

// Shared semantic encoder/decoder.
//
// Codec id registry (carried in every latent and checkpoint):
//   0  continuous-MLP   latent z in R^16
//   1  VQ-MLP           16 tokens, each an index into a 64 x 16 codebook
//   2  continuous-conv  reserved, not built
//   3  VQ-conv          reserved, not built

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "semcom/autograd.hpp"
#include "semcom/checkpoint.hpp"
#include "semcom/data.hpp"
#include "semcom/nn.hpp"

namespace semcom {

enum class CodecId : std::uint16_t {
  continuous_mlp = 0,
  vq_mlp = 1,
  continuous_conv = 2,
  vq_conv = 3,
};

bool is_quantized(CodecId id);
const char* codec_name(CodecId id);

enum class LatentKind : std::uint8_t { continuous, quantized };

// The transmitted representation: a real vector, or a sequence of codebook
// indices.
struct Latent {
  LatentKind kind = LatentKind::continuous;
  std::uint16_t codec_id = 0;
  std::vector<float> values;
  std::vector<std::uint16_t> indices;

  static Latent continuous(std::uint16_t codec_id, std::vector<float> values);
  static Latent quantized(std::uint16_t codec_id, std::vector<std::uint16_t> indices);

  std::size_t length() const { return kind == LatentKind::continuous ? values.size() : indices.size(); }

  friend bool operator==(const Latent&, const Latent&) = default;
};

struct CodecConfig {
  CodecId id = CodecId::continuous_mlp;
  std::size_t latent_dim = 16;  // continuous latent dimension d
  std::size_t tokens = 16;      // L
  std::size_t code_dim = 16;    // width of one codeword
  std::size_t codebook_size = 64;  // M
  std::size_t hidden = 128;
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double learning_rate = 2e-3;
  double commitment = 0.25;  // VQ commitment weight beta
  // After training, latents are re-expressed with zero mean and this
  // standard deviation (0 disables). Reconstructions are unaffected.
  double latent_scale = 0.5;
  std::uint64_t seed = 1;
};

struct TrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_losses;
};

// Nearest codeword (Euclidean) for every code_dim-wide slot of `latent`;
// ties go to the lowest index.
std::vector<std::uint16_t> quantize(const Tensor& codebook, std::span<const float> latent);

class CodecModel {
 public:
  CodecModel() = default;

  CodecId id() const { return id_; }
  std::uint16_t codec_id() const { return static_cast<std::uint16_t>(id_); }
  bool quantized() const { return is_quantized(id_); }
  bool frozen() const { return frozen_; }

  // Width of the vector fed to the decoder: d for continuous codecs,
  // tokens * code_dim for VQ codecs.
  std::size_t latent_dim() const { return decoder_.input_dim(); }
  std::size_t tokens() const { return tokens_; }
  std::size_t code_dim() const { return code_dim_; }
  std::size_t codebook_size() const { return codebook_ ? codebook_->dim(0) : 0; }

  const Mlp& encoder() const { return encoder_; }
  const Mlp& decoder() const { return decoder_; }
  const Tensor& codebook() const;

  // Mutable access exists only until freeze().
  Mlp& mutable_encoder();
  Mlp& mutable_decoder();
  Tensor& mutable_codebook();
  void freeze() { frozen_ = true; }

  Latent encode(const Tensor& image) const;
  std::vector<Latent> encode_batch(const Tensor& images) const;
  // Pre-quantization encoder output, [n, latent_dim].
  Tensor encode_vectors(const Tensor& images) const;

  // Decoded image [28, 28] in [0, 1].
  Tensor decode(const Latent& latent) const;
  // Decoder applied to rows of [n, latent_dim]; returns [n, 784].
  Tensor decode_vectors(const Tensor& z) const;

  // Continuous vector the decoder sees for `latent` (codeword rows for
  // quantized latents).
  std::vector<float> decoder_input(const Latent& latent) const;
  std::vector<float> dequantize(std::span<const std::uint16_t> indices) const;

  // Decoder as a differentiable graph on an existing tape. `z` is [n, latent_dim].
  template <typename T>
  Var<T> decode_graph(const BoundMlp<T>& bound_decoder, const Var<T>& z) const {
    return bound_decoder(z);
  }

  Checkpoint to_checkpoint() const;
  static CodecModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& path) const;
  static CodecModel load(const std::filesystem::path& path);
  // Rejects a checkpoint of a different codec variant.
  static CodecModel load(const std::filesystem::path& path, CodecId expected);

  static CodecModel initialize(const CodecConfig& config);

 private:
  void require_frozen(const char* op) const;

  CodecId id_ = CodecId::continuous_mlp;
  Mlp encoder_;
  Mlp decoder_;
  std::optional<Tensor> codebook_;
  std::size_t tokens_ = 0;
  std::size_t code_dim_ = 0;
  bool frozen_ = false;
};

// Trains encoder/decoder for reconstruction (plus codebook and commitment
// terms with straight-through gradients for VQ), then freezes the model.
CodecModel train_codec(const std::vector<ImageSample>& train, const CodecConfig& config,
                       TrainReport* report = nullptr);

// Mean squared error per pixel of decode(encode(x)) over the samples.
double reconstruction_mse(const CodecModel& codec, const std::vector<ImageSample>& samples);

}  // namespace semcom
