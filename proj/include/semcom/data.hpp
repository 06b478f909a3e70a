#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "semcom/tensor.hpp"

namespace semcom {

inline constexpr std::size_t kImageSide = 28;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr int kNumClasses = 6;

// Class vocabulary, index -> name.
inline constexpr std::array<const char*, kNumClasses> kClassNames = {
    "disk", "square", "triangle", "cross", "ring", "bar"};

struct ImageSample {
  Tensor pixels;  // [28, 28], values in [0, 1]
  int label = 0;
};

struct DatasetSplit {
  std::vector<ImageSample> train;
  std::vector<ImageSample> test;
  std::uint64_t seed = 0;
};

// Procedural labeled shapes with position/scale/rotation/intensity jitter.
// Output is a pure function of the arguments. Each class contributes
// floor(split_fraction * n_per_class) training samples and the rest to test;
// both splits are deterministically shuffled.
DatasetSplit generate_dataset(std::uint64_t seed, std::size_t n_per_class, double split_fraction);

// One image of `label` drawn from the generator stream `seed`.
Tensor render_shape(int label, std::uint64_t seed);

// Stacks images into [n, 784] / extracts labels.
Tensor stack_pixels(const std::vector<ImageSample>& samples);
std::vector<int> labels_of(const std::vector<ImageSample>& samples);

// Binary (P5) portable graymap.
struct GrayImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<std::uint8_t> pixels;
};

std::uint8_t quantize_pixel(float v);

// Tiles [28,28] images row-major into a grid with `columns` tiles per row.
GrayImage tile_grid(const std::vector<Tensor>& images, std::size_t columns);
void write_pgm(const GrayImage& image, const std::filesystem::path& path);
GrayImage read_pgm(const std::filesystem::path& path);

void render_grid(const std::vector<Tensor>& images, std::size_t columns,
                 const std::filesystem::path& path);

// IDX (big-endian) image and label files, e.g. the handwritten-digit corpus.
// Images are scaled to [0,1]; only 28x28 unsigned-byte image files are accepted.
std::vector<Tensor> read_idx_images(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);

}  // namespace semcom
