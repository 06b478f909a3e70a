#include "semcom/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "semcom/checkpoint.hpp"
#include "semcom/rng.hpp"

namespace semcom {

namespace {

constexpr int kSuper = 4;  // supersampling factor per axis

bool inside(int label, double u, double v) {
  const double r = std::hypot(u, v);
  switch (label) {
    case 0:  // disk
      return r <= 0.85;
    case 1: {  // square outline
      const double m = std::max(std::abs(u), std::abs(v));
      return m >= 0.6 && m <= 0.85;
    }
    case 2: {  // filled equilateral triangle, circumradius 0.95, apex up
      const double R = 0.95;
      const double a0 = std::numbers::pi / 2.0;
      double px[3], py[3];
      for (int k = 0; k < 3; ++k) {
        px[k] = R * std::cos(a0 + 2.0 * std::numbers::pi * k / 3.0);
        py[k] = R * std::sin(a0 + 2.0 * std::numbers::pi * k / 3.0);
      }
      for (int k = 0; k < 3; ++k) {
        const int n = (k + 1) % 3;
        const double cross = (px[n] - px[k]) * (v - py[k]) - (py[n] - py[k]) * (u - px[k]);
        if (cross < 0) return false;
      }
      return true;
    }
    case 3:  // cross
      return (std::abs(u) <= 0.2 && std::abs(v) <= 0.9) ||
             (std::abs(v) <= 0.2 && std::abs(u) <= 0.9);
    case 4:  // ring
      return r >= 0.6 && r <= 0.95;
    case 5:  // bar
      return std::abs(u) <= 0.95 && std::abs(v) <= 0.22;
    default:
      throw ContractError("unknown shape class " + std::to_string(label));
  }
}

void shuffle(std::vector<ImageSample>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

}  // namespace

Tensor render_shape(int label, std::uint64_t seed) {
  if (label < 0 || label >= kNumClasses) throw ContractError("render_shape: label out of range");
  Rng rng(seed);
  const double cx = 14.0 + rng.uniform(-2.5, 2.5);
  const double cy = 14.0 + rng.uniform(-2.5, 2.5);
  const double radius = 10.0 * rng.uniform(0.8, 1.1);
  const double theta = rng.uniform(-25.0, 25.0) * std::numbers::pi / 180.0;
  const double intensity = rng.uniform(0.7, 1.0);
  const double c = std::cos(theta), s = std::sin(theta);

  Tensor img(Shape{kImageSide, kImageSide});
  for (std::size_t py = 0; py < kImageSide; ++py) {
    for (std::size_t px = 0; px < kImageSide; ++px) {
      int hits = 0;
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double x = px + (sx + 0.5) / kSuper - cx;
          const double y = py + (sy + 0.5) / kSuper - cy;
          // Image y grows downwards; flip so the triangle apex points up.
          const double u = (c * x + s * y) / radius;
          const double v = (s * x - c * y) / radius;
          hits += inside(label, u, v) ? 1 : 0;
        }
      }
      img.at(py, px) = static_cast<float>(intensity * hits / double(kSuper * kSuper));
    }
  }
  return img;
}

DatasetSplit generate_dataset(std::uint64_t seed, std::size_t n_per_class, double split_fraction) {
  if (n_per_class < 2) throw ContractError("generate_dataset: n_per_class must be >= 2");
  if (!(split_fraction > 0.0 && split_fraction < 1.0)) {
    throw ContractError("generate_dataset: split_fraction must lie in (0, 1)");
  }
  std::size_t n_train = static_cast<std::size_t>(std::floor(split_fraction * n_per_class));
  n_train = std::clamp<std::size_t>(n_train, 1, n_per_class - 1);

  DatasetSplit split;
  split.seed = seed;
  for (int label = 0; label < kNumClasses; ++label) {
    for (std::size_t j = 0; j < n_per_class; ++j) {
      ImageSample s{render_shape(label, Rng::derive(seed, static_cast<std::uint64_t>(label), j)),
                    label};
      (j < n_train ? split.train : split.test).push_back(std::move(s));
    }
  }
  Rng order(Rng::derive(seed, 0xdada));
  shuffle(split.train, order);
  shuffle(split.test, order);
  return split;
}

Tensor stack_pixels(const std::vector<ImageSample>& samples) {
  Tensor out(Shape{samples.size(), kImagePixels});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::copy(samples[i].pixels.data().begin(), samples[i].pixels.data().end(),
              out.data().begin() + i * kImagePixels);
  }
  return out;
}

std::vector<int> labels_of(const std::vector<ImageSample>& samples) {
  std::vector<int> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.label);
  return out;
}

std::uint8_t quantize_pixel(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

GrayImage tile_grid(const std::vector<Tensor>& images, std::size_t columns) {
  if (images.empty()) throw ContractError("tile_grid: no images");
  if (columns == 0) throw ContractError("tile_grid: zero columns");
  columns = std::min(columns, images.size());
  const std::size_t rows = (images.size() + columns - 1) / columns;
  GrayImage g;
  g.width = columns * kImageSide;
  g.height = rows * kImageSide;
  g.pixels.assign(g.width * g.height, 0);
  for (std::size_t k = 0; k < images.size(); ++k) {
    if (images[k].size() != kImagePixels) throw ShapeError("tile_grid: image is not 28x28");
    const std::size_t r0 = (k / columns) * kImageSide, c0 = (k % columns) * kImageSide;
    for (std::size_t y = 0; y < kImageSide; ++y) {
      for (std::size_t x = 0; x < kImageSide; ++x) {
        g.pixels[(r0 + y) * g.width + c0 + x] = quantize_pixel(images[k][y * kImageSide + x]);
      }
    }
  }
  return g;
}

void write_pgm(const GrayImage& image, const std::filesystem::path& path) {
  std::string out = "P5\n" + std::to_string(image.width) + " " + std::to_string(image.height) +
                    "\n255\n";
  out.append(reinterpret_cast<const char*>(image.pixels.data()), image.pixels.size());
  write_file_bytes(path, out);
}

GrayImage read_pgm(const std::filesystem::path& path) {
  const std::string raw = read_file_bytes(path);
  std::size_t pos = 0;
  auto token = [&]() -> std::string {
    while (pos < raw.size()) {
      if (raw[pos] == '#') {
        while (pos < raw.size() && raw[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(raw[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
    const std::size_t start = pos;
    while (pos < raw.size() && !std::isspace(static_cast<unsigned char>(raw[pos]))) ++pos;
    return raw.substr(start, pos - start);
  };
  if (token() != "P5") throw IoError("read_pgm: not a P5 graymap: " + path.string());
  GrayImage g;
  g.width = std::stoul(token());
  g.height = std::stoul(token());
  if (token() != "255") throw IoError("read_pgm: unsupported maxval");
  ++pos;  // single whitespace before the raster
  if (raw.size() - pos != g.width * g.height) throw IoError("read_pgm: raster size mismatch");
  g.pixels.assign(raw.begin() + static_cast<std::ptrdiff_t>(pos), raw.end());
  return g;
}

void render_grid(const std::vector<Tensor>& images, std::size_t columns,
                 const std::filesystem::path& path) {
  write_pgm(tile_grid(images, columns), path);
}

namespace {

std::uint32_t be32(const unsigned char* p) {
  return (std::uint32_t(p[0]) << 24) | (std::uint32_t(p[1]) << 16) | (std::uint32_t(p[2]) << 8) |
         std::uint32_t(p[3]);
}

}  // namespace

std::vector<Tensor> read_idx_images(const std::filesystem::path& path) {
  const std::string raw = read_file_bytes(path);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (raw.size() < 16 || be32(p) != 0x00000803u) throw IoError("not an IDX image file: " + path.string());
  const std::uint32_t n = be32(p + 4), rows = be32(p + 8), cols = be32(p + 12);
  if (rows != kImageSide || cols != kImageSide) throw IoError("IDX images must be 28x28");
  if (raw.size() != 16 + std::size_t(n) * rows * cols) throw IoError("IDX image file size mismatch");
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) {
    Tensor img(Shape{kImageSide, kImageSide});
    for (std::size_t k = 0; k < kImagePixels; ++k) img[k] = p[16 + i * kImagePixels + k] / 255.0f;
    out.push_back(std::move(img));
  }
  return out;
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const std::string raw = read_file_bytes(path);
  const auto* p = reinterpret_cast<const unsigned char*>(raw.data());
  if (raw.size() < 8 || be32(p) != 0x00000801u) throw IoError("not an IDX label file: " + path.string());
  const std::uint32_t n = be32(p + 4);
  if (raw.size() != 8 + std::size_t(n)) throw IoError("IDX label file size mismatch");
  return std::vector<int>(p + 8, p + 8 + n);
}

}  // namespace semcom
