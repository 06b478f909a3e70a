#include <algorithm>
#include <array>
#include <filesystem>
#include <map>

#include "doctest.h"
#include "semcom/checkpoint.hpp"
#include "semcom/data.hpp"

using namespace semcom;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "semcom_test_data";
  std::filesystem::create_directories(dir);
  return dir / name;
}

// Brute-force k-nearest-neighbour vote on raw pixels; ties go to the
// lowest class index.
int knn_predict(const std::vector<ImageSample>& train, const Tensor& x, std::size_t k) {
  std::vector<std::pair<double, int>> d;
  d.reserve(train.size());
  for (const auto& s : train) d.emplace_back(l2_distance(s.pixels.data(), x.data()), s.label);
  std::partial_sort(d.begin(), d.begin() + static_cast<long>(k), d.end());
  std::array<int, kNumClasses> votes{};
  for (std::size_t i = 0; i < k; ++i) ++votes[d[i].second];
  return static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());
}

}  // namespace

TEST_CASE("generation is deterministic") {
  const auto a = generate_dataset(17, 6, 0.5);
  const auto b = generate_dataset(17, 6, 0.5);
  REQUIRE(a.train.size() == b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    CHECK(a.train[i].pixels == b.train[i].pixels);
    CHECK(a.train[i].label == b.train[i].label);
  }
  const auto c = generate_dataset(18, 6, 0.5);
  CHECK_FALSE(a.train[0].pixels == c.train[0].pixels);
}

TEST_CASE("split sizes, balance and pixel range") {
  const auto d = generate_dataset(3, 10, 0.8);
  CHECK(d.train.size() == 48);
  CHECK(d.test.size() == 12);
  std::map<int, int> train_counts, test_counts;
  for (const auto& s : d.train) ++train_counts[s.label];
  for (const auto& s : d.test) ++test_counts[s.label];
  for (int c = 0; c < kNumClasses; ++c) {
    CHECK(train_counts[c] == 8);
    CHECK(test_counts[c] == 2);
  }
  for (const auto& s : d.train) {
    CHECK(s.pixels.shape() == Shape{28, 28});
    for (float p : s.pixels.data()) {
      CHECK(p >= 0.0f);
      CHECK(p <= 1.0f);
    }
  }
  CHECK_THROWS_AS(generate_dataset(1, 1, 0.5), ContractError);
  CHECK_THROWS_AS(generate_dataset(1, 10, 1.0), ContractError);
  CHECK_THROWS_AS(generate_dataset(1, 10, 0.0), ContractError);
}

TEST_CASE("per-class mean intensity lies in (0, 0.6)") {
  const auto d = generate_dataset(9, 40, 0.5);
  std::array<double, kNumClasses> sum{};
  std::array<int, kNumClasses> n{};
  for (const auto& s : d.train) {
    double m = 0;
    for (float p : s.pixels.data()) m += p;
    sum[s.label] += m / kImagePixels;
    ++n[s.label];
  }
  for (int c = 0; c < kNumClasses; ++c) {
    const double mean = sum[c] / n[c];
    INFO("class " << kClassNames[c] << " mean " << mean);
    CHECK(mean > 0.0);
    CHECK(mean < 0.6);
  }
}

TEST_CASE("classes are separable by 5-NN on raw pixels") {
  const auto d = generate_dataset(11, 200, 0.8);
  int correct = 0;
  for (const auto& s : d.test) correct += knn_predict(d.train, s.pixels, 5) == s.label;
  const double acc = double(correct) / d.test.size();
  MESSAGE("5-NN accuracy " << acc);
  CHECK(acc >= 0.90);
}

TEST_CASE("render_grid tiles and round-trips through PGM") {
  const auto d = generate_dataset(5, 2, 0.5);
  std::vector<Tensor> imgs;
  for (const auto& s : d.train) imgs.push_back(s.pixels);
  REQUIRE(imgs.size() == 6);

  const auto one = tile_grid({imgs[0]}, 3);
  CHECK(one.width == 28);
  CHECK(one.height == 28);

  const auto grid = tile_grid(imgs, 3);
  CHECK(grid.width == 84);
  CHECK(grid.height == 56);

  const auto path = temp_path("grid.pgm");
  render_grid(imgs, 3, path);
  const auto back = read_pgm(path);
  REQUIRE(back.width == 84);
  REQUIRE(back.height == 56);
  for (std::size_t k = 0; k < imgs.size(); ++k) {
    const std::size_t r0 = (k / 3) * 28, c0 = (k % 3) * 28;
    for (std::size_t y = 0; y < 28; ++y) {
      for (std::size_t x = 0; x < 28; ++x) {
        CHECK(back.pixels[(r0 + y) * 84 + c0 + x] == quantize_pixel(imgs[k][y * 28 + x]));
      }
    }
  }
  CHECK_THROWS_AS(tile_grid({}, 3), ContractError);
  // parent is a regular file, so the directory cannot be created
  CHECK_THROWS(render_grid(imgs, 3, path / "sub.pgm"));
}

TEST_CASE("IDX reader") {
  auto be = [](std::string& s, std::uint32_t v) {
    for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  std::string img;
  be(img, 0x00000803u);
  be(img, 2);
  be(img, 28);
  be(img, 28);
  for (int i = 0; i < 2 * 784; ++i) img.push_back(static_cast<char>(i % 256));
  std::string lab;
  be(lab, 0x00000801u);
  be(lab, 2);
  lab.push_back(7);
  lab.push_back(3);
  write_file_bytes(temp_path("imgs.idx"), img);
  write_file_bytes(temp_path("labs.idx"), lab);

  const auto images = read_idx_images(temp_path("imgs.idx"));
  REQUIRE(images.size() == 2);
  CHECK(images[0][255] == doctest::Approx(1.0f));
  CHECK(images[1][0] == doctest::Approx((784 % 256) / 255.0f));
  CHECK(read_idx_labels(temp_path("labs.idx")) == std::vector<int>{7, 3});

  write_file_bytes(temp_path("bad.idx"), lab);
  CHECK_THROWS_AS(read_idx_images(temp_path("bad.idx")), IoError);
  write_file_bytes(temp_path("short.idx"), img.substr(0, 100));
  CHECK_THROWS_AS(read_idx_images(temp_path("short.idx")), IoError);
}
