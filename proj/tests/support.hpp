#pragma once

#include <gtest/gtest.h>

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <unistd.h>

#include "morphvae/dataio.hpp"
#include "morphvae/rng.hpp"

namespace morphvae::testing {

namespace fs = std::filesystem;

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string tag = info ? std::string(info->test_suite_name()) + "." + info->name() : "morphvae";
    for (char& c : tag) {
      if (c == '/') c = '_';
    }
    path_ = fs::temp_directory_path() / ("morphvae-" + tag + "-" + std::to_string(::getpid()));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(static_cast<std::uint8_t>(v >> 24));
  b.push_back(static_cast<std::uint8_t>(v >> 16));
  b.push_back(static_cast<std::uint8_t>(v >> 8));
  b.push_back(static_cast<std::uint8_t>(v));
}

inline std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t rows, std::uint32_t cols,
                                            const std::vector<std::uint8_t>& pixels) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x00000803);
  put_be32(b, n);
  put_be32(b, rows);
  put_be32(b, cols);
  b.insert(b.end(), pixels.begin(), pixels.end());
  return b;
}

inline std::vector<std::uint8_t> idx_labels(const std::vector<std::uint8_t>& labels) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x00000801);
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

inline void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream os(p, std::ios::binary);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

inline std::vector<std::uint8_t> read_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

/// n random images of side s with values drawn as k/255.
inline ImageBatch random_images(std::size_t n, std::size_t s, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<float> px(n * s * s);
  for (auto& v : px) v = static_cast<float>(rng.below(256)) / 255.0f;
  ImageBatch b;
  b.images = Tensor<float>({n, 1, s, s}, std::move(px));
  for (std::size_t i = 0; i < n; ++i) b.ids.push_back(i);
  return b;
}

inline ImageBatch blank_images(std::size_t n, std::size_t s) {
  ImageBatch b;
  b.images = Tensor<float>(Shape{n, 1, s, s});
  for (std::size_t i = 0; i < n; ++i) b.ids.push_back(i);
  return b;
}

/// Directory of the real MNIST files, if the build was configured with one.
inline std::optional<fs::path> mnist_dir() {
  if (const char* env = std::getenv("MORPHVAE_MNIST_DIR")) {
    if (*env) return fs::path(env);
  }
#ifdef MORPHVAE_TEST_MNIST_DIR
  if (std::string(MORPHVAE_TEST_MNIST_DIR).size()) return fs::path(MORPHVAE_TEST_MNIST_DIR);
#endif
  return std::nullopt;
}

#define MORPHVAE_REQUIRE_MNIST(dir)                                              \
  const auto dir##_opt = ::morphvae::testing::mnist_dir();                       \
  if (!dir##_opt) GTEST_SKIP() << "MORPHVAE_MNIST_DIR not configured";           \
  const std::filesystem::path dir = *dir##_opt

}  // namespace morphvae::testing
