#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "morphvae/rng.hpp"
#include "morphvae/tensor.hpp"

namespace morphvae {

namespace fs = std::filesystem;

/// Grayscale images (n, 1, rows, cols) with values in [0, 1], plus the
/// dataset index of each image.
struct ImageBatch {
  Tensor<float> images;
  std::vector<std::size_t> ids;

  std::size_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  std::size_t rows() const { return images.dim(2); }
  std::size_t cols() const { return images.dim(3); }
  std::size_t pixels() const { return images.dim(1) * images.dim(2) * images.dim(3); }
  /// Throws ContractError unless rank-4, n >= 1 and every value in [0, 1].
  void validate() const;
  template <typename T>
  Tensor<T> as() const {
    return images.cast<T>();
  }
};

struct LabeledSet {
  ImageBatch batch;
  std::vector<std::uint8_t> labels;

  std::size_t size() const { return labels.size(); }
  LabeledSet subset(std::span<const std::size_t> indices) const;
};

/// Malformed IDX payload. offset is the byte position of the violation.
class IdxError : public std::runtime_error {
 public:
  IdxError(const std::string& file, std::size_t offset, const std::string& what);
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Missing files or checksum mismatches.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

LabeledSet load_idx(const fs::path& images_path, const fs::path& labels_path);
/// Writes pixels as round(255 v) and labels verbatim.
void write_idx(const LabeledSet& set, const fs::path& images_path, const fs::path& labels_path);

ImageBatch gather(const ImageBatch& batch, std::span<const std::size_t> indices);

struct MnistFiles {
  static constexpr const char* kTrainImages = "train-images-idx3-ubyte";
  static constexpr const char* kTrainLabels = "train-labels-idx1-ubyte";
  static constexpr const char* kTestImages = "t10k-images-idx3-ubyte";
  static constexpr const char* kTestLabels = "t10k-labels-idx1-ubyte";
};

struct Dataset {
  LabeledSet train;
  LabeledSet test;
};

/// Loads the standard four MNIST files from dir. When dir holds a
/// SHA256SUMS manifest the files are verified against it first.
Dataset load_mnist(const fs::path& dir);

/// First k items of a seeded permutation of the set.
LabeledSet training_subset(const LabeledSet& set, std::size_t k, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Checksums
// ---------------------------------------------------------------------------

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_file(const fs::path& path);

/// `sha256 filename` per line.
struct ChecksumManifest {
  std::vector<std::pair<std::string, std::string>> entries;  // (hex digest, filename)

  static ChecksumManifest read(const fs::path& path);
  void write(const fs::path& path) const;
  const std::string* find(const std::string& filename) const;
  /// Throws DataError naming the first file that is missing or mismatched.
  void verify(const fs::path& dir) const;
};

/// Published digests of the four uncompressed MNIST files.
ChecksumManifest pinned_mnist_checksums();

inline constexpr const char* kChecksumFile = "SHA256SUMS";

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Seeded shuffled batching. Epoch e uses the permutation drawn from a
/// generator seeded with derive_seed(seed, "epoch/<e>"), so any epoch can be
/// regenerated independently.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed);

  std::vector<std::vector<std::size_t>> epoch(std::size_t e) const;
  std::size_t batches_per_epoch() const { return (n_ + batch_size_ - 1) / batch_size_; }

 private:
  std::size_t n_;
  std::size_t batch_size_;
  std::uint64_t seed_;
};

}  // namespace morphvae
