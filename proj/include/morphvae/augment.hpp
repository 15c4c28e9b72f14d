#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "morphvae/dataio.hpp"
#include "morphvae/rng.hpp"

namespace morphvae {

/// 2x3 affine map on pixel coordinates (x = column, y = row):
///   x' = m[0] x + m[1] y + m[2]
///   y' = m[3] x + m[4] y + m[5]
struct Affine {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static Affine identity() { return {}; }
  static Affine translation(double dx, double dy) { return {{1, 0, dx, 0, 1, dy}}; }
  /// Magnification about (cx, cy).
  static Affine scaling(double factor, double cx, double cy);
  /// Counterclockwise as displayed (rows grow downward), about (cx, cy).
  static Affine rotation(double degrees, double cx, double cy);

  Affine inverse() const;
  std::array<double, 2> map(double x, double y) const {
    return {m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]};
  }
  /// Largest absolute entry difference.
  double distance(const Affine& other) const;
};

/// outer ∘ inner: apply inner first.
Affine compose(const Affine& outer, const Affine& inner);

/// Pixel the transforms rotate and scale about: (cols / 2, rows / 2). For
/// 28x28 images this is pixel (14, 14).
std::array<double, 2> warp_center(std::size_t rows, std::size_t cols);

/// Inverse-mapped bilinear warp with zero padding; output clamped to [0, 1].
ImageBatch warp_affine(const ImageBatch& batch, const Affine& forward);

enum class TransformKind { shift, scale, rotate };

struct TransformSpec {
  std::size_t id = 0;
  TransformKind kind = TransformKind::shift;
  double dx = 0;        // shift, pixels (+x right)
  double dy = 0;        // shift, pixels (+y down)
  double factor = 1;    // scale
  double degrees = 0;   // rotate, counterclockwise

  Affine affine(std::size_t rows, std::size_t cols) const;
  std::string kind_name() const;
  /// "id kind params" row of the registry table.
  std::string table_row() const;
};

/// outer ∘ inner for 28x28 images.
Affine compose(const TransformSpec& outer, const TransformSpec& inner);

ImageBatch apply(const TransformSpec& spec, const ImageBatch& batch);

/// The finite transformation set with a sampling prior.
class TransformRegistry {
 public:
  TransformRegistry(std::vector<TransformSpec> specs, std::vector<double> prior);

  /// 8 shifts (up/down/left/right by 3 and 6 px), scales 1.15 and 1.32,
  /// rotations 12 and 24 degrees; uniform prior.
  static TransformRegistry default_registry();

  std::size_t size() const { return specs_.size(); }
  const TransformSpec& spec(std::size_t id) const;
  const std::vector<TransformSpec>& specs() const { return specs_; }
  const std::vector<double>& prior() const { return prior_; }
  TransformRegistry with_prior(std::vector<double> prior) const;

  /// Throws ContractError for ids outside the registry.
  ImageBatch apply(std::size_t id, const ImageBatch& batch) const;

  std::string table() const;
  static TransformRegistry parse_table(const std::string& text);

 private:
  std::vector<TransformSpec> specs_;
  std::vector<double> prior_;
};

/// Aligned (x1, x2 = a(x1), a) training unit.
struct TripleBatch {
  ImageBatch x1;
  ImageBatch x2;
  std::vector<std::size_t> transform_ids;
};

/// Draws one transform per image from the registry prior.
TripleBatch sample_triple(const TransformRegistry& registry, const ImageBatch& batch, Rng& rng);

}  // namespace morphvae
