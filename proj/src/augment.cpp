#include "morphvae/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <sstream>

namespace morphvae {

Affine Affine::scaling(double factor, double cx, double cy) {
  return {{factor, 0, cx - factor * cx, 0, factor, cy - factor * cy}};
}

Affine Affine::rotation(double degrees, double cx, double cy) {
  const double t = degrees * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  // (dx, dy) -> (c dx + s dy, -s dx + c dy): a point right of center moves up.
  return {{c, s, cx - c * cx - s * cy, -s, c, cy + s * cx - c * cy}};
}

Affine Affine::inverse() const {
  const double det = m[0] * m[4] - m[1] * m[3];
  if (det == 0.0) throw ContractError("Affine::inverse: singular map");
  const double a = m[4] / det, b = -m[1] / det, c = -m[3] / det, d = m[0] / det;
  return {{a, b, -(a * m[2] + b * m[5]), c, d, -(c * m[2] + d * m[5])}};
}

double Affine::distance(const Affine& other) const {
  double worst = 0.0;
  for (std::size_t i = 0; i < 6; ++i) worst = std::max(worst, std::abs(m[i] - other.m[i]));
  return worst;
}

Affine compose(const Affine& o, const Affine& i) {
  const auto& a = o.m;
  const auto& b = i.m;
  return {{a[0] * b[0] + a[1] * b[3], a[0] * b[1] + a[1] * b[4], a[0] * b[2] + a[1] * b[5] + a[2],
           a[3] * b[0] + a[4] * b[3], a[3] * b[1] + a[4] * b[4], a[3] * b[2] + a[4] * b[5] + a[5]}};
}

std::array<double, 2> warp_center(std::size_t rows, std::size_t cols) {
  return {static_cast<double>(cols / 2), static_cast<double>(rows / 2)};
}

namespace {

void warp_plane(const float* src, float* dst, std::size_t rows, std::size_t cols, const Affine& inv) {
  auto at = [&](long r, long c) -> double {
    if (r < 0 || c < 0 || r >= static_cast<long>(rows) || c >= static_cast<long>(cols)) return 0.0;
    return src[static_cast<std::size_t>(r) * cols + static_cast<std::size_t>(c)];
  };
  for (std::size_t y = 0; y < rows; ++y) {
    for (std::size_t x = 0; x < cols; ++x) {
      const auto [sx, sy] = inv.map(static_cast<double>(x), static_cast<double>(y));
      const double fx0 = std::floor(sx), fy0 = std::floor(sy);
      const double fx = sx - fx0, fy = sy - fy0;
      const long x0 = static_cast<long>(fx0), y0 = static_cast<long>(fy0);
      double v = 0.0;
      if (x0 >= -1 && y0 >= -1 && x0 < static_cast<long>(cols) && y0 < static_cast<long>(rows)) {
        v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
            fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      }
      dst[y * cols + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
}

}  // namespace

ImageBatch warp_affine(const ImageBatch& batch, const Affine& forward) {
  const Affine inv = forward.inverse();
  ImageBatch out{Tensor<float>(batch.images.shape()), batch.ids};
  const std::size_t rows = batch.rows(), cols = batch.cols(), plane = rows * cols;
  const std::size_t planes = batch.images.size() / plane;
  for (std::size_t p = 0; p < planes; ++p) {
    warp_plane(batch.images.data() + p * plane, out.images.data() + p * plane, rows, cols, inv);
  }
  return out;
}

Affine TransformSpec::affine(std::size_t rows, std::size_t cols) const {
  const auto [cx, cy] = warp_center(rows, cols);
  switch (kind) {
    case TransformKind::shift:
      return Affine::translation(dx, dy);
    case TransformKind::scale:
      return Affine::scaling(factor, cx, cy);
    case TransformKind::rotate:
      return Affine::rotation(degrees, cx, cy);
  }
  return Affine::identity();
}

std::string TransformSpec::kind_name() const {
  switch (kind) {
    case TransformKind::shift:
      return "shift";
    case TransformKind::scale:
      return "scale";
    case TransformKind::rotate:
      return "rotate";
  }
  return "?";
}

std::string TransformSpec::table_row() const {
  std::ostringstream os;
  os.precision(17);
  os << id << ' ' << kind_name() << ' ';
  switch (kind) {
    case TransformKind::shift:
      os << dx << ' ' << dy;
      break;
    case TransformKind::scale:
      os << factor;
      break;
    case TransformKind::rotate:
      os << degrees;
      break;
  }
  return os.str();
}

Affine compose(const TransformSpec& outer, const TransformSpec& inner) {
  return compose(outer.affine(28, 28), inner.affine(28, 28));
}

ImageBatch apply(const TransformSpec& spec, const ImageBatch& batch) {
  return warp_affine(batch, spec.affine(batch.rows(), batch.cols()));
}

TransformRegistry::TransformRegistry(std::vector<TransformSpec> specs, std::vector<double> prior)
    : specs_(std::move(specs)), prior_(std::move(prior)) {
  if (specs_.empty()) throw ContractError("TransformRegistry: empty");
  if (prior_.size() != specs_.size()) throw ContractError("TransformRegistry: prior length mismatch");
  for (std::size_t i = 0; i < specs_.size(); ++i) {
    if (specs_[i].id != i) throw ContractError("TransformRegistry: ids must be consecutive from 0");
    if (prior_[i] < 0.0) throw ContractError("TransformRegistry: negative prior mass");
  }
  const double total = std::accumulate(prior_.begin(), prior_.end(), 0.0);
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("TransformRegistry: prior must sum to 1");
}

TransformRegistry TransformRegistry::default_registry() {
  std::vector<TransformSpec> specs;
  auto add_shift = [&](double dx, double dy) {
    TransformSpec s;
    s.id = specs.size();
    s.kind = TransformKind::shift;
    s.dx = dx;
    s.dy = dy;
    specs.push_back(s);
  };
  for (double px : {3.0, 6.0}) add_shift(0, -px);  // up
  for (double px : {3.0, 6.0}) add_shift(0, px);   // down
  for (double px : {3.0, 6.0}) add_shift(-px, 0);  // left
  for (double px : {3.0, 6.0}) add_shift(px, 0);   // right
  for (double f : {1.15, 1.32}) {
    TransformSpec s;
    s.id = specs.size();
    s.kind = TransformKind::scale;
    s.factor = f;
    specs.push_back(s);
  }
  for (double deg : {12.0, 24.0}) {
    TransformSpec s;
    s.id = specs.size();
    s.kind = TransformKind::rotate;
    s.degrees = deg;
    specs.push_back(s);
  }
  std::vector<double> prior(specs.size(), 1.0 / static_cast<double>(specs.size()));
  return TransformRegistry(std::move(specs), std::move(prior));
}

const TransformSpec& TransformRegistry::spec(std::size_t id) const {
  if (id >= specs_.size()) {
    throw ContractError("transform id " + std::to_string(id) + " not in registry of size " + std::to_string(specs_.size()));
  }
  return specs_[id];
}

TransformRegistry TransformRegistry::with_prior(std::vector<double> prior) const {
  return TransformRegistry(specs_, std::move(prior));
}

ImageBatch TransformRegistry::apply(std::size_t id, const ImageBatch& batch) const {
  return morphvae::apply(spec(id), batch);
}

std::string TransformRegistry::table() const {
  std::ostringstream os;
  for (const auto& s : specs_) os << s.table_row() << '\n';
  return os.str();
}

TransformRegistry TransformRegistry::parse_table(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<TransformSpec> specs;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    TransformSpec s;
    std::string kind;
    if (!(ls >> s.id >> kind)) throw ContractError("registry table: malformed row '" + line + "'");
    bool ok = false;
    if (kind == "shift") {
      s.kind = TransformKind::shift;
      ok = static_cast<bool>(ls >> s.dx >> s.dy);
    } else if (kind == "scale") {
      s.kind = TransformKind::scale;
      ok = static_cast<bool>(ls >> s.factor);
    } else if (kind == "rotate") {
      s.kind = TransformKind::rotate;
      ok = static_cast<bool>(ls >> s.degrees);
    }
    if (!ok) throw ContractError("registry table: malformed row '" + line + "'");
    specs.push_back(s);
  }
  if (specs.empty()) throw ContractError("registry table: no rows");
  std::vector<double> prior(specs.size(), 1.0 / static_cast<double>(specs.size()));
  return TransformRegistry(std::move(specs), std::move(prior));
}

TripleBatch sample_triple(const TransformRegistry& registry, const ImageBatch& batch, Rng& rng) {
  TripleBatch t;
  t.x1 = batch;
  t.x2 = ImageBatch{Tensor<float>(batch.images.shape()), batch.ids};
  const std::size_t rows = batch.rows(), cols = batch.cols(), plane = batch.pixels();
  std::vector<Affine> inverses;
  inverses.reserve(registry.size());
  for (const auto& s : registry.specs()) inverses.push_back(s.affine(rows, cols).inverse());
  t.transform_ids.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const std::size_t id = rng.categorical(registry.prior());
    t.transform_ids.push_back(id);
    const std::size_t channels = batch.images.dim(1);
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = i * plane + c * rows * cols;
      warp_plane(batch.images.data() + off, t.x2.images.data() + off, rows, cols, inverses[id]);
    }
  }
  return t;
}

}  // namespace morphvae
