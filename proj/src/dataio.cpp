#include "morphvae/dataio.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>

namespace morphvae {

void ImageBatch::validate() const {
  if (images.rank() != 4) throw ContractError("ImageBatch: expected rank-4 images, got " + to_string(images.shape()));
  if (ids.size() != images.dim(0)) throw ContractError("ImageBatch: ids length does not match image count");
  for (float v : images.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw ContractError("ImageBatch: pixel outside [0, 1]");
  }
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
  LabeledSet out;
  out.batch = gather(batch, indices);
  out.labels.reserve(indices.size());
  for (std::size_t i : indices) out.labels.push_back(labels.at(i));
  return out;
}

IdxError::IdxError(const std::string& file, std::size_t offset, const std::string& what)
    : std::runtime_error(file + ": " + what + " at byte offset " + std::to_string(offset)), offset_(offset) {}

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t offset, const std::string& file) {
  if (offset + 4 > b.size()) throw IdxError(file, offset, "truncated header");
  return (std::uint32_t{b[offset]} << 24) | (std::uint32_t{b[offset + 1]} << 16) | (std::uint32_t{b[offset + 2]} << 8) |
         std::uint32_t{b[offset + 3]};
}

void put_be32(std::ostream& os, std::uint32_t v) {
  const char bytes[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                         static_cast<char>(v)};
  os.write(bytes, 4);
}

}  // namespace

LabeledSet load_idx(const fs::path& images_path, const fs::path& labels_path) {
  const std::string iname = images_path.filename().string();
  const std::string lname = labels_path.filename().string();
  const auto ib = read_bytes(images_path);
  const auto lb = read_bytes(labels_path);

  if (read_be32(ib, 0, iname) != kIdxImagesMagic) throw IdxError(iname, 0, "bad magic number for images");
  const std::uint32_t n = read_be32(ib, 4, iname);
  const std::uint32_t rows = read_be32(ib, 8, iname);
  const std::uint32_t cols = read_be32(ib, 12, iname);
  if (n == 0 || rows == 0 || cols == 0) throw IdxError(iname, 4, "zero dimension");
  const std::size_t pixels = std::size_t{rows} * cols;
  const std::size_t expected = 16 + std::size_t{n} * pixels;
  if (ib.size() < expected) throw IdxError(iname, ib.size(), "truncated payload");
  if (ib.size() > expected) throw IdxError(iname, expected, "trailing bytes");

  if (read_be32(lb, 0, lname) != kIdxLabelsMagic) throw IdxError(lname, 0, "bad magic number for labels");
  const std::uint32_t nl = read_be32(lb, 4, lname);
  if (nl != n) throw IdxError(lname, 4, "label count " + std::to_string(nl) + " does not match image count " + std::to_string(n));
  if (lb.size() < 8 + std::size_t{nl}) throw IdxError(lname, lb.size(), "truncated payload");
  if (lb.size() > 8 + std::size_t{nl}) throw IdxError(lname, 8 + std::size_t{nl}, "trailing bytes");

  LabeledSet set;
  std::vector<float> data(std::size_t{n} * pixels);
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(ib[16 + i]) / 255.0f;
  set.batch.images = Tensor<float>(Shape{n, 1, rows, cols}, std::move(data));
  set.batch.ids.resize(n);
  for (std::size_t i = 0; i < n; ++i) set.batch.ids[i] = i;
  set.labels.assign(lb.begin() + 8, lb.end());
  for (std::size_t i = 0; i < set.labels.size(); ++i) {
    if (set.labels[i] > 9) throw IdxError(lname, 8 + i, "label outside 0..9");
  }
  return set;
}

void write_idx(const LabeledSet& set, const fs::path& images_path, const fs::path& labels_path) {
  const Tensor<float>& im = set.batch.images;
  std::ofstream io(images_path, std::ios::binary);
  if (!io) throw DataError("cannot write " + images_path.string());
  put_be32(io, kIdxImagesMagic);
  put_be32(io, static_cast<std::uint32_t>(im.dim(0)));
  put_be32(io, static_cast<std::uint32_t>(im.dim(2)));
  put_be32(io, static_cast<std::uint32_t>(im.dim(3)));
  std::vector<char> px(im.size());
  for (std::size_t i = 0; i < im.size(); ++i) {
    px[i] = static_cast<char>(static_cast<std::uint8_t>(std::lround(std::clamp(im[i], 0.0f, 1.0f) * 255.0f)));
  }
  io.write(px.data(), static_cast<std::streamsize>(px.size()));

  std::ofstream lo(labels_path, std::ios::binary);
  if (!lo) throw DataError("cannot write " + labels_path.string());
  put_be32(lo, kIdxLabelsMagic);
  put_be32(lo, static_cast<std::uint32_t>(set.labels.size()));
  lo.write(reinterpret_cast<const char*>(set.labels.data()), static_cast<std::streamsize>(set.labels.size()));
}

ImageBatch gather(const ImageBatch& batch, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("gather: empty index set");
  const std::size_t per = batch.pixels();
  Shape shape = batch.images.shape();
  shape[0] = indices.size();
  std::vector<float> data(indices.size() * per);
  ImageBatch out;
  out.ids.reserve(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const std::size_t i = indices[k];
    if (i >= batch.size()) throw ContractError("gather: index " + std::to_string(i) + " out of range");
    std::copy_n(batch.images.data() + i * per, per, data.data() + k * per);
    out.ids.push_back(batch.ids[i]);
  }
  out.images = Tensor<float>(std::move(shape), std::move(data));
  return out;
}

Dataset load_mnist(const fs::path& dir) {
  for (const char* f : {MnistFiles::kTrainImages, MnistFiles::kTrainLabels, MnistFiles::kTestImages, MnistFiles::kTestLabels}) {
    if (!fs::exists(dir / f)) throw DataError("missing " + (dir / f).string());
  }
  if (fs::exists(dir / kChecksumFile)) ChecksumManifest::read(dir / kChecksumFile).verify(dir);
  Dataset d;
  d.train = load_idx(dir / MnistFiles::kTrainImages, dir / MnistFiles::kTrainLabels);
  d.test = load_idx(dir / MnistFiles::kTestImages, dir / MnistFiles::kTestLabels);
  return d;
}

LabeledSet training_subset(const LabeledSet& set, std::size_t k, std::uint64_t seed) {
  if (k == 0 || k >= set.size()) return set;
  Rng rng(derive_seed(seed, "subset"));
  auto perm = rng.permutation(set.size());
  perm.resize(k);
  return set.subset(perm);
}

// ---------------------------------------------------------------------------
// Checksums
// ---------------------------------------------------------------------------

namespace {

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* c) const { EVP_MD_CTX_free(c); }
};

std::string to_hex(const unsigned char* d, unsigned len) {
  std::ostringstream os;
  for (unsigned i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(d[i]);
  return os.str();
}

}  // namespace

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 || EVP_DigestFinal_ex(ctx.get(), md, &len) != 1) {
    throw std::runtime_error("sha256: digest failure");
  }
  return to_hex(md, len);
}

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, MdCtxDeleter> ctx(EVP_MD_CTX_new());
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256: init failure");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  return to_hex(md, len);
}

ChecksumManifest ChecksumManifest::read(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checksum manifest " + path.string());
  ChecksumManifest m;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string digest, name;
    if (!(ls >> digest >> name) || digest.size() != 64) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": malformed checksum line");
    }
    if (!name.empty() && name[0] == '*') name.erase(0, 1);  // sha256sum binary-mode marker
    m.entries.emplace_back(digest, name);
  }
  return m;
}

void ChecksumManifest::write(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  for (const auto& [digest, name] : entries) out << digest << "  " << name << '\n';
}

const std::string* ChecksumManifest::find(const std::string& filename) const {
  for (const auto& e : entries) {
    if (e.second == filename) return &e.first;
  }
  return nullptr;
}

void ChecksumManifest::verify(const fs::path& dir) const {
  for (const auto& [digest, name] : entries) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw DataError("missing " + name);
    if (sha256_file(p) != digest) throw DataError("checksum mismatch: " + name);
  }
}

ChecksumManifest pinned_mnist_checksums() {
  ChecksumManifest m;
  m.entries = {
      {"ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db", MnistFiles::kTrainImages},
      {"65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5", MnistFiles::kTrainLabels},
      {"0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7", MnistFiles::kTestImages},
      {"ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2", MnistFiles::kTestLabels},
  };
  return m;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

BatchStream::BatchStream(std::size_t n, std::size_t batch_size, std::uint64_t seed)
    : n_(n), batch_size_(batch_size), seed_(seed) {
  if (batch_size == 0) throw ContractError("BatchStream: batch_size must be >= 1");
  if (n == 0) throw ContractError("BatchStream: empty set");
}

std::vector<std::vector<std::size_t>> BatchStream::epoch(std::size_t e) const {
  Rng rng(derive_seed(seed_, "epoch/" + std::to_string(e)));
  const auto perm = rng.permutation(n_);
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batches_per_epoch());
  for (std::size_t i = 0; i < n_; i += batch_size_) {
    out.emplace_back(perm.begin() + static_cast<std::ptrdiff_t>(i),
                     perm.begin() + static_cast<std::ptrdiff_t>(std::min(n_, i + batch_size_)));
  }
  return out;
}

}  // namespace morphvae
