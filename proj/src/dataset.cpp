#include "ddta/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_map>

#include "ddta/binary_io.hpp"

namespace ddta {

namespace {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;
constexpr std::size_t kCifarSide = 32;
constexpr std::size_t kCifarPixels = 3 * kCifarSide * kCifarSide;
constexpr std::size_t kCifarRecord = 1 + kCifarPixels;
constexpr std::size_t kClasses = 10;

float to_unit(std::uint8_t b) { return static_cast<float>(b) / 255.0f; }

std::uint8_t to_byte(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

void put_u32_be(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) out.push_back(std::uint8_t(v >> s));
}

LabeledDataset concat(std::vector<LabeledDataset> parts) {
  if (parts.size() == 1) return std::move(parts.front());
  std::vector<float> images, labels;
  LabeledDataset out;
  out.kind = parts.front().kind;
  out.split = parts.front().split;
  for (auto& p : parts) {
    images.insert(images.end(), p.images.storage().begin(), p.images.storage().end());
    labels.insert(labels.end(), p.labels.storage().begin(), p.labels.storage().end());
    out.targets.insert(out.targets.end(), p.targets.begin(), p.targets.end());
    out.source_index.insert(out.source_index.end(), p.source_index.begin(),
                            p.source_index.end());
  }
  Shape is = parts.front().images.shape();
  is[0] = out.targets.size();
  out.images = Tensor<float>(is, std::move(images));
  out.labels = Tensor<float>(Shape{out.targets.size(), kClasses}, std::move(labels));
  return out;
}

std::filesystem::path locate(const std::filesystem::path& dir, const std::string& sub,
                             const std::string& probe) {
  if (std::filesystem::exists(dir / probe)) return dir;
  if (std::filesystem::exists(dir / sub / probe)) return dir / sub;
  throw IoError("cannot find " + probe + " under " + dir.string());
}

}  // namespace

Tensor<float> LabeledDataset::gather_images(std::span<const std::size_t> rows) const {
  const std::size_t per = sample_size();
  Shape s = images.shape();
  s[0] = rows.size();
  std::vector<float> out(rows.size() * per);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = image(rows[r]);
    std::copy(src.begin(), src.end(), out.begin() + std::ptrdiff_t(r * per));
  }
  return Tensor<float>(std::move(s), std::move(out));
}

Tensor<float> LabeledDataset::gather_labels(std::span<const std::size_t> rows) const {
  const std::size_t n = classes();
  std::vector<float> out(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = label(rows[r]);
    std::copy(src.begin(), src.end(), out.begin() + std::ptrdiff_t(r * n));
  }
  return Tensor<float>(Shape{rows.size(), n}, std::move(out));
}

LabeledDataset LabeledDataset::head(std::size_t n) const {
  n = std::min(n, size());
  if (n == size()) return *this;
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  LabeledDataset out;
  out.images = gather_images(rows);
  out.labels = gather_labels(rows);
  out.targets.assign(targets.begin(), targets.begin() + std::ptrdiff_t(n));
  out.source_index.assign(source_index.begin(), source_index.begin() + std::ptrdiff_t(n));
  out.kind = kind;
  out.split = split;
  return out;
}

void LabeledDataset::validate() const {
  const std::size_t n = size();
  if (images.rank() != 4 || images.shape()[0] != n) {
    throw InvalidArgument("dataset images must be [N,C,H,W] with N=" + std::to_string(n) +
                          ", got " + shape_string(images.shape()));
  }
  if (labels.rank() != 2 || labels.shape()[0] != n || source_index.size() != n) {
    throw InvalidArgument("dataset labels must be [N,classes] with N=" + std::to_string(n));
  }
  for (float v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw InvalidArgument("dataset pixel outside [0,1]");
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto row = label(i);
    if (kind == LabelKind::kHard) {
      for (std::size_t k = 0; k < row.size(); ++k) {
        const float want = k == targets[i] ? 1.0f : 0.0f;
        if (row[k] != want) {
          throw InvalidArgument("hard label row " + std::to_string(i) + " is not one-hot");
        }
      }
    } else {
      double s = 0.0;
      for (float p : row) {
        if (!(p >= 0.0f)) throw InvalidArgument("soft label row has a negative entry");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-5) {
        throw InvalidArgument("soft label row " + std::to_string(i) + " sums to " +
                              std::to_string(s));
      }
    }
  }
}

LabeledDataset make_hard_dataset(Tensor<float> images, std::vector<std::uint8_t> targets,
                                 std::size_t classes, Split split) {
  LabeledDataset d;
  d.split = split;
  const std::size_t n = targets.size();
  if (n == 0) return d;
  std::vector<float> labels(n * classes, 0.0f);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= classes) throw InvalidArgument("class index out of range");
    labels[i * classes + targets[i]] = 1.0f;
  }
  d.images = std::move(images);
  d.labels = Tensor<float>(Shape{n, classes}, std::move(labels));
  d.targets = std::move(targets);
  d.source_index.resize(n);
  for (std::size_t i = 0; i < n; ++i) d.source_index[i] = std::uint32_t(i);
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// MNIST IDX

LabeledDataset decode_idx(const std::vector<std::uint8_t>& image_bytes,
                          const std::vector<std::uint8_t>& label_bytes, Split split,
                          std::size_t limit) {
  io::Reader im(image_bytes, "idx images");
  io::Reader lb(label_bytes, "idx labels");
  if (image_bytes.size() < 4 || im.u32_be() != kIdxImagesMagic) {
    throw FormatError(FormatErrorKind::kBadMagic, "idx images: expected magic 0x00000803");
  }
  if (label_bytes.size() < 4 || lb.u32_be() != kIdxLabelsMagic) {
    throw FormatError(FormatErrorKind::kBadMagic, "idx labels: expected magic 0x00000801");
  }
  const std::size_t count = im.u32_be();
  const std::size_t rows = im.u32_be();
  const std::size_t cols = im.u32_be();
  const std::size_t label_count = lb.u32_be();
  if (count != label_count) {
    throw FormatError(FormatErrorKind::kShapeMismatch,
                      "idx: " + std::to_string(count) + " images but " +
                          std::to_string(label_count) + " labels");
  }
  if (rows == 0 || cols == 0) {
    throw FormatError(FormatErrorKind::kShapeMismatch, "idx: zero image extent");
  }
  const std::size_t per = rows * cols;
  if (im.remaining() != count * per) {
    throw FormatError(im.remaining() < count * per ? FormatErrorKind::kTruncated
                                                   : FormatErrorKind::kCorrupt,
                      "idx images: header promises " + std::to_string(count * per) +
                          " pixel bytes, file holds " + std::to_string(im.remaining()));
  }
  if (lb.remaining() != count) {
    throw FormatError(lb.remaining() < count ? FormatErrorKind::kTruncated
                                             : FormatErrorKind::kCorrupt,
                      "idx labels: header promises " + std::to_string(count) +
                          " labels, file holds " + std::to_string(lb.remaining()));
  }
  const std::size_t n = std::min(limit, count);
  const std::uint8_t* px = im.take(n * per);
  const std::uint8_t* lab = lb.take(n);
  std::vector<float> images(n * per);
  for (std::size_t i = 0; i < n * per; ++i) images[i] = to_unit(px[i]);
  std::vector<std::uint8_t> targets(lab, lab + n);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= kClasses) {
      throw FormatError(FormatErrorKind::kCorrupt,
                        "idx labels: record " + std::to_string(i) + " has label " +
                            std::to_string(targets[i]));
    }
  }
  return make_hard_dataset(Tensor<float>(Shape{n, 1, rows, cols}, std::move(images)),
                           std::move(targets), kClasses, split);
}

DatasetPair load_mnist(const std::filesystem::path& dir, SubsetLimits limits) {
  const auto root = locate(dir, "mnist", "train-images-idx3-ubyte");
  DatasetPair out;
  out.train = decode_idx(io::read_file(root / "train-images-idx3-ubyte"),
                         io::read_file(root / "train-labels-idx1-ubyte"), Split::kTrain,
                         limits.train);
  out.test = decode_idx(io::read_file(root / "t10k-images-idx3-ubyte"),
                        io::read_file(root / "t10k-labels-idx1-ubyte"), Split::kTest,
                        limits.test);
  return out;
}

std::vector<std::uint8_t> encode_idx_images(const LabeledDataset& data) {
  const auto& s = data.images.shape();
  std::vector<std::uint8_t> out;
  out.reserve(16 + data.images.size());
  put_u32_be(out, kIdxImagesMagic);
  put_u32_be(out, std::uint32_t(s[0]));
  put_u32_be(out, std::uint32_t(s[2]));
  put_u32_be(out, std::uint32_t(s[3]));
  for (float v : data.images.data()) out.push_back(to_byte(v));
  return out;
}

std::vector<std::uint8_t> encode_idx_labels(const LabeledDataset& data) {
  std::vector<std::uint8_t> out;
  out.reserve(8 + data.size());
  put_u32_be(out, kIdxLabelsMagic);
  put_u32_be(out, std::uint32_t(data.size()));
  out.insert(out.end(), data.targets.begin(), data.targets.end());
  return out;
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary batches

LabeledDataset decode_cifar_batch(const std::vector<std::uint8_t>& bytes, Split split,
                                  std::uint32_t first_index) {
  if (bytes.size() % kCifarRecord != 0) {
    throw FormatError(FormatErrorKind::kTruncated,
                      "cifar batch: " + std::to_string(bytes.size()) +
                          " bytes is not a multiple of the 3073-byte record");
  }
  const std::size_t n = bytes.size() / kCifarRecord;
  std::vector<float> images(n * kCifarPixels);
  std::vector<std::uint8_t> targets(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecord;
    if (rec[0] >= kClasses) {
      throw FormatError(FormatErrorKind::kCorrupt, "cifar batch: record " + std::to_string(i) +
                                                       " has label " + std::to_string(rec[0]));
    }
    targets[i] = rec[0];
    for (std::size_t k = 0; k < kCifarPixels; ++k) images[i * kCifarPixels + k] = to_unit(rec[1 + k]);
  }
  auto d = make_hard_dataset(
      Tensor<float>(Shape{n, 3, kCifarSide, kCifarSide}, std::move(images)), std::move(targets),
      kClasses, split);
  for (std::size_t i = 0; i < n; ++i) d.source_index[i] = first_index + std::uint32_t(i);
  return d;
}

DatasetPair load_cifar10(const std::filesystem::path& dir, SubsetLimits limits) {
  const auto root = locate(dir, "cifar-10-batches-bin", "test_batch.bin");
  std::vector<LabeledDataset> parts;
  std::uint32_t next = 0;
  for (int b = 1; b <= 5 && next < limits.train; ++b) {
    auto part = decode_cifar_batch(
        io::read_file(root / ("data_batch_" + std::to_string(b) + ".bin")), Split::kTrain, next);
    next += std::uint32_t(part.size());
    parts.push_back(std::move(part));
  }
  DatasetPair out;
  out.train = concat(std::move(parts)).head(limits.train);
  out.test = decode_cifar_batch(io::read_file(root / "test_batch.bin"), Split::kTest)
                 .head(limits.test);
  return out;
}

std::vector<std::uint8_t> encode_cifar_batch(const LabeledDataset& data) {
  std::vector<std::uint8_t> out;
  out.reserve(data.size() * kCifarRecord);
  for (std::size_t i = 0; i < data.size(); ++i) {
    out.push_back(data.targets[i]);
    for (float v : data.image(i)) out.push_back(to_byte(v));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Soft-label files

std::vector<std::uint8_t> encode_soft_labels(const LabeledDataset& soft) {
  if (soft.kind != LabelKind::kSoft) throw InvalidArgument("soft-label file needs a soft dataset");
  io::Writer w;
  w.bytes("DSLB", 4);
  w.u32(kSoftLabelVersion);
  w.u32(std::uint32_t(soft.size()));
  w.u32(std::uint32_t(soft.classes()));
  for (std::size_t i = 0; i < soft.size(); ++i) {
    for (float p : soft.label(i)) w.f32(p);
    w.u32(soft.source_index[i]);
  }
  return std::move(w.buffer());
}

LabeledDataset decode_soft_labels(const std::vector<std::uint8_t>& bytes,
                                  const LabeledDataset& base) {
  io::Reader r(bytes, "soft labels");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), "DSLB", 4) != 0) {
    throw FormatError(FormatErrorKind::kBadMagic, "soft-label file does not start with DSLB");
  }
  r.take(4);
  const auto version = r.u32();
  if (version != kSoftLabelVersion) {
    throw FormatError(FormatErrorKind::kVersionMismatch,
                      "soft-label version " + std::to_string(version));
  }
  const std::size_t count = r.u32();
  const std::size_t n = r.u32();
  if (n != base.classes()) {
    throw FormatError(FormatErrorKind::kShapeMismatch,
                      "soft labels have " + std::to_string(n) + " classes, dataset has " +
                          std::to_string(base.classes()));
  }
  r.need(count * (n + 1) * 4);
  if (r.remaining() != count * (n + 1) * 4) {
    throw FormatError(FormatErrorKind::kCorrupt, "soft-label file has trailing bytes");
  }
  std::unordered_map<std::uint32_t, std::size_t> row_of;
  for (std::size_t i = 0; i < base.size(); ++i) row_of.emplace(base.source_index[i], i);

  std::vector<std::size_t> rows(count);
  std::vector<float> labels(count * n);
  for (std::size_t i = 0; i < count; ++i) {
    for (std::size_t k = 0; k < n; ++k) labels[i * n + k] = r.f32();
    const auto idx = r.u32();
    auto it = row_of.find(idx);
    if (it == row_of.end()) {
      throw FormatError(FormatErrorKind::kCorrupt,
                        "soft label references image " + std::to_string(idx) +
                            " absent from the dataset");
    }
    rows[i] = it->second;
  }
  LabeledDataset out;
  out.images = base.gather_images(rows);
  out.labels = Tensor<float>(Shape{count, n}, std::move(labels));
  for (auto row : rows) {
    out.targets.push_back(base.targets[row]);
    out.source_index.push_back(base.source_index[row]);
  }
  out.kind = LabelKind::kSoft;
  out.split = base.split;
  return out;
}

void save_soft_labels(const LabeledDataset& soft, const std::filesystem::path& path) {
  io::write_file(path, encode_soft_labels(soft));
}

LabeledDataset load_soft_labels(const std::filesystem::path& path, const LabeledDataset& base) {
  return decode_soft_labels(io::read_file(path), base);
}

}  // namespace ddta
