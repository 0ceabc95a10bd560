#pragma once

#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <vector>

#include "ddta/tensor.hpp"

namespace ddta {

enum class LabelKind : std::uint8_t { kHard, kSoft };
enum class Split : std::uint8_t { kTrain, kTest };

/// Images are [N,C,H,W] in [0,1]. Labels are [N,classes]: exact one-hot rows
/// for hard datasets, probability rows for soft ones. `targets` always holds
/// the ground-truth class, and `source_index` the record number in the file
/// the image came from.
struct LabeledDataset {
  Tensor<float> images;
  Tensor<float> labels;
  std::vector<std::uint8_t> targets;
  std::vector<std::uint32_t> source_index;
  LabelKind kind = LabelKind::kHard;
  Split split = Split::kTrain;

  std::size_t size() const noexcept { return targets.size(); }
  bool empty() const noexcept { return targets.empty(); }
  std::size_t classes() const { return labels.shape().at(1); }
  Shape sample_shape() const { return {images.shape()[1], images.shape()[2], images.shape()[3]}; }
  std::size_t sample_size() const { return numel(sample_shape()); }

  std::span<const float> image(std::size_t i) const {
    return images.data().subspan(i * sample_size(), sample_size());
  }
  std::span<const float> label(std::size_t i) const {
    return labels.data().subspan(i * classes(), classes());
  }

  /// Copies the selected rows into a new [n,C,H,W] tensor.
  Tensor<float> gather_images(std::span<const std::size_t> rows) const;
  Tensor<float> gather_labels(std::span<const std::size_t> rows) const;
  /// Rows [0, n) as a new dataset.
  LabeledDataset head(std::size_t n) const;

  /// Throws InvalidArgument when a label or pixel invariant is broken.
  void validate() const;
};

/// Builds a hard-label dataset from images and class indices.
LabeledDataset make_hard_dataset(Tensor<float> images, std::vector<std::uint8_t> targets,
                                 std::size_t classes, Split split);

struct DatasetPair {
  LabeledDataset train;
  LabeledDataset test;
};

struct SubsetLimits {
  std::size_t train = std::numeric_limits<std::size_t>::max();
  std::size_t test = std::numeric_limits<std::size_t>::max();
};

/// Reads train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-* from `dir`
/// (or `dir/mnist`). Keeps the first `limits` records of each split.
DatasetPair load_mnist(const std::filesystem::path& dir, SubsetLimits limits = {});
/// Reads data_batch_1..5.bin and test_batch.bin from `dir` (or
/// `dir/cifar-10-batches-bin`).
DatasetPair load_cifar10(const std::filesystem::path& dir, SubsetLimits limits = {});

/// Decoders over in-memory file contents, shared by the loaders and tests.
LabeledDataset decode_idx(const std::vector<std::uint8_t>& image_bytes,
                          const std::vector<std::uint8_t>& label_bytes, Split split,
                          std::size_t limit = std::numeric_limits<std::size_t>::max());
LabeledDataset decode_cifar_batch(const std::vector<std::uint8_t>& bytes, Split split,
                                  std::uint32_t first_index = 0);

/// Inverse of the loaders' 1/255 scaling, byte for byte.
std::vector<std::uint8_t> encode_idx_images(const LabeledDataset& data);
std::vector<std::uint8_t> encode_idx_labels(const LabeledDataset& data);
std::vector<std::uint8_t> encode_cifar_batch(const LabeledDataset& data);

inline constexpr std::uint32_t kSoftLabelVersion = 1;

/// Soft-label file: "DSLB", version, count, N, then per sample N f32
/// probabilities followed by the u32 source image index.
std::vector<std::uint8_t> encode_soft_labels(const LabeledDataset& soft);
/// Rebuilds a soft dataset by pairing the stored labels with images of
/// `base` looked up through `source_index`.
LabeledDataset decode_soft_labels(const std::vector<std::uint8_t>& bytes,
                                  const LabeledDataset& base);
void save_soft_labels(const LabeledDataset& soft, const std::filesystem::path& path);
LabeledDataset load_soft_labels(const std::filesystem::path& path, const LabeledDataset& base);

}  // namespace ddta
