#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tal/tensor.hpp"

namespace tal {

/// Images in [0,1] with true labels and (once assigned) attack targets.
struct LabeledDataset {
  Tensor images;  // N×C×H×W
  std::vector<std::size_t> labels;
  std::vector<std::size_t> targets;  // empty until assign_targets
  std::vector<std::string> splits;   // optional per-sample split tag
  std::size_t num_classes = 10;

  std::size_t size() const { return labels.size(); }
  LabeledDataset slice(std::size_t begin, std::size_t end) const;
  LabeledDataset select(std::span<const std::size_t> indices) const;

  /// Throws ValueError if labels/targets are out of range, a target equals
  /// its true label, or extents disagree.
  void validate() const;
};

enum class DatasetFormat { Auto, Cifar10Binary, ImageDirectory, Synthetic };

/// Loads `cifar10-binary` files (1 label byte + 3072 pixel bytes per record)
/// or an image directory holding binary PPM files and a `labels.csv` with
/// `filename,label` rows. `Auto` picks by path: a directory is an image
/// directory; `synthetic:<count>:<seed>` generates shapes10.
LabeledDataset load_dataset(const std::string& path, DatasetFormat format = DatasetFormat::Auto);
DatasetFormat parse_dataset_format(std::string_view name);

void save_cifar10_binary(const LabeledDataset& data, const std::filesystem::path& path);
/// Writes `<dir>/<index>.ppm` and `<dir>/labels.csv`.
void save_image_directory(const LabeledDataset& data, const std::filesystem::path& dir);

/// Procedural 10-class image set ("shapes10"): disk, ring, square, square
/// outline, triangle, plus, cross, horizontal stripes, vertical stripes,
/// checkerboard, each with random placement, scale, colors, background
/// gradient and pixel noise. Pixel values are quantized to k/255.
LabeledDataset make_shapes_dataset(std::size_t count, std::uint64_t seed, std::size_t extent = 32);

enum class TargetPolicy { UniformExcludingTrue };

/// Deterministic under `seed`. Throws ValueError for single-class data.
LabeledDataset assign_targets(LabeledDataset data, TargetPolicy policy, std::uint64_t seed);

} // namespace tal
