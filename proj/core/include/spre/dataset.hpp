#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "spre/tensor.hpp"

namespace spre {

/// Labeled images, channel-first, stored as normalized 32-bit floats.
struct Dataset {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t classes = 0;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t image_size() const noexcept { return channels * height * width; }

  /// Gathers the given samples into a batch.
  template <typename T>
  FeatureMap<T> batch(std::span<const std::size_t> indices) const;
  std::vector<int> batch_labels(std::span<const std::size_t> indices) const;
};

/// Train/validation pair plus the per-channel normalization applied to both.
struct DatasetSplit {
  Dataset train;
  Dataset val;
  std::vector<double> channel_mean;
  std::vector<double> channel_std;
};

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t classes = 10;
  std::size_t samples_per_class = 100;
  std::size_t image_size = 16;
  double noise = 0.35;
};

/// Procedural 3-channel images: each class is a stroke at a class-specific
/// orientation with a class-specific bend, drawn at a random position, width,
/// length and colour over Gaussian noise. The first 80% of each class goes to
/// train, the rest to validation. Same options give bit-identical data.
DatasetSplit synth_dataset(const SynthOptions& options);

inline constexpr std::size_t kCifarRecordBytes = 1 + 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordsPerBatch = 10000;

/// Decodes raw CIFAR-10 records (label byte + 3072 channel-planar pixel
/// bytes) into [0,1]-scaled images. `source` names the file in errors.
Dataset parse_cifar_records(std::span<const std::uint8_t> bytes,
                            std::size_t expected_records,
                            const std::string& source);

/// Reads data_batch_1..5.bin and test_batch.bin from `dir`, then normalizes
/// per channel. Empty mean/std means "compute from the training split".
DatasetSplit cifar10_load(const std::filesystem::path& dir,
                          std::vector<double> mean = {},
                          std::vector<double> stddev = {});

/// Per-channel statistics of a dataset's pixels.
void channel_stats(const Dataset& d, std::vector<double>& mean,
                   std::vector<double>& stddev);
void normalize(Dataset& d, std::span<const double> mean,
               std::span<const double> stddev);

}  // namespace spre
