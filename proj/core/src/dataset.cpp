#include "spre/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "spre/checkpoint.hpp"

namespace spre {

template <typename T>
FeatureMap<T> Dataset::batch(std::span<const std::size_t> indices) const {
  FeatureMap<T> x(indices.size(), channels, height, width);
  const std::size_t stride = image_size();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    if (indices[b] >= size()) {
      throw Error(ErrorCode::kInvalidArgument,
                  "Dataset::batch: index " + std::to_string(indices[b]) +
                      " out of range");
    }
    const float* src = images.data() + indices[b] * stride;
    T* dst = x.data().data() + b * stride;
    for (std::size_t k = 0; k < stride; ++k) dst[k] = static_cast<T>(src[k]);
  }
  return x;
}

std::vector<int> Dataset::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (auto i : indices) out.push_back(labels.at(i));
  return out;
}

template FeatureMap<float> Dataset::batch(std::span<const std::size_t>) const;
template FeatureMap<double> Dataset::batch(std::span<const std::size_t>) const;

void channel_stats(const Dataset& d, std::vector<double>& mean,
                   std::vector<double>& stddev) {
  mean.assign(d.channels, 0.0);
  stddev.assign(d.channels, 0.0);
  const std::size_t plane = d.height * d.width;
  const double count = static_cast<double>(d.size() * plane);
  if (count == 0) return;
  for (std::size_t c = 0; c < d.channels; ++c) {
    double s = 0.0;
    double sq = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
      const float* p = d.images.data() + i * d.image_size() + c * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        s += p[k];
        sq += static_cast<double>(p[k]) * p[k];
      }
    }
    mean[c] = s / count;
    stddev[c] = std::sqrt(std::max(sq / count - mean[c] * mean[c], 1e-12));
  }
}

void normalize(Dataset& d, std::span<const double> mean,
               std::span<const double> stddev) {
  if (mean.size() != d.channels || stddev.size() != d.channels) {
    throw Error(ErrorCode::kConfig,
                "normalization constants must have one entry per channel (" +
                    std::to_string(d.channels) + ")");
  }
  const std::size_t plane = d.height * d.width;
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t c = 0; c < d.channels; ++c) {
      float* p = d.images.data() + i * d.image_size() + c * plane;
      const double inv = 1.0 / stddev[c];
      for (std::size_t k = 0; k < plane; ++k) {
        p[k] = static_cast<float>((p[k] - mean[c]) * inv);
      }
    }
  }
}

namespace {

double segment_distance(double px, double py, double ax, double ay, double bx,
                        double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double qx = ax + t * dx - px;
  const double qy = ay + t * dy - py;
  return std::sqrt(qx * qx + qy * qy);
}

void normalize_split(DatasetSplit& split) {
  channel_stats(split.train, split.channel_mean, split.channel_std);
  normalize(split.train, split.channel_mean, split.channel_std);
  normalize(split.val, split.channel_mean, split.channel_std);
}

}  // namespace

DatasetSplit synth_dataset(const SynthOptions& options) {
  if (options.classes < 2) {
    throw Error(ErrorCode::kConfig, "synth_dataset: need at least 2 classes");
  }
  if (options.image_size < 4) {
    throw Error(ErrorCode::kConfig, "synth_dataset: image_size must be >= 4");
  }
  const std::size_t s = options.image_size;
  const std::size_t channels = 3;
  const std::size_t img = channels * s * s;
  const std::size_t n_train_per_class = (options.samples_per_class * 4) / 5;

  DatasetSplit split;
  for (Dataset* d : {&split.train, &split.val}) {
    d->channels = channels;
    d->height = s;
    d->width = s;
    d->classes = options.classes;
  }

  // Half the classes are single strokes, the other half double strokes; the
  // orientation cycles within each half.
  const std::size_t orientations = (options.classes + 1) / 2;
  std::mt19937_64 rng(options.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double size = static_cast<double>(s);
  std::vector<float> pixels(img);

  for (std::size_t i = 0; i < options.samples_per_class; ++i) {
    for (std::size_t c = 0; c < options.classes; ++c) {
      const double theta =
          std::numbers::pi * static_cast<double>(c % orientations) /
              static_cast<double>(orientations) +
          0.06 * gauss(rng);
      const bool doubled = c >= orientations;
      const double cx = size / 2.0 + (unit(rng) - 0.5) * 0.4 * size;
      const double cy = size / 2.0 + (unit(rng) - 0.5) * 0.4 * size;
      const double half = (0.45 + 0.35 * unit(rng)) * size / 2.0;
      const double sigma = 0.6 + 0.4 * unit(rng);
      const double gap = 1.8 + 0.8 * unit(rng);
      double colour[3];
      double background[3];
      for (int k = 0; k < 3; ++k) {
        colour[k] = 0.4 + 0.6 * unit(rng);
        background[k] = 0.3 * unit(rng);
      }
      const double ux = std::cos(theta);
      const double uy = std::sin(theta);
      // perpendicular offset for the second stroke
      const double nx = -uy * gap / 2.0;
      const double ny = ux * gap / 2.0;

      for (std::size_t y = 0; y < s; ++y) {
        for (std::size_t x = 0; x < s; ++x) {
          const double px = static_cast<double>(x) + 0.5;
          const double py = static_cast<double>(y) + 0.5;
          double d;
          if (doubled) {
            d = std::min(segment_distance(px, py, cx - half * ux + nx,
                                          cy - half * uy + ny, cx + half * ux + nx,
                                          cy + half * uy + ny),
                         segment_distance(px, py, cx - half * ux - nx,
                                          cy - half * uy - ny, cx + half * ux - nx,
                                          cy + half * uy - ny));
          } else {
            d = segment_distance(px, py, cx - half * ux, cy - half * uy,
                                 cx + half * ux, cy + half * uy);
          }
          const double ink = std::exp(-d * d / (2.0 * sigma * sigma));
          for (std::size_t k = 0; k < channels; ++k) {
            pixels[(k * s + y) * s + x] = static_cast<float>(
                background[k] + ink * colour[k] + options.noise * gauss(rng));
          }
        }
      }
      Dataset& dst = i < n_train_per_class ? split.train : split.val;
      dst.images.insert(dst.images.end(), pixels.begin(), pixels.end());
      dst.labels.push_back(static_cast<int>(c));
    }
  }
  normalize_split(split);
  return split;
}

Dataset parse_cifar_records(std::span<const std::uint8_t> bytes,
                            std::size_t expected_records,
                            const std::string& source) {
  const std::size_t expected = expected_records * kCifarRecordBytes;
  if (bytes.size() != expected) {
    throw Error(ErrorCode::kTruncated,
                source + ": expected " + std::to_string(expected) +
                    " bytes, found " + std::to_string(bytes.size()));
  }
  Dataset d;
  d.channels = 3;
  d.height = 32;
  d.width = 32;
  d.classes = 10;
  d.images.resize(expected_records * 3072);
  d.labels.resize(expected_records);
  for (std::size_t r = 0; r < expected_records; ++r) {
    const std::uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw Error(ErrorCode::kInvalidArgument,
                  source + ": record " + std::to_string(r) + " has label " +
                      std::to_string(rec[0]));
    }
    d.labels[r] = rec[0];
    float* dst = d.images.data() + r * 3072;
    for (std::size_t k = 0; k < 3072; ++k) dst[k] = rec[1 + k] / 255.0f;
  }
  return d;
}

DatasetSplit cifar10_load(const std::filesystem::path& dir,
                          std::vector<double> mean, std::vector<double> stddev) {
  auto load_file = [&](const std::string& name) {
    const auto path = dir / name;
    if (!std::filesystem::exists(path)) {
      throw Error(ErrorCode::kIo, "cifar10: missing file " + path.string());
    }
    return parse_cifar_records(read_file_bytes(path), kCifarRecordsPerBatch,
                               path.string());
  };
  DatasetSplit split;
  for (int b = 1; b <= 5; ++b) {
    Dataset part = load_file("data_batch_" + std::to_string(b) + ".bin");
    if (b == 1) {
      split.train = std::move(part);
      continue;
    }
    split.train.images.insert(split.train.images.end(), part.images.begin(),
                              part.images.end());
    split.train.labels.insert(split.train.labels.end(), part.labels.begin(),
                              part.labels.end());
  }
  split.val = load_file("test_batch.bin");
  if (mean.empty() && stddev.empty()) {
    channel_stats(split.train, mean, stddev);
  }
  split.channel_mean = mean;
  split.channel_std = stddev;
  normalize(split.train, mean, stddev);
  normalize(split.val, mean, stddev);
  return split;
}

}  // namespace spre
