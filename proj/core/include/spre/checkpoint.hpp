#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "spre/tensor.hpp"

namespace spre {

// On-disk layout, all integers little-endian:
//
//   "SPRE" | version u16 | entry count u32 | entries...
//   entry: name_len u16 | name (UTF-8) | dtype u8 | ndim u8 |
//          dims u32 x ndim | payload (product(dims) x dtype size bytes)
//
// dtype: 0 = f32, 1 = f64, 2 = mask byte (0 or 1).

enum class DType : std::uint8_t { kF32 = 0, kF64 = 1, kMask = 2 };

std::size_t dtype_size(DType d);
std::string_view dtype_name(DType d);

template <typename T>
constexpr DType dtype_of();
template <>
constexpr DType dtype_of<float>() { return DType::kF32; }
template <>
constexpr DType dtype_of<double>() { return DType::kF64; }

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::kF32;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> payload;

  std::size_t element_count() const;
};

class Checkpoint {
 public:
  static constexpr std::uint16_t kVersion = 1;
  static constexpr char kMagic[4] = {'S', 'P', 'R', 'E'};

  /// Appends an entry; throws kDuplicateName if the name exists and
  /// kInvalidArgument if the payload length disagrees with dims.
  void add(CheckpointEntry entry);
  /// Replaces an existing entry in place, or appends.
  void put(CheckpointEntry entry);
  bool remove(std::string_view name);

  bool contains(std::string_view name) const;
  const CheckpointEntry* find(std::string_view name) const;
  /// Throws kMissingEntry.
  const CheckpointEntry& at(std::string_view name) const;
  const std::vector<CheckpointEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  template <typename T>
  void put_tensor(const std::string& name, const Tensor4<T>& t);
  void put_mask(const std::string& name, const Mask4& m);
  template <typename T>
  void put_vector(const std::string& name, std::span<const T> v);
  template <typename T>
  void put_matrix(const std::string& name, const Matrix<T>& m);

  /// Float entries convert to T; 4-D only.
  template <typename T>
  Tensor4<T> get_tensor(std::string_view name) const;
  Mask4 get_mask(std::string_view name) const;
  /// Any float entry, flattened.
  template <typename T>
  std::vector<T> get_vector(std::string_view name) const;
  template <typename T>
  Matrix<T> get_matrix(std::string_view name) const;

  std::vector<std::uint8_t> serialize() const;
  /// Throws kBadMagic, kUnsupportedVersion, kTruncated or kDuplicateName.
  static Checkpoint parse(std::span<const std::uint8_t> bytes);

 private:
  std::vector<CheckpointEntry> entries_;
};

/// Writes to a temporary sibling file and renames it over `path`.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Atomic text write used by every emitter.
void write_file_atomic(const std::filesystem::path& path, std::string_view data);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace spre
