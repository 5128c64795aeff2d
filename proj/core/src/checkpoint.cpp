#include "spre/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <limits>
#include <system_error>

namespace spre {
namespace {

static_assert(sizeof(float) == 4 && sizeof(double) == 8);

void put_u8(std::vector<std::uint8_t>& out, std::uint8_t v) { out.push_back(v); }

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int k = 0; k < 8; ++k) out.push_back(static_cast<std::uint8_t>(v >> (8 * k)));
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw Error(ErrorCode::kTruncated,
                  std::string("checkpoint truncated while reading ") + what +
                      ": need " + std::to_string(n) + " bytes at offset " +
                      std::to_string(pos_) + ", have " +
                      std::to_string(bytes_.size() - pos_));
    }
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::uint8_t u8(const char* what) { return take(1, what)[0]; }
  std::uint16_t u16(const char* what) {
    auto s = take(2, what);
    return static_cast<std::uint16_t>(s[0] | (s[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    auto s = take(4, what);
    std::uint32_t v = 0;
    for (int k = 3; k >= 0; --k) v = (v << 8) | s[static_cast<std::size_t>(k)];
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

template <typename T>
std::vector<std::uint8_t> encode_values(std::span<const T> values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * sizeof(T));
  for (T v : values) {
    if constexpr (sizeof(T) == 4) {
      put_u32(out, std::bit_cast<std::uint32_t>(v));
    } else {
      put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  return out;
}

template <typename T>
std::vector<T> decode_float_payload(const CheckpointEntry& e) {
  const std::size_t n = e.element_count();
  std::vector<T> out(n);
  const std::uint8_t* p = e.payload.data();
  if (e.dtype == DType::kF32) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int k = 3; k >= 0; --k) bits = (bits << 8) | p[4 * i + static_cast<std::size_t>(k)];
      out[i] = static_cast<T>(std::bit_cast<float>(bits));
    }
  } else if (e.dtype == DType::kF64) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (int k = 7; k >= 0; --k) bits = (bits << 8) | p[8 * i + static_cast<std::size_t>(k)];
      out[i] = static_cast<T>(std::bit_cast<double>(bits));
    }
  } else {
    throw Error(ErrorCode::kInvalidArgument,
                "checkpoint entry '" + e.name + "' is a mask, expected floats");
  }
  return out;
}

Shape4 shape_from_dims(const CheckpointEntry& e) {
  if (e.dims.size() != 4) {
    throw Error(ErrorCode::kShapeMismatch,
                "checkpoint entry '" + e.name + "' has " +
                    std::to_string(e.dims.size()) + " dims, expected 4");
  }
  return Shape4{e.dims[0], e.dims[1], e.dims[2], e.dims[3]};
}

std::uint32_t checked_dim(std::size_t d) {
  if (d > std::numeric_limits<std::uint32_t>::max()) {
    throw Error(ErrorCode::kInvalidArgument, "checkpoint dimension exceeds u32");
  }
  return static_cast<std::uint32_t>(d);
}

}  // namespace

std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::kF32: return 4;
    case DType::kF64: return 8;
    case DType::kMask: return 1;
  }
  return 0;
}

std::string_view dtype_name(DType d) {
  switch (d) {
    case DType::kF32: return "f32";
    case DType::kF64: return "f64";
    case DType::kMask: return "mask";
  }
  return "?";
}

std::size_t CheckpointEntry::element_count() const {
  std::size_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

void Checkpoint::add(CheckpointEntry entry) {
  if (contains(entry.name)) {
    throw Error(ErrorCode::kDuplicateName,
                "checkpoint: duplicate entry name '" + entry.name + "'");
  }
  if (entry.name.size() > std::numeric_limits<std::uint16_t>::max()) {
    throw Error(ErrorCode::kInvalidArgument, "checkpoint: entry name too long");
  }
  if (entry.dims.size() > std::numeric_limits<std::uint8_t>::max()) {
    throw Error(ErrorCode::kInvalidArgument, "checkpoint: too many dims");
  }
  if (entry.payload.size() != entry.element_count() * dtype_size(entry.dtype)) {
    throw Error(ErrorCode::kInvalidArgument,
                "checkpoint: entry '" + entry.name + "' payload is " +
                    std::to_string(entry.payload.size()) + " bytes, expected " +
                    std::to_string(entry.element_count() * dtype_size(entry.dtype)));
  }
  entries_.push_back(std::move(entry));
}

void Checkpoint::put(CheckpointEntry entry) {
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const auto& e) { return e.name == entry.name; });
  if (it == entries_.end()) {
    add(std::move(entry));
    return;
  }
  const std::size_t at = static_cast<std::size_t>(it - entries_.begin());
  CheckpointEntry old = std::move(*it);
  entries_.erase(it);
  try {
    add(std::move(entry));
  } catch (...) {
    entries_.insert(entries_.begin() + static_cast<std::ptrdiff_t>(at), std::move(old));
    throw;
  }
  std::rotate(entries_.begin() + static_cast<std::ptrdiff_t>(at),
              entries_.end() - 1, entries_.end());
}

bool Checkpoint::remove(std::string_view name) {
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const auto& e) { return e.name == name; });
  if (it == entries_.end()) return false;
  entries_.erase(it);
  return true;
}

bool Checkpoint::contains(std::string_view name) const { return find(name) != nullptr; }

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries_) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(std::string_view name) const {
  const CheckpointEntry* e = find(name);
  if (e == nullptr) {
    throw Error(ErrorCode::kMissingEntry,
                "checkpoint has no entry named '" + std::string(name) + "'");
  }
  return *e;
}

template <typename T>
void Checkpoint::put_tensor(const std::string& name, const Tensor4<T>& t) {
  const Shape4& s = t.shape();
  put(CheckpointEntry{name,
                      dtype_of<T>(),
                      {checked_dim(s.c_out), checked_dim(s.c_in),
                       checked_dim(s.k_h), checked_dim(s.k_w)},
                      encode_values<T>(t.data())});
}

void Checkpoint::put_mask(const std::string& name, const Mask4& m) {
  const Shape4& s = m.shape();
  put(CheckpointEntry{name,
                      DType::kMask,
                      {checked_dim(s.c_out), checked_dim(s.c_in),
                       checked_dim(s.k_h), checked_dim(s.k_w)},
                      std::vector<std::uint8_t>(m.bits().begin(), m.bits().end())});
}

template <typename T>
void Checkpoint::put_vector(const std::string& name, std::span<const T> v) {
  put(CheckpointEntry{name, dtype_of<T>(), {checked_dim(v.size())},
                      encode_values<T>(v)});
}

template <typename T>
void Checkpoint::put_matrix(const std::string& name, const Matrix<T>& m) {
  put(CheckpointEntry{name,
                      dtype_of<T>(),
                      {checked_dim(m.rows), checked_dim(m.cols)},
                      encode_values<T>(std::span<const T>(m.data))});
}

template <typename T>
Tensor4<T> Checkpoint::get_tensor(std::string_view name) const {
  const CheckpointEntry& e = at(name);
  return Tensor4<T>(shape_from_dims(e), decode_float_payload<T>(e));
}

Mask4 Checkpoint::get_mask(std::string_view name) const {
  const CheckpointEntry& e = at(name);
  if (e.dtype != DType::kMask) {
    throw Error(ErrorCode::kInvalidArgument,
                "checkpoint entry '" + e.name + "' is not a mask");
  }
  return Mask4(shape_from_dims(e), e.payload);
}

template <typename T>
std::vector<T> Checkpoint::get_vector(std::string_view name) const {
  return decode_float_payload<T>(at(name));
}

template <typename T>
Matrix<T> Checkpoint::get_matrix(std::string_view name) const {
  const CheckpointEntry& e = at(name);
  if (e.dims.size() != 2) {
    throw Error(ErrorCode::kShapeMismatch,
                "checkpoint entry '" + e.name + "' is not a matrix");
  }
  Matrix<T> m(e.dims[0], e.dims[1]);
  m.data = decode_float_payload<T>(e);
  return m;
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u16(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& e : entries_) {
    put_u16(out, static_cast<std::uint16_t>(e.name.size()));
    out.insert(out.end(), e.name.begin(), e.name.end());
    put_u8(out, static_cast<std::uint8_t>(e.dtype));
    put_u8(out, static_cast<std::uint8_t>(e.dims.size()));
    for (auto d : e.dims) put_u32(out, d);
    out.insert(out.end(), e.payload.begin(), e.payload.end());
  }
  return out;
}

Checkpoint Checkpoint::parse(std::span<const std::uint8_t> bytes) {
  if (bytes.size() >= 4 && !std::equal(bytes.begin(), bytes.begin() + 4,
                                       std::begin(kMagic))) {
    throw Error(ErrorCode::kBadMagic,
                "checkpoint: bad magic '" +
                    std::string(reinterpret_cast<const char*>(bytes.data()), 4) +
                    "', expected 'SPRE'");
  }
  Reader r(bytes);
  r.take(4, "magic");
  const std::uint16_t version = r.u16("version");
  if (version != kVersion) {
    throw Error(ErrorCode::kUnsupportedVersion,
                "checkpoint: unsupported version " + std::to_string(version) +
                    " (supported: " + std::to_string(kVersion) + ")");
  }
  const std::uint32_t count = r.u32("entry count");
  Checkpoint ckpt;
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const std::uint16_t name_len = r.u16("name length");
    auto name = r.take(name_len, "name");
    e.name.assign(name.begin(), name.end());
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype > 2) {
      throw Error(ErrorCode::kInvalidArgument,
                  "checkpoint: entry '" + e.name + "' has unknown dtype code " +
                      std::to_string(dtype));
    }
    e.dtype = static_cast<DType>(dtype);
    const std::uint8_t ndim = r.u8("ndim");
    e.dims.resize(ndim);
    for (auto& d : e.dims) d = r.u32("dims");
    // Guard the multiplication before trusting the header.
    std::size_t elems = 1;
    for (auto d : e.dims) {
      if (d != 0 && elems > r.remaining() / d) {
        throw Error(ErrorCode::kTruncated,
                    "checkpoint: entry '" + e.name +
                        "' declares more data than the file holds");
      }
      elems *= d;
    }
    auto payload = r.take(elems * dtype_size(e.dtype), "payload");
    e.payload.assign(payload.begin(), payload.end());
    if (e.dtype == DType::kMask &&
        std::any_of(e.payload.begin(), e.payload.end(),
                    [](std::uint8_t b) { return b > 1; })) {
      throw Error(ErrorCode::kInvalidArgument,
                  "checkpoint: mask entry '" + e.name + "' holds a non-binary byte");
    }
    ckpt.add(std::move(e));
  }
  if (!r.done()) {
    throw Error(ErrorCode::kInvalidArgument,
                "checkpoint: " + std::to_string(r.remaining()) +
                    " trailing bytes after the last entry");
  }
  return ckpt;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view data) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      throw Error(ErrorCode::kIo, "cannot open '" + tmp.string() + "' for writing");
    }
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw Error(ErrorCode::kIo, "write to '" + tmp.string() + "' failed");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw Error(ErrorCode::kIo, "cannot rename onto '" + path.string() + "'");
  }
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in),
                                   std::istreambuf_iterator<char>());
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = ckpt.serialize();
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()),
                                           bytes.size()));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return Checkpoint::parse(bytes);
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

#define SPRE_INSTANTIATE_CKPT(T)                                               \
  template void Checkpoint::put_tensor(const std::string&, const Tensor4<T>&); \
  template void Checkpoint::put_vector(const std::string&, std::span<const T>);\
  template void Checkpoint::put_matrix(const std::string&, const Matrix<T>&);  \
  template Tensor4<T> Checkpoint::get_tensor(std::string_view) const;          \
  template std::vector<T> Checkpoint::get_vector(std::string_view) const;      \
  template Matrix<T> Checkpoint::get_matrix(std::string_view) const;

SPRE_INSTANTIATE_CKPT(float)
SPRE_INSTANTIATE_CKPT(double)

#undef SPRE_INSTANTIATE_CKPT

}  // namespace spre
