// SPDX-License-Identifier: Apache-2.0
//
// OAKTENS1 binary tensor container and JSON scene manifests.
//
// File layout (all integers little-endian):
//
//   offset 0   magic "OAKTENS1"            8 bytes
//   offset 8   dtype code                  1 byte   (f32=1 f64=2 u8=3 i32=4 u16=5)
//   offset 9   rank r (1..8)               1 byte
//   offset 10  extents                     r x u32
//   ...        row-major payload           prod(extents) x sizeof(dtype)
#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"
#include "occanykit/grid_spec.hpp"

namespace occanykit {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u8 = 3, i32 = 4, u16 = 5 };

inline constexpr std::array<char, 8> kTensorMagic{'O', 'A', 'K', 'T', 'E', 'N', 'S', '1'};
inline constexpr std::size_t kMaxTensorRank = 8;

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
    case DType::i32: return 4;
    case DType::u16: return 2;
  }
  throw FormatError("unknown dtype code " + std::to_string(static_cast<int>(t)));
}

inline const char* dtype_name(DType t) {
  switch (t) {
    case DType::f32: return "f32";
    case DType::f64: return "f64";
    case DType::u8: return "u8";
    case DType::i32: return "i32";
    case DType::u16: return "u16";
  }
  return "?";
}

namespace detail {
template <typename T> struct dtype_of;
template <> struct dtype_of<float> { static constexpr DType value = DType::f32; };
template <> struct dtype_of<double> { static constexpr DType value = DType::f64; };
template <> struct dtype_of<std::uint8_t> { static constexpr DType value = DType::u8; };
template <> struct dtype_of<std::int32_t> { static constexpr DType value = DType::i32; };
template <> struct dtype_of<std::uint16_t> { static constexpr DType value = DType::u16; };
}  // namespace detail

/// A typed, shaped, row-major tensor.
class TensorBlob {
 public:
  using Storage = std::variant<std::vector<float>, std::vector<double>, std::vector<std::uint8_t>,
                               std::vector<std::int32_t>, std::vector<std::uint16_t>>;

  TensorBlob() = default;

  template <typename T>
  TensorBlob(std::vector<std::size_t> shape, std::vector<T> values)
      : shape_(std::move(shape)), data_(std::move(values)) {
    validate();
  }

  template <typename T>
  static TensorBlob zeros(std::vector<std::size_t> shape) {
    const std::size_t n = product(shape);
    return TensorBlob(std::move(shape), std::vector<T>(n, T{}));
  }

  DType dtype() const {
    return std::visit([](const auto& v) {
      return detail::dtype_of<typename std::decay_t<decltype(v)>::value_type>::value;
    }, data_);
  }
  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t elements() const { return product(shape_); }

  template <typename T>
  bool holds() const { return std::holds_alternative<std::vector<T>>(data_); }

  template <typename T>
  const std::vector<T>& values() const {
    if (!holds<T>())
      throw ValidationError(std::string("tensor holds ") + dtype_name(dtype()) + ", not " +
                            dtype_name(detail::dtype_of<T>::value));
    return std::get<std::vector<T>>(data_);
  }
  template <typename T>
  std::vector<T>& values() {
    return const_cast<std::vector<T>&>(std::as_const(*this).values<T>());
  }

  /// Element-wise conversion to double irrespective of the stored dtype.
  std::vector<double> as_double() const {
    return std::visit([](const auto& v) {
      return std::vector<double>(v.begin(), v.end());
    }, data_);
  }

  const Storage& storage() const { return data_; }

  void validate() const {
    if (shape_.empty()) throw ValidationError("tensor rank must be >= 1");
    for (std::size_t e : shape_)
      if (e < 1) throw ValidationError("tensor extents must be >= 1");
    const std::size_t n = std::visit([](const auto& v) { return v.size(); }, data_);
    if (n != product(shape_))
      throw ValidationError("tensor data length " + std::to_string(n) +
                            " does not match shape product " + std::to_string(product(shape_)));
  }

  bool operator==(const TensorBlob& o) const { return shape_ == o.shape_ && data_ == o.data_; }

  static std::size_t product(const std::vector<std::size_t>& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
  }

 private:
  std::vector<std::size_t> shape_{1};
  Storage data_{std::vector<float>(1, 0.0f)};
};

namespace detail {

template <typename T>
void put_le(std::vector<char>& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.insert(out.end(), bytes.begin(), bytes.end());
}

template <typename T>
T get_le(const char* p) {
  std::array<char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

template <typename T>
std::vector<T> decode_payload(const char* p, std::size_t n) {
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = get_le<T>(p + i * sizeof(T));
  return out;
}

}  // namespace detail

/// Serialise to the in-memory byte image of an OAKTENS1 file.
inline std::vector<char> encode_tensor(const TensorBlob& blob) {
  blob.validate();
  if (blob.rank() > kMaxTensorRank)
    throw ValidationError("tensor rank " + std::to_string(blob.rank()) + " exceeds format limit 8");
  std::vector<char> out;
  out.reserve(10 + 4 * blob.rank() + blob.elements() * dtype_size(blob.dtype()));
  out.insert(out.end(), kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(static_cast<char>(blob.dtype()));
  out.push_back(static_cast<char>(blob.rank()));
  for (std::size_t e : blob.shape()) {
    if (e > 0xFFFFFFFFULL) throw ValidationError("tensor extent exceeds u32");
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(e));
  }
  std::visit([&](const auto& v) {
    for (const auto& x : v) detail::put_le(out, x);
  }, blob.storage());
  return out;
}

inline TensorBlob decode_tensor(const std::vector<char>& bytes, const std::string& origin = "<memory>") {
  if (bytes.size() < 10 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin()))
    throw FormatError(origin + ": bad magic (not an OAKTENS1 file)");
  const auto code = static_cast<std::uint8_t>(bytes[8]);
  if (code < 1 || code > 5) throw FormatError(origin + ": unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t rank = static_cast<std::uint8_t>(bytes[9]);
  if (rank < 1 || rank > kMaxTensorRank)
    throw FormatError(origin + ": invalid rank " + std::to_string(rank));
  const std::size_t header = 10 + 4 * rank;
  if (bytes.size() < header) throw FormatError(origin + ": truncated header");
  std::vector<std::size_t> shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    shape[i] = detail::get_le<std::uint32_t>(bytes.data() + 10 + 4 * i);
    if (shape[i] == 0) throw FormatError(origin + ": zero extent in header");
  }
  const std::size_t n = TensorBlob::product(shape);
  const std::size_t expected = n * dtype_size(dtype);
  const std::size_t got = bytes.size() - header;
  if (got < expected)
    throw FormatError(origin + ": truncated payload (" + std::to_string(got) + " of " +
                      std::to_string(expected) + " bytes)");
  if (got > expected)
    throw FormatError(origin + ": trailing bytes after payload (" + std::to_string(got) + " vs " +
                      std::to_string(expected) + ")");
  const char* p = bytes.data() + header;
  switch (dtype) {
    case DType::f32: return TensorBlob(shape, detail::decode_payload<float>(p, n));
    case DType::f64: return TensorBlob(shape, detail::decode_payload<double>(p, n));
    case DType::u8: return TensorBlob(shape, detail::decode_payload<std::uint8_t>(p, n));
    case DType::i32: return TensorBlob(shape, detail::decode_payload<std::int32_t>(p, n));
    case DType::u16: return TensorBlob(shape, detail::decode_payload<std::uint16_t>(p, n));
  }
  throw FormatError(origin + ": unknown dtype");
}

/// Write `blob` to `path`; returns the number of bytes written.
inline std::size_t write_tensor(const TensorBlob& blob, const std::filesystem::path& path) {
  const auto bytes = encode_tensor(blob);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("write failed: " + path.string());
  return bytes.size();
}

inline TensorBlob read_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path.string());
}

// Raster <-> tensor. Rasters with one channel map to rank-2 tensors.

template <typename T, typename Stored = T>
TensorBlob to_tensor(const Raster<T>& r) {
  std::vector<std::size_t> shape{r.height(), r.width()};
  if (r.channels() != 1) shape.push_back(r.channels());
  return TensorBlob(std::move(shape), std::vector<Stored>(r.data().begin(), r.data().end()));
}

template <typename T>
Raster<T> to_raster(const TensorBlob& blob) {
  const auto& s = blob.shape();
  if (s.size() != 2 && s.size() != 3)
    throw ValidationError("expected rank-2 or rank-3 tensor for raster, got rank " +
                          std::to_string(s.size()));
  Raster<T> r(s[0], s[1], s.size() == 3 ? s[2] : 1);
  std::visit([&](const auto& v) {
    for (std::size_t i = 0; i < v.size(); ++i) r.data()[i] = static_cast<T>(v[i]);
  }, blob.storage());
  return r;
}

// ---------------------------------------------------------------------------
// Scene manifests

struct Intrinsics {
  double fx = 1.0, fy = 1.0, cx = 0.0, cy = 0.0;

  void validate(std::size_t height, std::size_t width) const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ValidationError("intrinsics: focal lengths must be > 0");
    if (!(cx > 0.0 && cx < static_cast<double>(width)) ||
        !(cy > 0.0 && cy < static_cast<double>(height)))
      throw ValidationError("intrinsics: principal point outside the image");
  }

  /// The same camera sampled at a different raster resolution.
  Intrinsics scaled(double s) const { return {fx * s, fy * s, cx * s, cy * s}; }
};

inline void to_json(nlohmann::json& j, const Intrinsics& k) {
  j = nlohmann::json{{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}};
}
inline void from_json(const nlohmann::json& j, Intrinsics& k) {
  k.fx = j.at("fx").get<double>();
  k.fy = j.at("fy").get<double>();
  k.cx = j.at("cx").get<double>();
  k.cy = j.at("cy").get<double>();
}

struct ManifestFrame {
  std::filesystem::path image;
  std::optional<std::filesystem::path> pointmap;  // ground-truth, camera frame
  std::optional<std::filesystem::path> labels;
  std::optional<std::filesystem::path> features;  // teacher features
  std::optional<std::array<double, 7>> pose;      // camera-to-world, when known
};

struct SceneManifest {
  std::vector<ManifestFrame> frames;
  std::optional<Intrinsics> intrinsics;
  std::size_t height = 0;
  std::size_t width = 0;
  std::optional<VoxelGridSpec> grid;
  std::optional<std::filesystem::path> gt_grid;  // grid directory (see occupancy.hpp)
  std::optional<std::filesystem::path> scene;    // synthetic scene JSON, for oracle views
  std::filesystem::path directory;
};

namespace detail {
inline std::filesystem::path resolve(const std::filesystem::path& base, const std::string& p,
                                     const std::string& what) {
  std::filesystem::path full = std::filesystem::path(p).is_absolute() ? std::filesystem::path(p)
                                                                       : base / p;
  if (!std::filesystem::exists(full))
    throw ValidationError("manifest: dangling " + what + " path " + full.string());
  return full;
}
}  // namespace detail

/// Parse and validate a scene manifest; relative paths are resolved against
/// the manifest's own directory.
inline SceneManifest parse_scene_manifest(const nlohmann::json& j, const std::filesystem::path& base,
                                          std::size_t patch = 8) {
  SceneManifest m;
  m.directory = base;
  try {
    if (!j.contains("frames")) throw ValidationError("manifest: missing required field 'frames'");
    if (!j.contains("resolution"))
      throw ValidationError("manifest: missing required field 'resolution'");
    const auto& res = j.at("resolution");
    if (!res.contains("H") || !res.contains("W"))
      throw ValidationError("manifest: resolution needs H and W");
    const auto h = res.at("H").get<long long>();
    const auto w = res.at("W").get<long long>();
    if (h < 1 || w < 1) throw ValidationError("manifest: resolution must be positive");
    m.height = static_cast<std::size_t>(h);
    m.width = static_cast<std::size_t>(w);
    if (patch == 0) throw ValidationError("manifest: patch size must be positive");
    if (m.height % patch != 0 || m.width % patch != 0)
      throw ValidationError("manifest: H=" + std::to_string(m.height) + ", W=" +
                            std::to_string(m.width) + " not divisible by patch " +
                            std::to_string(patch));
    const auto& frames = j.at("frames");
    if (!frames.is_array() || frames.empty())
      throw ValidationError("manifest: frame list must be non-empty");
    for (const auto& fj : frames) {
      ManifestFrame f;
      if (!fj.contains("image")) throw ValidationError("manifest: frame missing 'image'");
      f.image = detail::resolve(base, fj.at("image").get<std::string>(), "image");
      if (fj.contains("pointmap"))
        f.pointmap = detail::resolve(base, fj.at("pointmap").get<std::string>(), "pointmap");
      if (fj.contains("labels"))
        f.labels = detail::resolve(base, fj.at("labels").get<std::string>(), "labels");
      if (fj.contains("features"))
        f.features = detail::resolve(base, fj.at("features").get<std::string>(), "features");
      if (fj.contains("pose")) f.pose = fj.at("pose").get<std::array<double, 7>>();
      m.frames.push_back(std::move(f));
    }
    if (j.contains("intrinsics")) {
      m.intrinsics = j.at("intrinsics").get<Intrinsics>();
      m.intrinsics->validate(m.height, m.width);
    }
    if (j.contains("grid")) m.grid = j.at("grid").get<VoxelGridSpec>();
    if (j.contains("gt_grid"))
      m.gt_grid = detail::resolve(base, j.at("gt_grid").get<std::string>(), "gt_grid");
    if (j.contains("scene"))
      m.scene = detail::resolve(base, j.at("scene").get<std::string>(), "scene");
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  return m;
}

inline SceneManifest load_scene_manifest(const std::filesystem::path& path, std::size_t patch = 8) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError("manifest " + path.string() + ": " + e.what());
  }
  return parse_scene_manifest(j, path.parent_path().empty() ? "." : path.parent_path(), patch);
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw Error("cannot open " + path.string());
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

inline void write_json(const nlohmann::json& j, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  f << j.dump(2) << "\n";
}

}  // namespace occanykit
