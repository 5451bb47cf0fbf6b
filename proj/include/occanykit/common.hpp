// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace occanykit {

/// Base of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed on-disk data (bad magic, truncated payload, unknown dtype).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Input that violates a documented precondition.
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Geometric configuration from which the requested quantity cannot be recovered.
class DegenerateError : public Error {
 public:
  using Error::Error;
};

/// Numerical blow-up (NaN/Inf) detected during evaluation.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Dense row-major H x W x C array. The workhorse for images, pointmaps,
/// confidence maps, label maps and masks.
template <typename T>
class Raster {
 public:
  Raster() = default;
  Raster(std::size_t height, std::size_t width, std::size_t channels = 1, T fill = T{})
      : height_(height), width_(width), channels_(channels),
        data_(height * width * channels, fill) {}

  std::size_t height() const { return height_; }
  std::size_t width() const { return width_; }
  std::size_t channels() const { return channels_; }
  std::size_t pixels() const { return height_ * width_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T& operator()(std::size_t y, std::size_t x, std::size_t c = 0) {
    return data_[(y * width_ + x) * channels_ + c];
  }
  const T& operator()(std::size_t y, std::size_t x, std::size_t c = 0) const {
    return data_[(y * width_ + x) * channels_ + c];
  }
  T& at_pixel(std::size_t pixel, std::size_t c = 0) { return data_[pixel * channels_ + c]; }
  const T& at_pixel(std::size_t pixel, std::size_t c = 0) const {
    return data_[pixel * channels_ + c];
  }

  std::vector<T>& data() { return data_; }
  const std::vector<T>& data() const { return data_; }

  bool same_shape(const Raster& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }
  template <typename U>
  bool same_extent(const Raster<U>& o) const {
    return height_ == o.height() && width_ == o.width();
  }

  bool operator==(const Raster&) const = default;

 private:
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  std::size_t channels_ = 0;
  std::vector<T> data_;
};

using Image = Raster<double>;        // H x W x 3 in [0,1]
using Pointmap = Raster<double>;     // H x W x 3 metres
using ScalarMap = Raster<double>;    // H x W x 1
using FeatureMap = Raster<double>;   // H' x W' x C
using LabelMap = Raster<std::uint16_t>;
using Mask = Raster<std::uint8_t>;

inline std::string shape_string(std::size_t h, std::size_t w, std::size_t c) {
  return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

template <typename T>
std::string shape_string(const Raster<T>& r) {
  return shape_string(r.height(), r.width(), r.channels());
}

/// Deterministic 64-bit FNV-1a over raw bytes.
inline std::uint64_t fnv1a(const void* bytes, std::size_t n,
                           std::uint64_t seed = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

/// SplitMix64: a tiny counter-based generator whose output is identical on
/// every platform, unlike the std distributions.
class SplitMix64 {
 public:
  explicit SplitMix64(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next() {
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }
  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Integer in [lo, hi].
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next() % span);
  }
  /// Standard normal via Box-Muller.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::uint64_t state_;
};

/// Stateless hash of (seed, a, b, c) to [0,1), for spatially-indexed noise.
inline double hash_uniform(std::uint64_t seed, std::uint64_t a, std::uint64_t b,
                           std::uint64_t c = 0) {
  SplitMix64 g(seed ^ (a * 0x9E3779B97F4A7C15ULL) ^ (b * 0xC2B2AE3D27D4EB4FULL) ^
               (c * 0x165667B19E3779F9ULL));
  g.next();
  return g.uniform();
}

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace occanykit
