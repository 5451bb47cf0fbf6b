// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <string>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"

namespace occanykit {

/// Axis-aligned cubic voxel grid. Voxel (i,j,k) has its centre at
/// origin + (idx + 0.5) * voxel.
struct VoxelGridSpec {
  Eigen::Vector3d origin = Eigen::Vector3d::Zero();  // minimum corner, metres
  double voxel = 0.4;
  std::array<std::size_t, 3> dims{1, 1, 1};

  std::size_t count() const { return dims[0] * dims[1] * dims[2]; }

  std::size_t index(std::size_t i, std::size_t j, std::size_t k) const {
    return (i * dims[1] + j) * dims[2] + k;
  }

  Eigen::Vector3d center(std::size_t i, std::size_t j, std::size_t k) const {
    return origin + voxel * Eigen::Vector3d(static_cast<double>(i) + 0.5,
                                            static_cast<double>(j) + 0.5,
                                            static_cast<double>(k) + 0.5);
  }

  Eigen::Vector3d center(std::size_t flat) const {
    const std::size_t k = flat % dims[2];
    const std::size_t j = (flat / dims[2]) % dims[1];
    const std::size_t i = flat / (dims[1] * dims[2]);
    return center(i, j, k);
  }

  /// Flat index of the voxel whose cube contains p, or -1 when outside.
  long long containing(const Eigen::Vector3d& p) const {
    std::array<long long, 3> idx{};
    for (int a = 0; a < 3; ++a) {
      const double g = std::floor((p[a] - origin[a]) / voxel);
      if (!(g >= 0.0) || g >= static_cast<double>(dims[static_cast<std::size_t>(a)])) return -1;
      idx[static_cast<std::size_t>(a)] = static_cast<long long>(g);
    }
    return static_cast<long long>(index(static_cast<std::size_t>(idx[0]),
                                        static_cast<std::size_t>(idx[1]),
                                        static_cast<std::size_t>(idx[2])));
  }

  void validate() const {
    if (!(voxel > 0.0) || !std::isfinite(voxel))
      throw ValidationError("voxel grid: voxel size must be positive");
    for (std::size_t d : dims)
      if (d < 1) throw ValidationError("voxel grid: every dimension must be >= 1");
    if (!origin.allFinite()) throw ValidationError("voxel grid: non-finite origin");
  }

  bool operator==(const VoxelGridSpec& o) const {
    return origin == o.origin && voxel == o.voxel && dims == o.dims;
  }

  /// Grid of `dims` voxels whose bounding box is centred on `center`.
  static VoxelGridSpec centered(const Eigen::Vector3d& center, double voxel,
                                std::array<std::size_t, 3> dims) {
    VoxelGridSpec s;
    s.voxel = voxel;
    s.dims = dims;
    for (int a = 0; a < 3; ++a)
      s.origin[a] = center[a] - 0.5 * voxel * static_cast<double>(dims[static_cast<std::size_t>(a)]);
    return s;
  }
};

inline void to_json(nlohmann::json& j, const VoxelGridSpec& s) {
  j = nlohmann::json{{"origin", {s.origin.x(), s.origin.y(), s.origin.z()}},
                     {"voxel", s.voxel},
                     {"dims", {s.dims[0], s.dims[1], s.dims[2]}}};
}

inline void from_json(const nlohmann::json& j, VoxelGridSpec& s) {
  const auto& o = j.at("origin");
  const auto& d = j.at("dims");
  if (!o.is_array() || o.size() != 3 || !d.is_array() || d.size() != 3)
    throw ValidationError("voxel grid: origin and dims must be 3-element arrays");
  s.origin = Eigen::Vector3d(o[0].get<double>(), o[1].get<double>(), o[2].get<double>());
  s.voxel = j.at("voxel").get<double>();
  for (std::size_t a = 0; a < 3; ++a) {
    const auto v = d[a].get<long long>();
    if (v < 1) throw ValidationError("voxel grid: every dimension must be >= 1");
    s.dims[a] = static_cast<std::size_t>(v);
  }
  s.validate();
}

}  // namespace occanykit
