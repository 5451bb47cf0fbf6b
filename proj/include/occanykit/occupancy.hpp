// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <thread>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"
#include "occanykit/geometry.hpp"
#include "occanykit/grid_spec.hpp"
#include "occanykit/tensorio.hpp"

namespace occanykit {

/// Dense occupancy / semantic grid. Arrays are indexed by VoxelGridSpec::index.
struct VoxelGrid {
  VoxelGridSpec spec;
  std::vector<double> mass;
  std::vector<std::uint8_t> occupied;
  std::vector<std::uint16_t> label;  // 0 = free / none
  std::vector<std::uint8_t> known;
  double tau = 0.5;

  VoxelGrid() = default;
  explicit VoxelGrid(const VoxelGridSpec& s)
      : spec(s), mass(s.count(), 0.0), occupied(s.count(), 0), label(s.count(), 0), known(s.count(), 1) {}

  std::size_t count() const { return spec.count(); }
  std::size_t occupied_count() const {
    return static_cast<std::size_t>(std::count(occupied.begin(), occupied.end(), std::uint8_t{1}));
  }
  double total_mass() const {
    double s = 0.0;
    for (double m : mass) s += m;
    return s;
  }
};

struct VoxelizeResult {
  VoxelGrid grid;
  std::size_t skipped_nonfinite = 0;
};

namespace detail {

/// The (up to) 8 voxel centres surrounding p with their trilinear weights.
/// Contributions outside the grid are dropped; zero weights are skipped.
template <typename Fn>
void trilinear_taps(const VoxelGridSpec& s, const Eigen::Vector3d& p, Fn&& emit) {
  std::array<long long, 3> base{};
  std::array<double, 3> frac{};
  for (int a = 0; a < 3; ++a) {
    const double g = (p[a] - s.origin[a]) / s.voxel - 0.5;
    const double fl = std::floor(g);
    base[static_cast<std::size_t>(a)] = static_cast<long long>(fl);
    frac[static_cast<std::size_t>(a)] = g - fl;
  }
  for (int corner = 0; corner < 8; ++corner) {
    double w = 1.0;
    std::array<long long, 3> idx{};
    for (std::size_t a = 0; a < 3; ++a) {
      const bool hi = (corner >> a) & 1;
      idx[a] = base[a] + (hi ? 1 : 0);
      w *= hi ? frac[a] : 1.0 - frac[a];
    }
    if (w == 0.0) continue;
    bool inside = true;
    for (std::size_t a = 0; a < 3; ++a)
      inside = inside && idx[a] >= 0 && idx[a] < static_cast<long long>(s.dims[a]);
    if (!inside) continue;
    emit(s.index(static_cast<std::size_t>(idx[0]), static_cast<std::size_t>(idx[1]),
                 static_cast<std::size_t>(idx[2])),
         w);
  }
}

inline bool finite_box(const VoxelGridSpec& s, const Eigen::Vector3d& p) {
  if (!p.allFinite()) return false;
  // Reject points so far away that the floor() cast could overflow.
  for (int a = 0; a < 3; ++a)
    if (std::abs((p[a] - s.origin[a]) / s.voxel) > 1e15) return false;
  return true;
}

}  // namespace detail

/// Splat every point's weight onto the 8 surrounding voxel centres with
/// trilinear weights. Accumulation follows point order (shards are merged in
/// shard order), so results are reproducible for a fixed thread count.
inline VoxelizeResult voxelize_trilinear(std::span<const Eigen::Vector3d> points,
                                         std::span<const double> weights, const VoxelGridSpec& spec,
                                         std::size_t threads = 1) {
  spec.validate();
  if (!weights.empty() && weights.size() != points.size())
    throw ValidationError("voxelize_trilinear: weights length differs from points length");
  VoxelizeResult r{VoxelGrid(spec), 0};
  auto weight_of = [&](std::size_t i) { return weights.empty() ? 1.0 : weights[i]; };
  for (std::size_t i = 0; i < weights.size(); ++i)
    if (!(weights[i] >= 0.0)) throw ValidationError("voxelize_trilinear: weights must be non-negative");

  auto splat_range = [&](std::size_t begin, std::size_t end, std::vector<double>& mass,
                         std::size_t& skipped) {
    for (std::size_t i = begin; i < end; ++i) {
      if (!detail::finite_box(spec, points[i])) {
        ++skipped;
        continue;
      }
      const double w = weight_of(i);
      detail::trilinear_taps(spec, points[i], [&](std::size_t v, double tw) { mass[v] += w * tw; });
    }
  };

  threads = std::max<std::size_t>(1, std::min(threads, points.size() / 4096 + 1));
  if (threads == 1) {
    splat_range(0, points.size(), r.grid.mass, r.skipped_nonfinite);
    return r;
  }
  std::vector<std::vector<double>> shard_mass(threads, std::vector<double>(spec.count(), 0.0));
  std::vector<std::size_t> shard_skipped(threads, 0);
  std::vector<std::thread> pool;
  const std::size_t chunk = (points.size() + threads - 1) / threads;
  for (std::size_t t = 0; t < threads; ++t) {
    const std::size_t b = std::min(points.size(), t * chunk), e = std::min(points.size(), b + chunk);
    pool.emplace_back([&, t, b, e] { splat_range(b, e, shard_mass[t], shard_skipped[t]); });
  }
  for (auto& th : pool) th.join();
  for (std::size_t t = 0; t < threads; ++t) {
    for (std::size_t v = 0; v < spec.count(); ++v) r.grid.mass[v] += shard_mass[t][v];
    r.skipped_nonfinite += shard_skipped[t];
  }
  return r;
}

/// Threshold the mass into occupancy and label each occupied voxel with the
/// class carrying the most trilinearly-splatted label mass (ties go to the
/// smallest class id). Points labelled 0 contribute no label mass.
inline VoxelGrid assign_voxel_labels(VoxelGrid grid, std::span<const Eigen::Vector3d> points,
                                     std::span<const std::uint16_t> labels, double tau) {
  if (labels.size() != points.size())
    throw ValidationError("assign_voxel_labels: labels length differs from points length");
  if (grid.mass.size() != grid.spec.count()) throw ValidationError("assign_voxel_labels: grid not voxelized");
  grid.tau = tau;
  grid.occupied.assign(grid.count(), 0);
  grid.label.assign(grid.count(), 0);
  for (std::size_t v = 0; v < grid.count(); ++v) grid.occupied[v] = grid.mass[v] >= tau ? 1 : 0;

  std::vector<std::tuple<std::size_t, std::uint16_t, double>> taps;
  taps.reserve(points.size() * 4);
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (labels[i] == 0 || !detail::finite_box(grid.spec, points[i])) continue;
    detail::trilinear_taps(grid.spec, points[i], [&](std::size_t v, double w) {
      if (grid.occupied[v]) taps.emplace_back(v, labels[i], w);
    });
  }
  // Stable sort keeps point order within (voxel, class) for a fixed summation order.
  std::stable_sort(taps.begin(), taps.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
  });
  std::size_t i = 0;
  while (i < taps.size()) {
    const std::size_t v = std::get<0>(taps[i]);
    double best = -1.0;
    std::uint16_t best_label = 0;
    while (i < taps.size() && std::get<0>(taps[i]) == v) {
      const std::uint16_t cls = std::get<1>(taps[i]);
      double m = 0.0;
      while (i < taps.size() && std::get<0>(taps[i]) == v && std::get<1>(taps[i]) == cls) {
        m += std::get<2>(taps[i]);
        ++i;
      }
      if (m > best) {  // strict: earlier (smaller) class wins ties
        best = m;
        best_label = cls;
      }
    }
    grid.label[v] = best > 0.0 ? best_label : std::uint16_t{0};
  }
  return grid;
}

// ---------------------------------------------------------------------------
// Grid files: <dir>/mass.oak (f32), label.oak (u16), known.oak (u8),
// occupied.oak (u8) and grid.json {spec..., tau}.

inline void save_grid(const VoxelGrid& g, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const std::vector<std::size_t> shape{g.spec.dims[0], g.spec.dims[1], g.spec.dims[2]};
  write_tensor(TensorBlob(shape, std::vector<float>(g.mass.begin(), g.mass.end())), dir / "mass.oak");
  write_tensor(TensorBlob(shape, g.label), dir / "label.oak");
  write_tensor(TensorBlob(shape, g.known), dir / "known.oak");
  write_tensor(TensorBlob(shape, g.occupied), dir / "occupied.oak");
  nlohmann::json j = g.spec;
  j["tau"] = g.tau;
  write_json(j, dir / "grid.json");
}

inline VoxelGrid load_grid(const std::filesystem::path& dir) {
  const auto j = read_json(dir / "grid.json");
  VoxelGrid g(j.get<VoxelGridSpec>());
  g.tau = j.value("tau", 0.5);
  const std::vector<std::size_t> shape{g.spec.dims[0], g.spec.dims[1], g.spec.dims[2]};
  auto load = [&](const char* name) {
    TensorBlob t = read_tensor(dir / name);
    if (t.shape() != shape) throw FormatError(std::string(name) + ": shape does not match grid.json");
    return t;
  };
  const auto mass = load("mass.oak").as_double();
  g.mass.assign(mass.begin(), mass.end());
  g.label = load("label.oak").values<std::uint16_t>();
  g.known = load("known.oak").values<std::uint8_t>();
  if (std::filesystem::exists(dir / "occupied.oak")) {
    g.occupied = load("occupied.oak").values<std::uint8_t>();
  } else {
    for (std::size_t v = 0; v < g.count(); ++v) g.occupied[v] = g.mass[v] >= g.tau ? 1 : 0;
  }
  return g;
}

}  // namespace occanykit
