// SPDX-License-Identifier: Apache-2.0
//
// Synthetic driving sequences written as scene manifests.
#pragma once

#include <cstdio>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "occanykit/geometry.hpp"
#include "occanykit/grid_spec.hpp"
#include "occanykit/nvr.hpp"
#include "occanykit/occupancy.hpp"
#include "occanykit/synth.hpp"
#include "occanykit/tensorio.hpp"

namespace occanykit {

struct SequenceConfig {
  std::size_t frames = 5;
  double step = 1.2;            // metres between frames along +x
  double start_x = 0.0;
  double camera_height = 1.6;
  OracleOptions oracle{};
  double focal = 48.0;
  // Reference-frame grid: lateral half-width, height above ground, depth.
  double grid_half_width = 16.0;
  double grid_height = 6.4;
  double grid_depth = 40.0;
  // Restrict the GT known mask to surfaces visible from the drivable corridor.
  bool corridor_known_mask = true;
};

struct SyntheticSequence {
  Scene scene;
  std::vector<Pose7> world_poses;  // camera-to-world
  std::vector<OracleView> views;
  Intrinsics intrinsics;
  VoxelGridSpec grid;              // reference frame
  VoxelGrid gt;                    // reference frame
};

inline Intrinsics centered_intrinsics(double focal, std::size_t h, std::size_t w) {
  return {focal, focal, static_cast<double>(w) / 2.0, static_cast<double>(h) / 2.0};
}

/// Grid in the frame of a level street camera at `camera_height` whose
/// voxel centres coincide with the world lattice of spacing `voxel`.
inline VoxelGridSpec street_reference_grid(double camera_height, double half_width, double height,
                                           double depth, double voxel = 0.4) {
  const auto n = [&](double extent) { return static_cast<std::size_t>(std::llround(extent / voxel)); };
  const std::size_t nx = 2 * n(half_width) + 1, ny = n(height), nz = n(depth);
  // Camera y points down: world height z sits at y = camera_height - z.
  const double top_center = camera_height - voxel * static_cast<double>(ny - 1);
  return VoxelGridSpec{Eigen::Vector3d(-voxel * static_cast<double>(n(half_width)) - 0.5 * voxel,
                                       top_center - 0.5 * voxel, -0.5 * voxel),
                       voxel,
                       {nx, ny, nz}};
}

inline std::vector<Pose7> street_poses(const SequenceConfig& c) {
  std::vector<Pose7> poses;
  for (std::size_t i = 0; i < c.frames; ++i)
    poses.push_back(street_camera(
        Eigen::Vector3d(c.start_x + c.step * static_cast<double>(i), 0.0, c.camera_height),
        Eigen::Vector3d::UnitX()));
  return poses;
}

/// Dense camera sweep along the street: three lanes, six headings, every
/// `step` metres over the scene extent.
inline std::vector<Pose7> corridor_poses(const SynthSceneSpec& scene, double camera_height, double step = 1.2) {
  std::vector<Pose7> out;
  for (double x = scene.extent_min.x(); x <= scene.extent_max.x() + 1e-9; x += step)
    for (double y : {-2.4, 0.0, 2.4})
      for (double yaw : {0.0, 60.0, -60.0, 90.0, -90.0, 180.0}) {
        const double a = yaw * std::numbers::pi / 180.0;
        out.push_back(street_camera({x, y, camera_height}, {std::cos(a), std::sin(a), 0.0}));
      }
  return out;
}

inline SyntheticSequence make_sequence(const Scene& scene, const SequenceConfig& c) {
  if (c.frames == 0) throw ValidationError("sequence: need at least one frame");
  SyntheticSequence s;
  s.scene = scene;
  s.world_poses = street_poses(c);
  s.intrinsics = centered_intrinsics(c.focal, c.oracle.height, c.oracle.width);
  s.views = render_oracle_views(scene, s.world_poses, s.intrinsics, c.oracle);
  s.grid = street_reference_grid(c.camera_height, c.grid_half_width, c.grid_height, c.grid_depth,
                                 scene.spec.snap);
  s.gt = ground_truth_grid(scene, s.grid, s.world_poses.front());
  if (c.corridor_known_mask) {
    const auto hits = surface_hit_mask(scene, corridor_poses(scene.spec, c.camera_height), s.intrinsics,
                                       c.oracle.height, c.oracle.width, s.grid, s.world_poses.front());
    s.gt.known = visible_known_mask(s.gt, hits);
  }
  return s;
}

/// Write images, oracle pointmaps, labels, teacher features, the scene and
/// the ground-truth grid next to a manifest.json. Returns the manifest path.
inline std::filesystem::path write_sequence(const SyntheticSequence& s, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "frames");
  nlohmann::json m;
  m["resolution"] = {{"H", s.views.front().pointmap.height()}, {"W", s.views.front().pointmap.width()}};
  m["intrinsics"] = s.intrinsics;
  m["grid"] = s.grid;
  m["frames"] = nlohmann::json::array();
  for (std::size_t i = 0; i < s.views.size(); ++i) {
    const auto& v = s.views[i];
    char stem[32];
    std::snprintf(stem, sizeof stem, "frames/%03zu", i);
    const std::string base(stem);
    write_tensor(to_tensor<double, float>(v.image), dir / (base + "_image.oak"));
    write_tensor(to_tensor<double, float>(v.pointmap), dir / (base + "_pointmap.oak"));
    write_tensor(to_tensor(v.label_map), dir / (base + "_labels.oak"));
    write_tensor(to_tensor<double, float>(v.teacher_features), dir / (base + "_features.oak"));
    m["frames"].push_back({{"image", base + "_image.oak"},
                           {"pointmap", base + "_pointmap.oak"},
                           {"labels", base + "_labels.oak"},
                           {"features", base + "_features.oak"},
                           {"pose", s.world_poses[i].to_array()}});
  }
  write_json(nlohmann::json(s.scene), dir / "scene.json");
  m["scene"] = "scene.json";
  save_grid(s.gt, dir / "gt");
  m["gt_grid"] = "gt";
  write_json(m, dir / "manifest.json");
  return dir / "manifest.json";
}

}  // namespace occanykit
