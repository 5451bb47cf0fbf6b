// SPDX-License-Identifier: Apache-2.0
//
// Deterministic synthetic street scenes built from axis-aligned boxes,
// vertical cylinders and a ground plane, with analytic ray casting for
// oracle pointmaps / labels / teacher features and an analytic ground-truth
// occupancy grid.
//
// World frame: z up, ground at z = ground_z; the street runs along +x.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"
#include "occanykit/geometry.hpp"
#include "occanykit/grid_spec.hpp"
#include "occanykit/occupancy.hpp"
#include "occanykit/tensorio.hpp"

namespace occanykit {

struct Box {
  Eigen::Vector3d min, max;
  std::uint16_t label = 0;
};

/// Vertical cylinder standing on [z0, z1].
struct Cylinder {
  Eigen::Vector2d center;
  double radius = 0.1;
  double z0 = 0.0, z1 = 1.0;
  std::uint16_t label = 0;
};

struct SizeRange {
  double lo = 1.0, hi = 2.0;
};

struct SynthSceneSpec {
  std::uint64_t seed = 7;
  Eigen::Vector2d extent_min{-4.0, -16.0};
  Eigen::Vector2d extent_max{44.0, 16.0};
  double ground_z = 0.0;
  double snap = 0.4;             // box faces and pole axes lie on this lattice
  double road_half_width = 6.0;  // |y| below this is street
  double lane_clear = 2.0;       // |y| below this stays empty (camera path)

  std::size_t buildings = 8;
  SizeRange building_footprint{4.0, 10.0};
  SizeRange building_height{3.2, 8.0};
  std::size_t vehicles = 4;
  SizeRange vehicle_length{3.6, 4.8};
  SizeRange vehicle_width{1.6, 2.0};
  SizeRange vehicle_height{1.2, 2.0};
  std::size_t poles = 3;
  double pole_radius = 0.08;
  SizeRange pole_height{3.2, 5.2};

  std::uint16_t ground_class = 1;
  std::uint16_t building_class = 2;
  std::uint16_t vehicle_class = 3;
  std::uint16_t pole_class = 4;

  VoxelGridSpec grid = VoxelGridSpec{Eigen::Vector3d(-4.2, -16.2, -0.2), 0.4, {120, 81, 20}};
  std::size_t max_retries = 200;

  void validate() const {
    if (!(extent_max.array() > extent_min.array()).all()) throw ValidationError("synth: empty extent");
    if (!(snap > 0.0)) throw ValidationError("synth: snap must be positive");
    if (!(lane_clear <= road_half_width)) throw ValidationError("synth: lane_clear exceeds road width");
    grid.validate();
  }
};

void to_json(nlohmann::json& j, const SynthSceneSpec& s);
void from_json(const nlohmann::json& j, SynthSceneSpec& s);

struct Scene {
  SynthSceneSpec spec;
  std::vector<Box> boxes;
  std::vector<Cylinder> cylinders;
  VoxelGrid gt;  // analytic ground truth on spec.grid (world frame)
};

// ---------------------------------------------------------------------------
// Ray casting

struct RayHit {
  double t = std::numeric_limits<double>::infinity();
  std::uint16_t label = 0;
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  bool hit() const { return label != 0; }
};

namespace detail {

inline void intersect_box(const Box& b, const Eigen::Vector3d& o, const Eigen::Vector3d& d, RayHit& best) {
  double tn = -std::numeric_limits<double>::infinity(), tf = std::numeric_limits<double>::infinity();
  int axis = -1;
  double sign = 0.0;
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-300) {
      if (o[a] < b.min[a] || o[a] > b.max[a]) return;
      continue;
    }
    double t1 = (b.min[a] - o[a]) / d[a], t2 = (b.max[a] - o[a]) / d[a];
    double s = -1.0;
    if (t1 > t2) {
      std::swap(t1, t2);
      s = 1.0;
    }
    if (t1 > tn) {
      tn = t1;
      axis = a;
      sign = s;
    }
    tf = std::min(tf, t2);
  }
  if (axis < 0 || tn > tf || tn <= 1e-9 || tn >= best.t) return;
  best.t = tn;
  best.label = b.label;
  best.normal = Eigen::Vector3d::Zero();
  best.normal[axis] = sign;
}

inline void intersect_cylinder(const Cylinder& c, const Eigen::Vector3d& o, const Eigen::Vector3d& d,
                               RayHit& best) {
  const double ox = o.x() - c.center.x(), oy = o.y() - c.center.y();
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a > 1e-300) {
    const double b = 2.0 * (ox * d.x() + oy * d.y());
    const double cc = ox * ox + oy * oy - c.radius * c.radius;
    const double disc = b * b - 4.0 * a * cc;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      const double t = (-b - sq) / (2.0 * a);
      const double z = o.z() + t * d.z();
      if (t > 1e-9 && t < best.t && z >= c.z0 && z <= c.z1) {
        best.t = t;
        best.label = c.label;
        best.normal = Eigen::Vector3d(ox + t * d.x(), oy + t * d.y(), 0.0).normalized();
      }
    }
  }
  // Top cap.
  if (std::abs(d.z()) > 1e-300) {
    const double t = (c.z1 - o.z()) / d.z();
    if (t > 1e-9 && t < best.t) {
      const double x = ox + t * d.x(), y = oy + t * d.y();
      if (x * x + y * y <= c.radius * c.radius) {
        best.t = t;
        best.label = c.label;
        best.normal = Eigen::Vector3d::UnitZ();
      }
    }
  }
}

}  // namespace detail

/// Nearest intersection along o + t d (t > 0) with every primitive and the ground.
inline RayHit cast_ray(const Scene& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  RayHit best;
  for (const auto& b : s.boxes) detail::intersect_box(b, o, d, best);
  for (const auto& c : s.cylinders) detail::intersect_cylinder(c, o, d, best);
  if (d.z() < 0.0) {
    const double t = (s.spec.ground_z - o.z()) / d.z();
    if (t > 1e-9 && t < best.t) {
      best.t = t;
      best.label = s.spec.ground_class;
      best.normal = Eigen::Vector3d::UnitZ();
    }
  }
  return best;
}

/// True when p lies inside (or on the boundary of) a primitive or the ground
/// layer; returns that primitive's class (objects win over ground).
inline std::uint16_t classify_point(const Scene& s, const Eigen::Vector3d& p, double voxel) {
  const double eps = 1e-6 * s.spec.snap;
  std::uint16_t cls = 0;
  const double dz = p.z() - s.spec.ground_z;
  if (dz >= -0.5 * voxel - eps && dz < 0.5 * voxel - eps) cls = s.spec.ground_class;
  for (const auto& b : s.boxes)
    if ((p.array() >= b.min.array() - eps).all() && (p.array() <= b.max.array() + eps).all()) cls = b.label;
  for (const auto& c : s.cylinders) {
    const double r = std::hypot(p.x() - c.center.x(), p.y() - c.center.y());
    if (r <= c.radius + eps && p.z() >= c.z0 - eps && p.z() <= c.z1 + eps) cls = c.label;
  }
  return cls;
}

/// Analytic ground truth on `spec`, whose coordinates are expressed in the
/// frame `grid_to_world` maps from: a voxel is occupied when its centre lies
/// inside a primitive or in the ground layer.
inline VoxelGrid ground_truth_grid(const Scene& s, const VoxelGridSpec& spec,
                                   const Pose7& grid_to_world = Pose7::identity()) {
  VoxelGrid g(spec);
  g.tau = 0.5;
  for (std::size_t v = 0; v < spec.count(); ++v) {
    const std::uint16_t cls = classify_point(s, grid_to_world * spec.center(v), spec.voxel);
    if (cls != 0) {
      g.mass[v] = 1.0;
      g.occupied[v] = 1;
      g.label[v] = cls;
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Scene generation

namespace detail {

inline double snap_to(double v, double step) { return std::round(v / step) * step; }

inline bool boxes_overlap_2d(const Box& a, const Box& b, double margin) {
  return a.min.x() < b.max.x() + margin && b.min.x() < a.max.x() + margin &&
         a.min.y() < b.max.y() + margin && b.min.y() < a.max.y() + margin;
}

}  // namespace detail

/// Place primitives with a seeded generator. Buildings line both sides of
/// the street, vehicles park along the kerbs, poles stand on the pavement.
inline Scene generate_scene(const SynthSceneSpec& spec) {
  spec.validate();
  Scene scene{spec, {}, {}, {}};
  SplitMix64 rng(spec.seed);
  const double q = spec.snap;
  auto snapped = [&](double lo, double hi) { return detail::snap_to(rng.uniform(lo, hi), q); };
  auto place_box = [&](auto&& make) {
    for (std::size_t attempt = 0; attempt < spec.max_retries; ++attempt) {
      Box b = make();
      if (!(b.max.array() > b.min.array()).all()) continue;
      if (b.min.x() < spec.extent_min.x() || b.max.x() > spec.extent_max.x() ||
          b.min.y() < spec.extent_min.y() || b.max.y() > spec.extent_max.y())
        continue;
      if (b.min.y() < spec.lane_clear && b.max.y() > -spec.lane_clear) continue;
      bool clash = false;
      for (const auto& o : scene.boxes) clash = clash || detail::boxes_overlap_2d(b, o, q);
      for (const auto& c : scene.cylinders)
        clash = clash || (c.center.x() > b.min.x() - q && c.center.x() < b.max.x() + q &&
                          c.center.y() > b.min.y() - q && c.center.y() < b.max.y() + q);
      if (clash) continue;
      scene.boxes.push_back(b);
      return;
    }
    throw ValidationError("synth: primitive placement failed after " + std::to_string(spec.max_retries) +
                          " retries (overcrowded spec)");
  };

  for (std::size_t i = 0; i < spec.buildings; ++i) {
    place_box([&] {
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double w = snapped(spec.building_footprint.lo, spec.building_footprint.hi);
      const double dpt = snapped(spec.building_footprint.lo, spec.building_footprint.hi);
      const double x0 = snapped(spec.extent_min.x(), spec.extent_max.x() - w);
      const double y_near = detail::snap_to(spec.road_half_width + rng.uniform(1.0, 3.0), q);
      Box b;
      b.min = Eigen::Vector3d(x0, side > 0 ? y_near : -y_near - dpt, spec.ground_z);
      b.max = Eigen::Vector3d(x0 + w, side > 0 ? y_near + dpt : -y_near,
                              spec.ground_z + snapped(spec.building_height.lo, spec.building_height.hi));
      b.label = spec.building_class;
      return b;
    });
  }
  for (std::size_t i = 0; i < spec.vehicles; ++i) {
    place_box([&] {
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      const double len = snapped(spec.vehicle_length.lo, spec.vehicle_length.hi);
      const double wid = snapped(spec.vehicle_width.lo, spec.vehicle_width.hi);
      const double x0 = snapped(spec.extent_min.x(), spec.extent_max.x() - len);
      const double y_in = detail::snap_to(rng.uniform(spec.lane_clear, spec.road_half_width - wid), q);
      Box b;
      b.min = Eigen::Vector3d(x0, side > 0 ? y_in : -y_in - wid, spec.ground_z);
      b.max = Eigen::Vector3d(x0 + len, side > 0 ? y_in + wid : -y_in,
                              spec.ground_z + snapped(spec.vehicle_height.lo, spec.vehicle_height.hi));
      b.label = spec.vehicle_class;
      return b;
    });
  }
  for (std::size_t i = 0; i < spec.poles; ++i) {
    bool placed = false;
    for (std::size_t attempt = 0; attempt < spec.max_retries && !placed; ++attempt) {
      const double side = rng.uniform() < 0.5 ? -1.0 : 1.0;
      Cylinder c;
      c.center = Eigen::Vector2d(snapped(spec.extent_min.x() + 1.0, spec.extent_max.x() - 1.0),
                                 side * detail::snap_to(spec.road_half_width + 0.4, q));
      c.radius = spec.pole_radius;
      c.z0 = spec.ground_z;
      c.z1 = spec.ground_z + snapped(spec.pole_height.lo, spec.pole_height.hi);
      c.label = spec.pole_class;
      bool clash = false;
      for (const auto& b : scene.boxes)
        clash = clash || (c.center.x() > b.min.x() - q && c.center.x() < b.max.x() + q &&
                          c.center.y() > b.min.y() - q && c.center.y() < b.max.y() + q);
      for (const auto& o : scene.cylinders) clash = clash || (o.center - c.center).norm() < 2.0 * q;
      if (clash) continue;
      scene.cylinders.push_back(c);
      placed = true;
    }
    if (!placed)
      throw ValidationError("synth: pole placement failed after " + std::to_string(spec.max_retries) +
                            " retries (overcrowded spec)");
  }
  scene.gt = ground_truth_grid(scene, spec.grid);
  return scene;
}

// ---------------------------------------------------------------------------
// Oracle views

/// Camera at `position` looking along world direction `forward` with
/// image y pointing towards world -z. Returns camera-to-world.
inline Pose7 street_camera(const Eigen::Vector3d& position, const Eigen::Vector3d& forward) {
  const Eigen::Vector3d z = forward.normalized();
  Eigen::Vector3d x = z.cross(Eigen::Vector3d::UnitZ());
  if (x.norm() < 1e-9) x = Eigen::Vector3d::UnitX();
  x.normalize();
  const Eigen::Vector3d y = z.cross(x);
  Eigen::Matrix3d r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return Pose7(r, position);
}

struct OracleView {
  Pose7 pose;              // camera-to-world
  Pointmap pointmap;       // H x W x 3, camera frame, zero where invalid
  LabelMap label_map;      // 0 = sky
  Mask valid;
  Image image;             // H x W x 3 in [0,1]
  FeatureMap teacher_features;  // H' x W' x C
  LabelMap feature_labels;      // H' x W', 0xFFFF where the block mixes classes
};

/// Fixed unit embedding of a class, seeded.
inline std::vector<double> class_embedding(std::uint64_t seed, std::uint16_t cls, std::size_t channels) {
  SplitMix64 rng(seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL * (cls + 1ULL));
  std::vector<double> e(channels);
  double n2 = 0.0;
  for (auto& v : e) {
    v = rng.normal();
    n2 += v * v;
  }
  for (auto& v : e) v /= std::sqrt(n2);
  return e;
}

inline Eigen::Vector3d class_color(std::uint16_t cls) {
  switch (cls) {
    case 0: return {0.55, 0.75, 0.95};
    case 1: return {0.35, 0.35, 0.38};
    case 2: return {0.72, 0.56, 0.44};
    case 3: return {0.80, 0.12, 0.10};
    case 4: return {0.90, 0.88, 0.20};
    default: {
      const double h = hash_uniform(cls, 1, 2), s = hash_uniform(cls, 3, 4), v = hash_uniform(cls, 5, 6);
      return {h, s, v};
    }
  }
}

struct OracleOptions {
  std::size_t height = 64, width = 96;
  std::size_t feature_channels = 16;
  std::size_t feature_factor = 2;  // H / H'
  std::uint64_t feature_seed = 11;
  double noise_amplitude = 0.01;
};

inline Eigen::Vector3d pixel_ray(const Intrinsics& k, double u, double v) {
  return {(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0};
}

/// Ray-cast each pose. Camera-frame points are t * (ray with unit z), so
/// the pointmap z equals the hit depth exactly.
inline std::vector<OracleView> render_oracle_views(const Scene& scene, std::span<const Pose7> poses,
                                                   const Intrinsics& k, const OracleOptions& opt) {
  const std::size_t h = opt.height, w = opt.width, ch = opt.feature_channels, f = opt.feature_factor;
  if (f == 0 || h % f != 0 || w % f != 0) throw ValidationError("oracle: feature factor must tile the image");
  k.validate(h, w);
  std::vector<OracleView> views;
  views.reserve(poses.size());
  const Eigen::Vector3d sky = class_color(0);
  const Eigen::Vector3d light = Eigen::Vector3d(0.3, -0.5, 0.8).normalized();
  std::map<std::uint16_t, std::vector<double>> emb_cache;
  auto emb = [&](std::uint16_t cls) -> const std::vector<double>& {
    auto it = emb_cache.find(cls);
    if (it == emb_cache.end()) it = emb_cache.emplace(cls, class_embedding(opt.feature_seed, cls, ch)).first;
    return it->second;
  };
  for (std::size_t vi = 0; vi < poses.size(); ++vi) {
    const Pose7& pose = poses[vi];
    OracleView ov;
    ov.pose = pose;
    ov.pointmap = Pointmap(h, w, 3, 0.0);
    ov.label_map = LabelMap(h, w, 1, 0);
    ov.valid = Mask(h, w, 1, 0);
    ov.image = Image(h, w, 3, 0.0);
    FeatureMap full(h, w, ch, 0.0);
    const Eigen::Matrix3d r = pose.rotation_matrix();
    const Eigen::Vector3d o = pose.translation();
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const Eigen::Vector3d dc = pixel_ray(k, static_cast<double>(x), static_cast<double>(y));
        const RayHit hit = cast_ray(scene, o, r * dc);
        Eigen::Vector3d color = sky;
        if (hit.hit()) {
          ov.valid(y, x) = 1;
          ov.label_map(y, x) = hit.label;
          for (int a = 0; a < 3; ++a) ov.pointmap(y, x, static_cast<std::size_t>(a)) = hit.t * dc[a];
          const double shade = 0.55 + 0.45 * std::abs(hit.normal.dot(light));
          const double fog = 1.0 - std::exp(-hit.t / 80.0);
          color = (1.0 - fog) * shade * class_color(hit.label) + fog * sky;
        }
        for (int a = 0; a < 3; ++a) ov.image(y, x, static_cast<std::size_t>(a)) = std::clamp(color[a], 0.0, 1.0);
        const auto& e = emb(hit.label);
        for (std::size_t c = 0; c < ch; ++c) {
          const double n = 2.0 * hash_uniform(opt.feature_seed ^ 0xA5A5ULL, y * w + x, c, vi) - 1.0;
          full(y, x, c) = e[c] + opt.noise_amplitude * n;
        }
      }
    }
    ov.teacher_features = FeatureMap(h / f, w / f, ch, 0.0);
    ov.feature_labels = LabelMap(h / f, w / f, 1, 0);
    const double inv = 1.0 / static_cast<double>(f * f);
    for (std::size_t y = 0; y < h / f; ++y)
      for (std::size_t x = 0; x < w / f; ++x) {
        const std::uint16_t first = ov.label_map(y * f, x * f);
        bool pure = true;
        for (std::size_t a = 0; a < f; ++a)
          for (std::size_t b = 0; b < f; ++b) {
            pure = pure && ov.label_map(y * f + a, x * f + b) == first;
            for (std::size_t c = 0; c < ch; ++c)
              ov.teacher_features(y, x, c) += inv * full(y * f + a, x * f + b, c);
          }
        ov.feature_labels(y, x) = pure ? first : std::uint16_t{0xFFFF};
      }
    views.push_back(std::move(ov));
  }
  return views;
}

/// Voxels (of `spec`, in the frame `grid_to_world` maps from) containing at
/// least one ray hit from the given cameras.
inline std::vector<std::uint8_t> surface_hit_mask(const Scene& scene, std::span<const Pose7> poses,
                                                  const Intrinsics& k, std::size_t h, std::size_t w,
                                                  const VoxelGridSpec& spec,
                                                  const Pose7& grid_to_world = Pose7::identity()) {
  std::vector<std::uint8_t> mask(spec.count(), 0);
  const Pose7 world_to_grid = grid_to_world.inverse();
  for (const auto& pose : poses) {
    const Eigen::Matrix3d r = pose.rotation_matrix();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const Eigen::Vector3d dc = pixel_ray(k, static_cast<double>(x), static_cast<double>(y));
        const Eigen::Vector3d dw = r * dc;
        const RayHit hit = cast_ray(scene, pose.translation(), dw);
        if (!hit.hit()) continue;
        const long long v = spec.containing(world_to_grid * (pose.translation() + hit.t * dw));
        if (v >= 0) mask[static_cast<std::size_t>(v)] = 1;
      }
  }
  return mask;
}

/// Evaluation mask restricted to visible surfaces: every free voxel plus
/// the occupied voxels that some camera actually sees.
inline std::vector<std::uint8_t> visible_known_mask(const VoxelGrid& gt, std::span<const std::uint8_t> hits) {
  std::vector<std::uint8_t> known(gt.count(), 0);
  for (std::size_t v = 0; v < gt.count(); ++v) known[v] = (!gt.occupied[v] || hits[v]) ? 1 : 0;
  return known;
}

// ---------------------------------------------------------------------------
// JSON

inline nlohmann::json range_json(const SizeRange& r) { return nlohmann::json::array({r.lo, r.hi}); }
inline SizeRange range_from(const nlohmann::json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

inline void to_json(nlohmann::json& j, const SynthSceneSpec& s) {
  j = nlohmann::json{{"seed", s.seed},
                     {"extent_min", {s.extent_min.x(), s.extent_min.y()}},
                     {"extent_max", {s.extent_max.x(), s.extent_max.y()}},
                     {"ground_z", s.ground_z},
                     {"snap", s.snap},
                     {"road_half_width", s.road_half_width},
                     {"lane_clear", s.lane_clear},
                     {"buildings", s.buildings},
                     {"building_footprint", range_json(s.building_footprint)},
                     {"building_height", range_json(s.building_height)},
                     {"vehicles", s.vehicles},
                     {"vehicle_length", range_json(s.vehicle_length)},
                     {"vehicle_width", range_json(s.vehicle_width)},
                     {"vehicle_height", range_json(s.vehicle_height)},
                     {"poles", s.poles},
                     {"pole_radius", s.pole_radius},
                     {"pole_height", range_json(s.pole_height)},
                     {"classes", {{"ground", s.ground_class}, {"building", s.building_class},
                                  {"vehicle", s.vehicle_class}, {"pole", s.pole_class}}},
                     {"grid", s.grid},
                     {"max_retries", s.max_retries}};
}

inline void from_json(const nlohmann::json& j, SynthSceneSpec& s) {
  s = SynthSceneSpec{};
  s.seed = j.value("seed", s.seed);
  if (j.contains("extent_min")) s.extent_min = {j["extent_min"][0].get<double>(), j["extent_min"][1].get<double>()};
  if (j.contains("extent_max")) s.extent_max = {j["extent_max"][0].get<double>(), j["extent_max"][1].get<double>()};
  s.ground_z = j.value("ground_z", s.ground_z);
  s.snap = j.value("snap", s.snap);
  s.road_half_width = j.value("road_half_width", s.road_half_width);
  s.lane_clear = j.value("lane_clear", s.lane_clear);
  s.buildings = j.value("buildings", s.buildings);
  if (j.contains("building_footprint")) s.building_footprint = range_from(j["building_footprint"]);
  if (j.contains("building_height")) s.building_height = range_from(j["building_height"]);
  s.vehicles = j.value("vehicles", s.vehicles);
  if (j.contains("vehicle_length")) s.vehicle_length = range_from(j["vehicle_length"]);
  if (j.contains("vehicle_width")) s.vehicle_width = range_from(j["vehicle_width"]);
  if (j.contains("vehicle_height")) s.vehicle_height = range_from(j["vehicle_height"]);
  s.poles = j.value("poles", s.poles);
  s.pole_radius = j.value("pole_radius", s.pole_radius);
  if (j.contains("pole_height")) s.pole_height = range_from(j["pole_height"]);
  if (j.contains("classes")) {
    const auto& c = j["classes"];
    s.ground_class = c.value("ground", s.ground_class);
    s.building_class = c.value("building", s.building_class);
    s.vehicle_class = c.value("vehicle", s.vehicle_class);
    s.pole_class = c.value("pole", s.pole_class);
  }
  if (j.contains("grid")) s.grid = j["grid"].get<VoxelGridSpec>();
  s.max_retries = j.value("max_retries", s.max_retries);
  s.validate();
}

inline void to_json(nlohmann::json& j, const Scene& s) {
  j["spec"] = s.spec;
  j["boxes"] = nlohmann::json::array();
  for (const auto& b : s.boxes)
    j["boxes"].push_back({{"min", {b.min.x(), b.min.y(), b.min.z()}},
                          {"max", {b.max.x(), b.max.y(), b.max.z()}},
                          {"label", b.label}});
  j["cylinders"] = nlohmann::json::array();
  for (const auto& c : s.cylinders)
    j["cylinders"].push_back({{"center", {c.center.x(), c.center.y()}},
                              {"radius", c.radius},
                              {"z0", c.z0},
                              {"z1", c.z1},
                              {"label", c.label}});
}

inline void from_json(const nlohmann::json& j, Scene& s) {
  s.spec = j.at("spec").get<SynthSceneSpec>();
  s.boxes.clear();
  s.cylinders.clear();
  auto v3 = [](const nlohmann::json& a) {
    return Eigen::Vector3d(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>());
  };
  for (const auto& b : j.at("boxes")) s.boxes.push_back({v3(b.at("min")), v3(b.at("max")), b.at("label").get<std::uint16_t>()});
  for (const auto& c : j.at("cylinders"))
    s.cylinders.push_back({Eigen::Vector2d(c.at("center")[0].get<double>(), c.at("center")[1].get<double>()),
                           c.at("radius").get<double>(), c.at("z0").get<double>(), c.at("z1").get<double>(),
                           c.at("label").get<std::uint16_t>()});
  s.gt = ground_truth_grid(s, s.spec.grid);
}

}  // namespace occanykit
