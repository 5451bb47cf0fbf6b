// SPDX-License-Identifier: Apache-2.0
//
// Novel-view rendering: test-time view augmentation (TTVA) pose sampling,
// z-buffered projection of the merged point cloud into novel pinhole views,
// novel-view tokenisation, and the student-encoder / frozen-memory renderer.
//
// Camera convention: x right, y down, z forward. "Up" in the reference
// frame is -y.
#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"
#include "occanykit/geometry.hpp"
#include "occanykit/scene_model.hpp"

namespace occanykit {

struct TTVAConfig {
  std::size_t n_fwd = 10;
  double rho_fwd = 3.0;   // metres between forward samples
  double rho_lat = 2.0;   // metres of lateral shift
  double phi_deg = 60.0;  // yaw offset, degrees
  bool include_zero_lateral = true;

  void validate() const {
    if (n_fwd < 1) throw ValidationError("ttva: n_fwd must be >= 1");
    if (!(rho_fwd > 0.0)) throw ValidationError("ttva: rho_fwd must be > 0");
    if (!(rho_lat >= 0.0)) throw ValidationError("ttva: rho_lat must be >= 0");
    if (!(phi_deg >= 0.0 && phi_deg < 180.0)) throw ValidationError("ttva: phi must lie in [0, 180)");
  }

  /// Sequence / surround-view settings.
  static TTVAConfig sequence() { return {10, 3.0, 2.0, 60.0, true}; }
  /// Monocular setting: denser forward sampling.
  static TTVAConfig monocular() { return {50, 1.0, 2.0, 60.0, true}; }
};

inline void to_json(nlohmann::json& j, const TTVAConfig& c) {
  j = nlohmann::json{{"n_fwd", c.n_fwd},
                     {"rho_fwd", c.rho_fwd},
                     {"rho_lat", c.rho_lat},
                     {"phi_deg", c.phi_deg},
                     {"include_zero_lateral", c.include_zero_lateral}};
}

inline void from_json(const nlohmann::json& j, TTVAConfig& c) {
  const auto n = j.at("n_fwd").get<long long>();
  if (n < 1) throw ValidationError("ttva: n_fwd must be >= 1");
  c.n_fwd = static_cast<std::size_t>(n);
  c.rho_fwd = j.at("rho_fwd").get<double>();
  c.rho_lat = j.at("rho_lat").get<double>();
  c.phi_deg = j.at("phi_deg").get<double>();
  c.include_zero_lateral = j.value("include_zero_lateral", true);
  c.validate();
}

inline const Eigen::Vector3d kUp{0.0, -1.0, 0.0};

/// Camera rotation looking along `forward` with its x axis horizontal.
inline Eigen::Matrix3d look_rotation(const Eigen::Vector3d& forward) {
  const Eigen::Vector3d z = forward.normalized();
  Eigen::Vector3d x = (-kUp).cross(z);
  if (x.norm() < 1e-9) x = Eigen::Vector3d::UnitX();  // looking straight up or down
  x.normalize();
  const Eigen::Vector3d y = z.cross(x);
  Eigen::Matrix3d r;
  r.col(0) = x;
  r.col(1) = y;
  r.col(2) = z;
  return r;
}

/// Novel camera poses along a straight path: n_fwd stations every rho_fwd
/// metres; at each, lateral offsets {0, +rho_lat, -rho_lat} crossed with
/// yaw angles {0, +phi, -phi}. Exact duplicates are dropped. Ordering is
/// station-major, then lateral, then angle.
inline std::vector<Pose7> sample_ttva_poses(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction,
                                            const TTVAConfig& cfg) {
  cfg.validate();
  if (!(direction.norm() > 1e-12) || !direction.allFinite())
    throw ValidationError("ttva: zero direction");
  const Eigen::Vector3d dir = direction.normalized();
  const Eigen::Matrix3d base = look_rotation(dir);
  const Eigen::Vector3d lateral_axis = base.col(0);
  std::vector<double> laterals;
  if (cfg.include_zero_lateral) laterals.push_back(0.0);
  laterals.push_back(cfg.rho_lat);
  laterals.push_back(-cfg.rho_lat);
  const double phi = cfg.phi_deg * std::numbers::pi / 180.0;
  const std::array<double, 3> yaws{0.0, phi, -phi};

  std::vector<Pose7> poses;
  for (std::size_t k = 1; k <= cfg.n_fwd; ++k) {
    const Eigen::Vector3d station = origin + static_cast<double>(k) * cfg.rho_fwd * dir;
    for (double lat : laterals) {
      for (double yaw : yaws) {
        const Eigen::Matrix3d r = Eigen::AngleAxisd(yaw, kUp).toRotationMatrix() * base;
        Pose7 p(r, station + lat * lateral_axis);
        bool dup = false;
        for (const auto& q : poses)
          if (q.approx_equal(p, 1e-9)) {
            dup = true;
            break;
          }
        if (!dup) poses.push_back(p);
      }
    }
  }
  return poses;
}

// ---------------------------------------------------------------------------
// Point cloud projection

/// Merged point cloud in the reference frame with per-point attributes.
struct PointCloud {
  Points3 points;
  std::vector<double> conf;
  std::vector<std::int32_t> feature;  // row into `features`, -1 for none
  std::vector<std::uint16_t> label;
  Mat features;                        // rows x C

  std::size_t size() const { return points.size(); }
  void add(const Eigen::Vector3d& p, double c, std::int32_t f, std::uint16_t l) {
    points.push_back(p);
    conf.push_back(c);
    feature.push_back(f);
    label.push_back(l);
  }
};

inline constexpr double kNearPlane = 0.05;

struct NovelViewBundle {
  Pose7 pose;
  Pointmap xyz;                 // H x W x 3, novel camera frame
  ScalarMap depth;              // H x W
  Raster<std::int32_t> corr;    // H x W, source point index or -1
  ScalarMap conf_proj;          // H x W
  LabelMap label_proj;          // H x W
  Mask valid;                   // H x W
  FeatureMap feat_proj;         // H' x W' x C
  Mask feat_valid;              // H' x W'

  std::size_t valid_count() const {
    std::size_t n = 0;
    for (auto v : valid.data()) n += v ? 1 : 0;
    return n;
  }
};

/// Pixel-centre preserving intrinsics for a raster `scale` times as large.
inline Intrinsics resample_intrinsics(const Intrinsics& k, double scale) {
  return {k.fx * scale, k.fy * scale, (k.cx + 0.5) * scale - 0.5, (k.cy + 0.5) * scale - 0.5};
}

namespace detail {
/// Nearest-pixel projection of a camera-frame point; false when culled.
inline bool project_pixel(const Eigen::Vector3d& pc, const Intrinsics& k, std::size_t h, std::size_t w,
                          std::size_t& row, std::size_t& col) {
  if (!(pc.z() > kNearPlane) || !pc.allFinite()) return false;
  const double u = std::floor(k.fx * pc.x() / pc.z() + k.cx + 0.5);
  const double v = std::floor(k.fy * pc.y() / pc.z() + k.cy + 0.5);
  if (u < 0.0 || v < 0.0 || u >= static_cast<double>(w) || v >= static_cast<double>(h)) return false;
  col = static_cast<std::size_t>(u);
  row = static_cast<std::size_t>(v);
  return true;
}
}  // namespace detail

/// Project the cloud into the camera `pose` (camera-to-reference) with a
/// single-pixel z-buffer. Features are splatted the same way on the
/// feature_h x feature_w grid.
inline NovelViewBundle project_cloud(const PointCloud& cloud, const Pose7& pose, const Intrinsics& k,
                                     std::size_t h, std::size_t w, std::size_t feature_h,
                                     std::size_t feature_w) {
  k.validate(h, w);
  const std::size_t channels = static_cast<std::size_t>(cloud.features.cols());
  NovelViewBundle b;
  b.pose = pose;
  b.xyz = Pointmap(h, w, 3, 0.0);
  b.depth = ScalarMap(h, w, 1, 0.0);
  b.corr = Raster<std::int32_t>(h, w, 1, -1);
  b.conf_proj = ScalarMap(h, w, 1, 0.0);
  b.label_proj = LabelMap(h, w, 1, 0);
  b.valid = Mask(h, w, 1, 0);
  b.feat_proj = FeatureMap(feature_h, feature_w, std::max<std::size_t>(channels, 1), 0.0);
  b.feat_valid = Mask(feature_h, feature_w, 1, 0);

  const Pose7 world_to_cam = pose.inverse();
  const Intrinsics kf = resample_intrinsics(k, static_cast<double>(feature_h) / static_cast<double>(h));
  ScalarMap feat_depth(feature_h, feature_w, 1, 0.0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const Eigen::Vector3d pc = world_to_cam * cloud.points[i];
    std::size_t r = 0, c = 0;
    if (detail::project_pixel(pc, k, h, w, r, c) && (!b.valid(r, c) || pc.z() < b.depth(r, c))) {
      b.valid(r, c) = 1;
      b.depth(r, c) = pc.z();
      for (int a = 0; a < 3; ++a) b.xyz(r, c, static_cast<std::size_t>(a)) = pc[a];
      b.corr(r, c) = static_cast<std::int32_t>(i);
      b.conf_proj(r, c) = cloud.conf[i];
      b.label_proj(r, c) = cloud.label[i];
    }
    const std::int32_t fi = cloud.feature.empty() ? -1 : cloud.feature[i];
    if (fi >= 0 && channels > 0 &&
        detail::project_pixel(pc, kf, feature_h, feature_w, r, c) &&
        (!b.feat_valid(r, c) || pc.z() < feat_depth(r, c))) {
      b.feat_valid(r, c) = 1;
      feat_depth(r, c) = pc.z();
      for (std::size_t ch = 0; ch < channels; ++ch)
        b.feat_proj(r, c, ch) = cloud.features(fi, static_cast<Eigen::Index>(ch));
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Tokenisation and rendering

inline void init_renderer(ParamStore& p, const ModelConfig& c, std::uint64_t seed) {
  const std::size_t pp = c.patch * c.patch;
  const std::size_t fpatch = 4;  // feature-grid pixels per token side
  const std::size_t m = c.modality_width;
  const std::array<std::pair<const char*, std::size_t>, 4> mods{
      std::pair{"xyz", 3 * pp}, std::pair{"conf", pp}, std::pair{"feat", fpatch * fpatch * c.feat_channels},
      std::pair{"valid", pp}};
  for (const auto& [name, in] : mods) {
    detail::init_linear(p, seed, std::string("tok.") + name + ".fc1", in, m);
    detail::init_linear(p, seed, std::string("tok.") + name + ".fc2", m, m);
  }
  detail::init_linear(p, seed, "tok.proj", 4 * m, c.d);
  for (std::size_t i = 0; i < c.student_layers; ++i)
    detail::init_encoder_block(p, seed, "student.block" + std::to_string(i), c);
  // The rendering decoder, heads and task tokens start as copies of the
  // reconstruction ones.
  p.copy_prefix("dec.", "rnd.dec.");
  p.copy_prefix("head.", "rnd.head.");
  p.copy_prefix("task.", "rnd.task.");
}

/// Modality rasters of a bundle patchified onto the token grid:
/// xyz (3p^2), conf (p^2), feat (16C), valid (p^2).
struct ModalityMatrices {
  Mat xyz, conf, feat, valid;
};

inline ModalityMatrices modality_matrices(const NovelViewBundle& b, const ModelConfig& c) {
  const std::size_t h = b.xyz.height(), w = b.xyz.width();
  const GridShape grid = grid_for(h, w, c.patch);
  const std::size_t fh = c.feature_height(h), fw = c.feature_width(w);
  if (b.feat_proj.height() != fh || b.feat_proj.width() != fw || b.feat_proj.channels() != c.feat_channels)
    throw ValidationError("tokenize_novel_view: feature raster " + shape_string(b.feat_proj) +
                          " inconsistent with model");
  auto to_mat = [](const auto& r) {
    Mat m(static_cast<Eigen::Index>(r.pixels()), static_cast<Eigen::Index>(r.channels()));
    for (std::size_t i = 0; i < r.size(); ++i) m.data()[i] = static_cast<double>(r.data()[i]);
    return m;
  };
  Pointmap xyz = b.xyz;
  ScalarMap conf = b.conf_proj;
  for (std::size_t i = 0; i < b.valid.pixels(); ++i)
    if (!b.valid.at_pixel(i)) {
      for (std::size_t a = 0; a < 3; ++a) xyz.at_pixel(i, a) = 0.0;
      conf.at_pixel(i) = 0.0;
    }
  FeatureMap feat = b.feat_proj;
  for (std::size_t i = 0; i < b.feat_valid.pixels(); ++i)
    if (!b.feat_valid.at_pixel(i))
      for (std::size_t ch = 0; ch < feat.channels(); ++ch) feat.at_pixel(i, ch) = 0.0;
  ModalityMatrices m;
  m.xyz = layers::patchify_map(grid, c.patch, 3)->apply(to_mat(xyz));
  m.conf = layers::patchify_map(grid, c.patch, 1)->apply(to_mat(conf));
  m.valid = layers::patchify_map(grid, c.patch, 1)->apply(to_mat(b.valid));
  m.feat = layers::patchify_map(grid, fh / grid.rows, c.feat_channels)->apply(to_mat(feat));
  return m;
}

inline Var tokenize_graph(Graph& g, const NovelViewBundle& b) {
  const ModalityMatrices m = modality_matrices(b, g.config());
  std::vector<Var> parts;
  parts.push_back(layers::mlp(g, g.constant(m.xyz), "tok.xyz"));
  parts.push_back(layers::mlp(g, g.constant(m.conf), "tok.conf"));
  parts.push_back(layers::mlp(g, g.constant(m.feat), "tok.feat"));
  parts.push_back(layers::mlp(g, g.constant(m.valid), "tok.valid"));
  return layers::dense(g, ad::concat_cols(parts), "tok.proj");
}

/// Each modality through its own MLP, concatenated, then linearly projected to d.
inline TokenGrid tokenize_novel_view(const NovelViewBundle& b, const ModelConfig& cfg,
                                     const ParamStore& params) {
  Graph g(params, cfg);
  Var t = tokenize_graph(g, b);
  check_finite(t.value(), "tokenize_novel_view");
  return {grid_for(b.xyz.height(), b.xyz.width(), cfg.patch), t.value()};
}

struct RenderGraph {
  Var student_tokens;
  HeadVars heads;
};

inline RenderGraph render_graph(Graph& g, const MemoryVars& memory, const NovelViewBundle& b) {
  if (memory.empty()) throw ValidationError("render_novel_views: empty scene memory");
  const auto& c = g.config();
  const GridShape grid = grid_for(b.xyz.height(), b.xyz.width(), c.patch);
  RenderGraph r;
  r.student_tokens = encode_graph(g, tokenize_graph(g, b), grid, "student", c.student_layers);
  Var dec = decode_graph(g, r.student_tokens, grid, memory, false, "rnd.dec");
  r.heads = heads_graph(g, dec, grid, "rnd.head", g.param("rnd.task.geo"), g.param("rnd.task.seg"));
  return r;
}

/// Render pointmaps, confidence and features for every bundle against the
/// frozen scene memory.
inline std::vector<HeadOutputs> render_novel_views(const SceneMemory& memory,
                                                   std::span<const NovelViewBundle> bundles,
                                                   const ModelConfig& cfg, const ParamStore& params) {
  if (memory.empty()) throw ValidationError("render_novel_views: empty scene memory");
  std::vector<HeadOutputs> out;
  out.reserve(bundles.size());
  for (const auto& b : bundles) {
    Graph g(params, cfg);
    RenderGraph r = render_graph(g, memory_vars(g, memory), b);
    for (const Var& x : {r.heads.p_global, r.heads.p_local, r.heads.conf, r.heads.features})
      check_finite(x.value(), "render_novel_views");
    out.push_back(head_values(r.heads, b.xyz.height(), b.xyz.width(), cfg));
  }
  return out;
}

}  // namespace occanykit
