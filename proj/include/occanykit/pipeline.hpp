// SPDX-License-Identifier: Apache-2.0
//
// End-to-end occupancy pipeline:
//   reconstruct -> register -> trajectory line -> TTVA poses -> project /
//   render -> confidence filter -> aggregate -> voxelize -> labels -> metrics
//
// Two backends produce the per-view pointmaps. `model` runs the scene model
// and novel-view renderer; `oracle` injects ground-truth pointmaps from the
// manifest and ray-casts novel views in the synthetic scene.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include <nlohmann/json.hpp>

#include "occanykit/common.hpp"
#include "occanykit/dataset.hpp"
#include "occanykit/geometry.hpp"
#include "occanykit/grid_spec.hpp"
#include "occanykit/metrics.hpp"
#include "occanykit/nvr.hpp"
#include "occanykit/occupancy.hpp"
#include "occanykit/scene_model.hpp"
#include "occanykit/synth.hpp"
#include "occanykit/tensorio.hpp"

namespace occanykit {

/// A module error tagged with the pipeline stage that raised it.
class StageError : public Error {
 public:
  StageError(std::string stage, const std::string& what, bool config)
      : Error(stage + ": " + what), stage_(std::move(stage)), config_(config) {}
  const std::string& stage() const { return stage_; }
  /// True when caused by invalid input or configuration.
  bool config_error() const { return config_; }

 private:
  std::string stage_;
  bool config_;
};

template <typename F>
auto run_stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ValidationError& e) {
    throw StageError(name, e.what(), true);
  } catch (const FormatError& e) {
    throw StageError(name, e.what(), true);
  } catch (const std::exception& e) {
    throw StageError(name, e.what(), false);
  }
}

enum class Backend { model, oracle };

struct PipelineConfig {
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<TTVAConfig> ttva;      // unset: sequence preset, or monocular for one frame
  bool use_ttva = true;
  std::optional<VoxelGridSpec> grid;   // unset: manifest grid, else fitted to the points
  double min_conf = 1.5;
  double tau = 0.5;
  std::filesystem::path out;           // empty: no artifacts
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  Backend backend = Backend::model;
  std::optional<std::filesystem::path> class_mapping;

  void validate() const {
    if (ttva) ttva->validate();
    if (grid) grid->validate();
    if (!std::isfinite(min_conf)) throw ValidationError("min_conf must be finite");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw ValidationError("tau must be positive");
    if (threads == 0) throw ValidationError("threads must be >= 1");
    if (!manifest.empty() && !std::filesystem::exists(manifest))
      throw ValidationError("manifest not found: " + manifest.string());
    if (checkpoint && !std::filesystem::is_directory(*checkpoint))
      throw ValidationError("checkpoint directory not found: " + checkpoint->string());
    if (class_mapping && !std::filesystem::exists(*class_mapping))
      throw ValidationError("class mapping not found: " + class_mapping->string());
  }
};

struct FrameInput {
  Image image;
  std::optional<Pointmap> pointmap;     // camera frame
  std::optional<LabelMap> labels;
  std::optional<FeatureMap> features;
  std::optional<Pose7> pose;            // camera-to-world
};

struct PipelineInputs {
  std::vector<FrameInput> frames;
  std::size_t height = 0, width = 0;
  std::optional<Intrinsics> intrinsics;
  std::optional<VoxelGridSpec> grid;
  std::optional<VoxelGrid> gt;
  std::optional<Scene> scene;
};

inline PipelineInputs load_pipeline_inputs(const SceneManifest& m) {
  PipelineInputs in;
  in.height = m.height;
  in.width = m.width;
  in.intrinsics = m.intrinsics;
  in.grid = m.grid;
  for (const auto& f : m.frames) {
    FrameInput fi;
    fi.image = to_raster<double>(read_tensor(f.image));
    if (fi.image.height() != m.height || fi.image.width() != m.width || fi.image.channels() != 3)
      throw ValidationError("image " + f.image.string() + " has shape " + shape_string(fi.image) +
                            ", manifest resolution is " + std::to_string(m.height) + "x" +
                            std::to_string(m.width) + "x3");
    if (f.pointmap) fi.pointmap = to_raster<double>(read_tensor(*f.pointmap));
    if (f.labels) fi.labels = to_raster<std::uint16_t>(read_tensor(*f.labels));
    if (f.features) fi.features = to_raster<double>(read_tensor(*f.features));
    if (f.pose) fi.pose = Pose7::from_array(*f.pose);
    in.frames.push_back(std::move(fi));
  }
  if (m.gt_grid) in.gt = load_grid(*m.gt_grid);
  if (m.scene) in.scene = read_json(*m.scene).get<Scene>();
  return in;
}

/// In-memory equivalent of loading a written synthetic sequence.
inline PipelineInputs sequence_inputs(const SyntheticSequence& seq) {
  PipelineInputs in;
  in.height = seq.views.front().pointmap.height();
  in.width = seq.views.front().pointmap.width();
  in.intrinsics = seq.intrinsics;
  in.grid = seq.grid;
  in.gt = seq.gt;
  in.scene = seq.scene;
  for (std::size_t i = 0; i < seq.views.size(); ++i) {
    const auto& v = seq.views[i];
    FrameInput f;
    f.image = v.image;
    f.pointmap = v.pointmap;
    f.labels = v.label_map;
    f.features = v.teacher_features;
    f.pose = seq.world_poses[i];
    in.frames.push_back(std::move(f));
  }
  return in;
}

struct ModelBundle {
  ModelConfig config;
  ParamStore params;
};

/// Checkpoint weights, or seeded initial weights when no checkpoint is given.
/// Renderer parameters missing from a checkpoint are initialised from the seed.
inline ModelBundle load_model(const std::optional<std::filesystem::path>& checkpoint, std::uint64_t seed) {
  ModelBundle b;
  if (checkpoint) {
    std::tie(b.params, b.config) = load_checkpoint(*checkpoint);
  } else {
    b.params = init_scene_model(b.config, seed);
  }
  if (!b.params.contains("tok.proj")) init_renderer(b.params, b.config, seed);
  return b;
}

struct PipelineResult {
  VoxelGrid grid;
  std::optional<MetricsReport> report;
  std::vector<std::string> warnings;
  std::vector<Pose7> frame_poses;      // camera-to-reference
  std::vector<bool> frame_pose_ok;
  std::vector<Pose7> novel_poses;      // camera-to-reference
  TrajectoryLine line;
  TTVAConfig ttva;
  Intrinsics intrinsics;
  std::size_t input_points = 0;
  std::size_t novel_points = 0;
  std::size_t filtered_out = 0;
  std::size_t skipped_nonfinite = 0;
};

namespace detail {

/// Confidence assigned to oracle pixels: well above any sensible filter on
/// surfaces, exactly 1 (the floor of 1 + exp(c)) on sky.
inline constexpr double kOracleConf = 10.0;
inline constexpr double kOracleSkyConf = 1.0;

struct ViewPrediction {
  Pointmap global;    // reference frame
  Pointmap local;     // own camera frame
  ScalarMap conf;
  Mask valid;         // pixels carrying a point at all
  LabelMap labels;
  FeatureMap features;  // may be empty
};

inline Mask oracle_valid(const Pointmap& pm) {
  Mask m(pm.height(), pm.width(), 1, 0);
  for (std::size_t i = 0; i < pm.pixels(); ++i) {
    const Eigen::Vector3d p = pixel_point(pm, i);
    m.at_pixel(i) = (p.allFinite() && p.z() > 0.0) ? 1 : 0;
  }
  return m;
}

inline ScalarMap oracle_conf(const Mask& valid) {
  ScalarMap c(valid.height(), valid.width(), 1, kOracleSkyConf);
  for (std::size_t i = 0; i < valid.pixels(); ++i)
    if (valid.at_pixel(i)) c.at_pixel(i) = kOracleConf;
  return c;
}

inline void add_view_points(const ViewPrediction& v, std::size_t feature_offset, double min_conf,
                            PointCloud& cloud, std::size_t& filtered) {
  const std::size_t h = v.global.height(), w = v.global.width();
  const std::size_t fh = v.features.height(), fw = v.features.width();
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      if (!v.valid(y, x)) continue;
      const Eigen::Vector3d p(v.global(y, x, 0), v.global(y, x, 1), v.global(y, x, 2));
      if (!(v.conf(y, x) >= min_conf) || !p.allFinite()) {
        ++filtered;
        continue;
      }
      std::int32_t fi = -1;
      if (fh > 0 && fw > 0)
        fi = static_cast<std::int32_t>(feature_offset + (y * fh / h) * fw + x * fw / w);
      cloud.add(p, v.conf(y, x), fi, v.labels(y, x));
    }
}

inline void append_feature_rows(const FeatureMap& f, Mat& rows) {
  if (f.size() == 0) return;
  const auto c = static_cast<Eigen::Index>(f.channels());
  if (rows.size() != 0 && rows.cols() != c) throw ValidationError("feature channel count differs between frames");
  const Eigen::Index r0 = rows.rows();
  rows.conservativeResize(r0 + static_cast<Eigen::Index>(f.pixels()), c);
  for (std::size_t i = 0; i < f.pixels(); ++i)
    for (Eigen::Index ch = 0; ch < c; ++ch)
      rows(r0 + static_cast<Eigen::Index>(i), ch) = f.at_pixel(i, static_cast<std::size_t>(ch));
}

inline VoxelGridSpec fit_grid(const Points3& pts, double voxel = 0.4, std::size_t max_dim = 256) {
  if (pts.empty()) throw ValidationError("no points to fit a grid to");
  Eigen::Vector3d lo = pts.front(), hi = pts.front();
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  VoxelGridSpec s;
  s.voxel = voxel;
  for (int a = 0; a < 3; ++a) {
    s.origin[a] = std::floor(lo[a] / voxel) * voxel - 0.5 * voxel;
    const auto n = static_cast<std::size_t>(std::ceil((hi[a] - s.origin[a]) / voxel)) + 1;
    s.dims[static_cast<std::size_t>(a)] = std::clamp<std::size_t>(n, 1, max_dim);
  }
  return s;
}

inline std::string indexed(const char* fmt, std::size_t i) {
  char buf[64];
  std::snprintf(buf, sizeof buf, fmt, i);
  return buf;
}

}  // namespace detail

/// Run every stage on in-memory inputs. `model` is required for the model
/// backend and ignored by the oracle backend.
inline PipelineResult run_pipeline(const PipelineInputs& in, const PipelineConfig& cfg,
                                   const ModelBundle* model = nullptr) {
  namespace fs = std::filesystem;
  run_stage("config", [&] {
    cfg.validate();
    if (in.frames.empty()) throw ValidationError("manifest has no frames");
    if (cfg.backend == Backend::model && model == nullptr) throw ValidationError("model backend needs weights");
    if (cfg.backend == Backend::oracle) {
      for (const auto& f : in.frames)
        if (!f.pointmap || !f.pose)
          throw ValidationError("oracle backend needs a pointmap and a pose for every frame");
    }
    return 0;
  });
  PipelineResult res;
  const std::size_t h = in.height, w = in.width, nf = in.frames.size();

  // --- reconstruct + register ---------------------------------------------
  std::vector<detail::ViewPrediction> frames(nf);
  std::optional<ReconstructionOutput> recon;
  run_stage("reconstruct", [&] {
    if (cfg.backend == Backend::model) {
      std::vector<Image> images;
      for (const auto& f : in.frames) images.push_back(f.image);
      recon = reconstruct_sequence(images, model->config, model->params);
      for (std::size_t i = 0; i < nf; ++i) {
        auto& fo = recon->frames[i];
        auto& v = frames[i];
        v.global = fo.p_global;
        v.local = fo.p_local;
        v.conf = fo.conf;
        v.valid = all_valid(h, w);
        v.labels = in.frames[i].labels ? *in.frames[i].labels : LabelMap(h, w, 1, 0);
        v.features = fo.features;
        res.frame_poses.push_back(fo.pose);
        res.frame_pose_ok.push_back(fo.pose_ok);
        if (!fo.pose_ok) res.warnings.push_back("frame " + std::to_string(i) + ": " + fo.pose_error);
      }
    } else {
      const Pose7 ref_inv = in.frames.front().pose->inverse();
      for (std::size_t i = 0; i < nf; ++i) {
        const auto& fi = in.frames[i];
        auto& v = frames[i];
        v.local = *fi.pointmap;
        if (v.local.height() != h || v.local.width() != w || v.local.channels() != 3)
          throw ValidationError("frame " + std::to_string(i) + " pointmap has shape " + shape_string(v.local));
        v.valid = detail::oracle_valid(v.local);
        for (std::size_t p = 0; p < v.valid.pixels(); ++p)
          if (!v.valid.at_pixel(p))
            for (std::size_t a = 0; a < 3; ++a) v.local.at_pixel(p, a) = 0.0;
        v.global = apply_pose(ref_inv * *fi.pose, v.local, &v.valid);
        v.conf = detail::oracle_conf(v.valid);
        v.labels = fi.labels ? *fi.labels : LabelMap(h, w, 1, 0);
        if (fi.features) v.features = *fi.features;
        Pose7 pose = ref_inv * *fi.pose;
        bool ok = true;
        try {
          pose = register_pointmaps(v.local, v.global, v.conf, v.valid).pose;
        } catch (const DegenerateError& e) {
          ok = false;
          res.warnings.push_back("frame " + std::to_string(i) + ": " + e.what());
        }
        res.frame_poses.push_back(pose);
        res.frame_pose_ok.push_back(ok);
      }
    }
    return 0;
  });

  // --- intrinsics, trajectory, TTVA poses -----------------------------------
  res.intrinsics = run_stage("intrinsics", [&] {
    if (in.intrinsics) return *in.intrinsics;
    const double cx = static_cast<double>(w) / 2.0, cy = static_cast<double>(h) / 2.0;
    const double f = estimate_focal(frames.front().local, cx, cy, frames.front().valid);
    return Intrinsics{f, f, cx, cy};
  });
  res.ttva = cfg.ttva ? *cfg.ttva : (nf == 1 ? TTVAConfig::monocular() : TTVAConfig::sequence());
  if (cfg.use_ttva) {
    run_stage("trajectory", [&] {
      std::vector<Pose7> ok;
      for (std::size_t i = 0; i < nf; ++i)
        if (res.frame_pose_ok[i]) ok.push_back(res.frame_poses[i]);
      if (ok.empty()) throw DegenerateError("no frame has a usable pose");
      res.line = fit_trajectory_line(ok);
      return 0;
    });
    res.novel_poses = run_stage("ttva", [&] { return sample_ttva_poses(res.line.origin, res.line.direction, res.ttva); });
  }

  // --- aggregate input views ------------------------------------------------
  PointCloud cloud;
  run_stage("aggregate", [&] {
    std::size_t offset = 0;
    for (auto& v : frames) {
      detail::add_view_points(v, offset, cfg.min_conf, cloud, res.filtered_out);
      detail::append_feature_rows(v.features, cloud.features);
      offset += v.features.pixels();
    }
    res.input_points = cloud.size();
    return 0;
  });

  // --- project / tokenize / render novel views ------------------------------
  std::vector<detail::ViewPrediction> novel;
  if (!res.novel_poses.empty()) {
    run_stage("render", [&] {
      std::size_t fh = h / 2, fw = w / 2;
      if (cfg.backend == Backend::model) {
        fh = model->config.feature_height(h);
        fw = model->config.feature_width(w);
      } else if (frames.front().features.size() != 0) {
        fh = frames.front().features.height();
        fw = frames.front().features.width();
      }
      if (cfg.backend == Backend::model) {
        std::vector<NovelViewBundle> bundles;
        for (const auto& p : res.novel_poses) bundles.push_back(project_cloud(cloud, p, res.intrinsics, h, w, fh, fw));
        const auto outs = render_novel_views(recon->memory, bundles, model->config, model->params);
        for (std::size_t i = 0; i < outs.size(); ++i) {
          detail::ViewPrediction v;
          v.local = outs[i].p_local;
          v.global = apply_pose(res.novel_poses[i], v.local);
          v.conf = outs[i].conf;
          v.valid = all_valid(h, w);
          v.labels = bundles[i].label_proj;
          novel.push_back(std::move(v));
        }
      } else {
        if (!in.scene) throw ValidationError("oracle backend needs the synthetic scene for novel views");
        const Pose7 ref = *in.frames.front().pose;
        std::vector<Pose7> world;
        for (const auto& p : res.novel_poses) world.push_back(ref * p);
        OracleOptions opt;
        opt.height = h;
        opt.width = w;
        opt.feature_factor = h / fh;
        const auto views = render_oracle_views(*in.scene, world, res.intrinsics, opt);
        for (std::size_t i = 0; i < views.size(); ++i) {
          detail::ViewPrediction v;
          v.local = views[i].pointmap;
          v.valid = views[i].valid;
          v.global = apply_pose(res.novel_poses[i], v.local, &v.valid);
          v.conf = detail::oracle_conf(v.valid);
          v.labels = views[i].label_map;
          novel.push_back(std::move(v));
        }
      }
      return 0;
    });
    run_stage("aggregate", [&] {
      const std::size_t before = cloud.size();
      for (const auto& v : novel) detail::add_view_points(v, 0, cfg.min_conf, cloud, res.filtered_out);
      res.novel_points = cloud.size() - before;
      return 0;
    });
  }

  // --- voxelize + labels ----------------------------------------------------
  run_stage("voxelize", [&] {
    VoxelGridSpec spec;
    if (cfg.grid) {
      spec = *cfg.grid;
    } else if (in.grid) {
      spec = *in.grid;
    } else {
      spec = detail::fit_grid(cloud.points);
      res.warnings.push_back("no grid given; fitted a " + std::to_string(spec.dims[0]) + "x" +
                             std::to_string(spec.dims[1]) + "x" + std::to_string(spec.dims[2]) +
                             " grid to the points");
    }
    VoxelizeResult vr = voxelize_trilinear(cloud.points, {}, spec, cfg.threads);
    res.skipped_nonfinite = vr.skipped_nonfinite;
    res.grid = assign_voxel_labels(std::move(vr.grid), cloud.points, cloud.label, cfg.tau);
    return 0;
  });

  // --- metrics --------------------------------------------------------------
  if (in.gt) {
    run_stage("metrics", [&] {
      const ClassMapping mapping =
          cfg.class_mapping ? load_class_mapping(*cfg.class_mapping) : ClassMapping::synthetic_default();
      res.report = evaluate_grids(res.grid, *in.gt, mapping);
      res.grid.known = in.gt->known;
      return 0;
    });
  } else {
    res.warnings.push_back("no ground-truth grid; metrics skipped");
  }

  // --- artifacts ------------------------------------------------------------
  if (!cfg.out.empty()) {
    run_stage("write", [&] {
      fs::create_directories(cfg.out / "frames");
      save_grid(res.grid, cfg.out / "grid");
      for (std::size_t i = 0; i < nf; ++i) {
        const auto& v = frames[i];
        write_tensor(to_tensor<double, float>(v.global), cfg.out / "frames" / detail::indexed("%03zu_global.oak", i));
        write_tensor(to_tensor<double, float>(v.local), cfg.out / "frames" / detail::indexed("%03zu_local.oak", i));
        write_tensor(to_tensor<double, float>(v.conf), cfg.out / "frames" / detail::indexed("%03zu_conf.oak", i));
      }
      if (!novel.empty()) fs::create_directories(cfg.out / "novel");
      for (std::size_t i = 0; i < novel.size(); ++i) {
        write_tensor(to_tensor<double, float>(novel[i].global), cfg.out / "novel" / detail::indexed("%03zu_global.oak", i));
        write_tensor(to_tensor<double, float>(novel[i].conf), cfg.out / "novel" / detail::indexed("%03zu_conf.oak", i));
      }
      nlohmann::json poses;
      poses["intrinsics"] = res.intrinsics;
      poses["frames"] = nlohmann::json::array();
      for (std::size_t i = 0; i < nf; ++i)
        poses["frames"].push_back({{"pose", res.frame_poses[i].to_array()}, {"ok", bool(res.frame_pose_ok[i])}});
      poses["ttva"] = res.ttva;
      poses["ttva_enabled"] = cfg.use_ttva;
      poses["novel"] = nlohmann::json::array();
      for (const auto& p : res.novel_poses) poses["novel"].push_back(p.to_array());
      if (cfg.use_ttva)
        poses["trajectory"] = {{"origin", {res.line.origin.x(), res.line.origin.y(), res.line.origin.z()}},
                               {"direction", {res.line.direction.x(), res.line.direction.y(), res.line.direction.z()}}};
      write_json(poses, cfg.out / "poses.json");
      nlohmann::json summary{{"input_points", res.input_points},
                             {"novel_points", res.novel_points},
                             {"filtered_out", res.filtered_out},
                             {"skipped_nonfinite", res.skipped_nonfinite},
                             {"occupied_voxels", res.grid.occupied_count()},
                             {"min_conf", cfg.min_conf},
                             {"tau", cfg.tau},
                             {"warnings", res.warnings}};
      if (res.report) {
        summary["metrics"] = to_json(*res.report);
        write_json(to_json(*res.report), cfg.out / "report.json");
        std::ofstream(cfg.out / "report.md") << to_markdown(*res.report);
      }
      write_json(summary, cfg.out / "summary.json");
      return 0;
    });
  }
  return res;
}

/// Load the manifest (and weights for the model backend) and run.
inline PipelineResult run_pipeline(const PipelineConfig& cfg) {
  run_stage("config", [&] {
    cfg.validate();
    if (cfg.manifest.empty()) throw ValidationError("no manifest given");
    return 0;
  });
  std::optional<ModelBundle> model;
  if (cfg.backend == Backend::model) model = run_stage("checkpoint", [&] { return load_model(cfg.checkpoint, cfg.seed); });
  const std::size_t patch = model ? model->config.patch : 8;
  const PipelineInputs in = run_stage("manifest", [&] { return load_pipeline_inputs(load_scene_manifest(cfg.manifest, patch)); });
  return run_pipeline(in, cfg, model ? &*model : nullptr);
}

}  // namespace occanykit
