// SPDX-License-Identifier: Apache-2.0
//
// occanykit command-line tool. Exit codes: 0 ok, 2 configuration error,
// 3 runtime error. OCCANYKIT_LOG sets the log level (trace .. off).
#include <cstdlib>
#include <fstream>
#include <random>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "occanykit/pipeline.hpp"
#include "occanykit/training.hpp"

namespace fs = std::filesystem;
using namespace occanykit;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

void setup_logging() {
  spdlog::set_pattern("[%l] %v");
  if (const char* lvl = std::getenv("OCCANYKIT_LOG")) {
    const auto level = spdlog::level::from_str(lvl);
    if (level == spdlog::level::off && std::string(lvl) != "off")
      spdlog::warn("OCCANYKIT_LOG='{}' not recognised; using info", lvl);
    else
      spdlog::set_level(level);
  }
}

TTVAConfig read_ttva(const fs::path& p) { return read_json(p).get<TTVAConfig>(); }
VoxelGridSpec read_grid_spec(const fs::path& p) {
  auto s = read_json(p).get<VoxelGridSpec>();
  s.validate();
  return s;
}

void write_pointmaps(const fs::path& dir, std::size_t i, const Pointmap& global,
                     const Pointmap* local, const ScalarMap& conf, const FeatureMap* features) {
  fs::create_directories(dir);
  const auto name = [&](const char* what) { return dir / detail::indexed((std::string("%03zu_") + what + ".oak").c_str(), i); };
  write_tensor(to_tensor<double, float>(global), name("global"));
  if (local) write_tensor(to_tensor<double, float>(*local), name("local"));
  write_tensor(to_tensor<double, float>(conf), name("conf"));
  if (features && features->size()) write_tensor(to_tensor<double, float>(*features), name("features"));
}

// --- palette / PLY -----------------------------------------------------------

struct Palette {
  std::map<std::uint16_t, std::array<int, 3>> colors;
  std::array<int, 3> fallback{0, 0, 0};
};

Palette load_palette(const std::optional<fs::path>& path) {
  nlohmann::json j;
  if (path) {
    j = read_json(*path);
  } else {
    // Defaults mirror config/palette.json.
    j = nlohmann::json::parse(R"({"unlabeled": [0, 0, 0], "colors": [
      {"id": 1, "rgb": [255, 0, 255]}, {"id": 2, "rgb": [255, 200, 0]}, {"id": 3, "rgb": [100, 150, 245]},
      {"id": 4, "rgb": [255, 240, 150]}, {"id": 5, "rgb": [80, 30, 180]}, {"id": 6, "rgb": [0, 175, 0]},
      {"id": 7, "rgb": [255, 30, 30]}, {"id": 255, "rgb": [128, 128, 128]}]})");
  }
  Palette p;
  if (j.contains("unlabeled")) p.fallback = j.at("unlabeled").get<std::array<int, 3>>();
  for (const auto& c : j.at("colors")) p.colors[c.at("id").get<std::uint16_t>()] = c.at("rgb").get<std::array<int, 3>>();
  return p;
}

std::size_t export_ply(const VoxelGrid& g, const Palette& pal, const fs::path& out) {
  const auto& s = g.spec;
  std::ostringstream body;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.dims[0]; ++i)
    for (std::size_t j = 0; j < s.dims[1]; ++j)
      for (std::size_t k = 0; k < s.dims[2]; ++k) {
        const std::size_t v = s.index(i, j, k);
        if (!g.occupied[v]) continue;
        const auto c = s.center(i, j, k);
        const auto it = pal.colors.find(g.label[v]);
        const auto& rgb = it == pal.colors.end() ? pal.fallback : it->second;
        body << c.x() << ' ' << c.y() << ' ' << c.z() << ' ' << rgb[0] << ' ' << rgb[1] << ' ' << rgb[2] << ' '
             << g.label[v] << '\n';
        ++n;
      }
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream f(out);
  if (!f) throw Error("cannot write " + out.string());
  f << "ply\nformat ascii 1.0\nelement vertex " << n
    << "\nproperty float x\nproperty float y\nproperty float z\n"
       "property uchar red\nproperty uchar green\nproperty uchar blue\nproperty ushort label\nend_header\n"
    << body.str();
  return n;
}

// --- subcommands -------------------------------------------------------------

struct SynthArgs {
  std::uint64_t seed = 7;
  std::size_t frames = 5, height = 64, width = 96;
  double lane_clear = 2.8;
  fs::path out;
};

int cmd_synth(const SynthArgs& a) {
  SynthSceneSpec spec;
  spec.seed = a.seed;
  spec.lane_clear = a.lane_clear;
  SequenceConfig c;
  c.frames = a.frames;
  c.oracle.height = a.height;
  c.oracle.width = a.width;
  const auto seq = make_sequence(generate_scene(spec), c);
  const auto m = write_sequence(seq, a.out);
  spdlog::info("wrote {} frames, {} occupied GT voxels -> {}", a.frames, seq.gt.occupied_count(), m.string());
  return 0;
}

struct ModelArgs {
  fs::path manifest;
  std::optional<fs::path> checkpoint;
  std::optional<fs::path> ttva;
  std::uint64_t seed = 0;
  fs::path out;
};

struct Reconstructed {
  ModelBundle model;
  PipelineInputs inputs;
  ReconstructionOutput out;
};

Reconstructed reconstruct(const ModelArgs& a) {
  Reconstructed r;
  r.model = load_model(a.checkpoint, a.seed);
  r.inputs = load_pipeline_inputs(load_scene_manifest(a.manifest, r.model.config.patch));
  std::vector<Image> images;
  for (const auto& f : r.inputs.frames) images.push_back(f.image);
  r.out = reconstruct_sequence(images, r.model.config, r.model.params);
  return r;
}

int cmd_reconstruct(const ModelArgs& a) {
  const auto r = reconstruct(a);
  nlohmann::json poses = nlohmann::json::array();
  for (std::size_t i = 0; i < r.out.frames.size(); ++i) {
    const auto& f = r.out.frames[i];
    write_pointmaps(a.out / "frames", i, f.p_global, &f.p_local, f.conf, &f.features);
    poses.push_back({{"pose", f.pose.to_array()}, {"ok", f.pose_ok}});
    if (!f.pose_ok) spdlog::warn("frame {}: {}", i, f.pose_error);
  }
  write_json({{"frames", poses}, {"memory_checksum", r.out.memory.checksum()}}, a.out / "poses.json");
  spdlog::info("reconstructed {} frames, memory {} tokens", r.out.frames.size(), r.out.memory.token_count());
  return 0;
}

int cmd_render(const ModelArgs& a) {
  const auto r = reconstruct(a);
  const auto& cfg = r.model.config;
  const std::size_t h = r.inputs.height, w = r.inputs.width;
  std::vector<Pose7> ok;
  for (const auto& f : r.out.frames)
    if (f.pose_ok) ok.push_back(f.pose);
  if (ok.empty()) throw DegenerateError("no frame has a usable pose");
  const TTVAConfig t = a.ttva ? read_ttva(*a.ttva)
                              : (r.out.frames.size() == 1 ? TTVAConfig::monocular() : TTVAConfig::sequence());
  const auto line = fit_trajectory_line(ok);
  const auto poses = sample_ttva_poses(line.origin, line.direction, t);
  Intrinsics k;
  if (r.inputs.intrinsics) {
    k = *r.inputs.intrinsics;
  } else {
    const double f = estimate_focal(r.out.frames.front().p_local, w / 2.0, h / 2.0, all_valid(h, w));
    k = {f, f, w / 2.0, h / 2.0};
  }
  PointCloud cloud;
  std::size_t offset = 0;
  for (const auto& f : r.out.frames) {
    detail::ViewPrediction v{f.p_global, f.p_local, f.conf, all_valid(h, w), LabelMap(h, w, 1, 0), f.features};
    std::size_t dropped = 0;
    detail::add_view_points(v, offset, 0.0, cloud, dropped);
    detail::append_feature_rows(f.features, cloud.features);
    offset += f.features.pixels();
  }
  std::vector<NovelViewBundle> bundles;
  for (const auto& p : poses)
    bundles.push_back(project_cloud(cloud, p, k, h, w, cfg.feature_height(h), cfg.feature_width(w)));
  const auto outs = render_novel_views(r.out.memory, bundles, cfg, r.model.params);
  nlohmann::json pj = nlohmann::json::array();
  for (std::size_t i = 0; i < outs.size(); ++i) {
    write_pointmaps(a.out / "novel", i, apply_pose(poses[i], outs[i].p_local), &outs[i].p_local,
                    outs[i].conf, &outs[i].features);
    pj.push_back(poses[i].to_array());
  }
  write_json({{"ttva", t}, {"intrinsics", k}, {"novel", pj}}, a.out / "poses.json");
  spdlog::info("rendered {} novel views", outs.size());
  return 0;
}

struct VoxelizeArgs {
  fs::path points;
  std::optional<fs::path> labels, grid;
  double tau = 0.5;
  std::size_t threads = 1;
  fs::path out;
};

int cmd_voxelize(const VoxelizeArgs& a) {
  const TensorBlob t = read_tensor(a.points);
  // N x 3 points or an H x W x 3 pointmap.
  if (t.rank() < 2 || t.shape().back() != 3)
    throw ValidationError("points tensor must have a trailing dimension of 3");
  const auto v = t.as_double();
  Points3 pts(t.elements() / 3);
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {v[3 * i], v[3 * i + 1], v[3 * i + 2]};
  std::vector<std::uint16_t> labels(pts.size(), 0);
  if (a.labels) {
    const TensorBlob l = read_tensor(*a.labels);
    if (!l.holds<std::uint16_t>() || l.elements() != pts.size())
      throw ValidationError("labels tensor must be u16 with one entry per point");
    labels = l.values<std::uint16_t>();
  }
  const VoxelGridSpec spec = a.grid ? read_grid_spec(*a.grid) : detail::fit_grid(pts);
  auto vr = voxelize_trilinear(pts, {}, spec, a.threads);
  if (vr.skipped_nonfinite) spdlog::warn("skipped {} non-finite points", vr.skipped_nonfinite);
  const auto g = assign_voxel_labels(std::move(vr.grid), pts, labels, a.tau);
  save_grid(g, a.out);
  spdlog::info("{} points -> {} occupied of {} voxels", pts.size(), g.occupied_count(), g.count());
  return 0;
}

struct EvalArgs {
  fs::path pred, gt;
  std::optional<fs::path> mapping;
  fs::path out;
};

int cmd_eval(const EvalArgs& a) {
  const VoxelGrid pred = load_grid(a.pred), gt = load_grid(a.gt);
  const ClassMapping m = a.mapping ? load_class_mapping(*a.mapping) : ClassMapping::synthetic_default();
  const auto rep = evaluate_grids(pred, gt, m);
  std::cout << to_markdown(rep);
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_json(to_json(rep), a.out / "report.json");
    std::ofstream(a.out / "report.md") << to_markdown(rep);
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, std::size_t points) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  long double pm = 0, fo = 0, di = 0;
  for (std::size_t k = 0; k < points; ++k) {
    const std::size_t n = 6;
    Raster<long double> gt(2, 3, 3);
    for (auto& x : gt.data()) x = u(rng);
    LongVector x0(4 * n);
    for (std::size_t i = 0; i < 3 * n; ++i) x0[Eigen::Index(i)] = gt.data()[i] + (u(rng) > 0 ? 1 : -1) * (0.1 + 0.5 * std::abs(u(rng)));
    for (std::size_t i = 3 * n; i < 4 * n; ++i) x0[Eigen::Index(i)] = u(rng);
    const LossConfig lc{0.2, k % 2 ? ScaleMode::normalized : ScaleMode::metric};
    pm = std::max(pm, gradient_check(
                          [&](const LongVector& x) {
                            Raster<long double> p(2, 3, 3), c(2, 3, 1);
                            for (std::size_t i = 0; i < 3 * n; ++i) p.data()[i] = x[Eigen::Index(i)];
                            for (std::size_t i = 0; i < n; ++i) c.data()[i] = 1.0L + std::exp(x[Eigen::Index(3 * n + i)]);
                            const auto l = loss_pointmap(p, gt, c, Mask(2, 3, 1, 1), lc);
                            LongVector g(x.size());
                            for (std::size_t i = 0; i < 3 * n; ++i) g[Eigen::Index(i)] = l.grad_pred.data()[i];
                            for (std::size_t i = 0; i < n; ++i) g[Eigen::Index(3 * n + i)] = l.grad_raw_conf.data()[i];
                            return std::pair<long double, LongVector>(l.value, std::move(g));
                          },
                          x0));
    Raster<long double> teacher(2, 3, 4), conf(2, 3, 1);
    for (auto& x : teacher.data()) x = u(rng);
    for (auto& x : conf.data()) x = 1.5 + u(rng) * 0.4;
    LongVector y0(24);
    for (auto& x : y0) x = u(rng);
    fo = std::max(fo, gradient_check(
                          [&](const LongVector& x) {
                            Raster<long double> p(2, 3, 4);
                            std::copy(x.begin(), x.end(), p.data().begin());
                            const auto l = loss_forcing(p, teacher, conf);
                            LongVector g(x.size());
                            std::copy(l.grad_features[0].data().begin(), l.grad_features[0].data().end(), g.begin());
                            return std::pair<long double, LongVector>(l.value, std::move(g));
                          },
                          y0));
    using M = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const std::vector<M> tt{M::NullaryExpr(4, 5, [&] { return static_cast<long double>(u(rng)); })};
    di = std::max(di, gradient_check(
                          [&](const LongVector& x) {
                            std::vector<M> s{M(4, 5)};
                            std::copy(x.begin(), x.end(), s[0].data());
                            const auto l = loss_encoder_distill<long double>(s, tt);
                            LongVector g(x.size());
                            std::copy(l.grad_student[0].data(), l.grad_student[0].data() + 20, g.begin());
                            return std::pair<long double, LongVector>(l.value, std::move(g));
                          },
                          y0.head(20)));
  }
  std::cout << "loss_pointmap        max rel err " << static_cast<double>(pm) << '\n'
            << "loss_forcing         max rel err " << static_cast<double>(fo) << '\n'
            << "loss_encoder_distill max rel err " << static_cast<double>(di) << '\n';
  return pm < 1e-4L && fo < 1e-6L && di < 1e-6L ? 0 : kExitRuntime;
}

struct PipelineArgs {
  PipelineConfig cfg;
  std::optional<fs::path> ttva, grid;
  bool no_ttva = false, oracle = false;
};

int cmd_pipeline(PipelineArgs a) {
  if (a.ttva) a.cfg.ttva = read_ttva(*a.ttva);
  if (a.grid) a.cfg.grid = read_grid_spec(*a.grid);
  a.cfg.use_ttva = !a.no_ttva;
  a.cfg.backend = a.oracle ? Backend::oracle : Backend::model;
  const auto r = run_pipeline(a.cfg);
  for (const auto& w : r.warnings) spdlog::warn("{}", w);
  spdlog::info("{} input points, {} novel points over {} views, {} filtered; {} occupied voxels", r.input_points,
               r.novel_points, r.novel_poses.size(), r.filtered_out, r.grid.occupied_count());
  if (r.report) std::cout << to_markdown(*r.report);
  return 0;
}

struct TrainArgs {
  std::size_t steps = 200, frames = 2, height = 32, width = 48;
  double lr = 1e-4;
  std::uint64_t seed = 1, scene_seed = 7;
  fs::path out;
};

int cmd_train(const TrainArgs& a) {
  const ModelConfig c;
  const auto batch = make_training_batch(a.scene_seed, a.frames, a.height, a.width, c);
  TrainConfig tc;
  tc.steps = a.steps;
  tc.lr = a.lr;
  auto r = train_smoke(init_scene_model(c, a.seed), c, batch, tc);
  for (std::size_t i = 0; i < r.history.size(); i += std::max<std::size_t>(1, a.steps / 10))
    spdlog::info("step {:4d} loss {:.4f}", i, r.history[i].total());
  const double before = r.history.front().total(), after = r.history.back().total();
  std::cout << "loss " << before << " -> " << after << " (" << 100.0 * (before - after) / before << "% lower)\n";
  if (!a.out.empty()) {
    init_renderer(r.params, c, a.seed);
    save_checkpoint(r.params, c, a.out);
    spdlog::info("checkpoint -> {}", a.out.string());
  }
  return 0;
}

struct PlyArgs {
  fs::path grid, out;
  std::optional<fs::path> palette;
};

int cmd_export_ply(const PlyArgs& a) {
  const auto n = export_ply(load_grid(a.grid), load_palette(a.palette), a.out);
  spdlog::info("{} voxels -> {}", n, a.out.string());
  return 0;
}

template <typename T>
void opt_path(CLI::App* app, const std::string& flag, std::optional<T>& target, const std::string& help) {
  app->add_option_function<std::string>(flag, [&target](const std::string& s) { target = T(s); }, help);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"occanykit: occupancy from pointmap reconstruction with test-time view augmentation"};
  app.require_subcommand(1);

  SynthArgs synth;
  auto* s = app.add_subcommand("synth", "Generate a synthetic street sequence with oracle data");
  s->add_option("--seed", synth.seed);
  s->add_option("--frames", synth.frames)->check(CLI::PositiveNumber);
  s->add_option("--height", synth.height);
  s->add_option("--width", synth.width);
  s->add_option("--lane-clear", synth.lane_clear);
  s->add_option("--out", synth.out)->required();

  ModelArgs rec, ren;
  auto* r = app.add_subcommand("reconstruct", "Run the scene model on a manifest");
  auto* rn = app.add_subcommand("render", "Reconstruct, then render TTVA novel views");
  for (auto [cmd, args] : {std::pair{r, &rec}, std::pair{rn, &ren}}) {
    cmd->add_option("--manifest", args->manifest)->required()->check(CLI::ExistingFile);
    opt_path(cmd, "--checkpoint", args->checkpoint, "checkpoint directory (default: seeded weights)");
    cmd->add_option("--seed", args->seed);
    cmd->add_option("--out", args->out)->required();
  }
  opt_path(rn, "--ttva-config", ren.ttva, "TTVA JSON");

  VoxelizeArgs vox;
  auto* v = app.add_subcommand("voxelize", "Trilinear voxelization of a points tensor (N x 3 or H x W x 3)");
  v->add_option("--points", vox.points)->required()->check(CLI::ExistingFile);
  opt_path(v, "--labels", vox.labels, "u16 labels tensor, one per point");
  opt_path(v, "--grid", vox.grid, "grid spec JSON");
  v->add_option("--tau", vox.tau);
  v->add_option("--threads", vox.threads)->check(CLI::PositiveNumber);
  v->add_option("--out", vox.out)->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Compare a predicted grid against ground truth");
  e->add_option("--pred", ev.pred)->required()->check(CLI::ExistingDirectory);
  e->add_option("--gt", ev.gt)->required()->check(CLI::ExistingDirectory);
  opt_path(e, "--class-mapping", ev.mapping, "class/super-class mapping JSON");
  e->add_option("--out", ev.out);

  std::uint64_t gc_seed = 0;
  std::size_t gc_points = 20;
  auto* g = app.add_subcommand("gradcheck", "Finite-difference check of the loss gradients");
  g->add_option("--seed", gc_seed);
  g->add_option("--points", gc_points);

  PipelineArgs pa;
  auto* p = app.add_subcommand("pipeline", "End-to-end occupancy prediction");
  p->add_option("--manifest", pa.cfg.manifest)->required();
  opt_path(p, "--checkpoint", pa.cfg.checkpoint, "checkpoint directory (default: seeded weights)");
  opt_path(p, "--ttva-config", pa.ttva, "TTVA JSON");
  opt_path(p, "--grid", pa.grid, "grid spec JSON (default: manifest grid)");
  opt_path(p, "--class-mapping", pa.cfg.class_mapping, "class/super-class mapping JSON");
  p->add_option("--min-conf", pa.cfg.min_conf);
  p->add_option("--tau", pa.cfg.tau);
  p->add_option("--out", pa.cfg.out);
  p->add_flag("--no-ttva", pa.no_ttva);
  p->add_flag("--oracle", pa.oracle, "inject manifest pointmaps instead of running the model");
  p->add_option("--seed", pa.cfg.seed);
  p->add_option("--threads", pa.cfg.threads);

  PlyArgs ply;
  auto* x = app.add_subcommand("export-ply", "Write occupied voxel centres as ASCII PLY");
  x->add_option("--grid", ply.grid)->required()->check(CLI::ExistingDirectory);
  opt_path(x, "--palette", ply.palette, "palette JSON");
  x->add_option("--out", ply.out)->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train-smoke", "Gradient descent on one synthetic batch");
  t->add_option("--steps", tr.steps);
  t->add_option("--lr", tr.lr);
  t->add_option("--seed", tr.seed);
  t->add_option("--scene-seed", tr.scene_seed);
  t->add_option("--out", tr.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? 0 : kExitConfig;
  }

  try {
    if (*s) return cmd_synth(synth);
    if (*r) return cmd_reconstruct(rec);
    if (*rn) return cmd_render(ren);
    if (*v) return cmd_voxelize(vox);
    if (*e) return cmd_eval(ev);
    if (*g) return cmd_gradcheck(gc_seed, gc_points);
    if (*p) return cmd_pipeline(pa);
    if (*x) return cmd_export_ply(ply);
    if (*t) return cmd_train(tr);
  } catch (const StageError& err) {
    spdlog::error("{}", err.what());
    return err.config_error() ? kExitConfig : kExitRuntime;
  } catch (const ValidationError& err) {
    spdlog::error("{}", err.what());
    return kExitConfig;
  } catch (const FormatError& err) {
    spdlog::error("{}", err.what());
    return kExitConfig;
  } catch (const nlohmann::json::exception& err) {
    spdlog::error("malformed JSON: {}", err.what());
    return kExitConfig;
  } catch (const std::exception& err) {
    spdlog::error("{}", err.what());
    return kExitRuntime;
  }
  return 0;
}
