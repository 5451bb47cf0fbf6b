// SPDX-License-Identifier: Apache-2.0
//
// Miniature two-stage reconstruction transformer: patch embedding, a shared
// pre-norm encoder with 2D rotary attention, a decoder that cross-attends to
// an append-only scene memory, and pointmap / confidence / feature heads.
//
// Weights live in a ParamStore keyed by dotted names, e.g.
//   embed.weight                    (3*patch^2) x d
//   enc.block0.attn.qkv.weight      d x 3d
//   dec.block1.xattn.kv.weight      d x 2d
//   head.pts.weight                 d x (7*patch^2)
//   head.feat.up0.conv.weight       (9*C) x C
// A checkpoint is a directory holding config.json and one OAKTENS1 file
// (f64, rank 2) per parameter named "<param name>.oak".
#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "occanykit/autodiff.hpp"
#include "occanykit/common.hpp"
#include "occanykit/geometry.hpp"
#include "occanykit/tensorio.hpp"

namespace occanykit {

using ad::Mat;
using ad::Var;

struct ModelConfig {
  std::size_t patch = 8;
  std::size_t d = 64;
  std::size_t heads = 4;
  std::size_t enc_layers = 4;
  std::size_t dec_layers = 2;
  std::size_t feat_channels = 16;
  std::size_t student_layers = 1;
  std::size_t modality_width = 16;  // hidden/out width of the novel-view modality MLPs
  std::size_t mlp_ratio = 4;
  double rope_base = 100.0;

  void validate() const {
    if (patch == 0 || d == 0 || heads == 0 || feat_channels == 0 || modality_width == 0 ||
        mlp_ratio == 0)
      throw ValidationError("model config: sizes must be positive");
    if (d % (2 * heads) != 0)
      throw ValidationError("model config: d must be divisible by 2*heads for 2D RoPE");
  }
  std::size_t head_dim() const { return d / heads; }
  std::size_t feature_height(std::size_t h) const { return 4 * h / patch; }
  std::size_t feature_width(std::size_t w) const { return 4 * w / patch; }

  bool operator==(const ModelConfig&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"patch", c.patch},
                     {"d", c.d},
                     {"heads", c.heads},
                     {"enc_layers", c.enc_layers},
                     {"dec_layers", c.dec_layers},
                     {"feat_channels", c.feat_channels},
                     {"student_layers", c.student_layers},
                     {"modality_width", c.modality_width},
                     {"mlp_ratio", c.mlp_ratio},
                     {"rope_base", c.rope_base}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c = ModelConfig{};
  c.patch = j.value("patch", c.patch);
  c.d = j.value("d", c.d);
  c.heads = j.value("heads", c.heads);
  c.enc_layers = j.value("enc_layers", c.enc_layers);
  c.dec_layers = j.value("dec_layers", c.dec_layers);
  c.feat_channels = j.value("feat_channels", c.feat_channels);
  c.student_layers = j.value("student_layers", c.student_layers);
  c.modality_width = j.value("modality_width", c.modality_width);
  c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.validate();
}

/// Named parameter matrices. Ordered so that iteration (and hence
/// checkpoints and optimiser updates) is deterministic.
class ParamStore {
 public:
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const Mat& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ValidationError("missing parameter '" + name + "'");
    return it->second;
  }
  Mat& get(const std::string& name) {
    return const_cast<Mat&>(std::as_const(*this).get(name));
  }
  void set(const std::string& name, Mat value) { params_[name] = std::move(value); }

  const std::map<std::string, Mat>& all() const { return params_; }
  std::map<std::string, Mat>& all() { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, m] : params_) n += static_cast<std::size_t>(m.size());
    return n;
  }

  /// Copy every parameter under `from` to the same suffix under `to`.
  void copy_prefix(const std::string& from, const std::string& to) {
    std::vector<std::pair<std::string, Mat>> add;
    for (const auto& [name, m] : params_)
      if (name.rfind(from, 0) == 0) add.emplace_back(to + name.substr(from.size()), m);
    for (auto& [name, m] : add) params_[name] = std::move(m);
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& [name, m] : params_) {
      h = fnv1a(name.data(), name.size(), h);
      h = fnv1a(m.data(), sizeof(double) * static_cast<std::size_t>(m.size()), h);
    }
    return h;
  }

  bool operator==(const ParamStore& o) const {
    if (params_.size() != o.params_.size()) return false;
    for (const auto& [name, m] : params_) {
      auto it = o.params_.find(name);
      if (it == o.params_.end() || it->second.rows() != m.rows() || it->second.cols() != m.cols() ||
          it->second != m)
        return false;
    }
    return true;
  }

 private:
  std::map<std::string, Mat> params_;
};

inline void save_checkpoint(const ParamStore& params, const ModelConfig& cfg,
                            const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_json(nlohmann::json(cfg), dir / "config.json");
  for (const auto& [name, m] : params.all()) {
    std::vector<double> v(m.data(), m.data() + m.size());
    write_tensor(TensorBlob({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                            std::move(v)),
                 dir / (name + ".oak"));
  }
}

inline std::pair<ParamStore, ModelConfig> load_checkpoint(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ValidationError("checkpoint directory not found: " + dir.string());
  ModelConfig cfg = read_json(dir / "config.json").get<ModelConfig>();
  ParamStore params;
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".oak") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    const TensorBlob t = read_tensor(f);
    if (t.rank() != 2) throw FormatError(f.string() + ": parameters must be rank 2");
    const auto v = t.as_double();
    Mat m(static_cast<Eigen::Index>(t.shape()[0]), static_cast<Eigen::Index>(t.shape()[1]));
    std::copy(v.begin(), v.end(), m.data());
    params.set(f.stem().string(), std::move(m));
  }
  return {std::move(params), cfg};
}

// ---------------------------------------------------------------------------
// Initialisation

namespace detail {

inline Mat random_matrix(std::uint64_t seed, const std::string& name, Eigen::Index rows,
                         Eigen::Index cols, double stddev) {
  SplitMix64 rng(seed ^ fnv1a(name.data(), name.size()));
  Mat m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * rng.normal();
  return m;
}

inline void init_linear(ParamStore& p, std::uint64_t seed, const std::string& name,
                        std::size_t in, std::size_t out, double gain = 1.0) {
  const auto r = static_cast<Eigen::Index>(in), c = static_cast<Eigen::Index>(out);
  p.set(name + ".weight", random_matrix(seed, name + ".weight", r, c,
                                        gain / std::sqrt(static_cast<double>(in))));
  p.set(name + ".bias", Mat::Zero(1, c));
}

inline void init_norm(ParamStore& p, const std::string& name, std::size_t d) {
  p.set(name + ".gamma", Mat::Ones(1, static_cast<Eigen::Index>(d)));
  p.set(name + ".beta", Mat::Zero(1, static_cast<Eigen::Index>(d)));
}

inline void init_mlp(ParamStore& p, std::uint64_t seed, const std::string& name, std::size_t d,
                     std::size_t hidden, double out_gain) {
  init_linear(p, seed, name + ".fc1", d, hidden);
  init_linear(p, seed, name + ".fc2", hidden, d, out_gain);
}

inline void init_encoder_block(ParamStore& p, std::uint64_t seed, const std::string& name,
                               const ModelConfig& c) {
  init_norm(p, name + ".norm1", c.d);
  init_linear(p, seed, name + ".attn.qkv", c.d, 3 * c.d);
  init_linear(p, seed, name + ".attn.proj", c.d, c.d, 0.5);
  init_norm(p, name + ".norm2", c.d);
  init_mlp(p, seed, name + ".mlp", c.d, c.mlp_ratio * c.d, 0.5);
}

inline void init_decoder_block(ParamStore& p, std::uint64_t seed, const std::string& name,
                               const ModelConfig& c) {
  init_encoder_block(p, seed, name, c);
  init_norm(p, name + ".norm_x", c.d);
  init_norm(p, name + ".norm_mem", c.d);
  init_linear(p, seed, name + ".xattn.q", c.d, c.d);
  init_linear(p, seed, name + ".xattn.kv", c.d, 2 * c.d);
  init_linear(p, seed, name + ".xattn.proj", c.d, c.d, 0.5);
}

}  // namespace detail

/// Fresh reconstruction-stage weights. Identical seeds give identical bits.
inline ParamStore init_scene_model(const ModelConfig& c, std::uint64_t seed) {
  c.validate();
  ParamStore p;
  const std::size_t pp = c.patch * c.patch;
  detail::init_linear(p, seed, "embed", 3 * pp, c.d);
  for (std::size_t i = 0; i < c.enc_layers; ++i)
    detail::init_encoder_block(p, seed, "enc.block" + std::to_string(i), c);
  p.set("dec.nonref_token", detail::random_matrix(seed, "dec.nonref_token", 1,
                                                  static_cast<Eigen::Index>(c.d), 0.5));
  for (std::size_t i = 0; i < c.dec_layers; ++i)
    detail::init_decoder_block(p, seed, "dec.block" + std::to_string(i), c);
  p.set("task.geo", detail::random_matrix(seed, "task.geo", 1, static_cast<Eigen::Index>(c.d), 0.5));
  p.set("task.seg", detail::random_matrix(seed, "task.seg", 1, static_cast<Eigen::Index>(c.d), 0.5));
  detail::init_linear(p, seed, "head.pts", c.d, 7 * pp, 0.1);
  detail::init_linear(p, seed, "head.feat.fc1", c.d, c.d);
  detail::init_linear(p, seed, "head.feat.fc2", c.d, c.feat_channels);
  for (int u = 0; u < 2; ++u) {
    const std::string name = "head.feat.up" + std::to_string(u);
    detail::init_linear(p, seed, name + ".conv", 9 * c.feat_channels, c.feat_channels);
    detail::init_norm(p, name + ".norm", c.feat_channels);
  }
  return p;
}

// ---------------------------------------------------------------------------
// Token grids, memory, graph context

struct GridShape {
  std::size_t rows = 0, cols = 0;
  std::size_t count() const { return rows * cols; }
  bool operator==(const GridShape&) const = default;
};

/// (rows*cols) x d tokens with row-major grid positions.
struct TokenGrid {
  GridShape shape;
  Mat tokens;

  std::size_t count() const { return shape.count(); }
  std::pair<std::size_t, std::size_t> position(std::size_t i) const {
    return {i / shape.cols, i % shape.cols};
  }
};

struct MemoryEntry {
  std::size_t frame_index = 0;
  TokenGrid tokens;
};

/// Append-only stack of per-frame decoder tokens.
class SceneMemory {
 public:
  void append(std::size_t frame_index, TokenGrid tokens) {
    if (!entries_.empty() && tokens.tokens.cols() != entries_.front().tokens.tokens.cols())
      throw ValidationError("scene memory: token width mismatch");
    entries_.push_back({frame_index, std::move(tokens)});
  }
  const std::vector<MemoryEntry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t token_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.tokens.count();
    return n;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& e : entries_) {
      h = fnv1a(&e.frame_index, sizeof(e.frame_index), h);
      h = fnv1a(e.tokens.tokens.data(),
                sizeof(double) * static_cast<std::size_t>(e.tokens.tokens.size()), h);
    }
    return h;
  }

 private:
  std::vector<MemoryEntry> entries_;
};

using Positions = std::vector<std::pair<std::size_t, std::size_t>>;

inline Positions grid_positions(const GridShape& g) {
  Positions p;
  p.reserve(g.count());
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c) p.emplace_back(r, c);
  return p;
}

/// One forward (and optionally backward) evaluation. Parameters are pulled
/// lazily from the store as tape leaves.
class Graph {
 public:
  Graph(const ParamStore& params, const ModelConfig& cfg, bool trainable = false)
      : params_(&params), cfg_(cfg), trainable_(trainable), tape_(std::make_unique<ad::Tape>()) {}

  Var param(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var v = tape_->leaf(params_->get(name), trainable_);
    vars_.emplace(name, v);
    return v;
  }
  Var constant(Mat m) { return tape_->leaf(std::move(m), false); }

  ad::Tape& tape() { return *tape_; }
  const ModelConfig& config() const { return cfg_; }
  const std::map<std::string, Var>& used_params() const { return vars_; }

  /// Gradients of every touched parameter after tape().backward().
  std::map<std::string, Mat> gradients() {
    std::map<std::string, Mat> g;
    for (const auto& [name, v] : vars_)
      if (tape_->has_grad(v)) g.emplace(name, tape_->grad(v));
    return g;
  }

 private:
  const ParamStore* params_;
  ModelConfig cfg_;
  bool trainable_;
  std::unique_ptr<ad::Tape> tape_;
  std::map<std::string, Var> vars_;
};

/// Memory as seen from inside a graph: concatenated tokens plus positions.
struct MemoryVars {
  std::vector<Var> entries;
  Positions positions;

  bool empty() const { return entries.empty(); }
  void append(Var tokens, const GridShape& g) {
    entries.push_back(tokens);
    const auto p = grid_positions(g);
    positions.insert(positions.end(), p.begin(), p.end());
  }
};

inline MemoryVars memory_vars(Graph& g, const SceneMemory& memory) {
  MemoryVars mv;
  for (const auto& e : memory.entries()) mv.append(g.constant(e.tokens.tokens), e.tokens.shape);
  return mv;
}

struct AttentionTrace {
  std::vector<std::pair<std::size_t, std::size_t>> cross_shapes;  // (queries, keys)
};

namespace layers {

/// 2D rotary embedding over a n x d token matrix. Each head's channels are
/// split evenly: the first half rotates with the row index, the second with
/// the column index.
inline std::shared_ptr<const ad::SparseMap> rope_map(const Positions& pos, std::size_t d,
                                                     std::size_t heads, double base) {
  const auto n = static_cast<Eigen::Index>(pos.size());
  auto m = std::make_shared<ad::SparseMap>(n, static_cast<Eigen::Index>(d), n,
                                           static_cast<Eigen::Index>(d));
  const std::size_t dh = d / heads, half = dh / 2, pairs = half / 2;
  for (std::size_t t = 0; t < pos.size(); ++t) {
    for (std::size_t c = 0; c < d; ++c) {
      const std::size_t within = c % dh;
      const std::size_t axis = within / half;  // 0 = row, 1 = column
      const std::size_t k = within % half;
      const std::size_t base_flat = t * d;
      if (axis > 1 || k / 2 >= pairs) {
        m->add(base_flat + c, 1.0);
        m->next();
        continue;
      }
      const std::size_t pair = k / 2;
      const double freq = std::pow(base, -static_cast<double>(2 * pair) / static_cast<double>(half));
      const double p = static_cast<double>(axis == 0 ? pos[t].first : pos[t].second);
      const double cs = std::cos(p * freq), sn = std::sin(p * freq);
      const std::size_t even = c - (k % 2);
      if (k % 2 == 0) {
        m->add(base_flat + even, cs);
        m->add(base_flat + even + 1, -sn);
      } else {
        m->add(base_flat + even, sn);
        m->add(base_flat + even + 1, cs);
      }
      m->next();
    }
  }
  return m;
}

inline Var norm(Graph& g, Var x, const std::string& name) {
  return ad::layer_norm(x, g.param(name + ".gamma"), g.param(name + ".beta"));
}

inline Var dense(Graph& g, Var x, const std::string& name) {
  return ad::linear(x, g.param(name + ".weight"), g.param(name + ".bias"));
}

inline Var mlp(Graph& g, Var x, const std::string& name) {
  return dense(g, ad::gelu(dense(g, x, name + ".fc1")), name + ".fc2");
}

/// Multi-head attention of q against k/v (already projected), with RoPE.
inline Var attend(Graph& g, Var q, Var k, Var v, const Positions& qpos, const Positions& kpos) {
  const auto& c = g.config();
  q = ad::apply_map(q, rope_map(qpos, c.d, c.heads, c.rope_base));
  k = ad::apply_map(k, rope_map(kpos, c.d, c.heads, c.rope_base));
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  for (std::size_t h = 0; h < c.heads; ++h) {
    const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
    Var qh = ad::slice_cols(q, off, dh);
    Var kh = ad::slice_cols(k, off, dh);
    Var vh = ad::slice_cols(v, off, dh);
    Var a = ad::softmax_rows(ad::scale(ad::matmul_nt(qh, kh), inv));
    outs.push_back(ad::matmul(a, vh));
  }
  return ad::concat_cols(outs);
}

inline Var self_attention(Graph& g, Var x, const Positions& pos, const std::string& name) {
  const auto d = static_cast<Eigen::Index>(g.config().d);
  Var qkv = dense(g, x, name + ".qkv");
  Var out = attend(g, ad::slice_cols(qkv, 0, d), ad::slice_cols(qkv, d, d),
                   ad::slice_cols(qkv, 2 * d, d), pos, pos);
  return dense(g, out, name + ".proj");
}

inline Var cross_attention(Graph& g, Var x, Var mem, const Positions& pos, const Positions& mem_pos,
                           const std::string& name) {
  const auto d = static_cast<Eigen::Index>(g.config().d);
  Var q = dense(g, x, name + ".q");
  Var kv = dense(g, mem, name + ".kv");
  Var out = attend(g, q, ad::slice_cols(kv, 0, d), ad::slice_cols(kv, d, d), pos, mem_pos);
  return dense(g, out, name + ".proj");
}

/// Pre-norm block: x + SA(LN(x)), then x + MLP(LN(x)).
inline Var encoder_block(Graph& g, Var x, const Positions& pos, const std::string& name) {
  x = ad::add(x, self_attention(g, norm(g, x, name + ".norm1"), pos, name + ".attn"));
  return ad::add(x, mlp(g, norm(g, x, name + ".norm2"), name + ".mlp"));
}

/// Pre-norm block with a cross-attention step between self-attention and MLP.
inline Var decoder_block(Graph& g, Var x, const Positions& pos, const MemoryVars& memory,
                         const std::string& name, AttentionTrace* trace) {
  x = ad::add(x, self_attention(g, norm(g, x, name + ".norm1"), pos, name + ".attn"));
  if (!memory.empty()) {
    Var mem = memory.entries.size() == 1 ? memory.entries.front() : ad::concat_rows(memory.entries);
    if (trace) trace->cross_shapes.emplace_back(pos.size(), static_cast<std::size_t>(mem.rows()));
    x = ad::add(x, cross_attention(g, norm(g, x, name + ".norm_x"), norm(g, mem, name + ".norm_mem"),
                                   pos, memory.positions, name + ".xattn"));
  }
  return ad::add(x, mlp(g, norm(g, x, name + ".norm2"), name + ".mlp"));
}

/// Scatter per-token patch vectors (ordered py, px, channel) to a pixel
/// raster of shape (H*W) x channels.
inline std::shared_ptr<const ad::SparseMap> unpatchify_map(const GridShape& grid, std::size_t patch,
                                                           std::size_t channels) {
  const std::size_t h = grid.rows * patch, w = grid.cols * patch;
  const std::size_t per = patch * patch * channels;
  auto m = std::make_shared<ad::SparseMap>(static_cast<Eigen::Index>(grid.count()),
                                           static_cast<Eigen::Index>(per),
                                           static_cast<Eigen::Index>(h * w),
                                           static_cast<Eigen::Index>(channels));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        const std::size_t token = (y / patch) * grid.cols + (x / patch);
        const std::size_t inner = ((y % patch) * patch + (x % patch)) * channels + c;
        m->add(token * per + inner, 1.0);
        m->next();
      }
  return m;
}

/// Inverse of unpatchify_map: (H*W) x channels raster to tokens x (patch^2*channels).
inline std::shared_ptr<const ad::SparseMap> patchify_map(const GridShape& grid, std::size_t patch,
                                                         std::size_t channels) {
  const std::size_t w = grid.cols * patch;
  const std::size_t per = patch * patch * channels;
  auto m = std::make_shared<ad::SparseMap>(static_cast<Eigen::Index>(grid.count() * patch * patch),
                                           static_cast<Eigen::Index>(channels),
                                           static_cast<Eigen::Index>(grid.count()),
                                           static_cast<Eigen::Index>(per));
  for (std::size_t t = 0; t < grid.count(); ++t)
    for (std::size_t inner = 0; inner < per; ++inner) {
      const std::size_t c = inner % channels;
      const std::size_t px = (inner / channels) % patch, py = inner / (channels * patch);
      const std::size_t y = (t / grid.cols) * patch + py, x = (t % grid.cols) * patch + px;
      m->add((y * w + x) * channels + c, 1.0);
      m->next();
    }
  return m;
}

/// Bilinear x2 resize of an (h*w) x channels raster (half-pixel centres,
/// edge clamped).
inline std::shared_ptr<const ad::SparseMap> upsample2_map(std::size_t h, std::size_t w,
                                                          std::size_t channels) {
  const std::size_t oh = 2 * h, ow = 2 * w;
  auto m = std::make_shared<ad::SparseMap>(static_cast<Eigen::Index>(h * w),
                                           static_cast<Eigen::Index>(channels),
                                           static_cast<Eigen::Index>(oh * ow),
                                           static_cast<Eigen::Index>(channels));
  auto taps = [](std::size_t o, std::size_t n) {
    const double s = std::clamp((static_cast<double>(o) + 0.5) / 2.0 - 0.5, 0.0,
                                static_cast<double>(n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(s));
    const std::size_t i1 = std::min(i0 + 1, n - 1);
    const double f = s - static_cast<double>(i0);
    return std::tuple{i0, i1, f};
  };
  for (std::size_t y = 0; y < oh; ++y) {
    const auto [y0, y1, fy] = taps(y, h);
    for (std::size_t x = 0; x < ow; ++x) {
      const auto [x0, x1, fx] = taps(x, w);
      for (std::size_t c = 0; c < channels; ++c) {
        const std::array<std::tuple<std::size_t, std::size_t, double>, 4> t{
            std::tuple{y0, x0, (1 - fy) * (1 - fx)}, std::tuple{y0, x1, (1 - fy) * fx},
            std::tuple{y1, x0, fy * (1 - fx)}, std::tuple{y1, x1, fy * fx}};
        for (const auto& [yy, xx, wgt] : t)
          if (wgt != 0.0) m->add((yy * w + xx) * channels + c, wgt);
        m->next();
      }
    }
  }
  return m;
}

/// 3x3 zero-padded neighbourhood gather: (h*w) x c -> (h*w) x 9c.
inline std::shared_ptr<const ad::SparseMap> im2col3_map(std::size_t h, std::size_t w,
                                                        std::size_t channels) {
  auto m = std::make_shared<ad::SparseMap>(static_cast<Eigen::Index>(h * w),
                                           static_cast<Eigen::Index>(channels),
                                           static_cast<Eigen::Index>(h * w),
                                           static_cast<Eigen::Index>(9 * channels));
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx)
          for (std::size_t c = 0; c < channels; ++c) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy >= 0 && xx >= 0 && yy < static_cast<long>(h) && xx < static_cast<long>(w))
              m->add((static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx)) * channels + c, 1.0);
            m->next();
          }
  return m;
}

/// Average pooling of an (h*w) x c raster by an integer factor.
inline std::shared_ptr<const ad::SparseMap> avgpool_map(std::size_t h, std::size_t w,
                                                        std::size_t channels, std::size_t factor) {
  const std::size_t oh = h / factor, ow = w / factor;
  auto m = std::make_shared<ad::SparseMap>(static_cast<Eigen::Index>(h * w),
                                           static_cast<Eigen::Index>(channels),
                                           static_cast<Eigen::Index>(oh * ow),
                                           static_cast<Eigen::Index>(channels));
  const double wgt = 1.0 / static_cast<double>(factor * factor);
  for (std::size_t y = 0; y < oh; ++y)
    for (std::size_t x = 0; x < ow; ++x)
      for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t a = 0; a < factor; ++a)
          for (std::size_t b = 0; b < factor; ++b)
            m->add(((y * factor + a) * w + (x * factor + b)) * channels + c, wgt);
        m->next();
      }
  return m;
}

}  // namespace layers

// ---------------------------------------------------------------------------
// Graph-level model stages

struct HeadVars {
  Var p_global;  // (H*W) x 3
  Var p_local;   // (H*W) x 3
  Var raw_conf;  // (H*W) x 1
  Var conf;      // 1 + exp(raw_conf)
  Var features;  // (H'*W') x C
};

inline GridShape grid_for(std::size_t height, std::size_t width, std::size_t patch) {
  if (patch == 0 || height % patch != 0 || width % patch != 0 || height == 0 || width == 0)
    throw ValidationError("image " + std::to_string(height) + "x" + std::to_string(width) +
                          " not divisible by patch " + std::to_string(patch));
  return {height / patch, width / patch};
}

/// Flatten every non-overlapping patch (ordered py, px, rgb).
inline Mat patch_matrix(const Image& image, std::size_t patch) {
  if (image.channels() != 3) throw ValidationError("image must have 3 channels");
  const GridShape grid = grid_for(image.height(), image.width(), patch);
  Mat m(static_cast<Eigen::Index>(grid.count()), static_cast<Eigen::Index>(3 * patch * patch));
  for (std::size_t t = 0; t < grid.count(); ++t) {
    const std::size_t r = t / grid.cols, c = t % grid.cols;
    Eigen::Index k = 0;
    for (std::size_t py = 0; py < patch; ++py)
      for (std::size_t px = 0; px < patch; ++px)
        for (std::size_t ch = 0; ch < 3; ++ch)
          m(static_cast<Eigen::Index>(t), k++) = image(r * patch + py, c * patch + px, ch);
  }
  return m;
}

inline Var embed_graph(Graph& g, const Image& image) {
  return layers::dense(g, g.constant(patch_matrix(image, g.config().patch)), "embed");
}

inline Var encode_graph(Graph& g, Var tokens, const GridShape& grid, const std::string& prefix,
                        std::size_t layer_count) {
  const Positions pos = grid_positions(grid);
  for (std::size_t i = 0; i < layer_count; ++i)
    tokens = layers::encoder_block(g, tokens, pos, prefix + ".block" + std::to_string(i));
  return tokens;
}

inline Var decode_graph(Graph& g, Var tokens, const GridShape& grid, const MemoryVars& memory,
                        bool is_reference, const std::string& prefix, AttentionTrace* trace = nullptr) {
  if (memory.empty() && !is_reference)
    throw ValidationError("decode: empty memory is only allowed for the reference frame");
  if (!is_reference) tokens = ad::add_row(tokens, g.param(prefix + ".nonref_token"));
  const Positions pos = grid_positions(grid);
  for (std::size_t i = 0; i < g.config().dec_layers; ++i)
    tokens = layers::decoder_block(g, tokens, pos, memory, prefix + ".block" + std::to_string(i), trace);
  return tokens;
}

/// Pointmap/confidence head and feature head. `task_geo`/`task_seg` are
/// 1 x d task tokens added to every token before the respective head.
inline HeadVars heads_graph(Graph& g, Var tokens, const GridShape& grid, const std::string& prefix,
                            Var task_geo, Var task_seg) {
  const auto& c = g.config();
  HeadVars out;
  Var pts = layers::dense(g, ad::add_row(tokens, task_geo), prefix + ".pts");
  Var pix = ad::apply_map(pts, layers::unpatchify_map(grid, c.patch, 7));
  out.p_global = ad::slice_cols(pix, 0, 3);
  out.p_local = ad::slice_cols(pix, 3, 3);
  out.raw_conf = ad::slice_cols(pix, 6, 1);
  out.conf = ad::add_scalar(ad::exp(out.raw_conf), 1.0);

  Var f = layers::mlp(g, ad::add_row(tokens, task_seg), prefix + ".feat");
  std::size_t h = grid.rows, w = grid.cols;
  for (int u = 0; u < 2; ++u) {
    const std::string name = prefix + ".feat.up" + std::to_string(u);
    f = ad::apply_map(f, layers::upsample2_map(h, w, c.feat_channels));
    h *= 2;
    w *= 2;
    f = ad::apply_map(f, layers::im2col3_map(h, w, c.feat_channels));
    f = layers::dense(g, f, name + ".conv");
    f = layers::norm(g, f, name + ".norm");
    f = ad::gelu(f);
  }
  out.features = f;
  return out;
}

// ---------------------------------------------------------------------------
// Value-level operations

struct TaskTokens {
  Mat geo;  // 1 x d
  Mat seg;  // 1 x d
};

inline TaskTokens task_tokens(const ParamStore& p, const std::string& prefix = "task") {
  return {p.get(prefix + ".geo"), p.get(prefix + ".seg")};
}

inline void check_finite(const Mat& m, const char* what) {
  if (!m.allFinite()) throw NumericError(std::string(what) + ": non-finite activations");
}

inline TokenGrid patchify_embed(const Image& image, const ModelConfig& cfg, const ParamStore& params) {
  Graph g(params, cfg);
  const GridShape grid = grid_for(image.height(), image.width(), cfg.patch);
  return {grid, embed_graph(g, image).value()};
}

inline TokenGrid encode_frame(const TokenGrid& grid, const ModelConfig& cfg, const ParamStore& params,
                              const std::string& prefix = "enc") {
  Graph g(params, cfg);
  Var out = encode_graph(g, g.constant(grid.tokens), grid.shape, prefix,
                         prefix == "enc" ? cfg.enc_layers : cfg.student_layers);
  check_finite(out.value(), "encode_frame");
  return {grid.shape, out.value()};
}

struct DecodeResult {
  TokenGrid tokens;
  AttentionTrace trace;
};

inline DecodeResult decode_frame_with_memory(const TokenGrid& grid, const SceneMemory& memory,
                                             bool is_reference, const ModelConfig& cfg,
                                             const ParamStore& params,
                                             const std::string& prefix = "dec") {
  Graph g(params, cfg);
  DecodeResult r;
  Var out = decode_graph(g, g.constant(grid.tokens), grid.shape, memory_vars(g, memory), is_reference,
                         prefix, &r.trace);
  check_finite(out.value(), "decode_frame_with_memory");
  r.tokens = {grid.shape, out.value()};
  return r;
}

struct HeadOutputs {
  Pointmap p_global;
  Pointmap p_local;
  ScalarMap conf;
  FeatureMap features;
};

inline Pointmap raster_from(const Mat& m, std::size_t h, std::size_t w) {
  Pointmap r(h, w, static_cast<std::size_t>(m.cols()));
  std::copy(m.data(), m.data() + m.size(), r.data().begin());
  return r;
}

inline HeadOutputs head_values(const HeadVars& v, std::size_t h, std::size_t w, const ModelConfig& c) {
  HeadOutputs o;
  o.p_global = raster_from(v.p_global.value(), h, w);
  o.p_local = raster_from(v.p_local.value(), h, w);
  o.conf = raster_from(v.conf.value(), h, w);
  o.features = raster_from(v.features.value(), c.feature_height(h), c.feature_width(w));
  return o;
}

inline HeadOutputs apply_prediction_heads(const TokenGrid& decoded, const TaskTokens& task,
                                          const ModelConfig& cfg, const ParamStore& params,
                                          const std::string& prefix = "head") {
  Graph g(params, cfg);
  HeadVars v = heads_graph(g, g.constant(decoded.tokens), decoded.shape, prefix,
                           g.constant(task.geo), g.constant(task.seg));
  for (const Var& x : {v.p_global, v.p_local, v.conf, v.features}) check_finite(x.value(), "heads");
  return head_values(v, decoded.shape.rows * cfg.patch, decoded.shape.cols * cfg.patch, cfg);
}

struct FrameOutput {
  FeatureMap features;
  Pointmap p_global;
  Pointmap p_local;
  ScalarMap conf;
  Pose7 pose;
  bool pose_ok = true;
  std::string pose_error;
};

struct ReconstructionOutput {
  std::vector<FrameOutput> frames;
  SceneMemory memory;
};

/// Graph-level reconstruction used by both inference and training.
struct ReconstructionGraph {
  std::vector<HeadVars> heads;
  std::vector<Var> encoder_tokens;
  std::vector<Var> decoder_tokens;
  MemoryVars memory;
  GridShape grid;
};

inline ReconstructionGraph reconstruct_graph(Graph& g, const std::vector<Image>& frames) {
  if (frames.empty()) throw ValidationError("reconstruct_sequence: empty frame list");
  const auto& c = g.config();
  ReconstructionGraph r;
  r.grid = grid_for(frames.front().height(), frames.front().width(), c.patch);
  Var tg = g.param("task.geo"), ts = g.param("task.seg");
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].height() != frames.front().height() || frames[i].width() != frames.front().width())
      throw ValidationError("reconstruct_sequence: frames differ in resolution");
    Var enc = encode_graph(g, embed_graph(g, frames[i]), r.grid, "enc", c.enc_layers);
    // Frame 1 is decoded memory-free; every later frame reads all earlier
    // decoder tokens, then joins the memory.
    Var dec = decode_graph(g, enc, r.grid, r.memory, i == 0, "dec");
    r.memory.append(dec, r.grid);
    r.encoder_tokens.push_back(enc);
    r.decoder_tokens.push_back(dec);
    r.heads.push_back(heads_graph(g, dec, r.grid, "head", tg, ts));
  }
  return r;
}

inline Mask all_valid(std::size_t h, std::size_t w) { return Mask(h, w, 1, 1); }

inline ReconstructionOutput reconstruct_sequence(const std::vector<Image>& frames, const ModelConfig& cfg,
                                                 const ParamStore& params) {
  Graph g(params, cfg);
  ReconstructionGraph rg = reconstruct_graph(g, frames);
  const std::size_t h = frames.front().height(), w = frames.front().width();
  ReconstructionOutput out;
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const auto& hv = rg.heads[i];
    for (const Var& x : {hv.p_global, hv.p_local, hv.conf, hv.features})
      check_finite(x.value(), "reconstruct_sequence");
    HeadOutputs ho = head_values(hv, h, w, cfg);
    FrameOutput f{std::move(ho.features), std::move(ho.p_global), std::move(ho.p_local),
                  std::move(ho.conf), Pose7::identity(), true, {}};
    try {
      f.pose = register_pointmaps(f.p_local, f.p_global, f.conf, all_valid(h, w)).pose;
    } catch (const DegenerateError& e) {
      f.pose_ok = false;
      f.pose_error = e.what();
    }
    out.frames.push_back(std::move(f));
    out.memory.append(i, TokenGrid{rg.grid, rg.decoder_tokens[i].value()});
  }
  return out;
}

}  // namespace occanykit
