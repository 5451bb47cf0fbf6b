// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <random>

#include "occanykit/scene_model.hpp"
#include "test_util.hpp"

using namespace occanykit;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.patch = 4;
  c.d = 16;
  c.heads = 2;
  c.enc_layers = 2;
  c.dec_layers = 2;
  c.feat_channels = 4;
  return c;
}

Image random_image(std::uint64_t seed, std::size_t h, std::size_t w) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  Image im(h, w, 3);
  for (auto& v : im.data()) v = u(rng);
  return im;
}

Mat random_tokens(std::uint64_t seed, Eigen::Index n, Eigen::Index d) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0, 1);
  Mat m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

void zero_output_projections(ParamStore& p, const std::string& prefix) {
  for (auto& [name, m] : p.all()) {
    if (name.rfind(prefix, 0) != 0) continue;
    if (name.find(".proj.") != std::string::npos || name.find(".fc2.") != std::string::npos) m.setZero();
  }
}

double max_abs_diff(const Raster<double>& a, const Raster<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
  return m;
}

}  // namespace

TEST(ModelConfig, Validation) {
  ModelConfig c;
  c.d = 60;  // not divisible by 2*4
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_NO_THROW(ModelConfig{}.validate());
  EXPECT_EQ(ModelConfig{}.feature_height(64), 32u);
}

TEST(Patchify, TokenCounts) {
  const ModelConfig c;  // patch 8
  const auto p = init_scene_model(c, 1);
  EXPECT_EQ(patchify_embed(random_image(1, 8, 8), c, p).count(), 1u);
  const auto g = patchify_embed(random_image(1, 64, 32), c, p);
  EXPECT_EQ(g.count(), 32u);
  EXPECT_EQ(g.shape, (GridShape{8, 4}));
  EXPECT_EQ(g.tokens.rows(), 32);
  EXPECT_EQ(g.tokens.cols(), 64);
  EXPECT_THROW(patchify_embed(random_image(1, 60, 32), c, p), ValidationError);
}

TEST(Patchify, ZeroImageZeroBias) {
  const ModelConfig c;
  auto p = init_scene_model(c, 1);
  p.get("embed.bias").setZero();
  const auto g = patchify_embed(Image(16, 16, 3, 0.0), c, p);
  EXPECT_EQ(g.tokens.cwiseAbs().maxCoeff(), 0.0);
}

TEST(Patchify, MatchesHandFlattening) {
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 2);
  const Image im = random_image(3, 8, 12);
  const auto g = patchify_embed(im, c, p);
  // Token at grid (1, 2): pixels rows 4..7, cols 8..11.
  Eigen::RowVectorXd flat(3 * 16);
  Eigen::Index k = 0;
  for (std::size_t y = 4; y < 8; ++y)
    for (std::size_t x = 8; x < 12; ++x)
      for (std::size_t ch = 0; ch < 3; ++ch) flat[k++] = im(y, x, ch);
  const Eigen::RowVectorXd expect = flat * p.get("embed.weight") + p.get("embed.bias");
  EXPECT_LT((g.tokens.row(1 * 3 + 2) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Encoder, ResidualIdentityWithZeroProjections) {
  const ModelConfig c = small_config();
  auto p = init_scene_model(c, 4);
  zero_output_projections(p, "enc.");
  const TokenGrid in{{2, 3}, random_tokens(5, 6, 16)};
  EXPECT_EQ(encode_frame(in, c, p).tokens, in.tokens);
}

TEST(Encoder, DeterministicAndPreservesCount) {
  const ModelConfig c = small_config();
  const auto p1 = init_scene_model(c, 9), p2 = init_scene_model(c, 9);
  EXPECT_TRUE(p1 == p2);
  EXPECT_EQ(p1.checksum(), p2.checksum());
  EXPECT_NE(init_scene_model(c, 10).checksum(), p1.checksum());
  const TokenGrid in{{2, 3}, random_tokens(6, 6, 16)};
  const auto a = encode_frame(in, c, p1), b = encode_frame(in, c, p2);
  EXPECT_EQ(a.tokens, b.tokens);
  EXPECT_EQ(a.count(), 6u);
}

TEST(Encoder, PositionBreaksContentSymmetry) {
  // Tokens 0 and 2 carry identical content on a 1 x 3 grid.
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 11);
  Mat t = random_tokens(12, 3, 16);
  t.row(2) = t.row(0);
  const auto out = encode_frame(TokenGrid{{1, 3}, t}, c, p);
  EXPECT_GT((out.tokens.row(0) - out.tokens.row(2)).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Rope, DotProductDependsOnlyOnOffset) {
  const ModelConfig c = small_config();
  const Positions pa{{0, 0}, {2, 5}}, pb{{3, 1}, {5, 6}};  // same offset (2, 5)
  const Mat x = random_tokens(13, 2, 16);
  const Mat ra = layers::rope_map(pa, c.d, c.heads, c.rope_base)->apply(x);
  const Mat rb = layers::rope_map(pb, c.d, c.heads, c.rope_base)->apply(x);
  const auto dh = static_cast<Eigen::Index>(c.head_dim());
  for (Eigen::Index h = 0; h < 2; ++h) {
    const double da = ra.row(0).segment(h * dh, dh).dot(ra.row(1).segment(h * dh, dh));
    const double db = rb.row(0).segment(h * dh, dh).dot(rb.row(1).segment(h * dh, dh));
    EXPECT_NEAR(da, db, 1e-12);
  }
  // Rotation preserves norms.
  EXPECT_NEAR(ra.row(1).norm(), x.row(1).norm(), 1e-12);
  // Position (0, 0) is the identity.
  EXPECT_LT((ra.row(0) - x.row(0)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Decoder, ResidualIdentityWithZeroProjections) {
  const ModelConfig c = small_config();
  auto p = init_scene_model(c, 14);
  zero_output_projections(p, "dec.");
  SceneMemory mem;
  mem.append(0, TokenGrid{{2, 2}, random_tokens(15, 4, 16)});
  const TokenGrid in{{2, 2}, random_tokens(16, 4, 16)};
  EXPECT_EQ(decode_frame_with_memory(in, mem, true, c, p).tokens.tokens, in.tokens);
  EXPECT_EQ(decode_frame_with_memory(in, SceneMemory{}, true, c, p).tokens.tokens, in.tokens);
}

TEST(Decoder, ReferenceFlagAndErrors) {
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 17);
  SceneMemory mem;
  mem.append(0, TokenGrid{{2, 2}, random_tokens(18, 4, 16)});
  const TokenGrid in{{2, 2}, random_tokens(19, 4, 16)};
  const auto a = decode_frame_with_memory(in, mem, true, c, p).tokens.tokens;
  const auto b = decode_frame_with_memory(in, mem, false, c, p).tokens.tokens;
  EXPECT_GT((a - b).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(decode_frame_with_memory(in, SceneMemory{}, false, c, p), ValidationError);
}

TEST(Decoder, CrossAttentionShape) {
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 20);
  SceneMemory mem;
  for (std::size_t k = 0; k < 3; ++k) mem.append(k, TokenGrid{{2, 3}, random_tokens(21 + k, 6, 16)});
  const auto r = decode_frame_with_memory(TokenGrid{{2, 3}, random_tokens(30, 6, 16)}, mem, false, c, p);
  ASSERT_EQ(r.trace.cross_shapes.size(), c.dec_layers);
  for (const auto& [q, k] : r.trace.cross_shapes) {
    EXPECT_EQ(q, 6u);
    EXPECT_EQ(k, 3u * 6u);
  }
}

TEST(Heads, ShapesAndConfidence) {
  const ModelConfig c;  // patch 8, C 16
  const auto p = init_scene_model(c, 22);
  const TokenGrid dec{{8, 4}, random_tokens(23, 32, 64)};
  const auto h = apply_prediction_heads(dec, task_tokens(p), c, p);
  EXPECT_EQ(h.features.height(), 32u);
  EXPECT_EQ(h.features.width(), 16u);
  EXPECT_EQ(h.features.channels(), 16u);
  EXPECT_EQ(h.p_global.height(), 64u);
  EXPECT_EQ(h.p_global.width(), 32u);
  for (double v : h.conf.data()) EXPECT_GT(v, 1.0);
}

TEST(Heads, SwappingTaskTokensChangesBoth) {
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 24);
  const TokenGrid dec{{2, 2}, random_tokens(25, 4, 16)};
  const TaskTokens t = task_tokens(p);
  const auto a = apply_prediction_heads(dec, t, c, p);
  const auto b = apply_prediction_heads(dec, TaskTokens{t.seg, t.geo}, c, p);
  EXPECT_GT(max_abs_diff(a.p_global, b.p_global), 0.0);
  EXPECT_GT(max_abs_diff(a.features, b.features), 0.0);
  EXPECT_NE(t.geo, t.seg);
}

TEST(Reconstruct, MemoryGrowsOneEntryPerFrame) {
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 26);
  std::vector<Image> frames;
  for (std::uint64_t i = 0; i < 4; ++i) frames.push_back(random_image(40 + i, 8, 12));
  const auto out = reconstruct_sequence(frames, c, p);
  EXPECT_EQ(out.memory.size(), 4u);
  EXPECT_EQ(out.memory.token_count(), 4u * 2u * 3u);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_EQ(out.memory.entries()[i].frame_index, i);

  // Prefix sequences reproduce earlier memory entries exactly (append-only).
  const std::vector<Image> prefix(frames.begin(), frames.begin() + 2);
  const auto part = reconstruct_sequence(prefix, c, p);
  for (std::size_t i = 0; i < 2; ++i)
    EXPECT_EQ(part.memory.entries()[i].tokens.tokens, out.memory.entries()[i].tokens.tokens);

  for (const auto& f : out.frames) {
    for (double v : f.conf.data()) EXPECT_GT(v, 1.0);
    for (double v : f.p_global.data()) EXPECT_TRUE(std::isfinite(v));
    for (double v : f.features.data()) EXPECT_TRUE(std::isfinite(v));
    if (f.pose_ok) {
      EXPECT_NEAR(f.pose.rotation().norm(), 1.0, 1e-9);
      EXPECT_GE(f.pose.rotation().w(), 0.0);
    }
  }
}

TEST(Reconstruct, SingleFrameAndErrors) {
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 27);
  const auto out = reconstruct_sequence({random_image(1, 8, 8)}, c, p);
  EXPECT_EQ(out.memory.size(), 1u);
  EXPECT_EQ(out.frames.size(), 1u);
  EXPECT_THROW(reconstruct_sequence({}, c, p), ValidationError);
  EXPECT_THROW(reconstruct_sequence({random_image(1, 8, 8), random_image(2, 8, 12)}, c, p), ValidationError);
}

TEST(Reconstruct, CoincidentPointmapsGiveIdentityPose) {
  const ModelConfig c = small_config();
  auto p = init_scene_model(c, 28);
  // Make the local-pointmap channels a copy of the global ones.
  Mat& w = p.get("head.pts.weight");
  Mat& b = p.get("head.pts.bias");
  for (Eigen::Index px = 0; px < static_cast<Eigen::Index>(c.patch * c.patch); ++px)
    for (Eigen::Index ch = 0; ch < 3; ++ch) {
      w.col(px * 7 + 3 + ch) = w.col(px * 7 + ch);
      b(0, px * 7 + 3 + ch) = b(0, px * 7 + ch);
    }
  const auto out = reconstruct_sequence({random_image(5, 8, 12)}, c, p);
  const auto& f = out.frames.front();
  EXPECT_EQ(f.p_global, f.p_local);
  ASSERT_TRUE(f.pose_ok);
  EXPECT_LT(f.pose.rotation_angle_to(Pose7::identity()), 1e-6);
  EXPECT_LT(f.pose.translation().norm(), 1e-6);
}

TEST(Checkpoint, RoundTrip) {
  testutil::TempDir dir;
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 29);
  save_checkpoint(p, c, dir / "ckpt");
  const auto [q, c2] = load_checkpoint(dir / "ckpt");
  EXPECT_EQ(c2, c);
  EXPECT_TRUE(q == p);
  EXPECT_TRUE(std::filesystem::exists(dir / "ckpt" / "enc.block0.attn.qkv.weight.oak"));
  EXPECT_THROW(load_checkpoint(dir / "missing"), ValidationError);
}

TEST(Graph, ParameterGradientsMatchFiniteDifference) {
  // d(sum of features)/d(head.feat.fc2.bias) by central differences.
  const ModelConfig c = small_config();
  const auto p = init_scene_model(c, 30);
  const std::vector<Image> frames{random_image(7, 8, 8), random_image(8, 8, 8)};
  const auto objective = [&](const ParamStore& ps, std::map<std::string, Mat>* grads) {
    Graph g(ps, c, grads != nullptr);
    auto rg = reconstruct_graph(g, frames);
    double total = 0.0;
    for (const auto& h : rg.heads) {
      total += h.features.value().sum() + h.p_global.value().sum();
      if (grads) {
        g.tape().seed(h.features, Mat::Ones(h.features.rows(), h.features.cols()));
        g.tape().seed(h.p_global, Mat::Ones(h.p_global.rows(), h.p_global.cols()));
      }
    }
    if (grads) {
      g.tape().backward();
      *grads = g.gradients();
    }
    return total;
  };
  std::map<std::string, Mat> grads;
  objective(p, &grads);
  for (const std::string name : {"head.feat.fc2.bias", "embed.bias", "dec.nonref_token", "task.geo"}) {
    ASSERT_TRUE(grads.count(name)) << name;
    for (Eigen::Index i = 0; i < std::min<Eigen::Index>(4, grads[name].size()); ++i) {
      ParamStore plus = p, minus = p;
      plus.get(name).data()[i] += 1e-6;
      minus.get(name).data()[i] -= 1e-6;
      const double fd = (objective(plus, nullptr) - objective(minus, nullptr)) / 2e-6;
      EXPECT_NEAR(grads[name].data()[i], fd, 1e-4 * std::max(1.0, std::abs(fd))) << name << "[" << i << "]";
    }
  }
}
