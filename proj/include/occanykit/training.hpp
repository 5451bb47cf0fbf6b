// SPDX-License-Identifier: Apache-2.0
//
// Plain gradient descent on the reconstruction objective
//   L_glo + L_loc + L_forcing
// for a single fixed batch. Loss gradients come from losses.hpp and are
// seeded into the model tape.
#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "occanykit/dataset.hpp"
#include "occanykit/losses.hpp"
#include "occanykit/scene_model.hpp"

namespace occanykit {

struct TrainBatch {
  std::vector<Image> images;
  std::vector<Pointmap> gt_global;  // reference frame
  std::vector<Pointmap> gt_local;   // camera frame
  std::vector<Mask> valid;
  std::vector<FeatureMap> teacher;  // H' x W' x C
  std::vector<LabelMap> feature_labels;
};

/// A short synthetic street sequence at the model's feature resolution.
inline TrainBatch make_training_batch(std::uint64_t scene_seed, std::size_t frames, std::size_t h,
                                      std::size_t w, const ModelConfig& cfg) {
  SynthSceneSpec spec;
  spec.seed = scene_seed;
  SequenceConfig sc;
  sc.frames = frames;
  sc.oracle.height = h;
  sc.oracle.width = w;
  sc.oracle.feature_channels = cfg.feat_channels;
  sc.oracle.feature_factor = h / cfg.feature_height(h);
  sc.focal = 0.5 * static_cast<double>(w);
  const SyntheticSequence seq = make_sequence(generate_scene(spec), sc);
  TrainBatch b;
  const Pose7 ref_inv = seq.world_poses.front().inverse();
  for (std::size_t i = 0; i < frames; ++i) {
    const auto& v = seq.views[i];
    b.images.push_back(v.image);
    b.gt_local.push_back(v.pointmap);
    b.gt_global.push_back(apply_pose(ref_inv * seq.world_poses[i], v.pointmap, &v.valid));
    b.valid.push_back(v.valid);
    b.teacher.push_back(v.teacher_features);
    b.feature_labels.push_back(v.feature_labels);
  }
  return b;
}

struct TrainConfig {
  std::size_t steps = 200;
  double lr = 2e-4;
  double clip_norm = 0.0;  // 0: no clipping
  LossConfig loss{0.2, ScaleMode::normalized};
};

struct StepLoss {
  double global = 0.0, local = 0.0, forcing = 0.0;
  double total() const { return global + local + forcing; }
};

struct TrainResult {
  std::vector<StepLoss> history;  // before each update, plus the final evaluation
  ParamStore params;
};

namespace detail {

inline Mat raster_matrix(const Raster<double>& r) {
  Mat m(static_cast<Eigen::Index>(r.pixels()), static_cast<Eigen::Index>(r.channels()));
  std::copy(r.data().begin(), r.data().end(), m.data());
  return m;
}

}  // namespace detail

/// Loss and (optionally) parameter gradients for one batch.
inline StepLoss evaluate_batch(const ParamStore& params, const ModelConfig& cfg, const TrainBatch& b,
                               const LossConfig& lc, std::map<std::string, Mat>* grads) {
  Graph g(params, cfg, grads != nullptr);
  ReconstructionGraph rg = reconstruct_graph(g, b.images);
  const std::size_t h = b.images.front().height(), w = b.images.front().width();
  const std::size_t fh = cfg.feature_height(h), fw = cfg.feature_width(w);
  StepLoss out;
  std::vector<FeatureMap> pred_f, conf_f;
  for (std::size_t i = 0; i < b.images.size(); ++i) {
    const HeadOutputs ho = head_values(rg.heads[i], h, w, cfg);
    const auto lg = loss_pointmap(ho.p_global, b.gt_global[i], ho.conf, b.valid[i], lc);
    const auto ll = loss_pointmap(ho.p_local, b.gt_local[i], ho.conf, b.valid[i], lc);
    out.global += lg.value;
    out.local += ll.value;
    if (grads) {
      g.tape().seed(rg.heads[i].p_global, detail::raster_matrix(lg.grad_pred));
      g.tape().seed(rg.heads[i].p_local, detail::raster_matrix(ll.grad_pred));
      g.tape().seed(rg.heads[i].raw_conf,
                    detail::raster_matrix(lg.grad_raw_conf) + detail::raster_matrix(ll.grad_raw_conf));
    }
    pred_f.push_back(ho.features);
    conf_f.push_back(pool_confidence(ho.conf, fh, fw));
  }
  const auto lf = loss_forcing<double>(pred_f, b.teacher, conf_f);
  out.forcing = lf.value;
  if (grads) {
    for (std::size_t i = 0; i < b.images.size(); ++i)
      g.tape().seed(rg.heads[i].features, detail::raster_matrix(lf.grad_features[i]));
    g.tape().backward();
    *grads = g.gradients();
  }
  return out;
}

inline TrainResult train_smoke(ParamStore params, const ModelConfig& cfg, const TrainBatch& batch,
                               const TrainConfig& tc) {
  TrainResult r;
  for (std::size_t step = 0; step < tc.steps; ++step) {
    std::map<std::string, Mat> grads;
    r.history.push_back(evaluate_batch(params, cfg, batch, tc.loss, &grads));
    double scale = tc.lr;
    if (tc.clip_norm > 0.0) {
      double n2 = 0.0;
      for (const auto& [_, gm] : grads) n2 += gm.squaredNorm();
      const double n = std::sqrt(n2);
      if (n > tc.clip_norm) scale *= tc.clip_norm / n;
    }
    for (const auto& [name, gm] : grads) {
      Mat p = params.get(name);
      p -= scale * gm;
      params.set(name, std::move(p));
    }
  }
  r.history.push_back(evaluate_batch(params, cfg, batch, tc.loss, nullptr));
  r.params = std::move(params);
  return r;
}

struct ClusterStats {
  double within = 0.0, across = 0.0;
  std::size_t within_pairs = 0, across_pairs = 0;
};

/// Mean pairwise cosine similarity of feature vectors sharing a label versus
/// carrying different labels. Label 0xFFFF marks pixels to skip.
inline ClusterStats feature_cluster_stats(std::span<const FeatureMap> features,
                                          std::span<const LabelMap> labels) {
  std::vector<Eigen::VectorXd> vecs;
  std::vector<std::uint16_t> lab;
  for (std::size_t f = 0; f < features.size(); ++f)
    for (std::size_t i = 0; i < features[f].pixels(); ++i) {
      if (labels[f].at_pixel(i) == 0xFFFF) continue;
      Eigen::VectorXd v(static_cast<Eigen::Index>(features[f].channels()));
      for (std::size_t c = 0; c < features[f].channels(); ++c) v[static_cast<Eigen::Index>(c)] = features[f].at_pixel(i, c);
      const double n = v.norm();
      if (!(n > 0.0)) continue;
      vecs.push_back(v / n);
      lab.push_back(labels[f].at_pixel(i));
    }
  ClusterStats s;
  for (std::size_t a = 0; a < vecs.size(); ++a)
    for (std::size_t b = a + 1; b < vecs.size(); ++b) {
      const double c = vecs[a].dot(vecs[b]);
      if (lab[a] == lab[b]) {
        s.within += c;
        ++s.within_pairs;
      } else {
        s.across += c;
        ++s.across_pairs;
      }
    }
  if (s.within_pairs) s.within /= static_cast<double>(s.within_pairs);
  if (s.across_pairs) s.across /= static_cast<double>(s.across_pairs);
  return s;
}

}  // namespace occanykit
