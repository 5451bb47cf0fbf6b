// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "occanykit/common.hpp"

namespace occanykit {

enum class ScaleMode { metric, normalized };

struct LossConfig {
  double alpha = 0.2;
  ScaleMode scale_mode = ScaleMode::metric;

  void validate() const {
    if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ValidationError("loss config: alpha must be >= 0");
  }
};

template <typename T>
struct PointmapLoss {
  T value{};
  T scale{1};
  Raster<T> grad_pred;       // H x W x 3
  Raster<T> grad_conf;       // H x W, w.r.t. C
  Raster<T> grad_raw_conf;   // H x W, w.r.t. c where C = 1 + exp(c)
};

/// Normalisation scale: mean distance of the valid ground-truth points to the origin.
template <typename T>
T mean_distance(const Raster<T>& gt, const Mask& valid) {
  T sum{0};
  std::size_t n = 0;
  for (std::size_t i = 0; i < gt.pixels(); ++i) {
    if (!valid.at_pixel(i)) continue;
    using std::sqrt;
    sum += sqrt(gt.at_pixel(i, 0) * gt.at_pixel(i, 0) + gt.at_pixel(i, 1) * gt.at_pixel(i, 1) +
                gt.at_pixel(i, 2) * gt.at_pixel(i, 2));
    ++n;
  }
  return n == 0 ? T{0} : sum / static_cast<T>(n);
}

/// Confidence-weighted pointmap loss
///   (1/s) * sum_valid || C (.) (P - P*) ||_1  -  alpha * sum_valid log C
/// with C broadcast over the three channels. Used for both the global and
/// the local pointmap.
template <typename T>
PointmapLoss<T> loss_pointmap(const Raster<T>& pred, const Raster<T>& gt, const Raster<T>& conf,
                              const Mask& valid, const LossConfig& cfg) {
  cfg.validate();
  if (!pred.same_shape(gt) || pred.channels() != 3 || !conf.same_extent(pred) ||
      conf.channels() != 1 || !valid.same_extent(pred))
    throw ValidationError("loss_pointmap: shape mismatch");
  std::size_t n_valid = 0;
  for (std::size_t i = 0; i < valid.pixels(); ++i) n_valid += valid.at_pixel(i) ? 1 : 0;
  if (n_valid == 0) throw ValidationError("loss_pointmap: all pixels invalid");

  PointmapLoss<T> out;
  out.scale = T{1};
  if (cfg.scale_mode == ScaleMode::normalized) {
    out.scale = mean_distance(gt, valid);
    if (!(out.scale > T{0})) throw ValidationError("loss_pointmap: normalisation scale is zero");
  }
  const T inv_s = T{1} / out.scale;
  const T alpha = static_cast<T>(cfg.alpha);
  out.grad_pred = Raster<T>(pred.height(), pred.width(), 3, T{0});
  out.grad_conf = Raster<T>(pred.height(), pred.width(), 1, T{0});
  out.grad_raw_conf = Raster<T>(pred.height(), pred.width(), 1, T{0});
  T l1{0}, reg{0};
  for (std::size_t i = 0; i < pred.pixels(); ++i) {
    if (!valid.at_pixel(i)) continue;
    const T c = conf.at_pixel(i);
    if (!(c > T{0})) throw ValidationError("loss_pointmap: confidence must be positive");
    T abs_sum{0};
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const T r = pred.at_pixel(i, ch) - gt.at_pixel(i, ch);
      using std::abs;
      abs_sum += abs(r);
      const T sign = r > T{0} ? T{1} : (r < T{0} ? T{-1} : T{0});
      out.grad_pred.at_pixel(i, ch) = inv_s * c * sign;
    }
    using std::log;
    l1 += c * abs_sum;
    reg += log(c);
    const T dc = inv_s * abs_sum - alpha / c;
    out.grad_conf.at_pixel(i) = dc;
    out.grad_raw_conf.at_pixel(i) = dc * (c - T{1});
  }
  out.value = inv_s * l1 - alpha * reg;
  return out;
}

template <typename T>
struct ForcingLoss {
  T value{};
  std::vector<Raster<T>> grad_features;  // per frame, H' x W' x C
  std::vector<Raster<T>> grad_conf;      // per frame, H' x W'; identically zero
};

/// Average-pool an H x W confidence map onto the H' x W' feature grid.
template <typename T>
Raster<T> pool_confidence(const Raster<T>& conf, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0 || conf.height() % out_h != 0 || conf.width() % out_w != 0 ||
      conf.height() / out_h != conf.width() / out_w)
    throw ValidationError("pool_confidence: feature grid does not tile the confidence map");
  const std::size_t f = conf.height() / out_h;
  Raster<T> out(out_h, out_w, 1, T{0});
  const T inv = T{1} / static_cast<T>(f * f);
  for (std::size_t y = 0; y < out_h; ++y)
    for (std::size_t x = 0; x < out_w; ++x) {
      T acc{0};
      for (std::size_t a = 0; a < f; ++a)
        for (std::size_t b = 0; b < f; ++b) acc += conf(y * f + a, x * f + b);
      out(y, x) = acc * inv;
    }
  return out;
}

/// Confidence-weighted segmentation-forcing loss summed over frames:
///   sum_frames (1/(H'W')) * sum_pixels || C (.) (F - F*) ||_2^2.
/// The confidence is a stop-gradient input.
template <typename T>
ForcingLoss<T> loss_forcing(std::span<const Raster<T>> pred, std::span<const Raster<T>> teacher,
                            std::span<const Raster<T>> conf_feat) {
  if (pred.size() != teacher.size() || pred.size() != conf_feat.size())
    throw ValidationError("loss_forcing: frame count mismatch");
  ForcingLoss<T> out;
  out.value = T{0};
  for (std::size_t f = 0; f < pred.size(); ++f) {
    const auto& p = pred[f];
    const auto& t = teacher[f];
    const auto& c = conf_feat[f];
    if (!p.same_shape(t) || !c.same_extent(p) || c.channels() != 1)
      throw ValidationError("loss_forcing: shape mismatch (" + shape_string(p) + " vs " +
                            shape_string(t) + ", conf " + shape_string(c) + ")");
    const T inv_area = T{1} / static_cast<T>(p.pixels());
    Raster<T> g(p.height(), p.width(), p.channels(), T{0});
    T acc{0};
    for (std::size_t i = 0; i < p.pixels(); ++i) {
      const T w = c.at_pixel(i);
      for (std::size_t ch = 0; ch < p.channels(); ++ch) {
        const T r = p.at_pixel(i, ch) - t.at_pixel(i, ch);
        acc += (w * r) * (w * r);
        g.at_pixel(i, ch) = T{2} * inv_area * w * w * r;
      }
    }
    out.value += inv_area * acc;
    out.grad_features.push_back(std::move(g));
    out.grad_conf.emplace_back(c.height(), c.width(), 1, T{0});
  }
  return out;
}

/// Single-frame convenience overload.
template <typename T>
ForcingLoss<T> loss_forcing(const Raster<T>& pred, const Raster<T>& teacher, const Raster<T>& conf_feat) {
  return loss_forcing<T>(std::span<const Raster<T>>(&pred, 1), std::span<const Raster<T>>(&teacher, 1),
                         std::span<const Raster<T>>(&conf_feat, 1));
}

template <typename T>
struct DistillLoss {
  T value{};
  std::vector<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> grad_student;
};

/// Sum over views of the squared L2 distance between teacher and student
/// tokens. The teacher is a constant.
template <typename T>
DistillLoss<T> loss_encoder_distill(
    std::span<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> student,
    std::span<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> teacher) {
  if (student.empty()) throw ValidationError("loss_encoder_distill: empty view list");
  if (student.size() != teacher.size()) throw ValidationError("loss_encoder_distill: view count mismatch");
  DistillLoss<T> out;
  out.value = T{0};
  for (std::size_t v = 0; v < student.size(); ++v) {
    if (student[v].rows() != teacher[v].rows() || student[v].cols() != teacher[v].cols())
      throw ValidationError("loss_encoder_distill: token shape mismatch");
    const auto diff = (teacher[v] - student[v]).eval();
    out.value += diff.squaredNorm();
    out.grad_student.push_back(T{-2} * diff);
  }
  return out;
}

/// Central-difference gradient check. `f` returns the value and its analytic
/// gradient at x; returns max_i |analytic_i - fd_i| / max(1, |fd_i|).
using LongVector = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

inline long double gradient_check(
    const std::function<std::pair<long double, LongVector>(const LongVector&)>& f,
    const LongVector& x0, long double eps = 1e-5L) {
  const auto [f0, analytic] = f(x0);
  if (!std::isfinite(static_cast<double>(f0))) throw NumericError("gradient_check: non-finite f(x0)");
  if (analytic.size() != x0.size()) throw ValidationError("gradient_check: gradient size mismatch");
  long double worst = 0.0L;
  LongVector x = x0;
  for (Eigen::Index i = 0; i < x0.size(); ++i) {
    x[i] = x0[i] + eps;
    const long double fp = f(x).first;
    x[i] = x0[i] - eps;
    const long double fm = f(x).first;
    x[i] = x0[i];
    if (!std::isfinite(static_cast<double>(fp)) || !std::isfinite(static_cast<double>(fm)))
      throw NumericError("gradient_check: non-finite f near x0");
    const long double fd = (fp - fm) / (2.0L * eps);
    worst = std::max(worst, std::abs(analytic[i] - fd) / std::max(1.0L, std::abs(fd)));
  }
  return worst;
}

}  // namespace occanykit
