// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <Eigen/SVD>
#include <Eigen/Eigenvalues>

#include "occanykit/common.hpp"
#include "occanykit/tensorio.hpp"

namespace occanykit {

/// Rigid transform stored as a unit quaternion (w,x,y,z) and a translation.
/// A camera pose maps camera-frame points into the reference frame.
class Pose7 {
 public:
  Pose7() = default;
  Pose7(const Eigen::Quaterniond& q, const Eigen::Vector3d& t) : q_(q), t_(t) { canonicalize(); }
  Pose7(const Eigen::Matrix3d& r, const Eigen::Vector3d& t) : q_(r), t_(t) { canonicalize(); }

  static Pose7 identity() { return {}; }

  /// Layout (w, x, y, z, tx, ty, tz).
  static Pose7 from_array(const std::array<double, 7>& a) {
    return Pose7(Eigen::Quaterniond(a[0], a[1], a[2], a[3]), Eigen::Vector3d(a[4], a[5], a[6]));
  }
  std::array<double, 7> to_array() const {
    return {q_.w(), q_.x(), q_.y(), q_.z(), t_.x(), t_.y(), t_.z()};
  }

  const Eigen::Quaterniond& rotation() const { return q_; }
  Eigen::Matrix3d rotation_matrix() const { return q_.toRotationMatrix(); }
  const Eigen::Vector3d& translation() const { return t_; }

  Eigen::Vector3d operator*(const Eigen::Vector3d& p) const { return q_ * p + t_; }

  /// (a * b)(p) == a(b(p)).
  Pose7 operator*(const Pose7& b) const { return Pose7(q_ * b.q_, q_ * b.t_ + t_); }

  Pose7 inverse() const {
    const Eigen::Quaterniond qi = q_.conjugate();
    return Pose7(qi, -(qi * t_));
  }

  /// Camera forward axis (+z of R) in the reference frame.
  Eigen::Vector3d forward() const { return q_ * Eigen::Vector3d::UnitZ(); }

  double rotation_angle_to(const Pose7& o) const { return q_.angularDistance(o.q_); }
  double translation_distance_to(const Pose7& o) const { return (t_ - o.t_).norm(); }

  bool approx_equal(const Pose7& o, double tol) const {
    const auto a = to_array();
    const auto b = o.to_array();
    for (std::size_t i = 0; i < 7; ++i)
      if (std::abs(a[i] - b[i]) > tol) return false;
    return true;
  }

 private:
  void canonicalize() {
    const double n = q_.norm();
    if (!(n > 0.0) || !std::isfinite(n) || !t_.allFinite())
      throw ValidationError("pose: non-finite or zero quaternion / translation");
    q_.coeffs() /= n;
    if (q_.w() < 0.0) q_.coeffs() = -q_.coeffs();
  }

  Eigen::Quaterniond q_ = Eigen::Quaterniond::Identity();
  Eigen::Vector3d t_ = Eigen::Vector3d::Zero();
};

using Points3 = std::vector<Eigen::Vector3d>;

/// Transform every point by `pose`.
inline Points3 apply_pose(const Pose7& pose, std::span<const Eigen::Vector3d> points) {
  Points3 out;
  out.reserve(points.size());
  for (const auto& p : points) {
    if (!p.allFinite()) throw ValidationError("apply_pose: non-finite input coordinate");
    out.push_back(pose * p);
  }
  return out;
}

/// Pointmap variant; the mask, when given, leaves invalid pixels untouched.
inline Pointmap apply_pose(const Pose7& pose, const Pointmap& points, const Mask* valid = nullptr) {
  Pointmap out = points;
  for (std::size_t i = 0; i < points.pixels(); ++i) {
    if (valid && !valid->at_pixel(i)) continue;
    const Eigen::Vector3d p(points.at_pixel(i, 0), points.at_pixel(i, 1), points.at_pixel(i, 2));
    if (!p.allFinite()) throw ValidationError("apply_pose: non-finite input coordinate");
    const Eigen::Vector3d q = pose * p;
    for (int c = 0; c < 3; ++c) out.at_pixel(i, static_cast<std::size_t>(c)) = q[c];
  }
  return out;
}

inline Eigen::Vector3d pixel_point(const Pointmap& pm, std::size_t pixel) {
  return {pm.at_pixel(pixel, 0), pm.at_pixel(pixel, 1), pm.at_pixel(pixel, 2)};
}

struct Registration {
  Pose7 pose;
  double weighted_rmse = 0.0;
};

/// Confidence-weighted rigid alignment taking local points onto global points
/// (Kabsch/Umeyama without scale). Throws DegenerateError when the rotation
/// is not recoverable.
inline Registration register_points(std::span<const Eigen::Vector3d> local,
                                    std::span<const Eigen::Vector3d> global,
                                    std::span<const double> weight) {
  if (local.size() != global.size() || local.size() != weight.size())
    throw ValidationError("register_points: size mismatch");
  if (local.size() < 3) throw DegenerateError("registration needs at least 3 valid points");
  double wsum = 0.0;
  Eigen::Vector3d mu_l = Eigen::Vector3d::Zero(), mu_g = Eigen::Vector3d::Zero();
  for (std::size_t i = 0; i < local.size(); ++i) {
    if (!(weight[i] > 0.0) || !std::isfinite(weight[i]))
      throw ValidationError("registration: confidence must be positive on valid pixels");
    wsum += weight[i];
    mu_l += weight[i] * local[i];
    mu_g += weight[i] * global[i];
  }
  mu_l /= wsum;
  mu_g /= wsum;
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double spread = 0.0;
  for (std::size_t i = 0; i < local.size(); ++i) {
    const Eigen::Vector3d dl = local[i] - mu_l;
    cov += (weight[i] / wsum) * (global[i] - mu_g) * dl.transpose();
    spread += (weight[i] / wsum) * dl.squaredNorm();
  }
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sv = svd.singularValues();
  // Rank < 2 leaves a free rotation about the single remaining axis.
  if (!(spread > 0.0) || !(sv[0] > 0.0) || sv[1] <= 1e-10 * sv[0])
    throw DegenerateError("registration: cross-covariance rank < 2 (collinear or coincident points)");
  const Eigen::Matrix3d& u = svd.matrixU();
  const Eigen::Matrix3d& v = svd.matrixV();
  Eigen::Vector3d d(1.0, 1.0, (u * v.transpose()).determinant() < 0.0 ? -1.0 : 1.0);
  const Eigen::Matrix3d r = u * d.asDiagonal() * v.transpose();
  const Eigen::Vector3d t = mu_g - r * mu_l;
  Registration out{Pose7(r, t), 0.0};
  double err = 0.0;
  for (std::size_t i = 0; i < local.size(); ++i)
    err += weight[i] * (r * local[i] + t - global[i]).squaredNorm();
  out.weighted_rmse = std::sqrt(err / wsum);
  return out;
}

/// Recover the camera pose v such that v(local) ~= global, weighted by conf.
inline Registration register_pointmaps(const Pointmap& local, const Pointmap& global,
                                       const ScalarMap& conf, const Mask& valid) {
  if (!local.same_shape(global) || local.channels() != 3 || !conf.same_extent(local) ||
      !valid.same_extent(local))
    throw ValidationError("register_pointmaps: shape mismatch");
  Points3 l, g;
  std::vector<double> w;
  for (std::size_t i = 0; i < local.pixels(); ++i) {
    if (!valid.at_pixel(i)) continue;
    const Eigen::Vector3d pl = pixel_point(local, i), pg = pixel_point(global, i);
    if (!pl.allFinite() || !pg.allFinite()) continue;
    l.push_back(pl);
    g.push_back(pg);
    w.push_back(conf.at_pixel(i));
  }
  return register_points(l, g, w);
}

/// Shared focal length (pixels) of a pinhole camera that produced `local`.
/// Median of r_pix * z / r_cam over valid off-axis pixels in front of the camera.
inline double estimate_focal(const Pointmap& local, double cx, double cy, const Mask& valid) {
  if (local.channels() != 3 || !valid.same_extent(local))
    throw ValidationError("estimate_focal: shape mismatch");
  std::vector<double> samples;
  bool any_front = false;
  for (std::size_t y = 0; y < local.height(); ++y) {
    for (std::size_t x = 0; x < local.width(); ++x) {
      if (!valid(y, x)) continue;
      const double px = local(y, x, 0), py = local(y, x, 1), pz = local(y, x, 2);
      if (!(pz > 0.0) || !std::isfinite(px) || !std::isfinite(py)) continue;
      any_front = true;
      const double du = static_cast<double>(x) - cx, dv = static_cast<double>(y) - cy;
      const double r_pix = std::hypot(du, dv);
      const double r_cam = std::hypot(px, py);
      if (r_pix <= 1.0 || !(r_cam > 0.0)) continue;
      samples.push_back(r_pix * pz / r_cam);
    }
  }
  if (!any_front) throw DegenerateError("estimate_focal: no valid pixel in front of the camera");
  if (samples.size() < 16)
    throw DegenerateError("estimate_focal: insufficient valid off-axis pixels (" +
                          std::to_string(samples.size()) + " < 16)");
  const std::size_t mid = samples.size() / 2;
  std::nth_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(mid), samples.end());
  double med = samples[mid];
  if (samples.size() % 2 == 0) {
    const double lo = *std::max_element(samples.begin(), samples.begin() + static_cast<std::ptrdiff_t>(mid));
    med = 0.5 * (med + lo);
  }
  return med;
}

struct TrajectoryLine {
  Eigen::Vector3d origin;
  Eigen::Vector3d direction;  // unit
};

/// Total-least-squares line through the pose translations, anchored at the
/// last pose and oriented along the direction of travel. Falls back to the
/// last camera's forward axis when the translations do not span a line.
inline TrajectoryLine fit_trajectory_line(std::span<const Pose7> poses) {
  if (poses.empty()) throw ValidationError("fit_trajectory_line: empty pose list");
  const Eigen::Vector3d first = poses.front().translation();
  const Eigen::Vector3d last = poses.back().translation();
  TrajectoryLine line{last, poses.back().forward().normalized()};
  if (poses.size() < 2) return line;

  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : poses) mean += p.translation();
  mean /= static_cast<double>(poses.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  double extent = 0.0;
  for (const auto& p : poses) {
    const Eigen::Vector3d d = p.translation() - mean;
    cov += d * d.transpose();
    extent = std::max(extent, d.norm());
  }
  if (extent <= 1e-12) return line;  // coincident translations
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> eig(cov);
  Eigen::Vector3d dir = eig.eigenvectors().col(2).normalized();
  const Eigen::Vector3d travel = last - first;
  if (travel.dot(dir) < 0.0) dir = -dir;
  line.direction = dir;
  return line;
}

}  // namespace occanykit
