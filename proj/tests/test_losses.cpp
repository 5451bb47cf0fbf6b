// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <algorithm>
#include <numeric>
#include <random>

#include "occanykit/losses.hpp"

using namespace occanykit;

namespace {

using LD = long double;

template <typename T>
Raster<T> random_raster(std::mt19937_64& rng, std::size_t h, std::size_t w, std::size_t c, double lo,
                        double hi) {
  Raster<T> r(h, w, c);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : r.data()) v = static_cast<T>(u(rng));
  return r;
}

Raster<double> one_pixel(double x, double y, double z) {
  Raster<double> r(1, 1, 3);
  r.at_pixel(0, 0) = x;
  r.at_pixel(0, 1) = y;
  r.at_pixel(0, 2) = z;
  return r;
}

}  // namespace

TEST(PointmapLoss, Examples) {
  const Mask v(1, 1, 1, 1);
  const LossConfig cfg{0.2, ScaleMode::metric};
  const auto z = one_pixel(0, 0, 0);
  EXPECT_DOUBLE_EQ(loss_pointmap(z, z, ScalarMap(1, 1, 1, 1.0), v, cfg).value, 0.0);
  EXPECT_DOUBLE_EQ(loss_pointmap(one_pixel(1, 0, 0), z, ScalarMap(1, 1, 1, 1.0), v, cfg).value, 1.0);
  EXPECT_NEAR(loss_pointmap(z, z, ScalarMap(1, 1, 1, std::numbers::e), v, cfg).value, -0.2, 1e-15);
}

TEST(PointmapLoss, Errors) {
  const auto z = one_pixel(0, 0, 0);
  EXPECT_THROW(loss_pointmap(z, z, ScalarMap(1, 1, 1, 2.0), Mask(1, 1, 1, 0), LossConfig{}), ValidationError);
  EXPECT_THROW(loss_pointmap(z, z, ScalarMap(1, 1, 1, 2.0), Mask(1, 1, 1, 1),
                             LossConfig{0.2, ScaleMode::normalized}),
               ValidationError);
}

TEST(PointmapLoss, InvalidPixelsIgnored) {
  std::mt19937_64 rng(1);
  auto pred = random_raster<double>(rng, 4, 4, 3, -1, 1);
  const auto gt = random_raster<double>(rng, 4, 4, 3, -1, 1);
  const auto conf = random_raster<double>(rng, 4, 4, 1, 1.1, 3);
  Mask v(4, 4, 1, 1);
  v.at_pixel(5) = 0;
  const auto a = loss_pointmap(pred, gt, conf, v, LossConfig{});
  for (std::size_t c = 0; c < 3; ++c) pred.at_pixel(5, c) += 100.0;
  const auto b = loss_pointmap(pred, gt, conf, v, LossConfig{});
  EXPECT_EQ(a.value, b.value);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(b.grad_pred.at_pixel(5, c), 0.0);
  EXPECT_EQ(b.grad_raw_conf.at_pixel(5), 0.0);
}

TEST(PointmapLoss, LowerBoundFromRegulariser) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const auto pred = random_raster<double>(rng, 3, 5, 3, -2, 2);
    const auto gt = random_raster<double>(rng, 3, 5, 3, -2, 2);
    const auto conf = random_raster<double>(rng, 3, 5, 1, 1.01, 4);
    const Mask v(3, 5, 1, 1);
    double bound = 0.0;
    for (double c : conf.data()) bound -= 0.2 * std::log(c);
    EXPECT_GE(loss_pointmap(pred, gt, conf, v, LossConfig{}).value, bound);
    EXPECT_NEAR(loss_pointmap(gt, gt, conf, v, LossConfig{}).value, bound, 1e-12);
  }
}

TEST(PointmapLoss, NormalisedScale) {
  std::mt19937_64 rng(3);
  const auto pred = random_raster<double>(rng, 4, 6, 3, -3, 3);
  const auto gt = random_raster<double>(rng, 4, 6, 3, -3, 3);
  const auto conf = random_raster<double>(rng, 4, 6, 1, 1.1, 2);
  const Mask v(4, 6, 1, 1);
  // Independent scale: mean Euclidean norm of the ground-truth points.
  double s = 0.0;
  for (std::size_t i = 0; i < gt.pixels(); ++i)
    s += std::sqrt(std::pow(gt.at_pixel(i, 0), 2) + std::pow(gt.at_pixel(i, 1), 2) + std::pow(gt.at_pixel(i, 2), 2));
  s /= static_cast<double>(gt.pixels());
  const auto metric = loss_pointmap(pred, gt, conf, v, LossConfig{0.0, ScaleMode::metric});
  const auto norm = loss_pointmap(pred, gt, conf, v, LossConfig{0.0, ScaleMode::normalized});
  EXPECT_NEAR(norm.scale, s, 1e-12);
  EXPECT_NEAR(norm.value, metric.value / s, 1e-12);

  // Doubling s (scaling both clouds by 2) leaves the normalised L1 term alone
  // and the log term unchanged.
  Raster<double> p2 = pred, g2 = gt;
  for (auto& x : p2.data()) x *= 2.0;
  for (auto& x : g2.data()) x *= 2.0;
  const auto a = loss_pointmap(pred, gt, conf, v, LossConfig{0.3, ScaleMode::normalized});
  const auto b = loss_pointmap(p2, g2, conf, v, LossConfig{0.3, ScaleMode::normalized});
  EXPECT_DOUBLE_EQ(b.scale, 2.0 * a.scale);
  EXPECT_NEAR(b.value, a.value, 1e-12);
}

TEST(PointmapLoss, GradientCheck) {
  std::mt19937_64 rng(4);
  const std::size_t h = 3, w = 4, n = h * w;
  const auto gt = random_raster<LD>(rng, h, w, 3, -2, 2);
  Mask v(h, w, 1, 1);
  v.at_pixel(3) = 0;
  for (ScaleMode mode : {ScaleMode::metric, ScaleMode::normalized}) {
    const LossConfig cfg{0.2, mode};
    // x = [pred (3n), raw confidence (n)] with C = 1 + exp(raw).
    LongVector x0(static_cast<Eigen::Index>(4 * n));
    for (std::size_t i = 0; i < 3 * n; ++i) {
      // Keep every residual at least 0.1 from the L1 kink.
      const double off = std::uniform_real_distribution<>(0.1, 1.0)(rng) * (rng() % 2 ? 1 : -1);
      x0[static_cast<Eigen::Index>(i)] = gt.data()[i] + off;
    }
    for (std::size_t i = 0; i < n; ++i)
      x0[static_cast<Eigen::Index>(3 * n + i)] = std::uniform_real_distribution<>(-1, 1)(rng);
    const auto f = [&](const LongVector& x) {
      Raster<LD> pred(h, w, 3), conf(h, w, 1);
      for (std::size_t i = 0; i < 3 * n; ++i) pred.data()[i] = x[static_cast<Eigen::Index>(i)];
      for (std::size_t i = 0; i < n; ++i) conf.data()[i] = 1.0L + std::exp(x[static_cast<Eigen::Index>(3 * n + i)]);
      const auto l = loss_pointmap(pred, gt, conf, v, cfg);
      LongVector g(x.size());
      for (std::size_t i = 0; i < 3 * n; ++i) g[static_cast<Eigen::Index>(i)] = l.grad_pred.data()[i];
      for (std::size_t i = 0; i < n; ++i) g[static_cast<Eigen::Index>(3 * n + i)] = l.grad_raw_conf.data()[i];
      return std::pair<LD, LongVector>(l.value, std::move(g));
    };
    EXPECT_LT(gradient_check(f, x0), 1e-4L);
  }
}

TEST(ForcingLoss, Examples) {
  const Raster<double> zero(1, 1, 1, 0.0), two(1, 1, 1, 2.0), one(1, 1, 1, 1.0);
  EXPECT_EQ(loss_forcing(two, two, one).value, 0.0);
  EXPECT_DOUBLE_EQ(loss_forcing(two, zero, one).value, 4.0);
  EXPECT_DOUBLE_EQ(loss_forcing(one, zero, two).value, 4.0);
}

TEST(ForcingLoss, SumsOverFramesWithoutFrameNormalisation) {
  const Raster<double> a(1, 1, 1, 2.0), z(1, 1, 1, 0.0), c(1, 1, 1, 1.0);
  const std::vector<Raster<double>> p{a, a}, t{z, z}, cf{c, c};
  EXPECT_DOUBLE_EQ(loss_forcing<double>(p, t, cf).value, 8.0);
  EXPECT_THROW(loss_forcing<double>(p, std::vector<Raster<double>>{z}, cf), ValidationError);
  EXPECT_THROW(loss_forcing(Raster<double>(2, 2, 3), Raster<double>(2, 2, 2), Raster<double>(2, 2, 1)),
               ValidationError);
}

TEST(ForcingLoss, GradientCheckAndStopGradient) {
  std::mt19937_64 rng(5);
  const std::size_t h = 2, w = 3, ch = 4;
  const auto teacher = random_raster<LD>(rng, h, w, ch, -1, 1);
  const auto conf = random_raster<LD>(rng, h, w, 1, 1.1, 3);
  LongVector x0(static_cast<Eigen::Index>(h * w * ch));
  for (auto& v : x0) v = std::uniform_real_distribution<>(-1, 1)(rng);
  const auto f = [&](const LongVector& x) {
    Raster<LD> p(h, w, ch);
    std::copy(x.begin(), x.end(), p.data().begin());
    const auto l = loss_forcing(p, teacher, conf);
    LongVector g(x.size());
    std::copy(l.grad_features[0].data().begin(), l.grad_features[0].data().end(), g.begin());
    for (LD v : l.grad_conf[0].data()) EXPECT_EQ(v, 0.0L);
    return std::pair<LD, LongVector>(l.value, std::move(g));
  };
  EXPECT_LT(gradient_check(f, x0), 1e-6L);
}

TEST(ForcingLoss, PoolConfidence) {
  Raster<double> c(4, 4, 1);
  for (std::size_t i = 0; i < 16; ++i) c.data()[i] = static_cast<double>(i);
  const auto p = pool_confidence(c, 2, 2);
  EXPECT_DOUBLE_EQ(p(0, 0), (0 + 1 + 4 + 5) / 4.0);
  EXPECT_DOUBLE_EQ(p(1, 1), (10 + 11 + 14 + 15) / 4.0);
  EXPECT_THROW(pool_confidence(c, 3, 3), ValidationError);
}

TEST(DistillLoss, Examples) {
  using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::vector<M> s{M::Constant(1, 1, 1.0)}, t{M::Constant(1, 1, 4.0)};
  EXPECT_EQ(loss_encoder_distill<double>(s, s).value, 0.0);
  const auto l = loss_encoder_distill<double>(s, t);
  EXPECT_DOUBLE_EQ(l.value, 9.0);
  // d = teacher - student = 3; gradient w.r.t. student = -2d.
  EXPECT_DOUBLE_EQ(l.grad_student[0](0, 0), -6.0);
  EXPECT_THROW(loss_encoder_distill<double>(std::vector<M>{}, std::vector<M>{}), ValidationError);
  EXPECT_THROW(loss_encoder_distill<double>(s, std::vector<M>{M::Zero(1, 2)}), ValidationError);
}

TEST(GradientCheck, SquaredNorm) {
  std::mt19937_64 rng(6);
  LongVector x0(20);
  for (auto& v : x0) v = std::normal_distribution<>(0, 1)(rng);
  const auto f = [](const LongVector& x) { return std::make_pair(x.squaredNorm(), LongVector(2.0L * x)); };
  EXPECT_LT(gradient_check(f, x0), 1e-8L);
  // A wrong gradient is caught.
  const auto bad = [](const LongVector& x) { return std::make_pair(x.squaredNorm(), LongVector(x)); };
  EXPECT_GT(gradient_check(bad, x0), 1e-2L);
}

TEST(Losses, PermutationInvariance) {
  std::mt19937_64 rng(7);
  const std::size_t n = 12;
  const auto pred = random_raster<double>(rng, 1, n, 3, -1, 1);
  const auto gt = random_raster<double>(rng, 1, n, 3, -1, 1);
  const auto conf = random_raster<double>(rng, 1, n, 1, 1.1, 2);
  const auto fp = random_raster<double>(rng, 1, n, 5, -1, 1);
  const auto ft = random_raster<double>(rng, 1, n, 5, -1, 1);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  const auto permute = [&](const Raster<double>& r) {
    Raster<double> o(r.height(), r.width(), r.channels());
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < r.channels(); ++c) o.at_pixel(i, c) = r.at_pixel(perm[i], c);
    return o;
  };
  const Mask v(1, n, 1, 1);
  const LossConfig cfg{0.2, ScaleMode::normalized};
  EXPECT_NEAR(loss_pointmap(pred, gt, conf, v, cfg).value,
              loss_pointmap(permute(pred), permute(gt), permute(conf), v, cfg).value, 1e-12);
  EXPECT_NEAR(loss_forcing(fp, ft, conf).value, loss_forcing(permute(fp), permute(ft), permute(conf)).value, 1e-12);
  using M = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const std::vector<M> s{Eigen::Map<const M>(fp.data().data(), n, 5)}, t{Eigen::Map<const M>(ft.data().data(), n, 5)};
  const std::vector<M> sp{Eigen::Map<const M>(permute(fp).data().data(), n, 5)},
      tp{Eigen::Map<const M>(permute(ft).data().data(), n, 5)};
  EXPECT_NEAR(loss_encoder_distill<double>(s, t).value, loss_encoder_distill<double>(sp, tp).value, 1e-12);
}
