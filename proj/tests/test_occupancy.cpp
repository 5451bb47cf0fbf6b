// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "occanykit/occupancy.hpp"
#include "test_util.hpp"

using namespace occanykit;

namespace {

// Voxel-major brute force: every voxel visits every point and evaluates the
// per-axis hat weight of its own centre.
std::vector<double> brute_force_mass(const std::vector<Eigen::Vector3d>& pts, const std::vector<double>& w,
                                     const VoxelGridSpec& s) {
  std::vector<double> mass(s.count(), 0.0);
  for (std::size_t i = 0; i < s.dims[0]; ++i)
    for (std::size_t j = 0; j < s.dims[1]; ++j)
      for (std::size_t k = 0; k < s.dims[2]; ++k) {
        const std::array<std::size_t, 3> idx{i, j, k};
        double acc = 0.0;
        for (std::size_t n = 0; n < pts.size(); ++n) {
          double prod = 1.0;
          for (int a = 0; a < 3; ++a) {
            const double g = (pts[n][a] - s.origin[a]) / s.voxel - 0.5;
            const double fl = std::floor(g), frac = g - fl;
            const auto id = static_cast<double>(idx[static_cast<std::size_t>(a)]);
            prod *= id == fl ? 1.0 - frac : (id == fl + 1.0 ? frac : 0.0);
          }
          if (prod != 0.0) acc += w[n] * prod;
        }
        mass[s.index(i, j, k)] = acc;
      }
  return mass;
}

VoxelGridSpec random_spec(std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(1, 16);
  std::uniform_real_distribution<double> o(-2, 2), v(0.1, 0.6);
  return {{o(rng), o(rng), o(rng)}, v(rng), {d(rng), d(rng), d(rng)}};
}

}  // namespace

TEST(Voxelize, CentreAndCorner) {
  // Dyadic voxel size so the centre coordinates are exact in binary.
  const VoxelGridSpec s{{0, 0, 0}, 0.5, {4, 4, 4}};
  const std::vector<Eigen::Vector3d> centre{s.center(1, 2, 3)};
  const auto a = voxelize_trilinear(centre, {}, s).grid;
  EXPECT_EQ(a.mass[s.index(1, 2, 3)], 1.0);
  EXPECT_EQ(a.total_mass(), 1.0);

  const std::vector<Eigen::Vector3d> corner{{1.0, 1.0, 1.0}};
  const auto b = voxelize_trilinear(corner, {}, s).grid;
  for (std::size_t i = 1; i <= 2; ++i)
    for (std::size_t j = 1; j <= 2; ++j)
      for (std::size_t k = 1; k <= 2; ++k) EXPECT_EQ(b.mass[s.index(i, j, k)], 0.125);
  EXPECT_EQ(b.total_mass(), 1.0);
}

TEST(Voxelize, BenchmarkSizedGridAllocates) {
  const VoxelGridSpec s{{-40, -40, -1}, 0.4, {200, 200, 16}};
  const auto g = voxelize_trilinear({}, {}, s).grid;
  EXPECT_EQ(g.count(), 640000u);
  EXPECT_EQ(g.mass.size(), 640000u);
}

TEST(Voxelize, BruteForceEquivalence) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const VoxelGridSpec s = random_spec(rng);
    std::uniform_int_distribution<std::size_t> n(1, 1000);
    std::vector<Eigen::Vector3d> pts(n(rng));
    std::vector<double> w(pts.size());
    for (std::size_t i = 0; i < pts.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        const double ext = s.voxel * static_cast<double>(s.dims[static_cast<std::size_t>(a)]);
        pts[i][a] = s.origin[a] + std::uniform_real_distribution<>(-0.2 * ext, 1.2 * ext)(rng);
      }
      w[i] = std::uniform_real_distribution<>(0, 2)(rng);
    }
    const auto g = voxelize_trilinear(pts, w, s).grid;
    ASSERT_EQ(g.mass, brute_force_mass(pts, w, s)) << "trial " << trial;
  }
}

TEST(Voxelize, MassConservationForInteriorPoints) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const VoxelGridSpec s{{0.3, -1.1, 2.0}, 0.25, {9, 12, 7}};
    std::vector<Eigen::Vector3d> pts;
    std::vector<double> w;
    double total = 0.0;
    for (int i = 0; i < 500; ++i) {
      Eigen::Vector3d p;
      for (int a = 0; a < 3; ++a) {
        // Keep the whole 8-neighbourhood inside: centres 0 .. dims-1.
        const double lo = s.origin[a] + 0.5 * s.voxel;
        const double hi = s.origin[a] + (static_cast<double>(s.dims[static_cast<std::size_t>(a)]) - 0.5) * s.voxel;
        p[a] = std::uniform_real_distribution<>(lo, hi)(rng);
      }
      pts.push_back(p);
      w.push_back(std::uniform_real_distribution<>(0.1, 3)(rng));
      total += w.back();
    }
    const auto g = voxelize_trilinear(pts, w, s).grid;
    EXPECT_NEAR(g.total_mass(), total, 1e-9 * total);
  }
}

TEST(Voxelize, TranslationCovariance) {
  // Dyadic coordinates keep the shifted arithmetic exact.
  std::mt19937_64 rng(3);
  const VoxelGridSpec s{{-1.0, -2.0, 0.5}, 0.5, {8, 8, 8}};
  std::vector<Eigen::Vector3d> pts;
  std::uniform_int_distribution<int> q(-80, 300);
  for (int i = 0; i < 400; ++i) pts.emplace_back(q(rng) / 64.0, q(rng) / 64.0, q(rng) / 64.0);
  const Eigen::Vector3d shift(2.0, -3.0, 1.5);
  VoxelGridSpec s2 = s;
  s2.origin += shift;
  std::vector<Eigen::Vector3d> shifted;
  for (const auto& p : pts) shifted.push_back(p + shift);
  EXPECT_EQ(voxelize_trilinear(pts, {}, s).grid.mass, voxelize_trilinear(shifted, {}, s2).grid.mass);
}

TEST(Voxelize, Monotonicity) {
  std::mt19937_64 rng(4);
  const VoxelGridSpec s{{0, 0, 0}, 0.3, {6, 6, 6}};
  std::uniform_real_distribution<double> u(-0.2, 2.0);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 200; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  const auto before = voxelize_trilinear(pts, {}, s).grid.mass;
  for (int i = 0; i < 100; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  const auto after = voxelize_trilinear(pts, {}, s).grid.mass;
  for (std::size_t v = 0; v < before.size(); ++v) EXPECT_GE(after[v], before[v]);
}

TEST(Voxelize, NonFiniteSkippedAndCounted) {
  const VoxelGridSpec s{{0, 0, 0}, 1.0, {2, 2, 2}};
  const std::vector<Eigen::Vector3d> pts{{0.5, 0.5, 0.5}, {std::nan(""), 0, 0}, {1e300, 0, 0}};
  const auto r = voxelize_trilinear(pts, {}, s);
  EXPECT_EQ(r.skipped_nonfinite, 2u);
  EXPECT_EQ(r.grid.total_mass(), 1.0);
  EXPECT_THROW(voxelize_trilinear(pts, std::vector<double>{1.0}, s), ValidationError);
  EXPECT_THROW(voxelize_trilinear(pts, {}, VoxelGridSpec{{0, 0, 0}, 0.0, {1, 1, 1}}), ValidationError);
}

TEST(Voxelize, ThreadedShardsAreReproducible) {
  std::mt19937_64 rng(5);
  const VoxelGridSpec s{{0, 0, 0}, 0.2, {16, 16, 16}};
  std::uniform_real_distribution<double> u(0, 3.2);
  std::vector<Eigen::Vector3d> pts;
  for (int i = 0; i < 40000; ++i) pts.emplace_back(u(rng), u(rng), u(rng));
  const auto one = voxelize_trilinear(pts, {}, s, 1).grid.mass;
  const auto a = voxelize_trilinear(pts, {}, s, 4).grid.mass;
  const auto b = voxelize_trilinear(pts, {}, s, 4).grid.mass;
  EXPECT_EQ(a, b);
  for (std::size_t v = 0; v < one.size(); ++v) EXPECT_NEAR(a[v], one[v], 1e-10);
}

TEST(Labels, Examples) {
  const VoxelGridSpec s{{0, 0, 0}, 1.0, {3, 3, 3}};
  const std::vector<Eigen::Vector3d> one{s.center(1, 1, 1)};
  const std::vector<std::uint16_t> l7{7};
  const auto g = assign_voxel_labels(voxelize_trilinear(one, {}, s).grid, one, l7, 0.5);
  EXPECT_EQ(g.occupied_count(), 1u);
  EXPECT_EQ(g.label[s.index(1, 1, 1)], 7);

  const std::vector<Eigen::Vector3d> two{s.center(0, 0, 0), s.center(0, 0, 0)};
  const std::vector<std::uint16_t> l21{2, 1};
  const auto t = assign_voxel_labels(voxelize_trilinear(two, {}, s).grid, two, l21, 0.5);
  EXPECT_EQ(t.label[s.index(0, 0, 0)], 1);

  const auto none = assign_voxel_labels(voxelize_trilinear(two, {}, s).grid, two, l21, 2.5);
  EXPECT_EQ(none.occupied_count(), 0u);
  for (auto l : none.label) EXPECT_EQ(l, 0);

  EXPECT_THROW(assign_voxel_labels(voxelize_trilinear(two, {}, s).grid, two, l7, 0.5), ValidationError);
}

TEST(Labels, ArgmaxOfSplattedLabelMass) {
  // Voxel 0 holds one centred class-3 point and two off-centre class-2 points.
  const VoxelGridSpec s{{0, 0, 0}, 1.0, {2, 1, 1}};
  const std::vector<Eigen::Vector3d> pts{{0.5, 0.5, 0.5}, {0.9, 0.5, 0.5}, {0.9, 0.5, 0.5}};
  const std::vector<std::uint16_t> lab{3, 2, 2};
  const auto g = assign_voxel_labels(voxelize_trilinear(pts, {}, s).grid, pts, lab, 0.5);
  // Voxel 0 receives 1.0 from class 3 and 0.6 + 0.6 from class 2.
  EXPECT_EQ(g.label[0], 2);
  EXPECT_EQ(g.label[1], 2);
  const std::vector<std::uint16_t> lab2{3, 2, 4};
  const auto h = assign_voxel_labels(voxelize_trilinear(pts, {}, s).grid, pts, lab2, 0.5);
  EXPECT_EQ(h.label[0], 3);
  for (std::size_t v = 0; v < h.count(); ++v) {
    if (h.label[v] != 0) {
      EXPECT_GT(h.mass[v], 0.0);
    }
  }
}

TEST(GridFiles, RoundTrip) {
  testutil::TempDir dir;
  const VoxelGridSpec s{{1, 2, 3}, 0.5, {3, 4, 5}};
  std::vector<Eigen::Vector3d> pts{{1.6, 2.7, 3.3}, {2.1, 3.0, 4.9}};
  std::vector<std::uint16_t> lab{4, 5};
  auto g = assign_voxel_labels(voxelize_trilinear(pts, {}, s).grid, pts, lab, 0.2);
  g.known[3] = 0;
  save_grid(g, dir / "g");
  const auto r = load_grid(dir / "g");
  EXPECT_EQ(r.spec, s);
  EXPECT_EQ(r.label, g.label);
  EXPECT_EQ(r.known, g.known);
  EXPECT_EQ(r.occupied, g.occupied);
  EXPECT_EQ(r.tau, 0.2);
  for (std::size_t v = 0; v < g.count(); ++v) EXPECT_EQ(r.mass[v], static_cast<double>(static_cast<float>(g.mass[v])));
}
