// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "occanykit/tensorio.hpp"
#include "test_util.hpp"

using namespace occanykit;
namespace fs = std::filesystem;

namespace {

std::vector<char> file_bytes(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream f(p, std::ios::binary);
  f.write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST(TensorIO, F32VectorIs26Bytes) {
  testutil::TempDir dir;
  const TensorBlob b({3}, std::vector<float>{1.f, 2.f, 3.f});
  const auto n = write_tensor(b, dir / "a.oak");
  EXPECT_EQ(n, 26u);
  EXPECT_EQ(fs::file_size(dir / "a.oak"), 26u);

  // Header laid out by hand.
  const auto bytes = file_bytes(dir / "a.oak");
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "OAKTENS1");
  EXPECT_EQ(bytes[8], 1);  // f32
  EXPECT_EQ(bytes[9], 1);  // rank
  EXPECT_EQ(static_cast<unsigned char>(bytes[10]), 3);
  EXPECT_EQ(bytes[11] | bytes[12] | bytes[13], 0);
  float v = 0.f;
  std::memcpy(&v, bytes.data() + 14 + 4, 4);
  EXPECT_EQ(v, 2.f);
}

TEST(TensorIO, F64TwoByTwoPayloadIs32Bytes) {
  testutil::TempDir dir;
  const TensorBlob b({2, 2}, std::vector<double>{1, 2, 3, 4});
  const auto n = write_tensor(b, dir / "a.oak");
  const std::size_t header = 8 + 1 + 1 + 2 * 4;
  EXPECT_EQ(n - header, 32u);
}

TEST(TensorIO, RoundTripAllDtypes) {
  testutil::TempDir dir;
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::size_t> shape;
    const std::size_t rank = 1 + rng() % 4;
    for (std::size_t r = 0; r < rank; ++r) shape.push_back(1 + rng() % 5);
    const std::size_t n = TensorBlob::product(shape);
    TensorBlob b;
    switch (trial % 5) {
      case 0: {
        std::vector<float> v(n);
        for (auto& x : v) x = static_cast<float>(std::uniform_real_distribution<>(-1e3, 1e3)(rng));
        b = TensorBlob(shape, v);
        break;
      }
      case 1: {
        std::vector<double> v(n);
        for (auto& x : v) x = std::uniform_real_distribution<>(-1e9, 1e9)(rng);
        b = TensorBlob(shape, v);
        break;
      }
      case 2: {
        std::vector<std::uint8_t> v(n);
        for (auto& x : v) x = static_cast<std::uint8_t>(rng());
        b = TensorBlob(shape, v);
        break;
      }
      case 3: {
        std::vector<std::int32_t> v(n);
        for (auto& x : v) x = static_cast<std::int32_t>(rng());
        b = TensorBlob(shape, v);
        break;
      }
      default: {
        std::vector<std::uint16_t> v(n);
        for (auto& x : v) x = static_cast<std::uint16_t>(rng());
        b = TensorBlob(shape, v);
      }
    }
    const fs::path p = dir / ("t" + std::to_string(trial) + ".oak");
    write_tensor(b, p);
    EXPECT_EQ(read_tensor(p), b);
    // read then write reproduces the same bytes
    const auto before = file_bytes(p);
    write_tensor(read_tensor(p), dir / "again.oak");
    EXPECT_EQ(file_bytes(dir / "again.oak"), before);
  }
}

TEST(TensorIO, BadMagic) {
  testutil::TempDir dir;
  write_tensor(TensorBlob({1}, std::vector<float>{1.f}), dir / "a.oak");
  auto b = file_bytes(dir / "a.oak");
  std::memcpy(b.data(), "BADMAGIC", 8);
  write_bytes(dir / "a.oak", b);
  try {
    read_tensor(dir / "a.oak");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("magic"), std::string::npos);
  }
}

TEST(TensorIO, UnknownDtype) {
  testutil::TempDir dir;
  write_tensor(TensorBlob({1}, std::vector<float>{1.f}), dir / "a.oak");
  auto b = file_bytes(dir / "a.oak");
  b[8] = 9;
  write_bytes(dir / "a.oak", b);
  try {
    read_tensor(dir / "a.oak");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("dtype"), std::string::npos);
  }
}

TEST(TensorIO, TruncatedPayload) {
  // Header for [2,2] f32 followed by 12 of the 16 payload bytes.
  testutil::TempDir dir;
  std::vector<char> b{'O', 'A', 'K', 'T', 'E', 'N', 'S', '1', 1, 2, 2, 0, 0, 0, 2, 0, 0, 0};
  b.resize(b.size() + 12, 0);
  write_bytes(dir / "a.oak", b);
  try {
    read_tensor(dir / "a.oak");
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated"), std::string::npos);
  }
}

TEST(TensorIO, RankAboveEightRejected) {
  testutil::TempDir dir;
  EXPECT_THROW(write_tensor(TensorBlob(std::vector<std::size_t>(9, 1), std::vector<float>{1.f}), dir / "a.oak"),
               Error);
}

TEST(TensorIO, DeterministicBytes) {
  testutil::TempDir dir;
  const TensorBlob b({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6});
  write_tensor(b, dir / "a.oak");
  write_tensor(b, dir / "b.oak");
  EXPECT_EQ(file_bytes(dir / "a.oak"), file_bytes(dir / "b.oak"));
}

TEST(TensorIO, RasterRoundTrip) {
  Raster<double> r(2, 3, 3);
  for (std::size_t i = 0; i < r.size(); ++i) r.data()[i] = 0.5 * static_cast<double>(i);
  const TensorBlob t = to_tensor(r);
  EXPECT_EQ(t.shape(), (std::vector<std::size_t>{2, 3, 3}));
  EXPECT_EQ(to_raster<double>(t), r);
  Raster<std::uint16_t> l(2, 3, 1, 7);
  EXPECT_EQ(to_tensor(l).rank(), 2u);
}

// --- manifests -------------------------------------------------------------

namespace {

fs::path minimal_manifest(const testutil::TempDir& dir, long long h, long long w, std::size_t frames) {
  nlohmann::json j;
  j["resolution"] = {{"H", h}, {"W", w}};
  j["frames"] = nlohmann::json::array();
  for (std::size_t i = 0; i < frames; ++i) {
    const std::string name = "img" + std::to_string(i) + ".oak";
    write_tensor(TensorBlob({1}, std::vector<float>{0.f}), dir / name);
    j["frames"].push_back({{"image", name}});
  }
  write_json(j, dir / "m.json");
  return dir / "m.json";
}

}  // namespace

TEST(Manifest, MinimalLoads) {
  testutil::TempDir dir;
  const auto m = load_scene_manifest(minimal_manifest(dir, 64, 128, 2), 8);
  EXPECT_EQ(m.frames.size(), 2u);
  EXPECT_EQ(m.height, 64u);
  EXPECT_EQ(m.width, 128u);
  EXPECT_TRUE(m.frames[0].image.is_absolute() || fs::exists(m.frames[0].image));
}

TEST(Manifest, NonDivisibleHeight) {
  testutil::TempDir dir;
  try {
    load_scene_manifest(minimal_manifest(dir, 60, 128, 2), 8);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("divisible"), std::string::npos);
  }
}

TEST(Manifest, EmptyFrameList) {
  testutil::TempDir dir;
  EXPECT_THROW(load_scene_manifest(minimal_manifest(dir, 64, 64, 0), 8), ValidationError);
}

TEST(Manifest, MissingFieldAndDanglingPath) {
  testutil::TempDir dir;
  write_json(nlohmann::json{{"frames", {{{"image", "x.oak"}}}}}, dir / "a.json");
  EXPECT_THROW(load_scene_manifest(dir / "a.json"), ValidationError);
  write_json(nlohmann::json{{"resolution", {{"H", 8}, {"W", 8}}}, {"frames", {{{"image", "missing.oak"}}}}},
             dir / "b.json");
  try {
    load_scene_manifest(dir / "b.json");
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("dangling"), std::string::npos);
  }
}
