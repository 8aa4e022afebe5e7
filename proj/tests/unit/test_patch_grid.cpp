#include <cmath>
#include <numbers>
#include <random>

#include "doctest.h"
#include "dyntex/patch_grid.hpp"
#include "oracles.hpp"
#include "test_util.hpp"

using namespace dyntex;
using namespace dyntex::patchgrid;

TEST_CASE("cut_patches counts and origins") {
  const RasterImage img16(16, 16, 1, 0.3f);
  const auto one = cut_patches(img16, {16, 1});
  CHECK(one.size() == 1);
  CHECK(one.origins[0] == PatchOrigin{0, 0});

  const auto nine = cut_patches(RasterImage(18, 18, 3), {16, 1});
  REQUIRE(nine.size() == 9);
  CHECK(nine.origins[0] == PatchOrigin{0, 0});
  CHECK(nine.origins[1] == PatchOrigin{1, 0});
  CHECK(nine.origins[8] == PatchOrigin{2, 2});

  CHECK(cut_patches(RasterImage(64, 64, 3), {16, 4}).size() == 169);
}

TEST_CASE("cut_patches copies windows exactly") {
  std::mt19937_64 rng(2);
  const auto img = oracle::random_image(rng, 20, 23, 3);
  const auto set = cut_patches(img, {5, 3}, 4);
  CHECK(set.frame_index == 4);
  for (std::size_t i = 0; i < set.size(); ++i) {
    const auto o = set.origins[i];
    const auto p = set.patch(i);
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 5; ++x)
        for (int c = 0; c < 3; ++c) REQUIRE(p[(y * 5 + x) * 3 + c] == img.at(o.y + y, o.x + x, c));
  }
}

TEST_CASE("cut_patches errors") {
  CHECK_THROWS_CODE(cut_patches(RasterImage(10, 20, 1), {16, 1}), Errc::SourceTooSmall);
  CHECK_THROWS_CODE(cut_patches(RasterImage(17, 17, 1), {16, 2}), Errc::NonDivisible);
  CHECK_THROWS_CODE(cut_patches(RasterImage(16, 16, 1), {4, 5}), Errc::InvalidArgument);
}

TEST_CASE("patch count matches the closed form") {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 200; ++t) {
    const int p = std::uniform_int_distribution<int>(1, 16)(rng);
    const int s = std::uniform_int_distribution<int>(1, p)(rng);
    const int gh = std::uniform_int_distribution<int>(1, 6)(rng);
    const int gw = std::uniform_int_distribution<int>(1, 6)(rng);
    const int h = p + (gh - 1) * s, w = p + (gw - 1) * s;
    CHECK(patch_count(h, w, {p, s}) == static_cast<std::size_t>(((h - p) / s + 1) * ((w - p) / s + 1)));
  }
}

TEST_CASE("gaussian_weight values") {
  CHECK(gaussian_weight(3, 3, 3, 3, 4.0) == doctest::Approx(1.0 / (32.0 * std::numbers::pi)));
  CHECK(gaussian_weight(3, 3, 3, 3, 4.0) == doctest::Approx(0.00994718).epsilon(1e-6));
  CHECK(gaussian_weight(0, 0, 3, 4, 4.0) == doctest::Approx(std::exp(-25.0 / 32.0) / (32.0 * std::numbers::pi)));
  // radial symmetry: (5,0) and (3,4) are both at distance 5
  CHECK(gaussian_weight(5, 0, 0, 0, 2.5) == doctest::Approx(gaussian_weight(3, 4, 0, 0, 2.5)));
  const auto k = gaussian_kernel(16, 4.0);
  CHECK(k[0] == doctest::Approx(gaussian_weight(0, 0, 7.5, 7.5, 4.0)));
  CHECK(k[7 * 16 + 7] == k[8 * 16 + 8]);
}

TEST_CASE("merge of constant patches is constant") {
  auto set = cut_patches(RasterImage(22, 22, 3, 0.0f), {16, 2});
  std::fill(set.values.begin(), set.values.end(), 0.37f);
  const auto out = merge_patches(set, {16, 2}, {});
  for (float v : out.data) CHECK(v == doctest::Approx(0.37f).epsilon(1e-6));
}

TEST_CASE("merge inverts cut for random images and specs") {
  std::mt19937_64 rng(21);
  for (int t = 0; t < 30; ++t) {
    const int p = std::uniform_int_distribution<int>(1, 12)(rng);
    const int s = std::uniform_int_distribution<int>(1, p)(rng);
    const int h = p + std::uniform_int_distribution<int>(0, 4)(rng) * s;
    const int w = p + std::uniform_int_distribution<int>(0, 4)(rng) * s;
    const auto img = oracle::random_image(rng, h, w, t % 2 ? 3 : 1);
    const auto back = merge_patches(cut_patches(img, {p, s}), {p, s}, {4.0});
    for (std::size_t i = 0; i < img.data.size(); ++i) REQUIRE(std::abs(back.data[i] - img.data[i]) <= 1e-6);
  }
}

TEST_CASE("merge matches the naive accumulation oracle") {
  std::mt19937_64 rng(4);
  auto set = cut_patches(RasterImage(18, 18, 3), {16, 1});
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : set.values) v = u(rng);
  const auto got = merge_patches(set, {16, 1}, {4.0});
  const auto want = oracle::naive_merge(set, 4.0);
  for (std::size_t i = 0; i < want.size(); ++i)
    REQUIRE(std::abs(static_cast<double>(got.data[i]) - static_cast<float>(want[i])) <= 1e-9);
}

TEST_CASE("merge is linear in patch values") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  auto p = cut_patches(RasterImage(20, 20, 1), {8, 4});
  auto q = p, mix = p;
  for (auto& v : p.values) v = u(rng);
  for (auto& v : q.values) v = u(rng);
  const float a = 0.3f, b = 0.6f;
  for (std::size_t i = 0; i < mix.values.size(); ++i) mix.values[i] = a * p.values[i] + b * q.values[i];
  const auto mp = merge_patches(p, {8, 4}, {}), mq = merge_patches(q, {8, 4}, {});
  const auto mm = merge_patches(mix, {8, 4}, {});
  for (std::size_t i = 0; i < mm.data.size(); ++i) CHECK(mm.data[i] == doctest::Approx(a * mp.data[i] + b * mq.data[i]).epsilon(1e-5));
}

TEST_CASE("merge reports coverage gaps") {
  auto set = cut_patches(RasterImage(20, 20, 1), {8, 4});
  set.origins.pop_back();
  set.values.resize(set.size() * set.patch_len());
  CHECK_THROWS_CODE(merge_patches(set, {8, 4}, {}), Errc::CoverageGap);
  CHECK_THROWS_CODE(merge_patches(cut_patches(RasterImage(8, 8, 1), {8, 4}), {8, 4}, {0.0}), Errc::InvalidArgument);
}
