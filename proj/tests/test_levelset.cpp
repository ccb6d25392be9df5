#include <gtest/gtest.h>

#include "support.hpp"

using namespace covseg;
using namespace covseg::testing;

TEST(LevelSetParams, StudyDefaults) {
  const auto lung = LevelSetParams::lung();
  EXPECT_EQ(lung.t_low, -860.0);
  EXPECT_EQ(lung.t_high, -200.0);
  EXPECT_EQ(lung.curvature_weight, 0.6);
  const auto lesion = LevelSetParams::lesion();
  EXPECT_EQ(lesion.t_low, -700.0);
  EXPECT_EQ(lesion.t_high, 200.0);
  EXPECT_EQ(lesion.curvature_weight, 0.6);
}

TEST(LevelSetParams, RejectsInvalidWeights) {
  LevelSetParams p;
  p.t_low = 10;
  p.t_high = 0;
  EXPECT_THROW(p.validate(), InvalidArgumentError);
  p = {};
  p.curvature_weight = 0.7;
  p.model_weight = 0.4;
  EXPECT_THROW(p.validate(), InvalidArgumentError);
  p = {};
  p.max_iterations = 0;
  EXPECT_THROW(p.validate(), InvalidArgumentError);
}

TEST(ThresholdLevelSet, UniformInRangeVolumeFillsDomain) {
  const Geometry g = cube(24);
  const Volume v(g, -500.0f);
  LevelSetParams p;
  p.curvature_weight = 0;
  p.max_iterations = 400;
  const DistanceMap d = threshold_levelset(v, p, SeedRegion{ball(g, {12, 12, 12}, 3)});
  EXPECT_EQ(count_nonzero(positive_region(d)), g.voxel_count());
}

TEST(ThresholdLevelSet, OutOfRangeVolumeHasNoSeed) {
  const Geometry g = cube(16);
  const Volume v(g, 100.0f);
  EXPECT_THROW(threshold_levelset(v, LevelSetParams{}, SeedRegion{ball(g, {8, 8, 8}, 3)}), EmptySeedError);
  EXPECT_THROW(lung_field_estimate(Volume(g, -1000.0f)), EmptySeedError);
}

TEST(ThresholdLevelSet, IndexSeedsOutsideGridAreRejected) {
  const Geometry g = cube(8);
  const Volume v(g, -500.0f);
  EXPECT_THROW(threshold_levelset(v, {}, SeedRegion{std::vector<Index3>{{9, 0, 0}}}), OutOfDomainError);
}

TEST(SeedRegion, PointSeedsBecomeBalls) {
  Geometry g = cube(20);
  g.spacing = {1, 1, 2};
  const Mask m = SeedRegion{std::vector<Index3>{{10, 10, 10}}}.to_mask(g);
  std::size_t expect = 0;
  for (int k = 0; k < 20; ++k)
    for (int j = 0; j < 20; ++j)
      for (int i = 0; i < 20; ++i) {
        const double d2 = (i - 10) * (i - 10) + (j - 10) * (j - 10) + 4.0 * (k - 10) * (k - 10);
        expect += d2 <= 25;
        ASSERT_EQ(m.at(i, j, k) != 0, d2 <= 25);
      }
  EXPECT_EQ(count_nonzero(m), expect);
}

namespace {

/// 6-connected flood fill of the window from the in-window seed voxels.
Mask flood_fill(const Mask& window, const Mask& seed) {
  const Geometry& g = window.geometry();
  Mask out(g);
  std::vector<Index3> stack;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        if (seed.at(i, j, k) && window.at(i, j, k)) {
          out.at(i, j, k) = 1;
          stack.push_back({i, j, k});
        }
  while (!stack.empty()) {
    const Index3 p = stack.back();
    stack.pop_back();
    const int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (const auto& d : nb) {
      const int i = p[0] + d[0], j = p[1] + d[1], k = p[2] + d[2];
      if (!g.contains(i, j, k) || !window.at(i, j, k) || out.at(i, j, k)) continue;
      out.at(i, j, k) = 1;
      stack.push_back({i, j, k});
    }
  }
  return out;
}

}  // namespace

TEST(ThresholdLevelSet, ZeroCurvatureEqualsFloodFill) {
  std::mt19937_64 rng(31);
  for (int t = 0; t < 6; ++t) {
    const Geometry g = cube(t % 2 ? 32 : 24);
    const Mask window = random_mask(rng, g, 5, 0.0);
    Volume v(g);
    for (std::size_t n = 0; n < v.size(); ++n) v[n] = window[n] ? -500.0f : 500.0f;
    const Mask seed = ball(g, g.to_world(Vec3{g.dims[0] / 2.0, g.dims[1] / 2.0, g.dims[2] / 2.0}), 6);
    if (count_nonzero(flood_fill(window, seed)) == 0) continue;
    LevelSetParams p = LevelSetParams::lesion();
    p.curvature_weight = 0;
    p.max_iterations = 2000;
    EvolutionStats st;
    const Mask got = positive_region(threshold_levelset(v, p, SeedRegion{seed}, &st));
    const Mask want = flood_fill(window, seed);
    std::size_t extra = 0, missing = 0;
    for (std::size_t n = 0; n < got.size(); ++n) {
      extra += got[n] && !want[n];
      missing += want[n] && !got[n];
    }
    EXPECT_EQ(extra, 0u) << t;
    EXPECT_EQ(missing, 0u) << t << " of " << count_nonzero(want) << " after " << st.iterations << " iterations";
  }
}

class ChestPhantom : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { chest_ = new phantom::Chest(phantom::make_chest({})); }
  static void TearDownTestSuite() {
    delete chest_;
    chest_ = nullptr;
  }
  static phantom::Chest* chest_;
};
phantom::Chest* ChestPhantom::chest_ = nullptr;

TEST_F(ChestPhantom, SeedInsideOneLungRecoversIt) {
  const DistanceMap d = threshold_levelset(chest_->ct, LevelSetParams::lung(), SeedRegion{std::vector<Index3>{{91, 63, 63}}});
  EXPECT_GE(dice(positive_region(d), chest_->left), 0.97);
}

TEST_F(ChestPhantom, LungFieldCoversBothLungsOnly) {
  const DistanceMap d = lung_field_estimate(chest_->ct);
  EXPECT_GE(dice(positive_region(d), mask_union(chest_->left, chest_->right)), 0.95);
}

TEST_F(ChestPhantom, ThreadCountDoesNotChangeBits) {
  LevelSetParams p = LevelSetParams::lung();
  const SeedRegion seed{std::vector<Index3>{{35, 63, 63}}};
  const DistanceMap a = threshold_levelset(chest_->ct, p, seed);
  p.threads = 3;
  EXPECT_EQ(threshold_levelset(chest_->ct, p, seed), a);
}

TEST(MultiresLevelSet, GroundGlassBallAndSelfConsistency) {
  phantom::ChestSpec spec;
  spec.lesions.push_back({phantom::Ellipsoid{{91.5, 63.5, 63.5}, {10, 10, 10}}, -400});
  const phantom::Chest c = phantom::make_chest(spec);
  const Volume masked = mask_volume(c.ct, mask_union(c.left, c.right));
  const LevelSetParams p = LevelSetParams::lesion();
  const Mask multi = positive_region(multires_levelset(masked, p));
  EXPECT_GE(dice(multi, c.lesions[0]), 0.95);
  const Mask single = positive_region(threshold_levelset(masked, p, SeedRegion{in_range_mask(masked, p.t_low, p.t_high)}));
  EXPECT_GE(dice(multi, single), 0.98);
}

TEST(Curvature, PlaneIsFlat) {
  DistanceMap d(cube(10));
  std::size_t n = 0;
  for (int k = 0; k < 10; ++k)
    for (int j = 0; j < 10; ++j)
      for (int i = 0; i < 10; ++i, ++n) d[n] = 4.5 - i;
  EXPECT_NEAR(curvature_at(d, {4, 4, 4}), 0.0, 1e-6);
  EXPECT_EQ(curvature_at(DistanceMap(cube(5), 0.0), {2, 2, 2}), 0.0);
}

TEST(Curvature, SphereIsTwoOverRadius) {
  const Geometry g = cube(40);
  const Vec3 c{20, 20, 20};
  DistanceMap d(g);
  std::size_t n = 0;
  for (int k = 0; k < 40; ++k)
    for (int j = 0; j < 40; ++j)
      for (int i = 0; i < 40; ++i, ++n) d[n] = 12 - norm(g.to_world(i, j, k) - c);
  for (const Index3 v : {Index3{32, 20, 20}, Index3{20, 8, 20}, Index3{27, 27, 20}}) {
    const double r = norm(g.to_world(v[0], v[1], v[2]) - c);
    EXPECT_NEAR(curvature_at(d, v), 2 / r, 0.15 * 2 / r);
  }
  EXPECT_THROW(curvature_at(d, {0, 5, 5}), OutOfDomainError);
}
