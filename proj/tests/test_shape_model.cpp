#include <gtest/gtest.h>

#include "support.hpp"

using namespace covseg;
using namespace covseg::testing;

namespace {

DistanceMap ellipsoid_map(const Geometry& g, const Vec3& c, const Vec3& r) {
  return signed_distance(phantom::ellipsoid_mask(g, {c, r}));
}

/// fixed(x) = moving(T^-1 x): the exact pair a perfect registration undoes.
DistanceMap warp_through(const DistanceMap& moving, const AffineTransform& t) {
  const AffineTransform inv = t.inverse();
  const Geometry& g = moving.geometry();
  DistanceMap out(g);
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n)
        out[n] = sample_linear(moving, g.to_index(inv.apply(g.to_world(i, j, k))), -kDefaultDistanceCap);
  return out;
}

double ssd_after(const DistanceMap& moving, const DistanceMap& fixed, const AffineTransform& t) {
  const DistanceMap w = warp_through(moving, t);
  double s = 0;
  for (std::size_t n = 0; n < w.size(); ++n) s += (w[n] - fixed[n]) * (w[n] - fixed[n]);
  return s;
}

std::vector<DistanceMap> small_family(int count, std::uint64_t seed) {
  std::vector<DistanceMap> out;
  for (const auto& e : phantom::lung_family(phantom::Ellipsoid{{12, 12, 12}, {6, 7, 8}}, count, seed, 0.15, 2.0))
    out.push_back(signed_distance(phantom::ellipsoid_mask(cube(24), e)));
  return out;
}

}  // namespace

// ---- PCA ---------------------------------------------------------------------------

TEST(BuildShapeModel, TwoSamplesReconstructExactly) {
  const auto t = small_family(2, 1);
  const ShapeModel m = build_shape_model(t, Side::left);
  ASSERT_EQ(m.modes(), 1u);
  for (std::size_t n = 0; n < m.mean.size(); ++n) ASSERT_DOUBLE_EQ(m.mean[n], 0.5 * (t[0][n] + t[1][n]));
  for (const auto& x : t) {
    double b = 0;
    for (std::size_t n = 0; n < x.size(); ++n) b += (x[n] - m.mean[n]) * m.components[0][n];
    for (std::size_t n = 0; n < x.size(); ++n) ASSERT_NEAR(m.mean[n] + b * m.components[0][n], x[n], 1e-9);
  }
}

TEST(BuildShapeModel, FourteenSamplesOrthonormalModesReconstructTraining) {
  const auto t = small_family(14, 2);
  const ShapeModel m = build_shape_model(t, Side::right);
  ASSERT_LE(m.modes(), 13u);
  ASSERT_GE(m.modes(), 1u);
  for (std::size_t a = 0; a < m.modes(); ++a) {
    if (a > 0) {
      EXPECT_GE(m.eigenvalues[a - 1], m.eigenvalues[a]);
    }
    EXPECT_GT(m.eigenvalues[a], 0);
    for (std::size_t b = a; b < m.modes(); ++b)
      EXPECT_NEAR(inner(m.components[a], m.components[b]), a == b ? 1.0 : 0.0, 1e-6);
  }
  for (const auto& x : t) {
    DistanceMap r = m.mean;
    double peak = 0;
    for (const auto& c : m.components) {
      double b = 0;
      for (std::size_t n = 0; n < x.size(); ++n) b += (x[n] - m.mean[n]) * c[n];
      for (std::size_t n = 0; n < x.size(); ++n) r[n] += b * c[n];
    }
    double worst = 0;
    for (std::size_t n = 0; n < x.size(); ++n) {
      worst = std::max(worst, std::abs(r[n] - x[n]));
      peak = std::max(peak, std::abs(x[n]));
    }
    EXPECT_LT(worst, 1e-4 * peak);
  }
}

TEST(BuildShapeModel, RejectsTooFewOrMismatchedSamples) {
  auto t = small_family(1, 3);
  EXPECT_THROW(build_shape_model(t, Side::left), InsufficientDataError);
  t.push_back(DistanceMap(cube(20), 1.0));
  EXPECT_THROW(build_shape_model(t, Side::left), GeometryError);
}

TEST(ShapeModelFiles, SaveLoadRoundTrip) {
  TempDir dir;
  const ShapeModel m = build_shape_model(small_family(4, 4), Side::right);
  save_shape_model(dir.path(), m);
  EXPECT_TRUE(std::filesystem::exists(dir / "mean.nii.gz"));
  EXPECT_TRUE(std::filesystem::exists(dir / "comp_000.nii.gz"));
  EXPECT_TRUE(std::filesystem::exists(dir / "manifest.txt"));
  const ShapeModel back = load_shape_model(dir.path());
  EXPECT_EQ(back.side, Side::right);
  ASSERT_EQ(back.modes(), m.modes());
  for (std::size_t a = 0; a < m.modes(); ++a) {
    EXPECT_NEAR(back.eigenvalues[a], m.eigenvalues[a], 1e-9 * m.eigenvalues[a]);
    for (std::size_t n = 0; n < m.mean.size(); ++n) ASSERT_NEAR(back.components[a][n], m.components[a][n], 1e-6);
  }
  for (std::size_t n = 0; n < m.mean.size(); ++n) ASSERT_NEAR(back.mean[n], m.mean[n], 1e-5);
}

// ---- projection -----------------------------------------------------------------

TEST(FitModel, ProjectionAndClipping) {
  const ShapeModel m = build_shape_model(small_family(6, 5), Side::left);
  const auto id = AffineTransform::identity();
  {
    const auto [phi, c] = fit_model(m, id, m.mean);
    for (double b : c.b) EXPECT_NEAR(b, 0.0, 1e-9);
    for (std::size_t n = 0; n < phi.size(); ++n) ASSERT_NEAR(phi[n], m.mean[n], 1e-9);
  }
  const double s1 = std::sqrt(m.eigenvalues[0]);
  for (double mult : {2.0, 5.0, -5.0}) {
    DistanceMap x = m.mean;
    for (std::size_t n = 0; n < x.size(); ++n) x[n] += mult * s1 * m.components[0][n];
    const auto [phi, c] = fit_model(m, id, x);
    // explicit inner products as the oracle
    const double oracle = std::clamp(inner(x, m.components[0]) - inner(m.mean, m.components[0]), -3 * s1, 3 * s1);
    EXPECT_NEAR(c.b[0], oracle, 1e-6);
    EXPECT_NEAR(c.b[0], std::clamp(mult, -3.0, 3.0) * s1, 1e-6);
    for (std::size_t a = 1; a < c.b.size(); ++a) EXPECT_NEAR(c.b[a], 0.0, 1e-6);
    for (std::size_t a = 0; a < c.b.size(); ++a) EXPECT_LE(std::abs(c.b[a]), 3 * std::sqrt(m.eigenvalues[a]) + 1e-12);
  }
}

// ---- registration -----------------------------------------------------------------

TEST(RegisterAffine, IdentityIsAFixedPoint) {
  const DistanceMap d = ellipsoid_map(cube(48), {24, 23, 25}, {10, 13, 16});
  const AffineTransform t = register_affine(d, d);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(t.translation[a], 0.0, 0.5);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(t.matrix(r, c), r == c ? 1.0 : 0.0, 1e-2);
}

TEST(RegisterAffine, RecoversTranslation) {
  const DistanceMap moving = ellipsoid_map(cube(64), {32, 32, 32}, {12, 15, 18});
  AffineTransform truth;
  truth.translation = {10, -6, 4};
  const DistanceMap fixed = warp_through(moving, truth);
  const AffineTransform t = register_affine(moving, fixed);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(t.translation[a], truth.translation[a], 1.0);
  EXPECT_LE(ssd_after(moving, fixed, t), 0.1 * ssd_after(moving, fixed, AffineTransform::identity()));
}

TEST(RegisterAffine, RecoversIsotropicScale) {
  const DistanceMap moving = ellipsoid_map(cube(64), {32, 32, 32}, {11, 14, 17});
  AffineTransform truth;
  truth.matrix = Mat3::diagonal({1.1, 1.1, 1.1});
  const Vec3 c{32, 32, 32};
  truth.translation = c - truth.matrix * c;
  const DistanceMap fixed = warp_through(moving, truth);
  const AffineTransform t = register_affine(moving, fixed);
  for (int a = 0; a < 3; ++a) EXPECT_NEAR(t.matrix(a, a), 1.1, 0.022);
  EXPECT_LE(ssd_after(moving, fixed, t), 0.1 * ssd_after(moving, fixed, AffineTransform::identity()));
}

TEST(RegisterAffine, UniformMapsAreRejected) {
  const DistanceMap d = ellipsoid_map(cube(16), {8, 8, 8}, {4, 4, 4});
  EXPECT_THROW(register_affine(DistanceMap(cube(16), 1.0), d), InvalidArgumentError);
}

TEST(AffineTransform, SingularMatrixHasNoInverse) {
  AffineTransform t;
  t.matrix = Mat3::diagonal({1, 0, 1});
  EXPECT_THROW(t.inverse(), GeometryError);
}

// ---- model level set ----------------------------------------------------------------

TEST(ModelLevelSet, DefaultWeights) {
  const LevelSetParams p = model_levelset_defaults();
  EXPECT_EQ(p.curvature_weight, 0.3);
  EXPECT_EQ(p.model_weight, 0.1);
  EXPECT_EQ(kModelRefitInterval, 10);
}

TEST(ModelLevelSet, ZeroModelWeightIsThresholdLevelSet) {
  const phantom::Chest c = phantom::make_chest({});
  const Geometry& g = c.ct.geometry();
  const ShapeModel m = build_shape_model(phantom::lung_family_maps(g, phantom::ChestSpec{}.left_lung, 3, 9), Side::left);
  LevelSetParams p = model_levelset_defaults();
  p.model_weight = 0;
  const Mask seed = ball(g, {91.5, 63.5, 63.5}, 6);
  const DistanceMap a = model_levelset(c.ct, m, AffineTransform::identity(), p, seed);
  const DistanceMap b = threshold_levelset(c.ct, p, SeedRegion{seed});
  EXPECT_EQ(a, b);
}

class LungPipeline : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    scene_ = new LungScene(make_lung_scene());
    chest_ = new phantom::Chest(phantom::make_chest(scene_->spec));
    seg_ = new LungSegmentation(segment_lungs(chest_->ct, scene_->left, scene_->right));
  }
  static void TearDownTestSuite() {
    delete seg_;
    delete chest_;
    delete scene_;
  }
  static LungScene* scene_;
  static phantom::Chest* chest_;
  static LungSegmentation* seg_;
};
LungScene* LungPipeline::scene_ = nullptr;
phantom::Chest* LungPipeline::chest_ = nullptr;
LungSegmentation* LungPipeline::seg_ = nullptr;

TEST_F(LungPipeline, EachLungMatchesTruth) {
  EXPECT_GE(dice(positive_region(seg_->left), chest_->left), 0.95);
  EXPECT_GE(dice(positive_region(seg_->right), chest_->right), 0.95);
}

TEST_F(LungPipeline, MeshesAreClosedOnTheirOwnSide) {
  ASSERT_TRUE(is_closed(seg_->left_mesh));
  ASSERT_TRUE(is_closed(seg_->right_mesh));
  auto centroid_x = [](const Mesh& m) {
    double s = 0;
    for (const auto& p : m.vertices) s += p[0];
    return s / static_cast<double>(m.vertices.size());
  };
  EXPECT_GT(centroid_x(seg_->left_mesh), 63.5);
  EXPECT_LT(centroid_x(seg_->right_mesh), 63.5);
  const Geometry& g = chest_->ct.geometry();
  const Mask l = mesh_to_mask(seg_->left_mesh, g), r = mesh_to_mask(seg_->right_mesh, g);
  for (std::size_t n = 0; n < l.size(); ++n) ASSERT_FALSE(l[n] && r[n]);
}

TEST(SegmentLungs, AllAirFailsInLungFieldStage) {
  const Geometry g = cube(32);
  const ShapeModel m = build_shape_model(small_family(2, 8), Side::left);
  try {
    segment_lungs(Volume(g, -1000.0f), m, m);
    FAIL() << "expected a stage error";
  } catch (const StageError& e) {
    EXPECT_EQ(e.stage(), "lung_field");
    EXPECT_THROW(std::rethrow_exception(e.cause()), EmptySeedError);
  }
}
