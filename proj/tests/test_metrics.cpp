#include <gtest/gtest.h>

#include "support.hpp"

using namespace covseg;
using namespace covseg::testing;

namespace {

Mask box_mask(const Geometry& g, int lo, int hi) {
  Mask m(g);
  for (int k = lo; k <= hi; ++k)
    for (int j = lo; j <= hi; ++j)
      for (int i = lo; i <= hi; ++i) m.at(i, j, k) = 1;
  return m;
}

Mask voxels(const Geometry& g, std::initializer_list<Index3> list) {
  Mask m(g);
  for (const auto& p : list) m.at(p[0], p[1], p[2]) = 1;
  return m;
}

}  // namespace

TEST(Overlap, ClosedForms) {
  const Geometry g = cube(8);
  const Mask a = box_mask(g, 1, 2);  // 8 voxels
  Mask b(g);
  for (int k = 1; k <= 2; ++k)
    for (int j = 1; j <= 2; ++j) b.at(1, j, k) = b.at(3, j, k) = 1;  // 4 shared, 8 total
  EXPECT_EQ(dice(a, a), 1.0);
  EXPECT_EQ(dice(a, box_mask(g, 4, 5)), 0.0);
  EXPECT_EQ(dice(a, b), 0.5);
  EXPECT_DOUBLE_EQ(jaccard(a, b), 1.0 / 3.0);
  EXPECT_EQ(jaccard(a, a), 1.0);
  EXPECT_EQ(dice(Mask(g), Mask(g)), 1.0);
  EXPECT_EQ(jaccard(Mask(g), Mask(g)), 1.0);
  EXPECT_THROW(dice(a, Mask(cube(4))), GeometryError);
}

TEST(Overlap, JaccardDiceIdentity) {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 100; ++t) {
    const Mask a = random_mask(rng, cube(16), 2, 0.05), b = random_mask(rng, cube(16), 2, 0.05);
    const double d = dice(a, b), j = jaccard(a, b);
    EXPECT_NEAR(j, d / (2 - d), 1e-12);
    EXPECT_GE(d, j);
    EXPECT_EQ(d, dice(b, a));
  }
}

TEST(Hd95, ClosedFormsAndErrors) {
  const Geometry g = cube(10);
  const Mask a = voxels(g, {{1, 1, 1}}), b = voxels(g, {{6, 1, 1}});
  EXPECT_EQ(hd95(a, b), 5.0);
  EXPECT_EQ(hd95(a, a), 0.0);
  EXPECT_THROW(hd95(a, Mask(g)), UndefinedMetricError);
  Geometry s = g;
  s.spacing = {0.5, 2, 3};
  EXPECT_EQ(hd95(Mask(s, a.buffer()), Mask(s, b.buffer())), 2.5);
}

TEST(Hd95, MatchesAllPairsOracle) {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 20; ++t) {
    Geometry g = cube(16);
    if (t % 2) g.spacing = {0.7, 1.1, 2.3};
    const Mask a = random_mask(rng, g, 2, 0.02), b = random_mask(rng, g, 2, 0.02);
    if (!count_nonzero(a) || !count_nonzero(b)) continue;
    EXPECT_EQ(hd95(a, b), brute_hd95(a, b));
    EXPECT_EQ(hd95(a, b), hd95(b, a));
  }
}

TEST(Hd95, NearestRankConvention) {
  EXPECT_EQ(nearest_rank({5, 1, 4, 2, 3}, 0.95), 5.0);
  std::vector<double> v(100);
  std::iota(v.begin(), v.end(), 1.0);
  EXPECT_EQ(nearest_rank(v, 0.95), 95.0);
  EXPECT_THROW(nearest_rank({}, 0.5), UndefinedMetricError);
}

TEST(Icc, HandAnovaOracle) {
  const std::vector<std::vector<double>> x{{1, 2, 3}, {4, 5, 6}, {7, 8, 9}, {10, 11, 12}};
  // MSR = 45, MSC = 4, MSE = 0 written out by hand: 45 / (45 + 0.75 * 4)
  EXPECT_NEAR(icc_a1(x), 0.9375, 1e-9);
  EXPECT_NEAR(hand_icc_a1(x), 0.9375, 1e-12);
  const AnovaTable t = two_way_anova(x);
  EXPECT_NEAR(t.msr, 45, 1e-12);
  EXPECT_NEAR(t.msc, 4, 1e-12);
  EXPECT_NEAR(t.mse, 0, 1e-12);
}

TEST(Icc, PropertiesAndErrors) {
  EXPECT_NEAR(icc_a1({{1, 1, 1}, {3, 3, 3}, {7, 7, 7}}), 1.0, 1e-12);
  EXPECT_LE(icc_a1({{1, 2, 3}, {1, 2, 3}, {1, 2, 3}}), 0.0);
  EXPECT_THROW(icc_a1({{2, 2}, {2, 2}}), UndefinedMetricError);
  EXPECT_THROW(icc_a1({{1, 2}}), InsufficientDataError);
  EXPECT_THROW(icc_a1({{1, 2}, {3}}), IncompleteGridError);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(100, 30);
  for (int t = 0; t < 20; ++t) {
    std::vector<std::vector<double>> x(8, std::vector<double>(3));
    for (auto& r : x)
      for (auto& v : r) v = n(rng);
    const double base = icc_a1(x);
    EXPECT_NEAR(base, hand_icc_a1(x), 1e-9);
    for (auto& r : x)
      for (auto& v : r) v += 1234.5;
    EXPECT_NEAR(icc_a1(x), base, 1e-9);
  }
}

TEST(Gci, ClosedFormsAndOracle) {
  const Geometry g = cube(8);
  const Mask a = box_mask(g, 0, 1), b = box_mask(g, 3, 4), c = box_mask(g, 6, 7);
  EXPECT_EQ(gci({a, a, a}), 1.0);
  EXPECT_EQ(gci({a, b, c}), 0.0);
  EXPECT_THROW(gci({Mask(g), Mask(g)}), UndefinedMetricError);
  EXPECT_THROW(gci({a}), InsufficientDataError);
  std::mt19937_64 rng(4);
  for (int t = 0; t < 20; ++t) {
    const Mask x = random_mask(rng, cube(12), 2, 0.05), y = random_mask(rng, cube(12), 2, 0.05),
               z = random_mask(rng, cube(12), 2, 0.05);
    EXPECT_EQ(gci({x, y}), jaccard(x, y));
    EXPECT_DOUBLE_EQ(gci({x, y, z}), brute_gci({x, y, z}));
    EXPECT_DOUBLE_EQ(gci({x, y, z}), gci({z, x, y}));
  }
}

TEST(Consensus, MajorityMatchesVoteCount) {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 50; ++t) {
    const Mask a = random_mask(rng, cube(8), 1, 0.3), b = random_mask(rng, cube(8), 1, 0.3),
               c = random_mask(rng, cube(8), 1, 0.3);
    const Mask m = consensus_majority({a, b, c});
    EXPECT_EQ(m, brute_majority({a, b, c}));
    EXPECT_EQ(m, consensus_majority({c, a, b}));
    EXPECT_EQ(m, consensus_majority({a, b, c}, 2));
  }
  const Mask one = voxels(cube(4), {{1, 1, 1}});
  EXPECT_EQ(count_nonzero(consensus_majority({one, Mask(cube(4)), Mask(cube(4))})), 0u);
  EXPECT_EQ(consensus_majority({one, one, one}), one);
  EXPECT_THROW(consensus_majority({one, one}, 3), InvalidArgumentError);
}

TEST(BlandAltman, FormulaOracle) {
  const auto same = bland_altman({{1, 1}, {5, 5}, {9, 9}});
  EXPECT_EQ(same.bias, 0.0);
  EXPECT_EQ(same.lower, 0.0);
  EXPECT_EQ(same.upper, 0.0);
  const auto shifted = bland_altman({{1, 4}, {5, 8}, {9, 12}});
  EXPECT_DOUBLE_EQ(shifted.bias, -3.0);
  EXPECT_EQ(shifted.sd, 0.0);
  EXPECT_THROW(bland_altman({{1, 2}}), InsufficientDataError);

  std::mt19937_64 rng(6);
  std::uniform_real_distribution<double> u(0, 500);
  std::vector<std::pair<double, double>> p;
  for (int i = 0; i < 10; ++i) p.emplace_back(u(rng), u(rng));
  const auto r = bland_altman(p);
  double s = 0, ss = 0;
  for (const auto& [x, y] : p) s += x - y;
  const double bias = s / 10;
  for (const auto& [x, y] : p) ss += (x - y - bias) * (x - y - bias);
  const double sd = std::sqrt(ss / 9);
  EXPECT_NEAR(r.bias, bias, 1e-12);
  EXPECT_NEAR(r.lower, bias - 1.96 * sd, 1e-12);
  EXPECT_NEAR(r.upper, bias + 1.96 * sd, 1e-12);
  for (std::size_t i = 0; i < p.size(); ++i) {
    EXPECT_NEAR(r.points[i].mean, 0.5 * (p[i].first + p[i].second), 1e-12);
    EXPECT_NEAR(r.points[i].diff, p[i].first - p[i].second, 1e-12);
  }
}

// ---- volume statistics -------------------------------------------------------------

TEST(VolumeStats, IdenticalRatersAgreePerfectly) {
  const Geometry g = cube(10);
  RaterSet rs;
  rs.raters = {{"e1", RaterGroup::expert}, {"e2", RaterGroup::expert}, {"n1", RaterGroup::novice}};
  rs.case_ids = {"a", "b"};
  rs.masks = {{box_mask(g, 1, 3), box_mask(g, 1, 3), box_mask(g, 1, 3)},
              {box_mask(g, 2, 7), box_mask(g, 2, 7), box_mask(g, 2, 7)}};
  const AgreementReport rep = volume_stats(rs);
  const auto& s = rep.volume_summary.at("global");
  EXPECT_EQ(s.mavd, 0.0);
  EXPECT_EQ(s.mrvd, 0.0);
  EXPECT_NEAR(*s.icc, 1.0, 1e-12);
  for (double v : rep.gci.at("global")) EXPECT_EQ(v, 1.0);
  for (const auto& cv : rep.case_volume.at("global")) EXPECT_EQ(cv.sd, 0.0);
  const std::string csv = report_csv(rep);
  EXPECT_NE(csv.find("ALL,icc_a1,global,1\n"), std::string::npos);
}

TEST(VolumeStats, DilationFamilyMatchesHandCounts) {
  // cubes of side 4, 6, 8 (case a) and 2, 4, 6 (case b): nested dilations
  const Geometry g = cube(12);
  RaterSet rs;
  rs.raters = {{"r0", RaterGroup::expert}, {"r1", RaterGroup::expert}, {"r2", RaterGroup::expert}};
  rs.case_ids = {"a", "b"};
  rs.masks = {{box_mask(g, 4, 7), box_mask(g, 3, 8), box_mask(g, 2, 9)},
              {box_mask(g, 5, 6), box_mask(g, 4, 7), box_mask(g, 3, 8)}};
  const AgreementReport rep = volume_stats(rs);
  EXPECT_EQ(rep.volumes[0], (std::vector<double>{0.064, 0.216, 0.512}));
  const auto& s = rep.volume_summary.at("expert");
  EXPECT_NEAR(s.mavd, (896.0 / 3 + 416.0 / 3) / 2 / 1000, 1e-12);
  EXPECT_NEAR(s.mrvd, (896.0 / 3 / 264 + 416.0 / 3 / 96) / 2, 1e-12);
  EXPECT_NEAR(*s.icc, hand_icc_a1({{0.064, 0.216, 0.512}, {0.008, 0.064, 0.216}}), 1e-9);
  EXPECT_NEAR(rep.gci.at("expert")[0], 344.0 / 1240.0, 1e-12);
  EXPECT_NEAR(rep.gci.at("expert")[1], (8.0 + 8 + 64) / (64.0 + 216 + 216), 1e-12);
  EXPECT_NEAR(rep.case_volume.at("expert")[0].mean, 0.264, 1e-12);
  EXPECT_NEAR(s.volume.mean, (0.064 + 0.216 + 0.512 + 0.008 + 0.064 + 0.216) / 6, 1e-12);
}

TEST(VolumeStats, ThreeGroupLayoutAndReference) {
  const Geometry g = cube(12);
  RaterSet rs;
  rs.raters = {{"e1", RaterGroup::expert}, {"e2", RaterGroup::expert}, {"n1", RaterGroup::novice},
               {"n2", RaterGroup::novice}, {"ref", RaterGroup::reference}};
  rs.case_ids = {"c1", "c2", "c3"};
  for (int c = 0; c < 3; ++c)
    rs.masks.push_back({box_mask(g, 3, 6 + c), box_mask(g, 3, 7 + c), box_mask(g, 2, 6 + c), box_mask(g, 3, 6 + c),
                        box_mask(g, 3, 7 + c)});
  const AgreementReport rep = volume_stats(rs);
  for (const char* k : {"global", "expert", "novice", "inter-group"}) EXPECT_TRUE(rep.volume_summary.count(k)) << k;
  EXPECT_TRUE(rep.case_volume.count("reference"));
  ASSERT_EQ(rep.consensus.size(), 3u);
  ASSERT_EQ(rep.reference_overlap.size(), 3u);
  EXPECT_EQ(rep.reference_overlap[0].size(), 4u);
  EXPECT_EQ(rep.reference_overlap[0].at(1).dice, 1.0);
  EXPECT_TRUE(rep.bland_altman.count("expert"));
  EXPECT_TRUE(rep.bland_altman.count("novice"));
  const std::string text = report_text(rep);
  for (const char* k : {"global", "expert", "novice", "inter-group"}) EXPECT_NE(text.find(k), std::string::npos) << k;
  const std::string ba = bland_altman_csv(rep);
  EXPECT_EQ(ba.rfind("mean_ml,diff_ml,group", 0), 0u);
  EXPECT_EQ(report_csv(rep).rfind("case_id,metric,group,value", 0), 0u);
}

TEST(RaterSet, IncompleteGridIsRejected) {
  RaterSet rs;
  rs.raters = {{"a", RaterGroup::expert}, {"b", RaterGroup::novice}};
  rs.case_ids = {"x"};
  rs.masks = {{Mask(cube(4))}};
  EXPECT_THROW(volume_stats(rs), IncompleteGridError);
}

// ---- study values --------------------------------------------------------------------

namespace {

// Per-case lesion volumes (mean, sd over three annotators), in mL.
struct CaseRow {
  double expert_mean, expert_sd, novice_mean, novice_sd;
};
const CaseRow kStudy[10] = {
    {154.926, 10.692, 265.312, 83.892},  {219.147, 48.32, 194.376, 17.6},     {1058.475, 111.788, 948.725, 223.717},
    {138.306, 142.265, 74.649, 16.635},  {79.782, 7.724, 86.597, 25.736},     {165.163, 7.558, 132.678, 9.724},
    {104.758, 26.337, 108.755, 23.211},  {236.014, 17.336, 304.011, 93.343},  {89.726, 39.782, 88.527, 28.394},
    {709.605, 105.772, 400.751, 133.875}};

// Three values with the given sample mean and sd.
std::vector<double> triple(double m, double s) { return {m - s, m, m + s}; }

}  // namespace

TEST(StudyTable, InterGroupDifferencesAndIcc) {
  std::vector<double> e, n;
  std::vector<std::vector<double>> table;
  for (const auto& r : kStudy) {
    e.push_back(r.expert_mean);
    n.push_back(r.novice_mean);
    table.push_back({r.expert_mean, r.novice_mean});
  }
  const auto [mavd, mrvd] = inter_group_volume_difference(e, n);
  EXPECT_NEAR(mavd, 73.0, 0.05);
  EXPECT_NEAR(100 * mrvd, 24.5, 0.05);
  EXPECT_NEAR(icc_a1(table), 0.926, 0.0005);
}

TEST(StudyTable, PooledMeanAndSd) {
  std::vector<std::vector<double>> expert, novice, global;
  for (const auto& r : kStudy) {
    expert.push_back(triple(r.expert_mean, r.expert_sd));
    novice.push_back(triple(r.novice_mean, r.novice_sd));
    auto both = expert.back();
    both.insert(both.end(), novice.back().begin(), novice.back().end());
    global.push_back(both);
  }
  const auto [em, es] = pooled_mean_sd(expert);
  const auto [nm, ns] = pooled_mean_sd(novice);
  const auto [gm, gs] = pooled_mean_sd(global);
  EXPECT_NEAR(em, 295.6, 0.05);
  EXPECT_NEAR(es, 318.8, 0.05);
  EXPECT_NEAR(nm, 260.4, 0.05);
  EXPECT_NEAR(ns, 267.4, 0.05);
  EXPECT_NEAR(gm, 278.0, 0.05);
  EXPECT_NEAR(gs, 292.2, 0.05);
}
