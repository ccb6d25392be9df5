#pragma once

// Overlap, surface-distance and volume agreement statistics between raters.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "covseg/distance.hpp"
#include "covseg/mesh.hpp"
#include "covseg/nifti.hpp"

namespace covseg {

namespace detail {

inline std::pair<std::size_t, std::size_t> overlap_counts(const Mask& a, const Mask& b, const char* what) {
  require_same_geometry(a.geometry(), b.geometry(), what);
  std::size_t inter = 0, sum = 0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    const bool x = a[n] != 0, y = b[n] != 0;
    inter += x && y;
    sum += static_cast<std::size_t>(x) + static_cast<std::size_t>(y);
  }
  return {inter, sum};
}

}  // namespace detail

/// 2|A n B| / (|A| + |B|); 1 when both are empty.
inline double dice(const Mask& a, const Mask& b) {
  const auto [inter, sum] = detail::overlap_counts(a, b, "dice");
  return sum == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(sum);
}

/// |A n B| / |A u B|; 1 when both are empty.
inline double jaccard(const Mask& a, const Mask& b) {
  const auto [inter, sum] = detail::overlap_counts(a, b, "jaccard");
  const std::size_t uni = sum - inter;
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

/// Mask voxels with at least one face neighbour outside the mask or off
/// the grid.
inline Mask boundary_voxels(const Mask& m) {
  const Geometry& g = m.geometry();
  Mask out(g);
  static constexpr int nb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n) {
        if (!m[n]) continue;
        for (const auto& d : nb) {
          const int x = i + d[0], y = j + d[1], z = k + d[2];
          if (!g.contains(x, y, z) || !m.at(x, y, z)) {
            out[n] = 1;
            break;
          }
        }
      }
  return out;
}

/// Nearest-rank percentile (q in (0, 1]) of an unsorted sample.
inline double nearest_rank(std::vector<double> values, double q) {
  if (values.empty()) throw UndefinedMetricError("percentile of an empty sample");
  const auto rank = static_cast<std::size_t>(std::ceil(q * static_cast<double>(values.size())));
  const std::size_t idx = std::clamp<std::size_t>(rank, 1, values.size()) - 1;
  std::nth_element(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(idx), values.end());
  return values[idx];
}

/// 95th percentile (nearest rank) of the boundary-to-boundary distances of
/// both directions pooled, in mm.
inline double hd95(const Mask& a, const Mask& b, int threads = 1) {
  require_same_geometry(a.geometry(), b.geometry(), "hd95");
  if (count_nonzero(a) == 0 || count_nonzero(b) == 0) throw UndefinedMetricError("hd95 of an empty mask");
  const Mask ba = boundary_voxels(a), bb = boundary_voxels(b);
  const auto to_a = squared_distance_transform(ba.buffer(), a.geometry(), threads);
  const auto to_b = squared_distance_transform(bb.buffer(), a.geometry(), threads);
  std::vector<double> d;
  for (std::size_t n = 0; n < ba.size(); ++n) {
    if (ba[n]) d.push_back(std::sqrt(to_b[n]));
    if (bb[n]) d.push_back(std::sqrt(to_a[n]));
  }
  return nearest_rank(std::move(d), 0.95);
}

/// Two-way ANOVA mean squares of an N x K table (rows = subjects).
struct AnovaTable {
  double msr = 0, msc = 0, mse = 0;
};

inline AnovaTable two_way_anova(const std::vector<std::vector<double>>& x) {
  const std::size_t n = x.size();
  if (n < 2) throw InsufficientDataError("ICC needs at least 2 subjects");
  const std::size_t k = x.front().size();
  if (k < 2) throw InsufficientDataError("ICC needs at least 2 raters");
  for (const auto& row : x)
    if (row.size() != k) throw IncompleteGridError("ICC table has missing cells");
  double grand = 0;
  std::vector<double> row_mean(n, 0), col_mean(k, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      row_mean[i] += x[i][j] / static_cast<double>(k);
      col_mean[j] += x[i][j] / static_cast<double>(n);
      grand += x[i][j];
    }
  grand /= static_cast<double>(n * k);
  double ssr = 0, ssc = 0, sse = 0;
  for (std::size_t i = 0; i < n; ++i) ssr += (row_mean[i] - grand) * (row_mean[i] - grand);
  ssr *= static_cast<double>(k);
  for (std::size_t j = 0; j < k; ++j) ssc += (col_mean[j] - grand) * (col_mean[j] - grand);
  ssc *= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < k; ++j) {
      const double e = x[i][j] - row_mean[i] - col_mean[j] + grand;
      sse += e * e;
    }
  const double dn = static_cast<double>(n), dk = static_cast<double>(k);
  return {ssr / (dn - 1), ssc / (dk - 1), sse / ((dn - 1) * (dk - 1))};
}

/// ICC(A,1): absolute agreement of single ratings, two-way model.
inline double icc_a1(const std::vector<std::vector<double>>& x) {
  const AnovaTable t = two_way_anova(x);
  const double n = static_cast<double>(x.size()), k = static_cast<double>(x.front().size());
  const double denom = t.msr + (k - 1) * t.mse + (k / n) * (t.msc - t.mse);
  if (t.msr == 0 && t.msc == 0 && t.mse == 0) throw UndefinedMetricError("ICC of a table with zero variance");
  if (denom == 0) throw UndefinedMetricError("ICC denominator is zero");
  return (t.msr - t.mse) / denom;
}

/// Sum over rater pairs of |Ai n Aj| divided by the sum of |Ai u Aj|.
inline double gci(const std::vector<Mask>& masks) {
  if (masks.size() < 2) throw InsufficientDataError("GCI needs at least 2 masks");
  double inter = 0, uni = 0;
  for (std::size_t i = 0; i < masks.size(); ++i)
    for (std::size_t j = i + 1; j < masks.size(); ++j) {
      const auto [in, sum] = detail::overlap_counts(masks[i], masks[j], "gci");
      inter += static_cast<double>(in);
      uni += static_cast<double>(sum - in);
    }
  if (uni == 0) throw UndefinedMetricError("GCI of empty masks");
  return inter / uni;
}

/// Voxels labelled by at least `min_votes` raters; default is a strict
/// majority, floor(K / 2) + 1.
inline Mask consensus_majority(const std::vector<Mask>& masks, int min_votes = 0) {
  if (masks.empty()) throw InsufficientDataError("consensus needs at least one mask");
  const int k = static_cast<int>(masks.size());
  if (min_votes == 0) min_votes = k / 2 + 1;
  if (min_votes < 1 || min_votes > k) throw InvalidArgumentError("min_votes must lie in [1, K]");
  for (const auto& m : masks) require_same_geometry(m.geometry(), masks.front().geometry(), "consensus");
  Mask out(masks.front().geometry());
  for (std::size_t n = 0; n < out.size(); ++n) {
    int votes = 0;
    for (const auto& m : masks) votes += m[n] != 0;
    out[n] = votes >= min_votes ? 1 : 0;
  }
  return out;
}

struct BlandAltmanPoint {
  double mean;
  double diff;  // x - y
};

struct BlandAltman {
  std::vector<BlandAltmanPoint> points;
  double bias = 0;
  double sd = 0;
  double lower = 0;
  double upper = 0;
};

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw InsufficientDataError("mean of an empty sample");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Points ((x + y) / 2, x - y), bias and bias +- 1.96 sd limits.
inline BlandAltman bland_altman(const std::vector<std::pair<double, double>>& pairs) {
  if (pairs.size() < 2) throw InsufficientDataError("Bland-Altman needs at least 2 pairs");
  BlandAltman out;
  std::vector<double> diffs;
  for (const auto& [x, y] : pairs) {
    out.points.push_back({0.5 * (x + y), x - y});
    diffs.push_back(x - y);
  }
  out.bias = mean_of(diffs);
  out.sd = sample_sd(diffs);
  out.lower = out.bias - 1.96 * out.sd;
  out.upper = out.bias + 1.96 * out.sd;
  return out;
}

// ---- volume agreement ---------------------------------------------------------

/// Mean over cases of the mean pairwise |v_i - v_j| within each row.
inline double mean_absolute_volume_difference(const std::vector<std::vector<double>>& v) {
  std::vector<double> per_case;
  for (const auto& row : v) {
    double s = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < row.size(); ++i)
      for (std::size_t j = i + 1; j < row.size(); ++j, ++pairs) s += std::abs(row[i] - row[j]);
    if (pairs == 0) throw InsufficientDataError("volume difference needs at least 2 raters");
    per_case.push_back(s / static_cast<double>(pairs));
  }
  return mean_of(per_case);
}

/// As above, each case normalised by its own row mean.
inline double mean_relative_volume_difference(const std::vector<std::vector<double>>& v) {
  std::vector<double> per_case;
  for (const auto& row : v) {
    double s = 0;
    std::size_t pairs = 0;
    for (std::size_t i = 0; i < row.size(); ++i)
      for (std::size_t j = i + 1; j < row.size(); ++j, ++pairs) s += std::abs(row[i] - row[j]);
    if (pairs == 0) throw InsufficientDataError("volume difference needs at least 2 raters");
    const double m = mean_of(row);
    if (m == 0) throw UndefinedMetricError("relative volume difference with zero mean volume");
    per_case.push_back(s / static_cast<double>(pairs) / m);
  }
  return mean_of(per_case);
}

/// Between two groups: mean over cases of |a - b|, and of |a - b| / a.
inline std::pair<double, double> inter_group_volume_difference(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw IncompleteGridError("group means must cover the same cases");
  std::vector<double> abs_d, rel_d;
  for (std::size_t c = 0; c < a.size(); ++c) {
    abs_d.push_back(std::abs(a[c] - b[c]));
    if (a[c] == 0) throw UndefinedMetricError("relative volume difference with zero mean volume");
    rel_d.push_back(std::abs(a[c] - b[c]) / a[c]);
  }
  return {mean_of(abs_d), mean_of(rel_d)};
}

/// Mean and sample sd over every value of a table.
inline std::pair<double, double> pooled_mean_sd(const std::vector<std::vector<double>>& v) {
  std::vector<double> all;
  for (const auto& row : v) all.insert(all.end(), row.begin(), row.end());
  return {mean_of(all), sample_sd(all)};
}

enum class RaterGroup { expert, novice, reference };

inline const char* to_string(RaterGroup g) {
  switch (g) {
    case RaterGroup::expert: return "expert";
    case RaterGroup::novice: return "novice";
    default: return "reference";
  }
}

inline RaterGroup parse_group(const std::string& s) {
  if (s == "expert") return RaterGroup::expert;
  if (s == "novice") return RaterGroup::novice;
  if (s == "reference") return RaterGroup::reference;
  throw InvalidArgumentError("unknown rater group '" + s + "'");
}

struct Rater {
  std::string id;
  RaterGroup group;
};

/// N cases x K raters of masks; masks[c][r].
struct RaterSet {
  std::vector<std::string> case_ids;
  std::vector<Rater> raters;
  std::vector<std::vector<Mask>> masks;

  void validate() const {
    if (masks.size() != case_ids.size()) throw IncompleteGridError("one mask row per case is required");
    for (std::size_t c = 0; c < masks.size(); ++c) {
      if (masks[c].size() != raters.size())
        throw IncompleteGridError("case " + case_ids[c] + " lacks masks for some raters");
      for (const auto& m : masks[c]) require_same_geometry(m.geometry(), masks[c].front().geometry(), "rater masks");
    }
  }
};

struct OverlapStats {
  double dice = 0, jaccard = 0, hd95 = 0;
};

struct MeanSd {
  double mean = 0, sd = 0;
};

inline MeanSd summarize(const std::vector<double>& v) { return {mean_of(v), sample_sd(v)}; }

struct GroupVolumeSummary {
  MeanSd volume;  // over every (case, rater) value
  double mavd = 0;
  double mrvd = 0;
  std::optional<double> icc;
};

struct AgreementReport {
  std::vector<std::string> case_ids;
  std::vector<Rater> raters;
  std::vector<std::vector<double>> volumes;  // [case][rater], mL

  /// Per case mean and sd of each group ("global" = all annotators).
  std::map<std::string, std::vector<MeanSd>> case_volume;
  /// "global", "expert", "novice" and "inter-group".
  std::map<std::string, GroupVolumeSummary> volume_summary;
  /// Per case GCI for "global", "expert", "novice".
  std::map<std::string, std::vector<double>> gci;
  /// Expert consensus vs novice consensus, per case.
  std::vector<OverlapStats> consensus;
  /// Each annotator vs the reference: [case][annotator index in raters].
  std::vector<std::map<std::size_t, OverlapStats>> reference_overlap;
  /// Bland-Altman of annotator vs reference volumes per group.
  std::map<std::string, BlandAltman> bland_altman;
};

namespace detail {

inline std::vector<std::size_t> raters_in(const std::vector<Rater>& raters, std::optional<RaterGroup> g) {
  std::vector<std::size_t> out;
  for (std::size_t r = 0; r < raters.size(); ++r) {
    if (raters[r].group == RaterGroup::reference) {
      if (g == RaterGroup::reference) out.push_back(r);
      continue;
    }
    if (!g || raters[r].group == *g) out.push_back(r);
  }
  return out;
}

inline std::vector<std::vector<double>> columns(const std::vector<std::vector<double>>& v, const std::vector<std::size_t>& idx) {
  std::vector<std::vector<double>> out;
  for (const auto& row : v) {
    std::vector<double> r;
    for (std::size_t i : idx) r.push_back(row[i]);
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace detail

/// Full agreement analysis of a rater set: volumes, ICC, GCI, consensus
/// overlap between expert and novice groups, and comparison with the
/// reference rater when present.
inline AgreementReport volume_stats(const RaterSet& rs, int threads = 1) {
  rs.validate();
  AgreementReport rep;
  rep.case_ids = rs.case_ids;
  rep.raters = rs.raters;
  for (const auto& row : rs.masks) {
    std::vector<double> v;
    for (const auto& m : row) v.push_back(volume_ml(m));
    rep.volumes.push_back(std::move(v));
  }

  const std::vector<std::pair<std::string, std::optional<RaterGroup>>> groups{
      {"global", std::nullopt}, {"expert", RaterGroup::expert}, {"novice", RaterGroup::novice}};
  std::map<std::string, std::vector<double>> group_case_means;
  for (const auto& [name, g] : groups) {
    const auto idx = detail::raters_in(rs.raters, g);
    if (idx.empty()) continue;
    const auto table = detail::columns(rep.volumes, idx);
    auto& per_case = rep.case_volume[name];
    for (const auto& row : table) {
      per_case.push_back(summarize(row));
      group_case_means[name].push_back(per_case.back().mean);
    }
    GroupVolumeSummary s;
    const auto [m, sd] = pooled_mean_sd(table);
    s.volume = {m, sd};
    if (idx.size() >= 2) {
      s.mavd = mean_absolute_volume_difference(table);
      s.mrvd = mean_relative_volume_difference(table);
      if (table.size() >= 2) s.icc = icc_a1(table);
      auto& g_gci = rep.gci[name];
      for (const auto& row : rs.masks) {
        std::vector<Mask> ms;
        for (std::size_t i : idx) ms.push_back(row[i]);
        g_gci.push_back(gci(ms));
      }
    }
    rep.volume_summary[name] = s;
  }
  const auto ref_idx = detail::raters_in(rs.raters, RaterGroup::reference);
  if (!ref_idx.empty()) {
    auto& per_case = rep.case_volume["reference"];
    for (const auto& row : rep.volumes) per_case.push_back({row[ref_idx.front()], 0.0});
  }

  const auto experts = detail::raters_in(rs.raters, RaterGroup::expert);
  const auto novices = detail::raters_in(rs.raters, RaterGroup::novice);
  if (!experts.empty() && !novices.empty()) {
    GroupVolumeSummary s;
    const auto& e = group_case_means["expert"];
    const auto& n = group_case_means["novice"];
    std::tie(s.mavd, s.mrvd) = inter_group_volume_difference(e, n);
    std::vector<std::vector<double>> table;
    for (std::size_t c = 0; c < e.size(); ++c) table.push_back({e[c], n[c]});
    if (table.size() >= 2) s.icc = icc_a1(table);
    std::vector<double> both(e);
    both.insert(both.end(), n.begin(), n.end());
    s.volume = summarize(both);
    rep.volume_summary["inter-group"] = s;

    for (const auto& row : rs.masks) {
      std::vector<Mask> em, nm;
      for (std::size_t i : experts) em.push_back(row[i]);
      for (std::size_t i : novices) nm.push_back(row[i]);
      const Mask ce = consensus_majority(em), cn = consensus_majority(nm);
      rep.consensus.push_back({dice(ce, cn), jaccard(ce, cn), hd95(ce, cn, threads)});
    }
  }

  if (!ref_idx.empty()) {
    const std::size_t ref = ref_idx.front();
    const auto annotators = detail::raters_in(rs.raters, std::nullopt);
    std::map<std::string, std::vector<std::pair<double, double>>> ba;
    for (std::size_t c = 0; c < rs.masks.size(); ++c) {
      std::map<std::size_t, OverlapStats> row;
      for (std::size_t r : annotators) {
        const Mask& a = rs.masks[c][r];
        const Mask& b = rs.masks[c][ref];
        row[r] = {dice(a, b), jaccard(a, b), hd95(a, b, threads)};
        ba["global"].emplace_back(rep.volumes[c][r], rep.volumes[c][ref]);
        ba[to_string(rs.raters[r].group)].emplace_back(rep.volumes[c][r], rep.volumes[c][ref]);
      }
      rep.reference_overlap.push_back(std::move(row));
    }
    for (const auto& [name, pairs] : ba)
      if (pairs.size() >= 2) rep.bland_altman[name] = bland_altman(pairs);
  }
  return rep;
}

/// Reference-overlap summary (mean, sd) over annotators of one group, or
/// all annotators when `group` is empty.
inline std::map<std::string, MeanSd> reference_summary(const AgreementReport& rep, std::optional<RaterGroup> group) {
  std::vector<double> d, j, h;
  for (const auto& row : rep.reference_overlap)
    for (const auto& [r, s] : row) {
      if (group && rep.raters[r].group != *group) continue;
      d.push_back(s.dice);
      j.push_back(s.jaccard);
      h.push_back(s.hd95);
    }
  if (d.empty()) return {};
  return {{"dice", summarize(d)}, {"jaccard", summarize(j)}, {"hd95", summarize(h)}};
}

// ---- report output -------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6g", v);
  return buf;
}

}  // namespace detail

/// Rows of case_id,metric,group,value; summary rows use case_id "ALL".
inline std::string report_csv(const AgreementReport& rep) {
  std::ostringstream o;
  o << "case_id,metric,group,value\n";
  auto row = [&o](const std::string& c, const std::string& m, const std::string& g, double v) {
    o << c << ',' << m << ',' << g << ',' << format_double(v) << '\n';
  };
  for (std::size_t c = 0; c < rep.case_ids.size(); ++c) {
    const auto& id = rep.case_ids[c];
    for (std::size_t r = 0; r < rep.raters.size(); ++r)
      row(id, "volume_ml:" + rep.raters[r].id, to_string(rep.raters[r].group), rep.volumes[c][r]);
    for (const auto& [g, v] : rep.case_volume) {
      row(id, "volume_mean_ml", g, v[c].mean);
      row(id, "volume_sd_ml", g, v[c].sd);
    }
    for (const auto& [g, v] : rep.gci) row(id, "gci", g, v[c]);
    if (!rep.consensus.empty()) {
      row(id, "consensus_dice", "expert-novice", rep.consensus[c].dice);
      row(id, "consensus_jaccard", "expert-novice", rep.consensus[c].jaccard);
      row(id, "consensus_hd95_mm", "expert-novice", rep.consensus[c].hd95);
    }
    if (!rep.reference_overlap.empty())
      for (const auto& [r, s] : rep.reference_overlap[c]) {
        const std::string g = std::string(to_string(rep.raters[r].group)) + ":" + rep.raters[r].id;
        row(id, "reference_dice", g, s.dice);
        row(id, "reference_jaccard", g, s.jaccard);
        row(id, "reference_hd95_mm", g, s.hd95);
      }
  }
  for (const auto& [g, s] : rep.volume_summary) {
    row("ALL", "volume_mean_ml", g, s.volume.mean);
    row("ALL", "volume_sd_ml", g, s.volume.sd);
    row("ALL", "mavd_ml", g, s.mavd);
    row("ALL", "mrvd", g, s.mrvd);
    if (s.icc) row("ALL", "icc_a1", g, *s.icc);
  }
  for (const auto& [g, v] : rep.gci) {
    const auto s = summarize(v);
    row("ALL", "gci_mean", g, s.mean);
    row("ALL", "gci_sd", g, s.sd);
  }
  if (!rep.consensus.empty()) {
    std::vector<double> d, j, h;
    for (const auto& s : rep.consensus) {
      d.push_back(s.dice);
      j.push_back(s.jaccard);
      h.push_back(s.hd95);
    }
    for (const auto& [m, v] : std::map<std::string, std::vector<double>>{{"consensus_dice", d}, {"consensus_jaccard", j}, {"consensus_hd95_mm", h}}) {
      const auto s = summarize(v);
      row("ALL", m + "_mean", "expert-novice", s.mean);
      row("ALL", m + "_sd", "expert-novice", s.sd);
    }
  }
  for (const auto& [g, opt] : std::vector<std::pair<std::string, std::optional<RaterGroup>>>{
           {"global", std::nullopt}, {"expert", RaterGroup::expert}, {"novice", RaterGroup::novice}})
    for (const auto& [m, s] : reference_summary(rep, opt)) {
      row("ALL", "reference_" + m + "_mean", g, s.mean);
      row("ALL", "reference_" + m + "_sd", g, s.sd);
    }
  for (const auto& [g, b] : rep.bland_altman) {
    row("ALL", "bland_altman_bias_ml", g, b.bias);
    row("ALL", "bland_altman_lower_ml", g, b.lower);
    row("ALL", "bland_altman_upper_ml", g, b.upper);
  }
  return o.str();
}

/// mean_ml,diff_ml,group for every annotator/reference pair.
inline std::string bland_altman_csv(const AgreementReport& rep) {
  std::ostringstream o;
  o << "mean_ml,diff_ml,group\n";
  for (const auto& [g, b] : rep.bland_altman) {
    if (g == "global") continue;
    for (const auto& p : b.points) o << format_double(p.mean) << ',' << format_double(p.diff) << ',' << g << '\n';
  }
  return o.str();
}

/// Volume and overlap tables in plain text.
inline std::string report_text(const AgreementReport& rep) {
  using detail::fmt;
  std::ostringstream o;
  const std::vector<std::string> cols{"global", "expert", "novice", "inter-group"};
  char line[256];
  std::snprintf(line, sizeof(line), "%-34s", "Volume agreement");
  o << line;
  for (const auto& c : cols) {
    std::snprintf(line, sizeof(line), "%18s", c.c_str());
    o << line;
  }
  o << "\n";
  auto cell = [&](const std::string& c, auto&& get) {
    auto it = rep.volume_summary.find(c);
    std::string s = it == rep.volume_summary.end() ? "--" : get(it->second);
    std::snprintf(line, sizeof(line), "%18s", s.c_str());
    o << line;
  };
  auto table_row = [&](const char* label, auto&& get) {
    std::snprintf(line, sizeof(line), "%-34s", label);
    o << line;
    for (const auto& c : cols) cell(c, get);
    o << "\n";
  };
  table_row("Mean volume +- sd [mL]", [](const GroupVolumeSummary& s) { return fmt(s.volume.mean) + " +- " + fmt(s.volume.sd); });
  table_row("Mean absolute volume diff [mL]", [](const GroupVolumeSummary& s) { return fmt(s.mavd); });
  table_row("Mean relative volume diff [%]", [](const GroupVolumeSummary& s) { return fmt(100 * s.mrvd); });
  table_row("ICC(A,1)", [](const GroupVolumeSummary& s) { return s.icc ? fmt(*s.icc) : std::string("--"); });
  o << "\n";
  for (const auto& [g, v] : rep.gci) {
    const auto s = summarize(v);
    o << "GCI " << g << ": " << fmt(s.mean) << " +- " << fmt(s.sd) << "\n";
  }
  if (!rep.consensus.empty()) {
    std::vector<double> d, j, h;
    for (const auto& s : rep.consensus) {
      d.push_back(s.dice);
      j.push_back(s.jaccard);
      h.push_back(s.hd95);
    }
    o << "Expert vs novice consensus: Dice " << fmt(summarize(d).mean) << " +- " << fmt(summarize(d).sd) << ", Jaccard "
      << fmt(summarize(j).mean) << " +- " << fmt(summarize(j).sd) << ", HD95 " << fmt(summarize(h).mean) << " +- "
      << fmt(summarize(h).sd) << " mm\n";
  }
  if (!rep.reference_overlap.empty()) {
    o << "\nAgreement with the reference\n";
    for (const auto& [g, opt] : std::vector<std::pair<std::string, std::optional<RaterGroup>>>{
             {"global", std::nullopt}, {"expert", RaterGroup::expert}, {"novice", RaterGroup::novice}}) {
      const auto s = reference_summary(rep, opt);
      if (s.empty()) continue;
      o << "  " << g << ": Dice " << fmt(s.at("dice").mean) << " +- " << fmt(s.at("dice").sd) << ", Jaccard "
        << fmt(s.at("jaccard").mean) << " +- " << fmt(s.at("jaccard").sd) << ", HD95 " << fmt(s.at("hd95").mean) << " +- "
        << fmt(s.at("hd95").sd) << " mm\n";
    }
    for (const auto& [g, b] : rep.bland_altman)
      o << "  Bland-Altman " << g << ": bias " << fmt(b.bias) << " mL, limits [" << fmt(b.lower) << ", " << fmt(b.upper)
        << "] mL\n";
  }
  o << "\nPer-case volumes [mL]\n";
  for (std::size_t c = 0; c < rep.case_ids.size(); ++c) {
    o << "  " << rep.case_ids[c];
    for (const auto& [g, v] : rep.case_volume) o << "  " << g << " " << fmt(v[c].mean) << " +- " << fmt(v[c].sd);
    o << "\n";
  }
  return o.str();
}

}  // namespace covseg
