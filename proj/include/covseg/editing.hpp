#pragma once

// Interactive editing tools on meshes and distance maps, and replayable
// edit scripts.

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <string>
#include <tuple>
#include <variant>
#include <vector>

#include "covseg/distance.hpp"
#include "covseg/levelset.hpp"
#include "covseg/mesh.hpp"

namespace covseg {

inline constexpr double kResampleStepMm = 2.0;

// ---- magnet ----------------------------------------------------------------

inline double magnet_weight(double r, double sigma) { return std::exp(-(r * r) / (2 * sigma * sigma)); }

/// Moves every vertex by drag * exp(-|p - click|^2 / 2 sigma^2).
inline Mesh magnet(const Mesh& mesh, const Vec3& click, const Vec3& drag, double sigma) {
  if (!(sigma > 0)) throw InvalidArgumentError("magnet sigma must be positive");
  Mesh out = mesh;
  const double s2 = 2 * sigma * sigma;
  for (auto& p : out.vertices) p = p + std::exp(-squared_distance(p, click) / s2) * drag;
  return out;
}

// ---- polyline sampling -----------------------------------------------------

/// Points every `step` mm of arc length from the first point; the last
/// point is kept too unless it coincides with the previous sample.
inline std::vector<Vec3> resample_polyline(const std::vector<Vec3>& line, double step = kResampleStepMm) {
  std::vector<Vec3> out;
  if (line.empty()) return out;
  out.push_back(line.front());
  double carry = 0;  // arc length since the last sample
  for (std::size_t s = 1; s < line.size(); ++s) {
    const Vec3 a = line[s - 1], b = line[s];
    const double len = norm(b - a);
    double pos = step - carry;
    while (pos <= len + 1e-12) {
      out.push_back(a + (pos / len) * (b - a));
      pos += step;
    }
    carry = len - (pos - step);
  }
  if (norm(out.back() - line.back()) > 1e-6) out.push_back(line.back());
  return out;
}

/// Samples of a closed loop every `step` mm of perimeter (at least 3,
/// evenly spaced when the perimeter is short).
inline std::vector<Vec3> resample_loop(const std::vector<Vec3>& loop, double step = kResampleStepMm) {
  const std::size_t n = loop.size();
  std::vector<double> cum(n + 1, 0.0);
  for (std::size_t s = 0; s < n; ++s) cum[s + 1] = cum[s] + norm(loop[(s + 1) % n] - loop[s]);
  const double perimeter = cum[n];
  const int count = std::max(3, static_cast<int>(std::floor(perimeter / step + 1e-9)));
  const double spacing = perimeter / count;
  std::vector<Vec3> out;
  std::size_t seg = 0;
  for (int c = 0; c < count; ++c) {
    const double at = c * spacing;
    while (seg + 1 < n && cum[seg + 1] <= at) ++seg;
    const double len = cum[seg + 1] - cum[seg];
    const double t = len > 0 ? (at - cum[seg]) / len : 0.0;
    out.push_back(loop[seg] + t * (loop[(seg + 1) % n] - loop[seg]));
  }
  return out;
}

// ---- radial basis interpolation (kernel r plus a linear polynomial) --------

/// f(x) = sum_i w_i |x - c_i| + a_0 + a . (x - centre), one column of
/// weights per output component.
struct RadialFit {
  std::vector<Vec3> centers;
  Vec3 centre{0, 0, 0};
  Eigen::MatrixXd weights;  // (n + 4) x m

  Eigen::VectorXd evaluate(const Vec3& x) const {
    const auto n = static_cast<Eigen::Index>(centers.size());
    Eigen::VectorXd out = weights.row(n).transpose();
    const Vec3 d = x - centre;
    for (int a = 0; a < 3; ++a) out += d[static_cast<std::size_t>(a)] * weights.row(n + 1 + a).transpose();
    for (Eigen::Index i = 0; i < n; ++i) out += norm(x - centers[static_cast<std::size_t>(i)]) * weights.row(i).transpose();
    return out;
  }
};

/// Interpolating fit of `values` (n x m) at `points`. Coordinates are
/// centred on the point mean so the minimum-norm solution is translation
/// invariant when the points are coplanar.
inline RadialFit fit_radial(const std::vector<Vec3>& points, const Eigen::MatrixXd& values) {
  const auto n = static_cast<Eigen::Index>(points.size());
  if (n < 3) throw SingularSystemError("at least 3 control points are required");
  RadialFit fit;
  fit.centers = points;
  for (const auto& p : points) fit.centre = fit.centre + p;
  fit.centre = (1.0 / static_cast<double>(n)) * fit.centre;

  Eigen::MatrixXd spread(n, 3);
  for (Eigen::Index i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) spread(i, a) = points[static_cast<std::size_t>(i)][static_cast<std::size_t>(a)] - fit.centre[static_cast<std::size_t>(a)];
  const Eigen::JacobiSVD<Eigen::MatrixXd> svd(spread);
  const auto sv = svd.singularValues();
  if (!(sv(0) > 0) || sv(1) <= 1e-9 * sv(0)) throw SingularSystemError("control points are collinear");

  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n + 4, n + 4);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j)
      A(i, j) = A(j, i) = norm(points[static_cast<std::size_t>(i)] - points[static_cast<std::size_t>(j)]);
    A(i, n) = A(n, i) = 1.0;
    for (int a = 0; a < 3; ++a) A(i, n + 1 + a) = A(n + 1 + a, i) = spread(i, a);
  }
  Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + 4, values.cols());
  rhs.topRows(n) = values;
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(A);
  fit.weights = cod.solve(rhs);
  if (!fit.weights.allFinite()) throw SingularSystemError("radial basis system could not be solved");
  return fit;
}

// ---- TPS polyline deformation ---------------------------------------------

struct Correspondence {
  std::uint32_t vertex;
  Vec3 target;
};

/// Each target claims a distinct mesh vertex, greedily by distance (ties
/// by target, then vertex index).
inline std::vector<Correspondence> match_targets(const Mesh& mesh, const std::vector<Vec3>& targets) {
  const std::size_t T = targets.size();
  const std::size_t keep = std::min(T + 1, mesh.vertices.size());
  std::vector<std::tuple<double, std::size_t, std::uint32_t>> candidates;
  std::vector<std::pair<double, std::uint32_t>> dist(mesh.vertices.size());
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t v = 0; v < mesh.vertices.size(); ++v)
      dist[v] = {squared_distance(mesh.vertices[v], targets[t]), static_cast<std::uint32_t>(v)};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(keep), dist.end());
    for (std::size_t c = 0; c < keep; ++c) candidates.emplace_back(dist[c].first, t, dist[c].second);
  }
  std::sort(candidates.begin(), candidates.end());
  std::vector<char> target_done(T, 0);
  std::vector<char> vertex_used(mesh.vertices.size(), 0);
  std::vector<Correspondence> out;
  for (const auto& [d, t, v] : candidates) {
    if (target_done[t] || vertex_used[v]) continue;
    target_done[t] = vertex_used[v] = 1;
    out.push_back({v, targets[t]});
  }
  return out;
}

/// Thin-plate spline (kernel r) deformation pulling the mesh onto the
/// polylines sampled every 2 mm.
inline Mesh tps_polyline(const Mesh& mesh, const std::vector<std::vector<Vec3>>& polylines) {
  std::vector<Vec3> targets;
  for (const auto& line : polylines) {
    if (line.size() < 2) throw InvalidArgumentError("a polyline needs at least 2 points");
    const auto s = resample_polyline(line);
    targets.insert(targets.end(), s.begin(), s.end());
  }
  const auto pairs = match_targets(mesh, targets);
  if (pairs.size() < 3) throw SingularSystemError("fewer than 3 control correspondences");
  std::vector<Vec3> sources;
  Eigen::MatrixXd disp(static_cast<Eigen::Index>(pairs.size()), 3);
  for (std::size_t c = 0; c < pairs.size(); ++c) {
    const Vec3 s = mesh.vertices[pairs[c].vertex];
    sources.push_back(s);
    for (int a = 0; a < 3; ++a) disp(static_cast<Eigen::Index>(c), a) = pairs[c].target[static_cast<std::size_t>(a)] - s[static_cast<std::size_t>(a)];
  }
  const RadialFit fit = fit_radial(sources, disp);
  Mesh out = mesh;
  for (auto& p : out.vertices) {
    const Eigen::VectorXd d = fit.evaluate(p);
    p = p + Vec3{d(0), d(1), d(2)};
  }
  return out;
}

// ---- spline surfaces -------------------------------------------------------

inline constexpr double kSplineOffsetMm = 2.0;

/// Implicit function through closed planar loops: zero on the loops,
/// +2 at 2 mm inward and -2 at 2 mm outward in each loop's plane.
inline RadialFit fit_spline_surface(const std::vector<std::vector<Vec3>>& loops) {
  if (loops.empty()) throw InvalidArgumentError("at least one spline loop is required");
  std::vector<Vec3> pts;
  std::vector<double> vals;
  for (const auto& loop : loops) {
    if (loop.size() < 3) throw InvalidArgumentError("a spline loop needs at least 3 points");
    Vec3 normal{0, 0, 0};  // Newell
    for (std::size_t s = 0; s < loop.size(); ++s) {
      const Vec3& a = loop[s];
      const Vec3& b = loop[(s + 1) % loop.size()];
      normal[0] += (a[1] - b[1]) * (a[2] + b[2]);
      normal[1] += (a[2] - b[2]) * (a[0] + b[0]);
      normal[2] += (a[0] - b[0]) * (a[1] + b[1]);
    }
    const double len = norm(normal);
    if (!(len > 1e-9)) throw SingularSystemError("spline loop has no well-defined plane");
    normal = (1.0 / len) * normal;
    const auto samples = resample_loop(loop);
    const std::size_t m = samples.size();
    for (std::size_t s = 0; s < m; ++s) {
      Vec3 tangent = samples[(s + 1) % m] - samples[(s + m - 1) % m];
      tangent = tangent - dot(tangent, normal) * normal;
      const double tl = norm(tangent);
      pts.push_back(samples[s]);
      vals.push_back(0.0);
      if (tl == 0) continue;
      const Vec3 inward = (1.0 / tl) * cross(normal, tangent);
      pts.push_back(samples[s] + kSplineOffsetMm * inward);
      vals.push_back(kSplineOffsetMm);
      pts.push_back(samples[s] - kSplineOffsetMm * inward);
      vals.push_back(-kSplineOffsetMm);
    }
  }
  Eigen::MatrixXd v(static_cast<Eigen::Index>(vals.size()), 1);
  for (std::size_t i = 0; i < vals.size(); ++i) v(static_cast<Eigen::Index>(i), 0) = vals[i];
  return fit_radial(pts, v);
}

/// Region enclosed by the spline surface as a distance map on `g`. The
/// implicit function is evaluated around the loops only; elsewhere the
/// grid is outside.
inline DistanceMap rbf_surface(const std::vector<std::vector<Vec3>>& loops, const Geometry& g,
                               double cap = kDefaultDistanceCap, int threads = 1) {
  const RadialFit fit = fit_spline_surface(loops);
  Vec3 lo = fit.centers.front(), hi = lo;
  for (const auto& p : fit.centers)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], p[a]);
      hi[a] = std::max(hi[a], p[a]);
    }
  const double margin = 0.5 * std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]}) + 5.0;
  // World box to index box through all eight corners.
  IndexBox box;
  for (int c = 0; c < 8; ++c) {
    const Vec3 corner{(c & 1) ? hi[0] + margin : lo[0] - margin, (c & 2) ? hi[1] + margin : lo[1] - margin,
                      (c & 4) ? hi[2] + margin : lo[2] - margin};
    const Vec3 u = g.to_index(corner);
    box.expand(static_cast<int>(std::floor(u[0])), static_cast<int>(std::floor(u[1])), static_cast<int>(std::floor(u[2])));
    box.expand(static_cast<int>(std::ceil(u[0])), static_cast<int>(std::ceil(u[1])), static_cast<int>(std::ceil(u[2])));
  }
  box = clip_box(g, box);
  Mask inside(g);
  if (!box.empty()) {
    for (int k = box.lo[2]; k <= box.hi[2]; ++k)
      for (int j = box.lo[1]; j <= box.hi[1]; ++j)
        for (int i = box.lo[0]; i <= box.hi[0]; ++i)
          inside.at(i, j, k) = fit.evaluate(g.to_world(i, j, k))(0) > 0 ? 1 : 0;
  }
  return signed_distance(inside, cap, threads);
}

enum class MergeMode { union_, replace };

inline DistanceMap merge_region(const DistanceMap& existing, const DistanceMap& addition, MergeMode mode) {
  require_same_geometry(existing.geometry(), addition.geometry(), "merge_region");
  if (mode == MergeMode::replace) return addition;
  DistanceMap out = existing;
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = std::max(existing[n], addition[n]);
  return out;
}

// ---- brush -----------------------------------------------------------------

enum class PaintMode { add, remove };

/// Sphere field s = radius - |x - center|; add takes max(phi, s), remove
/// min(phi, -s).
inline DistanceMap brush(const DistanceMap& d, const Vec3& center, double radius, PaintMode mode) {
  if (!(radius > 0)) throw InvalidArgumentError("brush radius must be positive");
  const Geometry& g = d.geometry();
  DistanceMap out = d;
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n) {
        const double s = radius - norm(g.to_world(i, j, k) - center);
        out[n] = mode == PaintMode::add ? std::max(d[n], s) : std::min(d[n], -s);
      }
  return out;
}

// ---- smart paint -----------------------------------------------------------

struct SmartPaintOptions {
  double tube_radius = 3.0;
  double k_sigma = 2.5;
  double roi_margin = 20.0;
  PaintMode mode = PaintMode::add;
  double curvature_weight = 0.2;
  double sigma_floor = 10.0;
  int max_iterations = 300;
  /// Worker threads for the level set; never part of a script.
  int threads = 1;
};

struct PaintModel {
  double mean = 0;
  double sigma = 0;
  std::size_t samples = 0;
};

namespace detail {

inline double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double l2 = dot(ab, ab);
  const double t = l2 > 0 ? std::clamp(dot(p - a, ab) / l2, 0.0, 1.0) : 0.0;
  return norm(p - (a + t * ab));
}

inline double polyline_distance(const Vec3& p, const std::vector<Vec3>& line) {
  double best = norm(p - line.front());
  for (std::size_t s = 1; s < line.size(); ++s) best = std::min(best, segment_distance(p, line[s - 1], line[s]));
  return best;
}

inline IndexBox world_points_box(const Geometry& g, const std::vector<Vec3>& pts, double margin_mm) {
  IndexBox box;
  for (const auto& p : pts) {
    const Vec3 u = g.to_index(p);
    box.expand(static_cast<int>(std::lround(u[0])), static_cast<int>(std::lround(u[1])), static_cast<int>(std::lround(u[2])));
  }
  Index3 grow;
  for (int a = 0; a < 3; ++a) grow[a] = static_cast<int>(std::ceil(margin_mm / g.spacing[a]));
  return clip_box(g, dilate_box(box, grow));
}

}  // namespace detail

/// Stroke extended by 25% of its last segment beyond the final point.
inline std::vector<Vec3> extended_stroke(const std::vector<Vec3>& stroke) {
  std::vector<Vec3> out = stroke;
  const Vec3 a = stroke[stroke.size() - 2], b = stroke.back();
  out.push_back(b + 0.25 * (b - a));
  return out;
}

/// Tube voxels and their intensity statistics.
inline std::pair<Mask, PaintModel> stroke_tube(const Volume& v, const std::vector<Vec3>& stroke, const SmartPaintOptions& o) {
  const Geometry& g = v.geometry();
  const auto path = extended_stroke(stroke);
  const IndexBox box = detail::world_points_box(g, path, o.tube_radius);
  Mask tube(g);
  PaintModel m;
  double sum = 0, sum2 = 0;
  if (!box.empty())
    for (int k = box.lo[2]; k <= box.hi[2]; ++k)
      for (int j = box.lo[1]; j <= box.hi[1]; ++j)
        for (int i = box.lo[0]; i <= box.hi[0]; ++i)
          if (detail::polyline_distance(g.to_world(i, j, k), path) <= o.tube_radius) {
            tube.at(i, j, k) = 1;
            const double x = v.at(i, j, k);
            sum += x;
            sum2 += x * x;
            ++m.samples;
          }
  if (m.samples == 0) throw OutOfDomainError("stroke tube covers no voxel");
  const double n = static_cast<double>(m.samples);
  m.mean = sum / n;
  const double var = m.samples > 1 ? std::max(0.0, (sum2 - n * m.mean * m.mean) / (n - 1)) : 0.0;
  m.sigma = std::max(std::sqrt(var), o.sigma_floor);
  return {tube, m};
}

/// Paints the region grown from a stroke under a Gaussian intensity model
/// learnt along it. Only voxels inside the stroke's ROI box change.
inline DistanceMap smart_paint(const Volume& v, const DistanceMap& d, const std::vector<Vec3>& stroke,
                               const SmartPaintOptions& o, PaintModel* fitted = nullptr) {
  require_same_geometry(v.geometry(), d.geometry(), "smart_paint");
  if (stroke.size() < 2) throw InvalidArgumentError("a stroke needs at least 2 points");
  if (!(o.tube_radius > 0) || !(o.k_sigma > 0) || !(o.roi_margin >= 0))
    throw InvalidArgumentError("smart paint needs positive tube radius and k_sigma");
  const Geometry& g = v.geometry();
  for (const auto& p : stroke) {
    const Vec3 u = g.to_index(p);
    for (int a = 0; a < 3; ++a)
      if (!(u[a] >= -0.5 && u[a] <= g.dims[a] - 0.5)) throw OutOfDomainError("stroke point outside the volume");
  }
  const auto [tube, model] = stroke_tube(v, stroke, o);
  if (fitted) *fitted = model;

  const IndexBox roi = detail::world_points_box(g, extended_stroke(stroke), o.roi_margin);
  LevelSetParams p;
  p.t_low = model.mean - o.k_sigma * model.sigma;
  p.t_high = model.mean + o.k_sigma * model.sigma;
  p.curvature_weight = o.curvature_weight;
  p.model_weight = 0;
  p.max_iterations = o.max_iterations;
  p.threads = o.threads;
  const Volume sub = crop(v, roi);
  const DistanceMap painted = threshold_levelset(sub, p, SeedRegion{crop(tube, roi)});

  DistanceMap out = d;
  const auto sz = roi.size();
  for (int k = 0; k < sz[2]; ++k)
    for (int j = 0; j < sz[1]; ++j)
      for (int i = 0; i < sz[0]; ++i) {
        double& dst = out.at(i + roi.lo[0], j + roi.lo[1], k + roi.lo[2]);
        const double src = painted.at(i, j, k);
        dst = o.mode == PaintMode::add ? std::max(dst, src) : std::min(dst, -src);
      }
  return out;
}

// ---- edit scripts ----------------------------------------------------------

struct MagnetEvent {
  Vec3 click;
  Vec3 drag;
  double sigma;
};
struct TpsEvent {
  std::vector<std::vector<Vec3>> polylines;
};
struct SplineEvent {
  std::vector<std::vector<Vec3>> splines;
  MergeMode merge = MergeMode::union_;
};
struct BrushEvent {
  Vec3 center;
  double radius;
  PaintMode mode = PaintMode::add;
};
struct SmartPaintEvent {
  std::vector<Vec3> stroke;
  SmartPaintOptions options;
};

using EditEvent = std::variant<MagnetEvent, TpsEvent, SplineEvent, BrushEvent, SmartPaintEvent>;

inline const std::vector<std::string>& edit_targets() {
  static const std::vector<std::string> t{"lungs-left", "lungs-right", "lesions"};
  return t;
}

struct ScriptEntry {
  std::string target;
  EditEvent event;
};

struct EditScript {
  std::vector<ScriptEntry> events;
};

namespace detail {

using nlohmann::json;

inline Vec3 json_point(const json& j, const char* what) {
  if (!j.is_array() || j.size() != 3) throw InvalidArgumentError(std::string(what) + " must be a 3-element array");
  Vec3 p;
  for (std::size_t a = 0; a < 3; ++a) {
    if (!j[a].is_number()) throw InvalidArgumentError(std::string(what) + " must be numeric");
    p[a] = j[a].get<double>();
  }
  return p;
}

inline std::vector<Vec3> json_points(const json& j, const char* what) {
  if (!j.is_array()) throw InvalidArgumentError(std::string(what) + " must be an array of points");
  std::vector<Vec3> out;
  for (const auto& p : j) out.push_back(json_point(p, what));
  return out;
}

inline std::vector<std::vector<Vec3>> json_lines(const json& j, const char* what) {
  if (!j.is_array()) throw InvalidArgumentError(std::string(what) + " must be an array");
  std::vector<std::vector<Vec3>> out;
  for (const auto& l : j) out.push_back(json_points(l, what));
  return out;
}

inline double json_number(const json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) throw InvalidArgumentError(std::string("missing numeric field '") + key + "'");
  return j[key].get<double>();
}

inline double json_number(const json& j, const char* key, double fallback) {
  return j.contains(key) ? json_number(j, key) : fallback;
}

inline PaintMode json_mode(const json& j) {
  const std::string m = j.value("mode", "add");
  if (m == "add") return PaintMode::add;
  if (m == "remove") return PaintMode::remove;
  throw InvalidArgumentError("mode must be 'add' or 'remove'");
}

inline json point_json(const Vec3& p) { return json::array({p[0], p[1], p[2]}); }
inline json points_json(const std::vector<Vec3>& ps) {
  json a = json::array();
  for (const auto& p : ps) a.push_back(point_json(p));
  return a;
}
inline json lines_json(const std::vector<std::vector<Vec3>>& ls) {
  json a = json::array();
  for (const auto& l : ls) a.push_back(points_json(l));
  return a;
}

}  // namespace detail

/// Checks the invariants of one event.
inline void validate_event(const EditEvent& e) {
  std::visit(
      [](const auto& ev) {
        using T = std::decay_t<decltype(ev)>;
        if constexpr (std::is_same_v<T, MagnetEvent>) {
          if (!(ev.sigma > 0)) throw InvalidArgumentError("sigma must be positive");
        } else if constexpr (std::is_same_v<T, TpsEvent>) {
          if (ev.polylines.empty()) throw InvalidArgumentError("at least one polyline is required");
          for (const auto& l : ev.polylines)
            if (l.size() < 2) throw InvalidArgumentError("a polyline needs at least 2 points");
        } else if constexpr (std::is_same_v<T, SplineEvent>) {
          if (ev.splines.empty()) throw InvalidArgumentError("at least one spline is required");
          for (const auto& l : ev.splines)
            if (l.size() < 3) throw InvalidArgumentError("a spline needs at least 3 points");
        } else if constexpr (std::is_same_v<T, BrushEvent>) {
          if (!(ev.radius > 0)) throw InvalidArgumentError("radius must be positive");
        } else {
          if (ev.stroke.size() < 2) throw InvalidArgumentError("a stroke needs at least 2 points");
          if (!(ev.options.tube_radius > 0)) throw InvalidArgumentError("tube_radius must be positive");
          if (!(ev.options.k_sigma > 0)) throw InvalidArgumentError("k_sigma must be positive");
          if (!(ev.options.roi_margin >= 0)) throw InvalidArgumentError("roi_margin must be non-negative");
        }
      },
      e);
}

inline ScriptEntry parse_script_entry(const nlohmann::json& j) {
  using namespace detail;
  if (!j.is_object()) throw InvalidArgumentError("event must be an object");
  if (!j.contains("target") || !j["target"].is_string()) throw InvalidArgumentError("event needs a target");
  if (!j.contains("tool") || !j["tool"].is_string()) throw InvalidArgumentError("event needs a tool");
  ScriptEntry out;
  out.target = j["target"].get<std::string>();
  const std::string tool = j["tool"].get<std::string>();
  if (tool == "magnet") {
    out.event = MagnetEvent{json_point(j.at("click"), "click"), json_point(j.at("drag"), "drag"), json_number(j, "sigma")};
  } else if (tool == "tps") {
    if (!j.contains("polylines")) throw InvalidArgumentError("tps needs polylines");
    out.event = TpsEvent{json_lines(j["polylines"], "polylines")};
  } else if (tool == "spline") {
    if (!j.contains("splines")) throw InvalidArgumentError("spline needs splines");
    SplineEvent e{json_lines(j["splines"], "splines")};
    const std::string merge = j.value("merge", "union");
    if (merge == "union") e.merge = MergeMode::union_;
    else if (merge == "replace") e.merge = MergeMode::replace;
    else throw InvalidArgumentError("merge must be 'union' or 'replace'");
    out.event = std::move(e);
  } else if (tool == "brush") {
    if (!j.contains("center")) throw InvalidArgumentError("brush needs a center");
    out.event = BrushEvent{json_point(j["center"], "center"), json_number(j, "radius"), json_mode(j)};
  } else if (tool == "smart_paint") {
    if (!j.contains("stroke")) throw InvalidArgumentError("smart_paint needs a stroke");
    SmartPaintEvent e;
    e.stroke = json_points(j["stroke"], "stroke");
    e.options.tube_radius = json_number(j, "tube_radius", e.options.tube_radius);
    e.options.k_sigma = json_number(j, "k_sigma", e.options.k_sigma);
    e.options.roi_margin = json_number(j, "roi_margin", e.options.roi_margin);
    e.options.mode = json_mode(j);
    out.event = std::move(e);
  } else {
    throw InvalidArgumentError("unknown tool '" + tool + "'");
  }
  validate_event(out.event);
  return out;
}

/// Parses {"version": 1, "events": [...]}; failures carry the event index.
inline EditScript parse_edit_script(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw ScriptError(-1, std::string("malformed edit script: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("events") || !doc["events"].is_array())
    throw ScriptError(-1, "edit script needs an 'events' array");
  if (doc.contains("version") && doc["version"] != 1) throw ScriptError(-1, "unsupported edit script version");
  EditScript script;
  long index = 0;
  for (const auto& ev : doc["events"]) {
    try {
      script.events.push_back(parse_script_entry(ev));
    } catch (const ScriptError&) {
      throw;
    } catch (const std::exception& e) {
      throw ScriptError(index, e.what());
    }
    ++index;
  }
  return script;
}

inline nlohmann::json entry_json(const ScriptEntry& s) {
  using namespace detail;
  json j;
  j["target"] = s.target;
  std::visit(
      [&j](const auto& ev) {
        using T = std::decay_t<decltype(ev)>;
        if constexpr (std::is_same_v<T, MagnetEvent>) {
          j["tool"] = "magnet";
          j["click"] = point_json(ev.click);
          j["drag"] = point_json(ev.drag);
          j["sigma"] = ev.sigma;
        } else if constexpr (std::is_same_v<T, TpsEvent>) {
          j["tool"] = "tps";
          j["polylines"] = lines_json(ev.polylines);
        } else if constexpr (std::is_same_v<T, SplineEvent>) {
          j["tool"] = "spline";
          j["splines"] = lines_json(ev.splines);
          j["merge"] = ev.merge == MergeMode::union_ ? "union" : "replace";
        } else if constexpr (std::is_same_v<T, BrushEvent>) {
          j["tool"] = "brush";
          j["center"] = point_json(ev.center);
          j["radius"] = ev.radius;
          j["mode"] = ev.mode == PaintMode::add ? "add" : "remove";
        } else {
          j["tool"] = "smart_paint";
          j["stroke"] = points_json(ev.stroke);
          j["tube_radius"] = ev.options.tube_radius;
          j["k_sigma"] = ev.options.k_sigma;
          j["roi_margin"] = ev.options.roi_margin;
          j["mode"] = ev.options.mode == PaintMode::add ? "add" : "remove";
        }
      },
      s.event);
  return j;
}

inline std::string to_json(const EditScript& script) {
  nlohmann::json doc;
  doc["version"] = 1;
  doc["events"] = nlohmann::json::array();
  for (const auto& e : script.events) doc["events"].push_back(entry_json(e));
  return doc.dump(2);
}

/// One editable object, held as a mesh or a distance map; conversions run
/// only when consecutive events need the other domain.
class EditTarget {
 public:
  EditTarget(DistanceMap d, double cap, int threads = 1)
      : geometry_(d.geometry()), cap_(cap), threads_(threads), value_(std::move(d)) {}
  EditTarget(Mesh m, Geometry g, double cap, int threads = 1)
      : geometry_(std::move(g)), cap_(cap), threads_(threads), value_(std::move(m)) {}

  const Geometry& geometry() const { return geometry_; }
  bool holds_mesh() const { return std::holds_alternative<Mesh>(value_); }

  const Mesh& mesh() {
    if (!holds_mesh()) value_ = extract_mesh(std::get<DistanceMap>(value_));
    return std::get<Mesh>(value_);
  }
  const DistanceMap& map() {
    if (holds_mesh()) value_ = signed_distance(mesh_to_mask(std::get<Mesh>(value_), geometry_), cap_, threads_);
    return std::get<DistanceMap>(value_);
  }
  void set(Mesh m) { value_ = std::move(m); }
  void set(DistanceMap d) { value_ = std::move(d); }

 private:
  Geometry geometry_;
  double cap_;
  int threads_;
  std::variant<Mesh, DistanceMap> value_;
};

/// Editable state: the image (for smart paint) and the named targets.
struct EditState {
  std::shared_ptr<const Volume> image;
  std::map<std::string, EditTarget> targets;
  double cap = kDefaultDistanceCap;
  int threads = 1;
};

/// Applies one event to a target.
inline void apply_event(EditState& state, const ScriptEntry& entry) {
  auto it = state.targets.find(entry.target);
  if (it == state.targets.end()) throw InvalidArgumentError("unknown target '" + entry.target + "'");
  EditTarget& t = it->second;
  validate_event(entry.event);
  std::visit(
      [&](const auto& ev) {
        using T = std::decay_t<decltype(ev)>;
        if constexpr (std::is_same_v<T, MagnetEvent>) {
          t.set(magnet(t.mesh(), ev.click, ev.drag, ev.sigma));
        } else if constexpr (std::is_same_v<T, TpsEvent>) {
          t.set(tps_polyline(t.mesh(), ev.polylines));
        } else if constexpr (std::is_same_v<T, SplineEvent>) {
          t.set(merge_region(t.map(), rbf_surface(ev.splines, t.geometry(), state.cap, state.threads), ev.merge));
        } else if constexpr (std::is_same_v<T, BrushEvent>) {
          t.set(brush(t.map(), ev.center, ev.radius, ev.mode));
        } else {
          if (!state.image) throw InvalidArgumentError("smart paint needs the image");
          SmartPaintOptions o = ev.options;
          o.threads = state.threads;
          t.set(smart_paint(*state.image, t.map(), ev.stroke, o));
        }
      },
      entry.event);
}

/// Replays a script in order and returns every target as a distance map.
/// A failing event raises ScriptError with its index.
inline EditState apply_edit_script(EditState state, const EditScript& script) {
  for (std::size_t i = 0; i < script.events.size(); ++i) {
    try {
      apply_event(state, script.events[i]);
    } catch (const ScriptError&) {
      throw;
    } catch (const std::exception& e) {
      throw ScriptError(static_cast<long>(i), e.what());
    }
  }
  for (auto& [name, t] : state.targets) t.map();
  return state;
}

}  // namespace covseg
