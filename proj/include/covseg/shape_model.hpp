#pragma once

// PCA shape models over signed distance maps, affine registration of
// distance maps and model-guided level-set segmentation.

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "covseg/levelset.hpp"
#include "covseg/mesh.hpp"
#include "covseg/nifti.hpp"
#include "covseg/resample.hpp"

namespace covseg {

enum class Side { left, right };

inline const char* to_string(Side s) { return s == Side::left ? "left" : "right"; }
inline Side parse_side(const std::string& s) {
  if (s == "left") return Side::left;
  if (s == "right") return Side::right;
  throw InvalidArgumentError("side must be 'left' or 'right', got '" + s + "'");
}

/// Mean distance map plus orthonormal modes of variation.
struct ShapeModel {
  DistanceMap mean;
  std::vector<DistanceMap> components;
  std::vector<double> eigenvalues;  // mm^2, descending
  Side side = Side::left;

  std::size_t modes() const { return components.size(); }
};

inline double inner(const DistanceMap& a, const DistanceMap& b) {
  double s = 0;
  for (std::size_t n = 0; n < a.size(); ++n) s += a[n] * b[n];
  return s;
}

/// PCA through the N x N Gram matrix of the centred training maps. Keeps
/// every mode with a non-negligible eigenvalue (at most N - 1).
inline ShapeModel build_shape_model(const std::vector<DistanceMap>& training, Side side) {
  const std::size_t N = training.size();
  if (N < 2) throw InsufficientDataError("a shape model needs at least 2 training maps");
  const Geometry& g = training.front().geometry();
  for (const auto& t : training) require_same_geometry(t.geometry(), g, "build_shape_model");

  ShapeModel model;
  model.side = side;
  model.mean = DistanceMap(g, 0.0);
  for (const auto& t : training)
    for (std::size_t n = 0; n < t.size(); ++n) model.mean[n] += t[n];
  for (std::size_t n = 0; n < model.mean.size(); ++n) model.mean[n] /= static_cast<double>(N);

  std::vector<DistanceMap> centred;
  centred.reserve(N);
  for (const auto& t : training) {
    DistanceMap c(g);
    for (std::size_t n = 0; n < t.size(); ++n) c[n] = t[n] - model.mean[n];
    centred.push_back(std::move(c));
  }
  Eigen::MatrixXd gram(N, N);
  for (std::size_t a = 0; a < N; ++a)
    for (std::size_t b = a; b < N; ++b) gram(a, b) = gram(b, a) = inner(centred[a], centred[b]);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(gram);
  const Eigen::VectorXd mu = eig.eigenvalues();  // ascending
  const double top = std::max(mu(static_cast<Eigen::Index>(N - 1)), 0.0);
  for (Eigen::Index r = static_cast<Eigen::Index>(N) - 1; r >= 0; --r) {
    if (model.components.size() >= N - 1) break;
    if (!(mu(r) > 1e-10 * top) || top == 0) break;
    const Eigen::VectorXd v = eig.eigenvectors().col(r);
    DistanceMap psi(g, 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const double w = v(static_cast<Eigen::Index>(i));
      for (std::size_t n = 0; n < psi.size(); ++n) psi[n] += w * centred[i][n];
    }
    const double len = std::sqrt(inner(psi, psi));
    for (std::size_t n = 0; n < psi.size(); ++n) psi[n] /= len;
    // re-orthogonalise against earlier modes to absorb rounding
    for (const auto& prev : model.components) {
      const double d = inner(psi, prev);
      for (std::size_t n = 0; n < psi.size(); ++n) psi[n] -= d * prev[n];
    }
    const double len2 = std::sqrt(inner(psi, psi));
    for (std::size_t n = 0; n < psi.size(); ++n) psi[n] /= len2;
    model.components.push_back(std::move(psi));
    model.eigenvalues.push_back(mu(r) / static_cast<double>(N - 1));
  }
  return model;
}

/// x' = matrix * x + translation, in world mm.
struct AffineTransform {
  Mat3 matrix = Mat3::identity();
  Vec3 translation{0, 0, 0};

  Vec3 apply(const Vec3& p) const { return matrix * p + translation; }
  AffineTransform inverse() const {
    if (std::abs(matrix.determinant()) <= 1e-9) throw GeometryError("affine transform is not invertible");
    const Mat3 inv = matrix.inverse();
    return {inv, -(inv * translation)};
  }
  static AffineTransform identity() { return {}; }
};

namespace detail {

// Trilinear value and world-space gradient with clamp-to-edge
// extrapolation (zero gradient along clamped axes), so the cost stays
// continuous when samples leave the grid.
inline double sample_with_gradient(const DistanceMap& img, const Vec3& world, Vec3& grad) {
  const Geometry& g = img.geometry();
  const Vec3 u = g.to_index(world);
  const auto& d = g.dims;
  int i0[3];
  double f[3];
  bool clamped[3];
  for (int a = 0; a < 3; ++a) {
    const double ua = std::clamp(u[a], 0.0, static_cast<double>(d[a] - 1));
    clamped[a] = ua != u[a];
    i0[a] = std::min(static_cast<int>(std::floor(ua)), std::max(d[a] - 2, 0));
    f[a] = d[a] == 1 ? 0.0 : ua - i0[a];
  }
  const int i1 = std::min(i0[0] + 1, d[0] - 1), j1 = std::min(i0[1] + 1, d[1] - 1), k1 = std::min(i0[2] + 1, d[2] - 1);
  const double c000 = img.at(i0[0], i0[1], i0[2]), c100 = img.at(i1, i0[1], i0[2]);
  const double c010 = img.at(i0[0], j1, i0[2]), c110 = img.at(i1, j1, i0[2]);
  const double c001 = img.at(i0[0], i0[1], k1), c101 = img.at(i1, i0[1], k1);
  const double c011 = img.at(i0[0], j1, k1), c111 = img.at(i1, j1, k1);
  const double fx = f[0], fy = f[1], fz = f[2];
  const double c00 = c000 + (c100 - c000) * fx, c10 = c010 + (c110 - c010) * fx;
  const double c01 = c001 + (c101 - c001) * fx, c11 = c011 + (c111 - c011) * fx;
  const double c0 = c00 + (c10 - c00) * fy, c1 = c01 + (c11 - c01) * fy;
  const double value = c0 + (c1 - c0) * fz;
  const double dx = ((c100 - c000) * (1 - fy) + (c110 - c010) * fy) * (1 - fz) + ((c101 - c001) * (1 - fy) + (c111 - c011) * fy) * fz;
  const double dy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz;
  const double dz = c1 - c0;
  const Vec3 gi{clamped[0] ? 0.0 : dx / g.spacing[0], clamped[1] ? 0.0 : dy / g.spacing[1],
                clamped[2] ? 0.0 : dz / g.spacing[2]};
  grad = g.direction * gi;
  return value;
}

}  // namespace detail

struct RegistrationOptions {
  std::vector<int> levels{4, 2, 1};
  int iterations_per_level = 200;
  double initial_step_mm = 2.0;  // scaled by the level factor
  double min_step_mm = 0.01;
  /// Upper bound on the step, as a multiple of the initial step.
  double max_step_factor = 4.0;
  std::size_t max_samples = 150000;
  int divergence_limit = 10;
};

/// Affine T (moving space -> fixed space) minimising the mean squared
/// difference between moving(T^-1 x) and fixed(x) over the points x that
/// map inside the moving grid.
///
/// Multi-resolution descent from the identity along damped Gauss-Newton
/// directions; the step length halves whenever a trial fails to lower the cost.
inline AffineTransform register_affine(const DistanceMap& moving, const DistanceMap& fixed,
                                       const RegistrationOptions& opt = {}) {
  auto uniform = [](const DistanceMap& d) {
    const auto [lo, hi] = std::minmax_element(d.voxels().begin(), d.voxels().end());
    return *lo == *hi;
  };
  if (uniform(moving) || uniform(fixed)) throw InvalidArgumentError("registration needs non-uniform distance maps");

  // Centre and radius of the fixed object set the parameter scaling.
  const Geometry& fg = fixed.geometry();
  Vec3 centre{0, 0, 0};
  std::size_t count = 0;
  for (int k = 0; k < fg.dims[2]; ++k)
    for (int j = 0; j < fg.dims[1]; ++j)
      for (int i = 0; i < fg.dims[0]; ++i)
        if (fixed.at(i, j, k) > 0) {
          centre = centre + fg.to_world(i, j, k);
          ++count;
        }
  if (count == 0) {
    centre = fg.to_world(Vec3{(fg.dims[0] - 1) / 2.0, (fg.dims[1] - 1) / 2.0, (fg.dims[2] - 1) / 2.0});
  } else {
    centre = (1.0 / static_cast<double>(count)) * centre;
  }
  double radius = 0;
  if (count > 0) {
    for (int k = 0; k < fg.dims[2]; ++k)
      for (int j = 0; j < fg.dims[1]; ++j)
        for (int i = 0; i < fg.dims[0]; ++i)
          if (fixed.at(i, j, k) > 0) radius += squared_distance(fg.to_world(i, j, k), centre);
    radius = std::sqrt(radius / static_cast<double>(count));
  }
  radius = std::max(radius, 10.0);

  // Parameters q = [t (3), R * (M - I) (9)]; x_moving = c + t + M (x_fixed - c).
  std::array<double, 12> q{};
  auto to_matrix = [&](const std::array<double, 12>& p) {
    Mat3 m = Mat3::identity();
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m(r, c) += p[static_cast<std::size_t>(3 + 3 * r + c)] / radius;
    return m;
  };

  for (std::size_t lv = 0; lv < opt.levels.size(); ++lv) {
    const int factor = opt.levels[lv];
    const bool finest = lv + 1 == opt.levels.size();
    DistanceMap mov = moving, fix = fixed;
    if (factor > 1) {
      const auto& ms = moving.geometry().spacing;
      const auto& fs = fixed.geometry().spacing;
      mov = resample(moving, Vec3{ms[0] * factor, ms[1] * factor, ms[2] * factor}, ResampleMethod::down);
      fix = resample(fixed, Vec3{fs[0] * factor, fs[1] * factor, fs[2] * factor}, ResampleMethod::down);
    }
    const Geometry& g = fix.geometry();
    const std::size_t total = g.voxel_count();
    int stride = 1;
    while (total / (static_cast<std::size_t>(stride) * stride * stride) > opt.max_samples) ++stride;
    std::vector<Vec3> pts;
    std::vector<double> vals;
    for (int k = 0; k < g.dims[2]; k += stride)
      for (int j = 0; j < g.dims[1]; j += stride)
        for (int i = 0; i < g.dims[0]; i += stride) {
          pts.push_back(g.to_world(i, j, k) - centre);
          vals.push_back(fix.at(i, j, k));
        }

    using Vec12 = Eigen::Matrix<double, 12, 1>;
    using Mat12 = Eigen::Matrix<double, 12, 12>;
    // Cost with its gradient and Gauss-Newton curvature J^T J.
    auto evaluate = [&](const Vec12& p, Vec12* grad, Mat12* curv) {
      std::array<double, 12> pa;
      for (int n = 0; n < 12; ++n) pa[static_cast<std::size_t>(n)] = p(n);
      const Mat3 m = to_matrix(pa);
      const Vec3 t{p(0), p(1), p(2)};
      double cost = 0;
      if (grad) grad->setZero();
      if (curv) curv->setZero();
      Vec3 gr;
      Vec12 row;
      std::size_t used = 0;
      const auto& md = mov.dims();
      for (std::size_t s = 0; s < pts.size(); ++s) {
        const Vec3 y = centre + t + m * pts[s];
        // Only the overlap counts: points mapped off the moving grid are skipped.
        const Vec3 u = mov.geometry().to_index(y);
        if (u[0] < 0 || u[1] < 0 || u[2] < 0 || u[0] > md[0] - 1 || u[1] > md[1] - 1 || u[2] > md[2] - 1) continue;
        ++used;
        const double r = detail::sample_with_gradient(mov, y, gr) - vals[s];
        cost += r * r;
        if (grad) {
          for (int a = 0; a < 3; ++a) {
            row(a) = gr[static_cast<std::size_t>(a)];
            for (int b = 0; b < 3; ++b) row(3 + 3 * a + b) = gr[static_cast<std::size_t>(a)] * pts[s][static_cast<std::size_t>(b)] / radius;
          }
          *grad += 2 * r * row;
          if (curv) curv->selfadjointView<Eigen::Upper>().rankUpdate(row, 2.0);
        }
      }
      // Less than a tenth of the samples overlapping counts as divergence.
      if (10 * used < pts.size()) return std::numeric_limits<double>::infinity();
      const double inv = 1.0 / static_cast<double>(used);
      if (grad) *grad *= inv;
      if (curv) *curv = Mat12(curv->selfadjointView<Eigen::Upper>()) * inv;
      return cost * inv;
    };

    // Damped Gauss-Newton direction with a halving line search; the step
    // length is capped and the level ends once it falls below min_step_mm.
    const double max_step = opt.max_step_factor * opt.initial_step_mm * factor;
    Vec12 x = Eigen::Map<const Vec12>(q.data());
    Vec12 grad;
    Mat12 curv;
    double cost = evaluate(x, &grad, &curv);
    if (!std::isfinite(cost)) throw RegistrationError("registration cost is not finite at the start of a level");
    int rejected = 0;
    for (int it = 0; it < opt.iterations_per_level; ++it) {
      Mat12 a = curv;
      a.diagonal() += 1e-3 * curv.diagonal() + Vec12::Constant(1e-9);
      Vec12 dir = -a.ldlt().solve(grad);
      if (!dir.allFinite() || dir.dot(grad) >= 0) dir = -grad;
      double step = std::min(dir.norm(), max_step);
      if (step < opt.min_step_mm) break;
      dir.normalize();
      bool accepted = false;
      while (step >= opt.min_step_mm) {
        const Vec12 trial = x + step * dir;
        Vec12 tg;
        Mat12 tc;
        const double c = evaluate(trial, &tg, &tc);
        if (std::isfinite(c) && c < cost) {
          x = trial;
          cost = c;
          grad = tg;
          curv = tc;
          rejected = 0;
          accepted = true;
          break;
        }
        if (!std::isfinite(c) && finest) throw RegistrationError("registration cost is not finite");
        step *= 0.5;
        if (finest && ++rejected >= opt.divergence_limit && step >= opt.min_step_mm)
          throw RegistrationError("registration diverged at the finest level");
      }
      if (!accepted) break;
    }
    for (int n = 0; n < 12; ++n) q[static_cast<std::size_t>(n)] = x(n);
  }

  // U(x) = M x + (c + t - M c) maps fixed -> moving; T = U^-1.
  const Mat3 m = to_matrix(q);
  const Vec3 t{q[0], q[1], q[2]};
  AffineTransform u{m, centre + t - m * centre};
  return u.inverse();
}

/// Mode weights b_k of a model fit.
struct ModelFitCoefficients {
  std::vector<double> b;
};

/// A shape model resampled into an image grid through a pose, ready for
/// repeated fitting.
class PosedModel {
 public:
  PosedModel(const ShapeModel& model, const AffineTransform& pose, const Geometry& target, double cap = kDefaultDistanceCap)
      : eigenvalues_(model.eigenvalues) {
    const AffineTransform inv = pose.inverse();
    mean_ = warp(model.mean, inv, target, -cap);
    for (const auto& c : model.components) components_.push_back(warp(c, inv, target, 0.0));
    const auto K = static_cast<Eigen::Index>(components_.size());
    Eigen::MatrixXd gram(K, K);
    for (Eigen::Index a = 0; a < K; ++a)
      for (Eigen::Index b = a; b < K; ++b)
        gram(a, b) = gram(b, a) = inner(components_[static_cast<std::size_t>(a)], components_[static_cast<std::size_t>(b)]);
    gram_ = gram.ldlt();
  }

  const DistanceMap& mean() const { return mean_; }
  const std::vector<DistanceMap>& components() const { return components_; }

  /// Least-squares mode weights of phi - mean in the posed mode space,
  /// clipped to +-3 sqrt(lambda_k); reduces to the plain projection when
  /// the posed modes stay orthonormal.
  ModelFitCoefficients coefficients(const DistanceMap& phi) const {
    require_same_geometry(phi.geometry(), mean_.geometry(), "fit_model");
    const auto K = static_cast<Eigen::Index>(components_.size());
    Eigen::VectorXd rhs(K);
    for (Eigen::Index a = 0; a < K; ++a) {
      const auto& c = components_[static_cast<std::size_t>(a)];
      double s = 0;
      for (std::size_t n = 0; n < phi.size(); ++n) s += (phi[n] - mean_[n]) * c[n];
      rhs(a) = s;
    }
    Eigen::VectorXd b = K > 0 ? Eigen::VectorXd(gram_.solve(rhs)) : Eigen::VectorXd();
    ModelFitCoefficients out;
    for (Eigen::Index a = 0; a < K; ++a) {
      const double lim = 3.0 * std::sqrt(eigenvalues_[static_cast<std::size_t>(a)]);
      out.b.push_back(std::clamp(b(a), -lim, lim));
    }
    return out;
  }

  DistanceMap reconstruct(const ModelFitCoefficients& c) const {
    DistanceMap out = mean_;
    for (std::size_t a = 0; a < components_.size(); ++a) {
      const double w = c.b[a];
      if (w == 0) continue;
      const auto& comp = components_[a];
      for (std::size_t n = 0; n < out.size(); ++n) out[n] += w * comp[n];
    }
    return out;
  }

 private:
  static DistanceMap warp(const DistanceMap& src, const AffineTransform& inv, const Geometry& target, double outside) {
    DistanceMap out(target);
    const Geometry& sg = src.geometry();
    std::size_t n = 0;
    for (int k = 0; k < target.dims[2]; ++k)
      for (int j = 0; j < target.dims[1]; ++j)
        for (int i = 0; i < target.dims[0]; ++i, ++n)
          out[n] = sample_linear(src, sg.to_index(inv.apply(target.to_world(i, j, k))), outside);
    return out;
  }

  std::vector<double> eigenvalues_;
  DistanceMap mean_;
  std::vector<DistanceMap> components_;
  Eigen::LDLT<Eigen::MatrixXd> gram_;
};

/// Best plausible model instance for phi: posed mean plus clipped modes.
inline std::pair<DistanceMap, ModelFitCoefficients> fit_model(const ShapeModel& model, const AffineTransform& pose,
                                                              const DistanceMap& phi) {
  const PosedModel posed(model, pose, phi.geometry());
  auto coeffs = posed.coefficients(phi);
  return {posed.reconstruct(coeffs), std::move(coeffs)};
}

/// Default model-based level-set weights: curvature 0.3, model 0.1.
inline LevelSetParams model_levelset_defaults() {
  LevelSetParams p = LevelSetParams::lung();
  p.curvature_weight = 0.3;
  p.model_weight = 0.1;
  return p;
}

inline constexpr int kModelRefitInterval = 10;

/// Threshold level set with an extra pull towards the fitted shape model,
/// refitted every kModelRefitInterval iterations. Seeded by the posed
/// mean shape unless a seed is given.
inline DistanceMap model_levelset(const Volume& v, const ShapeModel& model, const AffineTransform& pose,
                                  const LevelSetParams& params, const std::optional<Mask>& seed = std::nullopt,
                                  EvolutionStats* stats = nullptr) {
  params.validate();
  const PosedModel posed(model, pose, v.geometry(), params.distance_cap);
  const Mask start = seed ? *seed : positive_region(posed.mean());
  if (params.model_weight == 0.0) return detail::evolve(v, params, start, nullptr, kModelRefitInterval, stats);
  const ModelRefit refit = [&posed](const DistanceMap& current) { return posed.reconstruct(posed.coefficients(current)); };
  return detail::evolve(v, params, start, &refit, kModelRefitInterval, stats);
}

// ---- persistence ---------------------------------------------------------

inline void save_shape_model(const std::filesystem::path& dir, const ShapeModel& model) {
  std::filesystem::create_directories(dir);
  write_distance_map_f32(dir / "mean.nii.gz", model.mean);
  for (std::size_t k = 0; k < model.components.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "comp_%03zu.nii.gz", k);
    write_distance_map_f32(dir / name, model.components[k]);
  }
  std::ofstream m(dir / "manifest.txt");
  m << "side=" << to_string(model.side) << "\n";
  m << "K=" << model.components.size() << "\n";
  m << "eigenvalues=";
  for (std::size_t k = 0; k < model.eigenvalues.size(); ++k) m << (k ? "," : "") << format_double(model.eigenvalues[k]);
  m << "\n";
}

inline ShapeModel load_shape_model(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.txt");
  if (!f) throw ParseError("missing shape model manifest in " + dir.string());
  std::map<std::string, std::string> kv;
  std::string line;
  while (std::getline(f, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    kv[line.substr(0, eq)] = line.substr(eq + 1);
  }
  if (!kv.contains("side") || !kv.contains("K") || !kv.contains("eigenvalues")) throw ParseError("incomplete shape model manifest");
  ShapeModel model;
  model.side = parse_side(kv["side"]);
  const int K = std::stoi(kv["K"]);
  std::stringstream ev(kv["eigenvalues"]);
  std::string tok;
  while (std::getline(ev, tok, ','))
    if (!tok.empty()) model.eigenvalues.push_back(std::stod(tok));
  if (static_cast<int>(model.eigenvalues.size()) != K) throw ParseError("eigenvalue count does not match K");
  model.mean = read_distance_map(dir / "mean.nii.gz");
  for (int k = 0; k < K; ++k) {
    char name[32];
    std::snprintf(name, sizeof(name), "comp_%03d.nii.gz", k);
    auto c = read_distance_map(dir / name);
    require_same_geometry(c.geometry(), model.mean.geometry(), "shape model component");
    model.components.push_back(std::move(c));
  }
  return model;
}

// ---- two-lung segmentation ----------------------------------------------

struct LungSegmentationOptions {
  LevelSetParams field = LevelSetParams::lung();
  LevelSetParams model = model_levelset_defaults();
  /// Spacing of the coarse copy used for the lung field estimate.
  Vec3 coarse_spacing{3, 3, 3};
  RegistrationOptions registration;
  /// Margin around each lung's working box.
  double margin_mm = 15.0;
};

struct LungSegmentation {
  DistanceMap field;
  DistanceMap left;
  DistanceMap right;
  AffineTransform left_pose;
  AffineTransform right_pose;
  Mesh left_mesh;
  Mesh right_mesh;
};

namespace detail {

template <class Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(stage, e.what(), std::current_exception());
  }
}

}  // namespace detail

/// Lung field estimate on a coarse copy, per-side affine registration of
/// each model mean, model-based level sets per side, then surfacing.
/// Errors are rethrown as StageError tagged with the failing stage.
inline LungSegmentation segment_lungs(const Volume& v, const ShapeModel& left, const ShapeModel& right,
                                      const LungSegmentationOptions& opt = {}) {
  const Geometry& g = v.geometry();
  const double cap = opt.model.distance_cap;
  LungSegmentation out;

  const Mask field = detail::run_stage("lung_field", [&] {
    const Volume coarse = resample(v, opt.coarse_spacing, ResampleMethod::down);
    const DistanceMap coarse_field = lung_field_estimate(coarse, opt.field);
    out.field = resample_linear_onto(coarse_field, g, -cap);
    Mask m = positive_region(out.field);
    if (count_nonzero(m) == 0) throw EmptySeedError("lung field estimate is empty");
    return m;
  });

  // Split the field at the mid-plane of its x extent (patient left = +x).
  const IndexBox fb = bounding_box(field);
  const double mid = 0.5 * (fb.lo[0] + fb.hi[0]);
  Mask side_mask[2] = {Mask(g), Mask(g)};  // 0 = left, 1 = right
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i)
        if (field.at(i, j, k)) side_mask[i > mid ? 0 : 1].at(i, j, k) = 1;

  const ShapeModel* models[2] = {&left, &right};
  DistanceMap result[2];
  AffineTransform pose[2];
  for (int s = 0; s < 2; ++s) {
    const std::string name = s == 0 ? "left" : "right";
    pose[s] = detail::run_stage("registration_" + name, [&] {
      if (count_nonzero(side_mask[s]) == 0) throw EmptySeedError("no lung field on the " + name + " side");
      return register_affine(models[s]->mean, signed_distance(side_mask[s], cap), opt.registration);
    });
    result[s] = detail::run_stage("model_levelset_" + name, [&] {
      // Work inside the box covering the field side and the posed mean.
      const PosedModel posed(*models[s], pose[s], g, cap);
      const Mask posed_region = positive_region(posed.mean());
      IndexBox box = bounding_box(mask_union(side_mask[s], posed_region));
      Index3 grow;
      for (int a = 0; a < 3; ++a) grow[a] = static_cast<int>(std::ceil(opt.margin_mm / g.spacing[a]));
      box = clip_box(g, dilate_box(box, grow));
      const Volume sub = crop(v, box);
      const Mask seed = crop(posed_region, box);
      const DistanceMap phi = model_levelset(sub, *models[s], pose[s], opt.model, seed);
      Mask full(g);
      paste(full, positive_region(phi), box);
      return signed_distance(full, cap);
    });
  }

  // A voxel claimed by both sides goes to the side with the larger value.
  Mask lm = positive_region(result[0]), rm = positive_region(result[1]);
  bool overlap = false;
  for (std::size_t n = 0; n < lm.size(); ++n)
    if (lm[n] && rm[n]) {
      overlap = true;
      if (result[0][n] >= result[1][n]) rm[n] = 0;
      else lm[n] = 0;
    }
  out.left = overlap ? signed_distance(lm, cap) : std::move(result[0]);
  out.right = overlap ? signed_distance(rm, cap) : std::move(result[1]);
  out.left_pose = pose[0];
  out.right_pose = pose[1];
  out.left_mesh = detail::run_stage("surface_left", [&] { return extract_mesh(out.left); });
  out.right_mesh = detail::run_stage("surface_right", [&] { return extract_mesh(out.right); });
  return out;
}

}  // namespace covseg
