#pragma once

// Narrow-band level-set evolution driven by an intensity window.
//
// phi is inside-positive and evolves as phi_t = F |grad phi| with
//   F = (1 - w_c - w_m) D + w_c div(grad phi / |grad phi|) + w_m (phi_model - phi)
// where D = +1 inside [t_low, t_high] and -1 outside. The divergence term
// is the (negated) convex-positive mean curvature, so it smooths the front.

#include <cmath>
#include <functional>
#include <optional>
#include <variant>
#include <vector>

#include "covseg/components.hpp"
#include "covseg/distance.hpp"
#include "covseg/parallel.hpp"
#include "covseg/resample.hpp"

namespace covseg {

struct LevelSetParams {
  double t_low = -860.0;
  double t_high = -200.0;
  double curvature_weight = 0.6;
  double model_weight = 0.0;
  int max_iterations = 500;
  /// Stop when the voxels whose inside/outside label changed over the last
  /// `convergence_window` iterations fall below this fraction of the region.
  double convergence_tol = 0.001;
  /// Front displacement per iteration at |F| = 1, in voxels.
  double step_size = 0.5;
  int reinit_interval = 20;
  int convergence_window = 10;
  /// Narrow band half-width in voxels.
  int band_voxels = 12;
  double distance_cap = kDefaultDistanceCap;
  int threads = 1;

  static LevelSetParams lung() { return {}; }
  static LevelSetParams lesion() {
    LevelSetParams p;
    p.t_low = -700.0;
    p.t_high = 200.0;
    return p;
  }

  void validate() const {
    if (!(t_low < t_high)) throw InvalidArgumentError("t_low must be < t_high");
    if (curvature_weight < 0 || curvature_weight > 1 || model_weight < 0 || model_weight > 1)
      throw InvalidArgumentError("weights must lie in [0, 1]");
    if (curvature_weight + model_weight > 1 + 1e-12) throw InvalidArgumentError("curvature_weight + model_weight > 1");
    if (max_iterations < 1) throw InvalidArgumentError("max_iterations must be >= 1");
    if (!(convergence_tol > 0 && convergence_tol < 1)) throw InvalidArgumentError("convergence_tol must be in (0, 1)");
    if (!(step_size > 0)) throw InvalidArgumentError("step_size must be > 0");
    if (reinit_interval < 1 || convergence_window < 1) throw InvalidArgumentError("intervals must be >= 1");
    if (band_voxels < 2) throw InvalidArgumentError("band_voxels must be >= 2");
    if (!(distance_cap > 0)) throw InvalidArgumentError("distance_cap must be > 0");
  }

  bool in_range(double hu) const { return hu >= t_low && hu <= t_high; }
};

/// Initial region for an evolution: a mask or a list of voxel indices.
/// Point seeds grow into balls of this many finest-spacing units; under
/// curvature weight 0.6 a front smaller than 3 voxels collapses.
inline constexpr double kPointSeedRadius = 5.0;

struct SeedRegion {
  std::variant<Mask, std::vector<Index3>> seeds;

  Mask to_mask(const Geometry& g) const {
    if (const auto* m = std::get_if<Mask>(&seeds)) {
      require_same_geometry(m->geometry(), g, "seed region");
      return *m;
    }
    const double r = kPointSeedRadius * g.min_spacing();
    Mask m(g);
    for (const auto& p : std::get<std::vector<Index3>>(seeds)) {
      if (!g.contains(p[0], p[1], p[2])) throw OutOfDomainError("seed voxel outside the grid");
      Index3 lo, hi;
      for (int a = 0; a < 3; ++a) {
        const int reach = static_cast<int>(std::floor(r / g.spacing[a]));
        lo[a] = std::max(0, p[a] - reach);
        hi[a] = std::min(g.dims[a] - 1, p[a] + reach);
      }
      for (int k = lo[2]; k <= hi[2]; ++k)
        for (int j = lo[1]; j <= hi[1]; ++j)
          for (int i = lo[0]; i <= hi[0]; ++i) {
            const double dx = (i - p[0]) * g.spacing[0], dy = (j - p[1]) * g.spacing[1], dz = (k - p[2]) * g.spacing[2];
            if (dx * dx + dy * dy + dz * dz <= r * r) m.at(i, j, k) = 1;
          }
    }
    return m;
  }
};

/// Voxels whose intensity lies inside the window.
inline Mask in_range_mask(const Volume& v, double t_low, double t_high) {
  Mask m(v.geometry());
  for (std::size_t n = 0; n < v.size(); ++n) m[n] = (v[n] >= t_low && v[n] <= t_high) ? 1 : 0;
  return m;
}

namespace detail {

struct Derivatives {
  double dmx, dpx, dmy, dpy, dmz, dpz;  // one-sided
  double x, y, z;                        // central
  double xx, yy, zz, xy, xz, yz;
};

inline Derivatives derivatives(const std::vector<double>& phi, const Geometry& g, int i, int j, int k) {
  const Index3& d = g.dims;
  const auto at = [&](int a, int b, int c) {
    a = std::clamp(a, 0, d[0] - 1);
    b = std::clamp(b, 0, d[1] - 1);
    c = std::clamp(c, 0, d[2] - 1);
    return phi[g.linear(a, b, c)];
  };
  const double hx = g.spacing[0], hy = g.spacing[1], hz = g.spacing[2];
  const double c0 = at(i, j, k);
  const double xm = at(i - 1, j, k), xp = at(i + 1, j, k);
  const double ym = at(i, j - 1, k), yp = at(i, j + 1, k);
  const double zm = at(i, j, k - 1), zp = at(i, j, k + 1);
  Derivatives r;
  r.dmx = (c0 - xm) / hx;
  r.dpx = (xp - c0) / hx;
  r.dmy = (c0 - ym) / hy;
  r.dpy = (yp - c0) / hy;
  r.dmz = (c0 - zm) / hz;
  r.dpz = (zp - c0) / hz;
  r.x = (xp - xm) / (2 * hx);
  r.y = (yp - ym) / (2 * hy);
  r.z = (zp - zm) / (2 * hz);
  r.xx = (xp - 2 * c0 + xm) / (hx * hx);
  r.yy = (yp - 2 * c0 + ym) / (hy * hy);
  r.zz = (zp - 2 * c0 + zm) / (hz * hz);
  r.xy = (at(i + 1, j + 1, k) - at(i + 1, j - 1, k) - at(i - 1, j + 1, k) + at(i - 1, j - 1, k)) / (4 * hx * hy);
  r.xz = (at(i + 1, j, k + 1) - at(i + 1, j, k - 1) - at(i - 1, j, k + 1) + at(i - 1, j, k - 1)) / (4 * hx * hz);
  r.yz = (at(i, j + 1, k + 1) - at(i, j + 1, k - 1) - at(i, j - 1, k + 1) + at(i, j - 1, k - 1)) / (4 * hy * hz);
  return r;
}

// div(grad phi / |grad phi|); 0 where the gradient vanishes.
inline double divergence_of_normal(const Derivatives& r, double& grad_norm) {
  const double g2 = r.x * r.x + r.y * r.y + r.z * r.z;
  grad_norm = std::sqrt(g2);
  if (grad_norm < 1e-8) return 0.0;
  const double num = r.xx * (r.y * r.y + r.z * r.z) + r.yy * (r.x * r.x + r.z * r.z) + r.zz * (r.x * r.x + r.y * r.y) -
                     2 * r.x * r.y * r.xy - 2 * r.x * r.z * r.xz - 2 * r.y * r.z * r.yz;
  return num / (g2 * grad_norm);
}

// Godunov upwind |grad phi| for phi_t = S |grad phi|.
inline double upwind_gradient(const Derivatives& r, double speed) {
  auto sq = [](double v) { return v * v; };
  if (speed > 0) {
    return std::sqrt(sq(std::min(r.dmx, 0.0)) + sq(std::max(r.dpx, 0.0)) + sq(std::min(r.dmy, 0.0)) +
                     sq(std::max(r.dpy, 0.0)) + sq(std::min(r.dmz, 0.0)) + sq(std::max(r.dpz, 0.0)));
  }
  return std::sqrt(sq(std::max(r.dmx, 0.0)) + sq(std::min(r.dpx, 0.0)) + sq(std::max(r.dmy, 0.0)) +
                   sq(std::min(r.dpy, 0.0)) + sq(std::max(r.dmz, 0.0)) + sq(std::min(r.dpz, 0.0)));
}

}  // namespace detail

/// Mean curvature at an interior voxel, sign chosen so a convex region
/// (sphere of radius R) gives +2/R. Returns 0 where |grad phi| < 1e-8.
inline double curvature_at(const DistanceMap& d, const Index3& voxel) {
  const Geometry& g = d.geometry();
  for (int a = 0; a < 3; ++a)
    if (voxel[a] < 1 || voxel[a] > g.dims[a] - 2) throw OutOfDomainError("curvature needs an interior voxel");
  const auto r = detail::derivatives(d.buffer(), g, voxel[0], voxel[1], voxel[2]);
  double gn = 0;
  return -detail::divergence_of_normal(r, gn);
}

/// Model target supplied to the evolution: called with the current
/// (reinitialised, capped) distance map, returns phi_model on the same grid.
using ModelRefit = std::function<DistanceMap(const DistanceMap&)>;

struct EvolutionStats {
  int iterations = 0;
  bool converged = false;
};

namespace detail {

inline DistanceMap evolve(const Volume& v, const LevelSetParams& p, const Mask& seed, const ModelRefit* model,
                          int refit_interval, EvolutionStats* stats) {
  p.validate();
  const Geometry& g = v.geometry();
  require_same_geometry(g, seed.geometry(), "level set seed");
  const std::size_t nvox = v.size();

  std::vector<std::int8_t> D(nvox);
  bool seeded = false;
  for (std::size_t n = 0; n < nvox; ++n) {
    D[n] = p.in_range(v[n]) ? 1 : -1;
    if (seed[n] && D[n] > 0) seeded = true;
  }
  if (!seeded) throw EmptySeedError("no seed voxel lies inside the threshold window");

  const double h = g.min_spacing();
  const double band = p.band_voxels * h;
  const double dt = p.step_size * h;
  const double kappa_max = 1.0 / h;
  const double w_c = p.curvature_weight;
  const double w_m = model ? p.model_weight : 0.0;
  const double w_d = 1.0 - w_c - w_m;
  const bool hard_window = w_m == 0.0;
  const double clamp_out = -0.5 * h;

  std::vector<double> phi = signed_distance(seed, band, p.threads).buffer();
  if (hard_window)
    for (std::size_t n = 0; n < nvox; ++n)
      if (D[n] < 0) phi[n] = std::min(phi[n], clamp_out);
  std::vector<std::size_t> active;
  auto rebuild_band = [&] {
    active.clear();
    for (std::size_t n = 0; n < nvox; ++n)
      if (std::abs(phi[n]) < band) active.push_back(n);
  };
  rebuild_band();

  std::vector<double> target;  // phi_model
  std::vector<double> next(nvox);
  std::vector<char> snapshot(nvox);
  for (std::size_t n = 0; n < nvox; ++n) snapshot[n] = phi[n] > 0;
  EvolutionStats st;

  for (int it = 0; it < p.max_iterations; ++it) {
    if (w_m > 0 && it % refit_interval == 0) {
      Mask region(g);
      for (std::size_t n = 0; n < nvox; ++n) region[n] = phi[n] > 0 ? 1 : 0;
      const DistanceMap current = signed_distance(region, p.distance_cap, p.threads);
      const DistanceMap fitted = (*model)(current);
      require_same_geometry(fitted.geometry(), g, "model target");
      target = fitted.buffer();
    }

    parallel_for(active.size(), p.threads, [&](std::size_t b, std::size_t e) {
      for (std::size_t q = b; q < e; ++q) {
        const std::size_t n = active[q];
        const Index3 ijk = g.unravel(n);
        const auto r = derivatives(phi, g, ijk[0], ijk[1], ijk[2]);
        double speed = w_d * D[n];
        if (w_m > 0) speed += w_m * (target[n] - phi[n]);
        speed = std::clamp(speed, -1.0, 1.0);
        double gn = 0;
        const double div = std::clamp(divergence_of_normal(r, gn), -kappa_max, kappa_max);
        double value = phi[n] + dt * (speed * upwind_gradient(r, speed) + w_c * div * gn);
        value = std::clamp(value, -band, band);
        if (hard_window && D[n] < 0) value = std::min(value, clamp_out);
        next[n] = value;
      }
    });
    for (std::size_t n : active) phi[n] = next[n];

    st.iterations = it + 1;
    if ((it + 1) % p.convergence_window == 0) {
      // Net label change against the previous window; oscillations cancel.
      std::size_t changed = 0, inside = 0;
      for (std::size_t n = 0; n < nvox; ++n) {
        const char now = phi[n] > 0;
        changed += now != snapshot[n];
        inside += now;
        snapshot[n] = now;
      }
      if (static_cast<double>(changed) <= p.convergence_tol * static_cast<double>(inside)) {
        st.converged = true;
        break;
      }
    }

    if ((it + 1) % p.reinit_interval == 0) {
      Mask region(g);
      for (std::size_t n = 0; n < nvox; ++n) region[n] = phi[n] > 0 ? 1 : 0;
      phi = signed_distance(region, band, p.threads).buffer();
      rebuild_band();
    }
  }
  if (stats) *stats = st;

  Mask region(g);
  for (std::size_t n = 0; n < nvox; ++n) region[n] = phi[n] > 0 ? 1 : 0;
  return signed_distance(region, p.distance_cap, p.threads);
}

}  // namespace detail

/// Evolves a front from `seed` under the intensity window and curvature.
/// Without a shape prior the front never enters out-of-window voxels.
inline DistanceMap threshold_levelset(const Volume& v, const LevelSetParams& params, const SeedRegion& seed,
                                      EvolutionStats* stats = nullptr) {
  LevelSetParams p = params;
  p.model_weight = 0.0;
  return detail::evolve(v, p, seed.to_mask(v.geometry()), nullptr, 1, stats);
}

/// Automatic lung seeding: in-window 26-connected components of at least
/// `min_ml` that do not touch the x/y border of the image.
inline Mask lung_seed_components(const Volume& v, const LevelSetParams& p, double min_ml = 50.0) {
  const Mask window = in_range_mask(v, p.t_low, p.t_high);
  const Components cc = label_components(window, 26);
  const Geometry& g = v.geometry();
  const double voxel_ml = g.voxel_volume_mm3() / 1000.0;
  std::vector<char> keep(cc.size.size(), 0);
  for (std::size_t c = 0; c < cc.size.size(); ++c) {
    const IndexBox& b = cc.box[c];
    const bool touches = b.lo[0] == 0 || b.lo[1] == 0 || b.hi[0] == g.dims[0] - 1 || b.hi[1] == g.dims[1] - 1;
    keep[c] = !touches && static_cast<double>(cc.size[c]) * voxel_ml >= min_ml;
  }
  Mask seed(g);
  for (std::size_t n = 0; n < seed.size(); ++n) seed[n] = cc.label[n] > 0 && keep[static_cast<std::size_t>(cc.label[n] - 1)];
  return seed;
}

/// Lung region estimate with the lung window and automatic seeding.
inline DistanceMap lung_field_estimate(const Volume& v, const LevelSetParams& params = LevelSetParams::lung()) {
  const Mask seed = lung_seed_components(v, params);
  if (count_nonzero(seed) == 0) throw EmptySeedError("no lung-window component qualifies as a seed");
  return threshold_levelset(v, params, SeedRegion{seed});
}

/// Two-stage evolution: the whole window on a half-resolution copy, then
/// the full-resolution run seeded by the upsampled low-resolution result.
inline DistanceMap multires_levelset(const Volume& v, const LevelSetParams& params) {
  params.validate();
  const Geometry& g = v.geometry();
  const Vec3 coarse{2 * g.spacing[0], 2 * g.spacing[1], 2 * g.spacing[2]};
  const Volume low = resample(v, coarse, ResampleMethod::down);
  const Mask low_seed = in_range_mask(low, params.t_low, params.t_high);
  if (count_nonzero(low_seed) == 0) throw EmptySeedError("no voxel inside the window at low resolution");
  const DistanceMap low_phi = threshold_levelset(low, params, SeedRegion{low_seed});
  const Mask low_region = positive_region(low_phi);
  if (count_nonzero(low_region) == 0) throw EmptySeedError("low-resolution stage produced an empty region");
  const DistanceMap up = resample_linear_onto(low_phi, g, -params.distance_cap);
  return threshold_levelset(v, params, SeedRegion{positive_region(up)});
}

}  // namespace covseg
