#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "covseg/image.hpp"
#include "covseg/parallel.hpp"

namespace covseg {

inline constexpr double kDefaultDistanceCap = 30.0;

namespace detail {

// Exact 1D squared distance transform (lower envelope of parabolas),
// anisotropic spacing `s`. f[i] = +inf marks non-sites.
inline void edt_1d(const double* f, double* out, int n, double s, int* v, double* z, double* ff) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == inf) continue;
    ff[q] = f[q] + (q * s) * (q * s);
    while (k >= 0) {
      const double sq = (ff[q] - ff[v[k]]) / (2.0 * s * s * (q - v[k]));
      if (sq <= z[k]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[k] = q;
    z[k] = k == 0 ? -inf : (ff[q] - ff[v[k - 1]]) / (2.0 * s * s * (q - v[k - 1]));
    z[k + 1] = inf;
  }
  if (k < 0) {
    for (int p = 0; p < n; ++p) out[p] = inf;
    return;
  }
  int j = 0;
  for (int p = 0; p < n; ++p) {
    while (z[j + 1] < p) ++j;
    const double d = (p - v[j]) * s;
    out[p] = d * d + f[v[j]];
  }
}

}  // namespace detail

/// Squared Euclidean distance (mm^2) from every voxel to the nearest voxel
/// with `site[n] != 0`; +inf when there are no sites.
inline std::vector<double> squared_distance_transform(const std::vector<std::uint8_t>& site, const Geometry& g,
                                                      int threads = 1) {
  constexpr double inf = std::numeric_limits<double>::infinity();
  const Index3 d = g.dims;
  std::vector<double> a(site.size());
  for (std::size_t n = 0; n < site.size(); ++n) a[n] = site[n] ? 0.0 : inf;

  const std::size_t strides[3] = {1, static_cast<std::size_t>(d[0]), static_cast<std::size_t>(d[0]) * d[1]};
  for (int axis = 0; axis < 3; ++axis) {
    const int n = d[axis];
    const int u = axis == 0 ? 1 : 0, w = axis == 2 ? 1 : 2;
    const std::size_t lines = static_cast<std::size_t>(d[u]) * d[w];
    const std::size_t stride = strides[axis];
    const double s = g.spacing[axis];
    parallel_for(lines, threads, [&](std::size_t b, std::size_t e) {
      std::vector<double> f(n), out(n), ff(n), z(static_cast<std::size_t>(n) + 1);
      std::vector<int> v(n);
      for (std::size_t line = b; line < e; ++line) {
        const auto iu = static_cast<std::size_t>(line % static_cast<std::size_t>(d[u]));
        const auto iw = static_cast<std::size_t>(line / static_cast<std::size_t>(d[u]));
        const std::size_t base = iu * strides[u] + iw * strides[w];
        for (int q = 0; q < n; ++q) f[q] = a[base + q * stride];
        detail::edt_1d(f.data(), out.data(), n, s, v.data(), z.data(), ff.data());
        for (int q = 0; q < n; ++q) a[base + q * stride] = out[q];
      }
    });
  }
  return a;
}

/// Signed Euclidean distance to the mask boundary, positive inside.
///
/// A voxel inside the mask gets the distance to the nearest outside voxel
/// centre minus half the finest spacing (and symmetrically for outside
/// voxels), so the zero level sits midway between boundary voxels and
/// complementing the mask negates the field exactly. Values are clamped
/// to +-cap.
inline DistanceMap signed_distance(const Mask& m, double cap = kDefaultDistanceCap, int threads = 1) {
  const Geometry& g = m.geometry();
  std::vector<std::uint8_t> inside(m.size()), outside(m.size());
  for (std::size_t n = 0; n < m.size(); ++n) {
    inside[n] = m[n] ? 1 : 0;
    outside[n] = m[n] ? 0 : 1;
  }
  const auto to_outside = squared_distance_transform(outside, g, threads);
  const auto to_inside = squared_distance_transform(inside, g, threads);
  const double half = 0.5 * g.min_spacing();
  DistanceMap out(g);
  for (std::size_t n = 0; n < m.size(); ++n) {
    const double v = m[n] ? std::sqrt(to_outside[n]) - half : -(std::sqrt(to_inside[n]) - half);
    out[n] = std::isfinite(v) ? std::clamp(v, -cap, cap) : (m[n] ? cap : -cap);
  }
  return out;
}

}  // namespace covseg
