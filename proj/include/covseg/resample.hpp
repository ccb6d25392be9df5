#pragma once

#include <cmath>
#include <vector>

#include "covseg/image.hpp"

namespace covseg {

enum class ResampleMethod {
  down,  ///< anti-aliased tent ("triangle") convolution
  iso,   ///< trilinear interpolation
};

/// Relabels axes so the direction matrix becomes identity (RAI order).
/// World positions of all voxel centres are preserved.
template <class T, class Tag>
Image<T, Tag> reorient_rai(const Image<T, Tag>& v) {
  const Geometry& g = v.geometry();
  if (g.direction == Mat3::identity()) return v;

  // out axis a reads input axis perm[a], flipped when sign[a] < 0
  Index3 perm{-1, -1, -1};
  Index3 sign{1, 1, 1};
  for (int p = 0; p < 3; ++p) {
    const Vec3 col = g.direction.column(p);
    int best = 0;
    for (int a = 1; a < 3; ++a)
      if (std::abs(col[a]) > std::abs(col[best])) best = a;
    for (int a = 0; a < 3; ++a) {
      const double expect = a == best ? 1.0 : 0.0;
      if (std::abs(std::abs(col[a]) - expect) > 1e-3) throw OrientationError("oblique direction matrix is not supported");
    }
    if (perm[best] != -1) throw OrientationError("direction matrix is not an axis permutation");
    perm[best] = p;
    sign[best] = col[best] > 0 ? 1 : -1;
  }

  Geometry out_g;
  Index3 first{};  // input index of output voxel (0,0,0)
  for (int a = 0; a < 3; ++a) {
    out_g.dims[a] = g.dims[perm[a]];
    out_g.spacing[a] = g.spacing[perm[a]];
    first[perm[a]] = sign[a] > 0 ? 0 : g.dims[perm[a]] - 1;
  }
  out_g.direction = Mat3::identity();
  out_g.origin = g.to_world(first[0], first[1], first[2]);

  Image<T, Tag> out(out_g);
  Index3 in{};
  for (int k = 0; k < out_g.dims[2]; ++k)
    for (int j = 0; j < out_g.dims[1]; ++j)
      for (int i = 0; i < out_g.dims[0]; ++i) {
        const int o[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) in[perm[a]] = sign[a] > 0 ? o[a] : g.dims[perm[a]] - 1 - o[a];
        out.at(i, j, k) = v.at(in[0], in[1], in[2]);
      }
  return out;
}

namespace detail {

struct AxisWeights {
  std::vector<int> first;        // first input index per output index
  std::vector<std::vector<double>> w;
};

// Tent kernel of half-width `radius` (in input voxels) centred at the
// output voxel's continuous input index; weights renormalised at borders.
inline AxisWeights tent_weights(int in_dim, int out_dim, double ratio, double radius) {
  AxisWeights aw;
  aw.first.resize(static_cast<std::size_t>(out_dim));
  aw.w.resize(static_cast<std::size_t>(out_dim));
  for (int o = 0; o < out_dim; ++o) {
    const double u = o * ratio + (ratio - 1.0) / 2.0;
    const int lo = std::max(0, static_cast<int>(std::floor(u - radius)));
    const int hi = std::min(in_dim - 1, static_cast<int>(std::ceil(u + radius)));
    std::vector<double> w;
    double sum = 0;
    int first = -1;
    for (int i = lo; i <= hi; ++i) {
      const double wi = std::max(0.0, 1.0 - std::abs(i - u) / radius);
      if (first < 0 && wi <= 0) continue;
      if (first < 0) first = i;
      w.push_back(wi);
      sum += wi;
    }
    if (first < 0 || sum <= 0) {  // past the border: clamp to nearest voxel
      first = std::clamp(static_cast<int>(std::lround(u)), 0, in_dim - 1);
      w.assign(1, 1.0);
      sum = 1.0;
    }
    while (w.size() > 1 && w.back() <= 0) w.pop_back();
    for (double& x : w) x /= sum;
    aw.first[static_cast<std::size_t>(o)] = first;
    aw.w[static_cast<std::size_t>(o)] = std::move(w);
  }
  return aw;
}

}  // namespace detail

/// Geometry produced by resampling `g` to `target_spacing`: the physical
/// field of view is kept, dims = round(dims * spacing / target), min 1.
inline Geometry resampled_geometry(const Geometry& g, const Vec3& target_spacing) {
  Geometry out = g;
  Vec3 first_idx{};
  for (int a = 0; a < 3; ++a) {
    if (!(target_spacing[a] > 0)) throw InvalidArgumentError("target spacing must be > 0");
    out.spacing[a] = target_spacing[a];
    out.dims[a] = std::max(1, static_cast<int>(std::lround(g.dims[a] * g.spacing[a] / target_spacing[a])));
    const double ratio = target_spacing[a] / g.spacing[a];
    first_idx[a] = (ratio - 1.0) / 2.0;
  }
  out.origin = g.to_world(first_idx);
  return out;
}

/// Separable resampling. `down` uses a tent of half-width max(1, ratio)
/// input voxels; `iso` uses linear interpolation (half-width 1).
template <class T, class Tag>
Image<T, Tag> resample(const Image<T, Tag>& v, const Vec3& target_spacing, ResampleMethod method) {
  const Geometry& g = v.geometry();
  const Geometry og = resampled_geometry(g, target_spacing);
  std::array<detail::AxisWeights, 3> aw;
  for (int a = 0; a < 3; ++a) {
    const double ratio = target_spacing[a] / g.spacing[a];
    const double radius = method == ResampleMethod::down ? std::max(1.0, ratio) : 1.0;
    aw[static_cast<std::size_t>(a)] = detail::tent_weights(g.dims[a], og.dims[a], ratio, radius);
  }

  std::vector<double> cur(v.size());
  for (std::size_t n = 0; n < v.size(); ++n) cur[n] = static_cast<double>(v[n]);
  Index3 d = g.dims;
  for (int axis = 0; axis < 3; ++axis) {
    Index3 nd = d;
    nd[axis] = og.dims[axis];
    std::vector<double> next(static_cast<std::size_t>(nd[0]) * nd[1] * nd[2]);
    const auto& W = aw[static_cast<std::size_t>(axis)];
    const std::size_t stride_in = axis == 0 ? 1 : axis == 1 ? static_cast<std::size_t>(d[0]) : static_cast<std::size_t>(d[0]) * d[1];
    for (int k = 0; k < nd[2]; ++k)
      for (int j = 0; j < nd[1]; ++j)
        for (int i = 0; i < nd[0]; ++i) {
          const int o[3] = {i, j, k};
          int base_idx[3] = {i, j, k};
          base_idx[axis] = 0;
          const std::size_t base = static_cast<std::size_t>(base_idx[0]) +
                                   static_cast<std::size_t>(d[0]) * (static_cast<std::size_t>(base_idx[1]) + static_cast<std::size_t>(d[1]) * base_idx[2]);
          const auto oi = static_cast<std::size_t>(o[axis]);
          const auto& w = W.w[oi];
          std::size_t src = base + stride_in * static_cast<std::size_t>(W.first[oi]);
          double acc = 0;
          for (double wi : w) {
            acc += wi * cur[src];
            src += stride_in;
          }
          next[static_cast<std::size_t>(i) + static_cast<std::size_t>(nd[0]) * (static_cast<std::size_t>(j) + static_cast<std::size_t>(nd[1]) * k)] = acc;
        }
    cur = std::move(next);
    d = nd;
  }
  Image<T, Tag> out(og);
  for (std::size_t n = 0; n < out.size(); ++n) out[n] = static_cast<T>(cur[n]);
  return out;
}

/// Trilinear sample at a continuous voxel index; `outside` beyond the grid.
template <class T, class Tag>
double sample_linear(const Image<T, Tag>& img, const Vec3& idx, double outside) {
  const auto& d = img.dims();
  double f[3];
  int i0[3];
  for (int a = 0; a < 3; ++a) {
    if (idx[a] < -1e-9 || idx[a] > d[a] - 1 + 1e-9) return outside;
    const double c = std::clamp(idx[a], 0.0, double(d[a] - 1));
    i0[a] = std::min(static_cast<int>(std::floor(c)), std::max(d[a] - 2, 0));
    f[a] = d[a] == 1 ? 0.0 : c - i0[a];
  }
  const int i1 = std::min(i0[0] + 1, d[0] - 1), j1 = std::min(i0[1] + 1, d[1] - 1), k1 = std::min(i0[2] + 1, d[2] - 1);
  auto at = [&](int i, int j, int k) { return static_cast<double>(img.at(i, j, k)); };
  const double c00 = at(i0[0], i0[1], i0[2]) * (1 - f[0]) + at(i1, i0[1], i0[2]) * f[0];
  const double c10 = at(i0[0], j1, i0[2]) * (1 - f[0]) + at(i1, j1, i0[2]) * f[0];
  const double c01 = at(i0[0], i0[1], k1) * (1 - f[0]) + at(i1, i0[1], k1) * f[0];
  const double c11 = at(i0[0], j1, k1) * (1 - f[0]) + at(i1, j1, k1) * f[0];
  const double c0 = c00 * (1 - f[1]) + c10 * f[1];
  const double c1 = c01 * (1 - f[1]) + c11 * f[1];
  return c0 * (1 - f[2]) + c1 * f[2];
}

/// Resamples onto an arbitrary target grid by trilinear interpolation.
template <class T, class Tag>
Image<T, Tag> resample_linear_onto(const Image<T, Tag>& img, const Geometry& target, double outside) {
  Image<T, Tag> out(target);
  std::size_t n = 0;
  for (int k = 0; k < target.dims[2]; ++k)
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i, ++n)
        out[n] = static_cast<T>(sample_linear(img, img.geometry().to_index(target.to_world(i, j, k)), outside));
  return out;
}

/// Nearest-neighbour resampling onto a target grid; `outside` beyond the grid.
template <class T, class Tag>
Image<T, Tag> resample_nearest_onto(const Image<T, Tag>& img, const Geometry& target, T outside) {
  Image<T, Tag> out(target);
  const Geometry& g = img.geometry();
  std::size_t n = 0;
  for (int k = 0; k < target.dims[2]; ++k)
    for (int j = 0; j < target.dims[1]; ++j)
      for (int i = 0; i < target.dims[0]; ++i, ++n) {
        const Vec3 u = g.to_index(target.to_world(i, j, k));
        const int a = static_cast<int>(std::lround(u[0])), b = static_cast<int>(std::lround(u[1])),
                  c = static_cast<int>(std::lround(u[2]));
        out[n] = g.contains(a, b, c) ? img.at(a, b, c) : outside;
      }
  return out;
}

/// Keeps `v` where the mask is set, `fill` elsewhere.
inline Volume mask_volume(const Volume& v, const Mask& m, float fill = -2000.0f) {
  require_same_geometry(v.geometry(), m.geometry(), "mask_volume");
  Volume out(v.geometry());
  for (std::size_t n = 0; n < v.size(); ++n) out[n] = m[n] ? v[n] : fill;
  return out;
}

}  // namespace covseg
