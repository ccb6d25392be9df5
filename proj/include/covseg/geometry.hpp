#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <string>

#include "covseg/error.hpp"

namespace covseg {

using Vec3 = std::array<double, 3>;
using Index3 = std::array<int, 3>;

inline Vec3 operator+(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
inline Vec3 operator-(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
inline Vec3 operator-(const Vec3& a) { return {-a[0], -a[1], -a[2]}; }
inline Vec3 operator*(double s, const Vec3& a) { return {s * a[0], s * a[1], s * a[2]}; }
inline Vec3 operator*(const Vec3& a, double s) { return s * a; }
inline double dot(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
inline double norm(const Vec3& a) { return std::sqrt(dot(a, a)); }
inline double squared_distance(const Vec3& a, const Vec3& b) {
  const Vec3 d = a - b;
  return dot(d, d);
}

/// Row-major 3x3 matrix.
struct Mat3 {
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  static Mat3 identity() { return {}; }
  static Mat3 diagonal(const Vec3& d) { return {{d[0], 0, 0, 0, d[1], 0, 0, 0, d[2]}}; }

  double& operator()(int r, int c) { return m[static_cast<std::size_t>(3 * r + c)]; }
  double operator()(int r, int c) const { return m[static_cast<std::size_t>(3 * r + c)]; }

  Vec3 column(int c) const { return {(*this)(0, c), (*this)(1, c), (*this)(2, c)}; }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double s = 0;
        for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
        r(i, j) = s;
      }
    return r;
  }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  double determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  Mat3 inverse() const {
    const double det = determinant();
    if (std::abs(det) < 1e-12) throw GeometryError("singular 3x3 matrix");
    Mat3 r;
    r(0, 0) = (m[4] * m[8] - m[5] * m[7]) / det;
    r(0, 1) = (m[2] * m[7] - m[1] * m[8]) / det;
    r(0, 2) = (m[1] * m[5] - m[2] * m[4]) / det;
    r(1, 0) = (m[5] * m[6] - m[3] * m[8]) / det;
    r(1, 1) = (m[0] * m[8] - m[2] * m[6]) / det;
    r(1, 2) = (m[2] * m[3] - m[0] * m[5]) / det;
    r(2, 0) = (m[3] * m[7] - m[4] * m[6]) / det;
    r(2, 1) = (m[1] * m[6] - m[0] * m[7]) / det;
    r(2, 2) = (m[0] * m[4] - m[1] * m[3]) / det;
    return r;
  }

  friend bool operator==(const Mat3&, const Mat3&) = default;
};

/// Grid geometry shared by volumes, masks and distance maps.
///
/// World coordinates are millimetres in the LPS frame, so an identity
/// direction matrix means the RAI voxel order: x runs right to left,
/// y anterior to posterior and z inferior to superior.
struct Geometry {
  Index3 dims{1, 1, 1};
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
  Mat3 direction = Mat3::identity();

  std::size_t voxel_count() const {
    return static_cast<std::size_t>(dims[0]) * static_cast<std::size_t>(dims[1]) *
           static_cast<std::size_t>(dims[2]);
  }

  std::size_t linear(int i, int j, int k) const {
    return static_cast<std::size_t>(i) +
           static_cast<std::size_t>(dims[0]) *
               (static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * static_cast<std::size_t>(k));
  }

  Index3 unravel(std::size_t n) const {
    const auto nx = static_cast<std::size_t>(dims[0]);
    const auto ny = static_cast<std::size_t>(dims[1]);
    return {static_cast<int>(n % nx), static_cast<int>((n / nx) % ny), static_cast<int>(n / (nx * ny))};
  }

  bool contains(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }

  /// Continuous voxel index to world position.
  Vec3 to_world(const Vec3& idx) const {
    const Vec3 scaled{idx[0] * spacing[0], idx[1] * spacing[1], idx[2] * spacing[2]};
    return origin + direction * scaled;
  }
  Vec3 to_world(int i, int j, int k) const { return to_world(Vec3{double(i), double(j), double(k)}); }

  /// World position to continuous voxel index. The direction matrix is
  /// orthonormal, so its transpose is its inverse.
  Vec3 to_index(const Vec3& p) const {
    const Vec3 local = direction.transposed() * (p - origin);
    return {local[0] / spacing[0], local[1] / spacing[1], local[2] / spacing[2]};
  }

  double min_spacing() const { return std::min({spacing[0], spacing[1], spacing[2]}); }
  double voxel_volume_mm3() const { return spacing[0] * spacing[1] * spacing[2]; }

  void validate() const {
    for (int a = 0; a < 3; ++a) {
      if (dims[a] < 1) throw GeometryError("grid dimension must be >= 1");
      if (!(spacing[a] > 0) || !std::isfinite(spacing[a])) throw GeometryError("grid spacing must be > 0");
    }
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b) {
        const double d = dot(direction.column(a), direction.column(b));
        if (std::abs(d - (a == b ? 1.0 : 0.0)) > 1e-6) throw GeometryError("direction matrix is not orthonormal");
      }
  }

  bool matches(const Geometry& o, double tol = 1e-6) const {
    if (dims != o.dims) return false;
    for (int a = 0; a < 3; ++a) {
      if (std::abs(spacing[a] - o.spacing[a]) > tol) return false;
      if (std::abs(origin[a] - o.origin[a]) > tol) return false;
    }
    for (std::size_t n = 0; n < 9; ++n)
      if (std::abs(direction.m[n] - o.direction.m[n]) > tol) return false;
    return true;
  }
};

inline void require_same_geometry(const Geometry& a, const Geometry& b, const char* what) {
  if (!a.matches(b)) throw GeometryError(std::string(what) + ": grid geometry mismatch");
}

/// Axis-aligned box of voxel indices, inclusive on both ends.
struct IndexBox {
  Index3 lo{0, 0, 0};
  Index3 hi{-1, -1, -1};

  bool empty() const { return hi[0] < lo[0] || hi[1] < lo[1] || hi[2] < lo[2]; }
  bool contains(int i, int j, int k) const {
    return i >= lo[0] && i <= hi[0] && j >= lo[1] && j <= hi[1] && k >= lo[2] && k <= hi[2];
  }
  void expand(int i, int j, int k) {
    if (empty()) {
      lo = {i, j, k};
      hi = {i, j, k};
      return;
    }
    lo = {std::min(lo[0], i), std::min(lo[1], j), std::min(lo[2], k)};
    hi = {std::max(hi[0], i), std::max(hi[1], j), std::max(hi[2], k)};
  }
  Index3 size() const { return {hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1}; }
};

}  // namespace covseg
