#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "covseg/geometry.hpp"

namespace covseg {

/// Scalar voxel grid with physical geometry. The tag keeps intensity
/// volumes, binary masks and distance maps apart at compile time.
template <class T, class Tag>
class Image {
 public:
  using value_type = T;

  Image() = default;
  explicit Image(Geometry g, T fill = T{}) : geometry_(std::move(g)) {
    geometry_.validate();
    voxels_.assign(geometry_.voxel_count(), fill);
  }
  Image(Geometry g, std::vector<T> voxels) : geometry_(std::move(g)), voxels_(std::move(voxels)) {
    geometry_.validate();
    if (voxels_.size() != geometry_.voxel_count()) throw GeometryError("voxel buffer does not match dims");
  }

  const Geometry& geometry() const noexcept { return geometry_; }
  const Index3& dims() const noexcept { return geometry_.dims; }
  std::size_t size() const noexcept { return voxels_.size(); }
  bool empty() const noexcept { return voxels_.empty(); }

  T& operator[](std::size_t n) { return voxels_[n]; }
  const T& operator[](std::size_t n) const { return voxels_[n]; }
  T& at(int i, int j, int k) { return voxels_[geometry_.linear(i, j, k)]; }
  const T& at(int i, int j, int k) const { return voxels_[geometry_.linear(i, j, k)]; }

  /// Value at (i,j,k) with indices clamped to the grid.
  const T& clamped(int i, int j, int k) const {
    const auto& d = geometry_.dims;
    i = std::clamp(i, 0, d[0] - 1);
    j = std::clamp(j, 0, d[1] - 1);
    k = std::clamp(k, 0, d[2] - 1);
    return voxels_[geometry_.linear(i, j, k)];
  }

  std::span<T> voxels() noexcept { return voxels_; }
  std::span<const T> voxels() const noexcept { return voxels_; }
  std::vector<T>& buffer() noexcept { return voxels_; }
  const std::vector<T>& buffer() const noexcept { return voxels_; }

  friend bool operator==(const Image& a, const Image& b) {
    return a.geometry_.dims == b.geometry_.dims && a.geometry_.spacing == b.geometry_.spacing &&
           a.geometry_.origin == b.geometry_.origin && a.geometry_.direction == b.geometry_.direction &&
           a.voxels_ == b.voxels_;
  }

 private:
  Geometry geometry_;
  std::vector<T> voxels_;
};

struct HuTag {};
struct MaskTag {};
struct DistanceTag {};

/// CT intensities in Hounsfield units.
using Volume = Image<float, HuTag>;
/// Binary label grid, every voxel 0 or 1.
using Mask = Image<std::uint8_t, MaskTag>;
/// Signed distance in mm, positive inside the region.
using DistanceMap = Image<double, DistanceTag>;

inline std::size_t count_nonzero(const Mask& m) {
  return static_cast<std::size_t>(std::count_if(m.voxels().begin(), m.voxels().end(), [](auto v) { return v != 0; }));
}

/// Voxels with a strictly positive distance value.
inline Mask positive_region(const DistanceMap& d) {
  Mask m(d.geometry());
  for (std::size_t n = 0; n < d.size(); ++n) m[n] = d[n] > 0 ? 1 : 0;
  return m;
}

inline Mask complement(const Mask& m) {
  Mask out(m.geometry());
  for (std::size_t n = 0; n < m.size(); ++n) out[n] = m[n] ? 0 : 1;
  return out;
}

inline Mask mask_union(const Mask& a, const Mask& b) {
  require_same_geometry(a.geometry(), b.geometry(), "mask_union");
  Mask out(a.geometry());
  for (std::size_t n = 0; n < a.size(); ++n) out[n] = (a[n] || b[n]) ? 1 : 0;
  return out;
}

/// Bounding box of the nonzero voxels; empty box when there are none.
template <class T, class Tag>
IndexBox bounding_box(const Image<T, Tag>& img) {
  IndexBox box;
  const auto& d = img.dims();
  std::size_t n = 0;
  for (int k = 0; k < d[2]; ++k)
    for (int j = 0; j < d[1]; ++j)
      for (int i = 0; i < d[0]; ++i, ++n)
        if (img[n] > T{}) box.expand(i, j, k);
  return box;
}

/// Geometry of the sub-grid covering `box`.
inline Geometry crop_geometry(const Geometry& g, const IndexBox& box) {
  Geometry out = g;
  out.dims = box.size();
  out.origin = g.to_world(box.lo[0], box.lo[1], box.lo[2]);
  return out;
}

inline IndexBox clip_box(const Geometry& g, IndexBox box) {
  for (int a = 0; a < 3; ++a) {
    box.lo[a] = std::max(box.lo[a], 0);
    box.hi[a] = std::min(box.hi[a], g.dims[a] - 1);
  }
  return box;
}

inline IndexBox dilate_box(const IndexBox& box, const Index3& by) {
  IndexBox out = box;
  for (int a = 0; a < 3; ++a) {
    out.lo[a] -= by[a];
    out.hi[a] += by[a];
  }
  return out;
}

template <class T, class Tag>
Image<T, Tag> crop(const Image<T, Tag>& img, const IndexBox& box) {
  Image<T, Tag> out(crop_geometry(img.geometry(), box));
  const auto sz = box.size();
  for (int k = 0; k < sz[2]; ++k)
    for (int j = 0; j < sz[1]; ++j)
      for (int i = 0; i < sz[0]; ++i) out.at(i, j, k) = img.at(i + box.lo[0], j + box.lo[1], k + box.lo[2]);
  return out;
}

/// Writes `part` (cropped at `box`) back into `dst`.
template <class T, class Tag>
void paste(Image<T, Tag>& dst, const Image<T, Tag>& part, const IndexBox& box) {
  const auto sz = box.size();
  for (int k = 0; k < sz[2]; ++k)
    for (int j = 0; j < sz[1]; ++j)
      for (int i = 0; i < sz[0]; ++i) dst.at(i + box.lo[0], j + box.lo[1], k + box.lo[2]) = part.at(i, j, k);
}

}  // namespace covseg
