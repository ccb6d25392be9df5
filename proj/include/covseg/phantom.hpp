#pragma once

// Synthetic chest CT phantoms with analytic ground truth.

#include <cstdint>
#include <optional>
#include <vector>

#include "covseg/distance.hpp"
#include "covseg/image.hpp"

namespace covseg::phantom {

struct Ellipsoid {
  Vec3 center{0, 0, 0};
  Vec3 radii{1, 1, 1};

  bool contains(const Vec3& p) const {
    double s = 0;
    for (int a = 0; a < 3; ++a) {
      const double t = (p[a] - center[a]) / radii[a];
      s += t * t;
    }
    return s <= 1.0;
  }
};

struct ChestSpec {
  Index3 dims{128, 128, 128};
  Vec3 spacing{1, 1, 1};
  double air_hu = -1000;
  double body_hu = 40;
  double lung_hu = -800;
  /// Elliptic cylinder along z: centre (x, y) and radii (x, y).
  std::array<double, 2> body_center{63.5, 63.5};
  std::array<double, 2> body_radii{60, 46};
  /// Patient right lung sits at lower x (RAI order).
  Ellipsoid right_lung{{35.5, 63.5, 63.5}, {24, 36, 46}};
  Ellipsoid left_lung{{91.5, 63.5, 63.5}, {24, 36, 46}};
  /// Lesions: (shape, HU); clipped to the lungs.
  std::vector<std::pair<Ellipsoid, double>> lesions;
};

struct Chest {
  Volume ct;
  Mask left;
  Mask right;
  std::vector<Mask> lesions;  // same order as ChestSpec::lesions
};

inline Geometry chest_geometry(const ChestSpec& s) {
  Geometry g;
  g.dims = s.dims;
  g.spacing = s.spacing;
  return g;
}

inline Chest make_chest(const ChestSpec& s) {
  const Geometry g = chest_geometry(s);
  Chest c{Volume(g, static_cast<float>(s.air_hu)), Mask(g), Mask(g), {}};
  for (std::size_t l = 0; l < s.lesions.size(); ++l) c.lesions.emplace_back(g);
  std::size_t n = 0;
  for (int k = 0; k < s.dims[2]; ++k)
    for (int j = 0; j < s.dims[1]; ++j)
      for (int i = 0; i < s.dims[0]; ++i, ++n) {
        const Vec3 p = g.to_world(i, j, k);
        const double bx = (p[0] - s.body_center[0]) / s.body_radii[0];
        const double by = (p[1] - s.body_center[1]) / s.body_radii[1];
        if (bx * bx + by * by <= 1.0) c.ct[n] = static_cast<float>(s.body_hu);
        const bool in_left = s.left_lung.contains(p), in_right = s.right_lung.contains(p);
        if (in_left) c.left[n] = 1;
        if (in_right) c.right[n] = 1;
        if (in_left || in_right) c.ct[n] = static_cast<float>(s.lung_hu);
        if (!(in_left || in_right)) continue;
        for (std::size_t l = 0; l < s.lesions.size(); ++l)
          if (s.lesions[l].first.contains(p)) {
            c.ct[n] = static_cast<float>(s.lesions[l].second);
            c.lesions[l][n] = 1;
          }
      }
  return c;
}

inline Mask ellipsoid_mask(const Geometry& g, const Ellipsoid& e) {
  Mask m(g);
  std::size_t n = 0;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i, ++n) m[n] = e.contains(g.to_world(i, j, k)) ? 1 : 0;
  return m;
}

/// Deterministic uniform doubles in [0, 1), identical on every platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed * 0x9E3779B97F4A7C15ull + 1) {}
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::uint64_t next() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t state_;
};

/// Lung shapes for shape-model training: the nominal lung with radii
/// jittered by up to +-`radius_jitter` and centre by +-`shift_mm`.
inline std::vector<Ellipsoid> lung_family(const Ellipsoid& nominal, int count, std::uint64_t seed,
                                          double radius_jitter = 0.12, double shift_mm = 4.0) {
  Rng rng(seed);
  std::vector<Ellipsoid> out;
  for (int s = 0; s < count; ++s) {
    Ellipsoid e = nominal;
    for (int a = 0; a < 3; ++a) {
      e.radii[a] *= 1.0 + rng.uniform(-radius_jitter, radius_jitter);
      e.center[a] += rng.uniform(-shift_mm, shift_mm);
    }
    out.push_back(e);
  }
  return out;
}

inline std::vector<DistanceMap> lung_family_maps(const Geometry& g, const Ellipsoid& nominal, int count,
                                                 std::uint64_t seed, double cap = kDefaultDistanceCap) {
  std::vector<DistanceMap> maps;
  for (const auto& e : lung_family(nominal, count, seed)) maps.push_back(signed_distance(ellipsoid_mask(g, e), cap));
  return maps;
}

}  // namespace covseg::phantom
