#pragma once

// Shared fixtures and brute-force oracles for the test programs.

#include <chrono>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "covseg/covseg.hpp"

namespace covseg::testing {

/// Directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() / ("covseg-test-" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline Geometry cube(int n, double spacing = 1.0) {
  Geometry g;
  g.dims = {n, n, n};
  g.spacing = {spacing, spacing, spacing};
  return g;
}

inline Mask ball(const Geometry& g, const Vec3& c, double r) {
  return phantom::ellipsoid_mask(g, phantom::Ellipsoid{c, {r, r, r}});
}

/// Blobby random mask: a few random balls, plus salt noise.
inline Mask random_mask(std::mt19937_64& rng, const Geometry& g, int balls, double noise) {
  std::uniform_real_distribution<double> u(0, 1);
  Mask m(g);
  for (int b = 0; b < balls; ++b) {
    const Vec3 c{u(rng) * g.dims[0], u(rng) * g.dims[1], u(rng) * g.dims[2]};
    const double r = 1 + u(rng) * 0.4 * g.dims[0];
    const Mask s = ball(g, g.to_world(c), r * g.spacing[0]);
    for (std::size_t n = 0; n < m.size(); ++n) m[n] |= s[n];
  }
  for (std::size_t n = 0; n < m.size(); ++n)
    if (u(rng) < noise) m[n] ^= 1;
  return m;
}

// ---- oracles -------------------------------------------------------------------

/// Signed distance by exhaustive search over voxel centres: distance to the
/// nearest centre of the other label minus half the finest spacing.
inline double brute_signed_distance(const Mask& m, int i, int j, int k, double cap) {
  const Geometry& g = m.geometry();
  const bool in = m.at(i, j, k) != 0;
  double best = std::numeric_limits<double>::infinity();
  for (int z = 0; z < g.dims[2]; ++z)
    for (int y = 0; y < g.dims[1]; ++y)
      for (int x = 0; x < g.dims[0]; ++x) {
        if ((m.at(x, y, z) != 0) == in) continue;
        const double dx = (x - i) * g.spacing[0], dy = (y - j) * g.spacing[1], dz = (z - k) * g.spacing[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
  const double half = 0.5 * std::min({g.spacing[0], g.spacing[1], g.spacing[2]});
  const double d = std::isinf(best) ? cap : std::min(cap, std::sqrt(best) - half);
  return in ? d : -d;
}

inline std::vector<Index3> brute_boundary(const Mask& m) {
  const Geometry& g = m.geometry();
  std::vector<Index3> out;
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        if (!m.at(i, j, k)) continue;
        const int nb[6][3] = {{i + 1, j, k}, {i - 1, j, k}, {i, j + 1, k}, {i, j - 1, k}, {i, j, k + 1}, {i, j, k - 1}};
        bool edge = false;
        for (const auto& p : nb) edge = edge || !g.contains(p[0], p[1], p[2]) || !m.at(p[0], p[1], p[2]);
        if (edge) out.push_back({i, j, k});
      }
  return out;
}

/// Pooled directed boundary distances, sorted; 95th percentile by nearest rank.
inline double brute_hd95(const Mask& a, const Mask& b) {
  const Geometry& g = a.geometry();
  const auto ba = brute_boundary(a), bb = brute_boundary(b);
  auto directed = [&](const std::vector<Index3>& from, const std::vector<Index3>& to, std::vector<double>& out) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        const double dx = (p[0] - q[0]) * g.spacing[0], dy = (p[1] - q[1]) * g.spacing[1], dz = (p[2] - q[2]) * g.spacing[2];
        best = std::min(best, dx * dx + dy * dy + dz * dz);
      }
      out.push_back(std::sqrt(best));
    }
  };
  std::vector<double> d;
  directed(ba, bb, d);
  directed(bb, ba, d);
  std::sort(d.begin(), d.end());
  const std::size_t rank = static_cast<std::size_t>(std::ceil(0.95 * static_cast<double>(d.size())));
  return d[std::max<std::size_t>(rank, 1) - 1];
}

inline double brute_dice(const Mask& a, const Mask& b) {
  double ia = 0, ib = 0, both = 0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    ia += a[n] != 0;
    ib += b[n] != 0;
    both += a[n] && b[n];
  }
  return ia + ib == 0 ? 1.0 : 2 * both / (ia + ib);
}

inline double brute_jaccard(const Mask& a, const Mask& b) {
  double uni = 0, both = 0;
  for (std::size_t n = 0; n < a.size(); ++n) {
    uni += a[n] || b[n];
    both += a[n] && b[n];
  }
  return uni == 0 ? 1.0 : both / uni;
}

inline double brute_gci(const std::vector<Mask>& ms) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < ms.size(); ++i)
    for (std::size_t j = i + 1; j < ms.size(); ++j)
      for (std::size_t n = 0; n < ms[i].size(); ++n) {
        num += ms[i][n] && ms[j][n];
        den += ms[i][n] || ms[j][n];
      }
  return num / den;
}

inline Mask brute_majority(const std::vector<Mask>& ms) {
  Mask out(ms.front().geometry());
  for (std::size_t n = 0; n < out.size(); ++n) {
    std::size_t votes = 0;
    for (const auto& m : ms) votes += m[n] ? 1 : 0;
    out[n] = 2 * votes > ms.size() ? 1 : 0;
  }
  return out;
}

/// ICC(A,1) from sums of squares written out term by term.
inline double hand_icc_a1(const std::vector<std::vector<double>>& x) {
  const double n = static_cast<double>(x.size()), k = static_cast<double>(x[0].size());
  double total = 0;
  for (const auto& r : x)
    for (double v : r) total += v;
  const double grand = total / (n * k);
  double sst = 0, ssr = 0, ssc = 0;
  for (const auto& r : x) {
    double rs = 0;
    for (double v : r) {
      rs += v;
      sst += (v - grand) * (v - grand);
    }
    ssr += k * (rs / k - grand) * (rs / k - grand);
  }
  for (std::size_t j = 0; j < x[0].size(); ++j) {
    double cs = 0;
    for (const auto& r : x) cs += r[j];
    ssc += n * (cs / n - grand) * (cs / n - grand);
  }
  const double sse = sst - ssr - ssc;
  const double msr = ssr / (n - 1), msc = ssc / (k - 1), mse = sse / ((n - 1) * (k - 1));
  return (msr - mse) / (msr + (k - 1) * mse + k / n * (msc - mse));
}

/// Dense Gaussian elimination with partial pivoting; the matrix is square.
inline std::vector<double> gauss_solve(std::vector<std::vector<double>> a, std::vector<double> b) {
  const std::size_t n = b.size();
  for (std::size_t c = 0; c < n; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < n; ++r)
      if (std::abs(a[r][c]) > std::abs(a[p][c])) p = r;
    std::swap(a[c], a[p]);
    std::swap(b[c], b[p]);
    for (std::size_t r = c + 1; r < n; ++r) {
      const double f = a[r][c] / a[c][c];
      for (std::size_t q = c; q < n; ++q) a[r][q] -= f * a[c][q];
      b[r] -= f * b[c];
    }
  }
  std::vector<double> x(n);
  for (std::size_t c = n; c-- > 0;) {
    double s = b[c];
    for (std::size_t q = c + 1; q < n; ++q) s -= a[c][q] * x[q];
    x[c] = s / a[c][c];
  }
  return x;
}

// ---- phantom scenes ------------------------------------------------------------

/// Nominal chest with shape models trained on jittered copies of its lungs.
struct LungScene {
  phantom::ChestSpec spec;
  ShapeModel left;
  ShapeModel right;
};

inline LungScene make_lung_scene(int training = 10) {
  LungScene s;
  const Geometry g = phantom::chest_geometry(s.spec);
  s.left = build_shape_model(phantom::lung_family_maps(g, s.spec.left_lung, training, 11), Side::left);
  s.right = build_shape_model(phantom::lung_family_maps(g, s.spec.right_lung, training, 12), Side::right);
  return s;
}

/// Saves the scene's models under `dir` and returns a configuration using them.
inline PipelineConfig write_scene_models(const LungScene& s, const std::filesystem::path& dir) {
  save_shape_model(dir / "left", s.left);
  save_shape_model(dir / "right", s.right);
  PipelineConfig c;
  c.left_model = (dir / "left").string();
  c.right_model = (dir / "right").string();
  return c;
}

/// Ground glass in the left lung, a wall-touching consolidation in the right.
inline phantom::ChestSpec lesion_spec() {
  phantom::ChestSpec spec;
  spec.lesions.push_back({phantom::Ellipsoid{{91.5, 63.5, 63.5}, {10, 10, 10}}, -400});
  spec.lesions.push_back({phantom::Ellipsoid{{35.5, 41.5, 63.5}, {14, 14, 14}}, -100});
  return spec;
}

}  // namespace covseg::testing
