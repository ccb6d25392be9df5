#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "covseg/image.hpp"

namespace covseg {

/// Closed triangle surface in world millimetres.
struct Mesh {
  std::vector<Vec3> vertices;
  std::vector<std::array<std::uint32_t, 3>> triangles;

  bool empty() const { return triangles.empty(); }
  friend bool operator==(const Mesh&, const Mesh&) = default;
};

/// Throws TopologyError unless every edge is shared by exactly two
/// triangles that traverse it in opposite directions.
inline void require_closed(const Mesh& mesh) {
  if (mesh.triangles.empty()) throw TopologyError("mesh has no triangles");
  const auto nv = mesh.vertices.size();
  std::unordered_map<std::uint64_t, int> directed;
  directed.reserve(mesh.triangles.size() * 3);
  for (const auto& t : mesh.triangles) {
    for (int e = 0; e < 3; ++e) {
      const std::uint64_t a = t[static_cast<std::size_t>(e)], b = t[static_cast<std::size_t>((e + 1) % 3)];
      if (a >= nv || b >= nv) throw TopologyError("triangle references a missing vertex");
      if (a == b) throw TopologyError("degenerate triangle index");
      if (++directed[(a << 32) | b] > 1) throw TopologyError("edge used twice in the same direction");
    }
  }
  for (const auto& [key, count] : directed) {
    const std::uint64_t a = key >> 32, b = key & 0xffffffffu;
    if (!directed.contains((b << 32) | a)) throw TopologyError("open mesh: boundary edge found");
  }
}

inline bool is_closed(const Mesh& mesh) {
  try {
    require_closed(mesh);
    return true;
  } catch (const TopologyError&) {
    return false;
  }
}

namespace detail {

// Kuhn decomposition of the unit cube into six tetrahedra sharing the
// 000-111 diagonal. Corner bit layout: bit0 = x, bit1 = y, bit2 = z.
inline constexpr int kTets[6][4] = {
    {0, 1, 3, 7}, {0, 1, 5, 7}, {0, 2, 3, 7}, {0, 2, 6, 7}, {0, 4, 5, 7}, {0, 4, 6, 7},
};

}  // namespace detail

/// Triangulates the zero level of a distance map (inside = value > 0).
///
/// Cells are split into tetrahedra so every sign configuration has a
/// unique triangulation; the grid is padded with outside values so the
/// surface is always closed. Triangles wind counter-clockwise seen from
/// outside.
inline Mesh extract_mesh(const DistanceMap& d) {
  bool any_in = false, any_out = false;
  for (double v : d.voxels()) {
    if (v > 0) any_in = true;
    else any_out = true;
  }
  if (!any_in || !any_out) throw EmptySurfaceError("distance map has a uniform sign");

  const Geometry& g = d.geometry();
  const Index3 dims = g.dims;
  const Index3 pd{dims[0] + 2, dims[1] + 2, dims[2] + 2};
  auto padded_id = [&](int i, int j, int k) -> std::uint64_t {
    return static_cast<std::uint64_t>(i + 1) +
           static_cast<std::uint64_t>(pd[0]) * (static_cast<std::uint64_t>(j + 1) + static_cast<std::uint64_t>(pd[1]) * static_cast<std::uint64_t>(k + 1));
  };
  auto value = [&](int i, int j, int k, bool& pad) -> double {
    pad = !g.contains(i, j, k);
    return pad ? -1.0 : d.at(i, j, k);
  };

  Mesh mesh;
  std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
  const std::uint64_t span = static_cast<std::uint64_t>(pd[0]) * pd[1] * pd[2];

  struct Corner {
    Vec3 idx;
    double v;
    bool pad;
    std::uint64_t id;
  };

  auto vertex_on_edge = [&](const Corner& in, const Corner& out) -> std::uint32_t {
    const std::uint64_t a = std::min(in.id, out.id), b = std::max(in.id, out.id);
    const std::uint64_t key = a * span + b;
    auto it = edge_vertex.find(key);
    if (it != edge_vertex.end()) return it->second;
    double t = (in.pad || out.pad) ? 0.5 : in.v / (in.v - out.v);
    const Vec3 p = in.idx + t * (out.idx - in.idx);
    const auto id = static_cast<std::uint32_t>(mesh.vertices.size());
    mesh.vertices.push_back(g.to_world(p));
    edge_vertex.emplace(key, id);
    return id;
  };

  auto emit = [&](std::uint32_t a, std::uint32_t b, std::uint32_t c, const Vec3& in_c, const Vec3& out_c) {
    const Vec3& pa = mesh.vertices[a];
    const Vec3 n = cross(mesh.vertices[b] - pa, mesh.vertices[c] - pa);
    if (dot(n, out_c - in_c) < 0) std::swap(b, c);
    mesh.triangles.push_back({a, b, c});
  };

  Corner corner[8];
  for (int k = -1; k < dims[2]; ++k)
    for (int j = -1; j < dims[1]; ++j)
      for (int i = -1; i < dims[0]; ++i) {
        int inside_count = 0;
        for (int c = 0; c < 8; ++c) {
          const int ci = i + (c & 1), cj = j + ((c >> 1) & 1), ck = k + ((c >> 2) & 1);
          Corner& cr = corner[c];
          cr.v = value(ci, cj, ck, cr.pad);
          cr.idx = {double(ci), double(cj), double(ck)};
          cr.id = padded_id(ci, cj, ck);
          inside_count += cr.v > 0;
        }
        if (inside_count == 0 || inside_count == 8) continue;

        for (const auto& tet : detail::kTets) {
          int ins[4], outs[4], ni = 0, no = 0;
          for (int q = 0; q < 4; ++q) {
            if (corner[tet[q]].v > 0) ins[ni++] = tet[q];
            else outs[no++] = tet[q];
          }
          if (ni == 0 || no == 0) continue;
          // world-space centroids for orientation
          Vec3 in_c{0, 0, 0}, out_c{0, 0, 0};
          for (int q = 0; q < ni; ++q) in_c = in_c + g.to_world(corner[ins[q]].idx);
          for (int q = 0; q < no; ++q) out_c = out_c + g.to_world(corner[outs[q]].idx);
          in_c = (1.0 / ni) * in_c;
          out_c = (1.0 / no) * out_c;
          if (ni == 1) {
            const Corner& a = corner[ins[0]];
            emit(vertex_on_edge(a, corner[outs[0]]), vertex_on_edge(a, corner[outs[1]]),
                 vertex_on_edge(a, corner[outs[2]]), in_c, out_c);
          } else if (no == 1) {
            const Corner& o = corner[outs[0]];
            emit(vertex_on_edge(corner[ins[0]], o), vertex_on_edge(corner[ins[1]], o),
                 vertex_on_edge(corner[ins[2]], o), in_c, out_c);
          } else {
            const Corner &i0 = corner[ins[0]], &i1 = corner[ins[1]], &o0 = corner[outs[0]], &o1 = corner[outs[1]];
            const std::uint32_t a = vertex_on_edge(i0, o0), b = vertex_on_edge(i0, o1), c = vertex_on_edge(i1, o1),
                                e = vertex_on_edge(i1, o0);
            emit(a, b, c, in_c, out_c);
            emit(a, c, e, in_c, out_c);
          }
        }
      }
  return mesh;
}

namespace detail {

// 2D orientation of (p - u) against edge u->v in the (y, z) plane,
// evaluated with a canonical endpoint order so that the value for the
// reversed edge is the exact negation.
inline double edge_function(const Vec3& u, const Vec3& v, double py, double pz) {
  const bool canonical = u[1] < v[1] || (u[1] == v[1] && u[2] <= v[2]);
  const Vec3& a = canonical ? u : v;
  const Vec3& b = canonical ? v : u;
  const double f = (b[1] - a[1]) * (pz - a[2]) - (b[2] - a[2]) * (py - a[1]);
  return canonical ? f : -f;
}

// Tie rule for points exactly on an edge: decided by the edge direction,
// so each shared edge is owned by exactly one of its two triangles.
inline bool owns_edge(const Vec3& u, const Vec3& v) {
  const double ez = v[2] - u[2], ey = v[1] - u[1];
  return ez > 0 || (ez == 0 && ey < 0);
}

}  // namespace detail

/// Voxelises a closed mesh: a voxel is set when its centre has positive
/// winding number; centres lying exactly on the surface count as inside.
inline Mask mesh_to_mask(const Mesh& mesh, const Geometry& geometry) {
  require_closed(mesh);
  geometry.validate();
  const Index3 dims = geometry.dims;
  const int orientation = geometry.direction.determinant() < 0 ? -1 : 1;

  std::vector<Vec3> p(mesh.vertices.size());
  for (std::size_t n = 0; n < p.size(); ++n) p[n] = geometry.to_index(mesh.vertices[n]);

  // crossings per (j, k) row: x position in index space and winding sign
  std::vector<std::vector<std::pair<double, int>>> rows(static_cast<std::size_t>(dims[1]) * dims[2]);
  for (const auto& t : mesh.triangles) {
    Vec3 a = p[t[0]], b = p[t[1]], c = p[t[2]];
    const double area = detail::edge_function(a, b, c[1], c[2]);
    if (area == 0) continue;
    const int sign = (area > 0 ? 1 : -1) * orientation;
    if (area < 0) std::swap(b, c);
    const int j0 = std::max(0, static_cast<int>(std::ceil(std::min({a[1], b[1], c[1]}))));
    const int j1 = std::min(dims[1] - 1, static_cast<int>(std::floor(std::max({a[1], b[1], c[1]}))));
    const int k0 = std::max(0, static_cast<int>(std::ceil(std::min({a[2], b[2], c[2]}))));
    const int k1 = std::min(dims[2] - 1, static_cast<int>(std::floor(std::max({a[2], b[2], c[2]}))));
    for (int k = k0; k <= k1; ++k)
      for (int j = j0; j <= j1; ++j) {
        const double w0 = detail::edge_function(b, c, j, k);
        const double w1 = detail::edge_function(c, a, j, k);
        const double w2 = detail::edge_function(a, b, j, k);
        const bool in0 = w0 > 0 || (w0 == 0 && detail::owns_edge(b, c));
        const bool in1 = w1 > 0 || (w1 == 0 && detail::owns_edge(c, a));
        const bool in2 = w2 > 0 || (w2 == 0 && detail::owns_edge(a, b));
        if (!(in0 && in1 && in2)) continue;
        const double sum = w0 + w1 + w2;
        const double x = (w0 * a[0] + w1 * b[0] + w2 * c[0]) / sum;
        rows[static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k].emplace_back(x, sign);
      }
  }

  Mask out(geometry);
  for (int k = 0; k < dims[2]; ++k)
    for (int j = 0; j < dims[1]; ++j) {
      auto& row = rows[static_cast<std::size_t>(j) + static_cast<std::size_t>(dims[1]) * k];
      if (row.empty()) continue;
      std::sort(row.begin(), row.end());
      // sweep from +x: `strict` sums crossings with x > i, `incl` with x >= i
      std::size_t pos = row.size();
      int strict = 0;
      for (int i = dims[0] - 1; i >= 0; --i) {
        while (pos > 0 && row[pos - 1].first > i) strict += row[--pos].second;
        int incl = strict;
        for (std::size_t q = pos; q > 0 && row[q - 1].first == i; --q) incl += row[q - 1].second;
        if (std::max(strict, incl) > 0) out.at(i, j, k) = 1;
      }
    }
  return out;
}

/// Axis-aligned bounds of the mesh vertices.
inline std::pair<Vec3, Vec3> mesh_bounds(const Mesh& mesh) {
  Vec3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
  for (const auto& v : mesh.vertices)
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
  return {lo, hi};
}

inline std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

/// ASCII OBJ, vertices in mm, 1-based indices. Coordinates are written
/// in shortest round-trip form so reading back is lossless.
inline std::string to_obj(const Mesh& mesh) {
  std::string s;
  s.reserve(mesh.vertices.size() * 48 + mesh.triangles.size() * 24);
  for (const auto& v : mesh.vertices) {
    s += "v ";
    s += format_double(v[0]);
    s += ' ';
    s += format_double(v[1]);
    s += ' ';
    s += format_double(v[2]);
    s += '\n';
  }
  for (const auto& t : mesh.triangles) {
    s += "f " + std::to_string(t[0] + 1) + ' ' + std::to_string(t[1] + 1) + ' ' + std::to_string(t[2] + 1) + '\n';
  }
  return s;
}

inline Mesh parse_obj(const std::string& text) {
  Mesh mesh;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "v") {
      Vec3 v;
      if (!(ls >> v[0] >> v[1] >> v[2])) throw ParseError("OBJ line " + std::to_string(lineno) + ": bad vertex");
      mesh.vertices.push_back(v);
    } else if (tag == "f") {
      std::vector<long> idx;
      std::string tok;
      while (ls >> tok) {
        const long raw = std::stol(tok.substr(0, tok.find('/')));
        const long n = raw < 0 ? static_cast<long>(mesh.vertices.size()) + raw : raw - 1;
        if (n < 0) throw ParseError("OBJ line " + std::to_string(lineno) + ": bad face index");
        idx.push_back(n);
      }
      if (idx.size() < 3) throw ParseError("OBJ line " + std::to_string(lineno) + ": face needs 3 vertices");
      for (std::size_t q = 1; q + 1 < idx.size(); ++q)
        mesh.triangles.push_back({static_cast<std::uint32_t>(idx[0]), static_cast<std::uint32_t>(idx[q]),
                                  static_cast<std::uint32_t>(idx[q + 1])});
    }
  }
  return mesh;
}

inline void write_obj(const std::filesystem::path& path, const Mesh& mesh) {
  std::ofstream f(path);
  if (!f) throw Error("cannot write " + path.string());
  f << to_obj(mesh);
}

inline Mesh read_obj(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ParseError("cannot open " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_obj(ss.str());
}

}  // namespace covseg
