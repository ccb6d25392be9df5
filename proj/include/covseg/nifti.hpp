#pragma once

// NIfTI-1 single-file (.nii / .nii.gz) reader and writer.
//
// NIfTI stores world coordinates in RAS; the toolkit works in LPS, so the
// first two rows of the header affine are negated on the way in and out.

#include <zlib.h>

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "covseg/image.hpp"

namespace covseg {

using Bytes = std::vector<std::uint8_t>;

namespace nifti {

enum DataType : std::int16_t {
  kUInt8 = 2,
  kInt16 = 4,
  kInt32 = 8,
  kFloat32 = 16,
  kFloat64 = 64,
  kInt8 = 256,
  kUInt16 = 512,
  kUInt32 = 768,
};

inline constexpr std::size_t kHeaderSize = 348;
inline constexpr std::size_t kDataOffset = 352;

inline bool is_gzip(std::span<const std::uint8_t> b) { return b.size() >= 2 && b[0] == 0x1f && b[1] == 0x8b; }

inline Bytes gunzip(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (inflateInit2(&zs, 15 + 32) != Z_OK) throw ParseError("zlib init failed");
  Bytes out;
  std::uint8_t chunk[1 << 16];
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk;
    zs.avail_out = sizeof(chunk);
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw ParseError("corrupt or truncated gzip stream");
    }
    out.insert(out.end(), chunk, chunk + (sizeof(chunk) - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw ParseError("truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

inline Bytes gzip(std::span<const std::uint8_t> in, int level = 6) {
  z_stream zs{};
  if (deflateInit2(&zs, level, Z_DEFLATED, 15 + 16, 8, Z_DEFAULT_STRATEGY) != Z_OK) throw Error("zlib init failed");
  Bytes out(deflateBound(&zs, static_cast<uLong>(in.size())) + 32);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  if (deflate(&zs, Z_FINISH) != Z_STREAM_END) {
    deflateEnd(&zs);
    throw Error("gzip compression failed");
  }
  out.resize(zs.total_out);
  deflateEnd(&zs);
  return out;
}

inline Bytes read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ParseError("cannot open " + path.string());
  return Bytes(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
}

inline void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

namespace detail {

template <class T>
T load(const std::uint8_t* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap) {
    auto* b = reinterpret_cast<std::uint8_t*>(&v);
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
  }
  return v;
}

template <class T>
void store(std::uint8_t* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

inline int bytes_per_voxel(std::int16_t dt) {
  switch (dt) {
    case kUInt8:
    case kInt8: return 1;
    case kInt16:
    case kUInt16: return 2;
    case kInt32:
    case kUInt32:
    case kFloat32: return 4;
    case kFloat64: return 8;
    default: return 0;
  }
}

inline double voxel_value(const std::uint8_t* p, std::int16_t dt, bool swap) {
  switch (dt) {
    case kUInt8: return *p;
    case kInt8: return static_cast<std::int8_t>(*p);
    case kInt16: return load<std::int16_t>(p, swap);
    case kUInt16: return load<std::uint16_t>(p, swap);
    case kInt32: return load<std::int32_t>(p, swap);
    case kUInt32: return load<std::uint32_t>(p, swap);
    case kFloat32: return load<float>(p, swap);
    case kFloat64: return load<double>(p, swap);
    default: return 0;
  }
}

// Quaternion (b, c, d) plus qfac to rotation; NIfTI-1 qform convention.
inline Mat3 quaternion_to_matrix(double b, double c, double d, double qfac) {
  double a = 1.0 - (b * b + c * c + d * d);
  if (a < 1e-7) {
    a = 1.0 / std::sqrt(b * b + c * c + d * d);
    b *= a;
    c *= a;
    d *= a;
    a = 0.0;
  } else {
    a = std::sqrt(a);
  }
  Mat3 r;
  r(0, 0) = a * a + b * b - c * c - d * d;
  r(0, 1) = 2 * b * c - 2 * a * d;
  r(0, 2) = 2 * b * d + 2 * a * c;
  r(1, 0) = 2 * b * c + 2 * a * d;
  r(1, 1) = a * a + c * c - b * b - d * d;
  r(1, 2) = 2 * c * d - 2 * a * b;
  r(2, 0) = 2 * b * d - 2 * a * c;
  r(2, 1) = 2 * c * d + 2 * a * b;
  r(2, 2) = a * a + d * d - c * c - b * b;
  if (qfac < 0)
    for (int i = 0; i < 3; ++i) r(i, 2) = -r(i, 2);
  return r;
}

// Inverse of quaternion_to_matrix for a proper rotation (det = +1).
inline std::array<double, 3> matrix_to_quaternion(const Mat3& r) {
  const double trace = r(0, 0) + r(1, 1) + r(2, 2);
  double a, b, c, d;
  if (trace > 0) {
    const double s = 0.5 / std::sqrt(trace + 1.0);
    a = 0.25 / s;
    b = (r(2, 1) - r(1, 2)) * s;
    c = (r(0, 2) - r(2, 0)) * s;
    d = (r(1, 0) - r(0, 1)) * s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
    a = (r(2, 1) - r(1, 2)) / s;
    b = 0.25 * s;
    c = (r(0, 1) + r(1, 0)) / s;
    d = (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
    a = (r(0, 2) - r(2, 0)) / s;
    b = (r(0, 1) + r(1, 0)) / s;
    c = 0.25 * s;
    d = (r(1, 2) + r(2, 1)) / s;
  } else {
    const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
    a = (r(1, 0) - r(0, 1)) / s;
    b = (r(0, 2) + r(2, 0)) / s;
    c = (r(1, 2) + r(2, 1)) / s;
    d = 0.25 * s;
  }
  if (a < 0) {
    b = -b;
    c = -c;
    d = -d;
  }
  return {b, c, d};
}

inline Mat3 orthonormalize(const Mat3& m) {
  Vec3 c0 = m.column(0), c1 = m.column(1), c2 = m.column(2);
  c0 = (1.0 / norm(c0)) * c0;
  c1 = c1 - dot(c1, c0) * c0;
  c1 = (1.0 / norm(c1)) * c1;
  c2 = c2 - dot(c2, c0) * c0 - dot(c2, c1) * c1;
  c2 = (1.0 / norm(c2)) * c2;
  Mat3 r;
  for (int i = 0; i < 3; ++i) {
    r(i, 0) = c0[i];
    r(i, 1) = c1[i];
    r(i, 2) = c2[i];
  }
  return r;
}

}  // namespace detail

/// Decoded file: geometry plus voxel values with scl_slope/scl_inter applied.
struct RawImage {
  Geometry geometry;
  std::int16_t datatype = kFloat32;
  std::vector<double> values;
};

inline RawImage decode(std::span<const std::uint8_t> input) {
  Bytes inflated;
  if (is_gzip(input)) {
    inflated = gunzip(input);
    input = inflated;
  }
  if (input.size() < kHeaderSize) throw ParseError("file shorter than a NIfTI-1 header");
  const std::uint8_t* h = input.data();
  const auto sizeof_hdr = detail::load<std::int32_t>(h, false);
  bool swap = false;
  if (sizeof_hdr != 348) {
    if (detail::load<std::int32_t>(h, true) != 348) throw ParseError("bad sizeof_hdr");
    swap = true;
  }
  if (std::memcmp(h + 344, "ni1", 4) == 0) throw UnsupportedFormatError("two-file NIfTI (.hdr/.img) is not supported");
  if (std::memcmp(h + 344, "n+1", 4) != 0) throw ParseError("missing n+1 magic");

  std::array<std::int16_t, 8> dim{};
  for (int i = 0; i < 8; ++i) dim[i] = detail::load<std::int16_t>(h + 40 + 2 * i, swap);
  if (dim[0] < 1 || dim[0] > 7) throw ParseError("invalid dim[0]");
  for (int i = 4; i <= dim[0]; ++i)
    if (dim[i] > 1) throw UnsupportedFormatError("only 3D images are supported");

  const auto datatype = detail::load<std::int16_t>(h + 70, swap);
  const int bpv = detail::bytes_per_voxel(datatype);
  if (bpv == 0) throw UnsupportedFormatError("unsupported NIfTI datatype " + std::to_string(datatype));

  std::array<float, 8> pixdim{};
  for (int i = 0; i < 8; ++i) pixdim[i] = detail::load<float>(h + 76 + 4 * i, swap);
  const float vox_offset = detail::load<float>(h + 108, swap);
  float slope = detail::load<float>(h + 112, swap);
  const float inter = detail::load<float>(h + 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;
  const auto qform_code = detail::load<std::int16_t>(h + 252, swap);
  const auto sform_code = detail::load<std::int16_t>(h + 254, swap);

  Geometry g;
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = a < dim[0] ? dim[a + 1] : 1;
    if (g.dims[a] < 1) throw ParseError("non-positive dimension");
  }

  // 3x4 affine in RAS.
  double aff[3][4] = {};
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 4; ++c) aff[r][c] = detail::load<float>(h + 280 + 16 * r + 4 * c, swap);
  } else if (qform_code > 0) {
    const double b = detail::load<float>(h + 256, swap);
    const double c = detail::load<float>(h + 260, swap);
    const double d = detail::load<float>(h + 264, swap);
    const Mat3 rot = detail::quaternion_to_matrix(b, c, d, pixdim[0] < 0 ? -1.0 : 1.0);
    for (int r = 0; r < 3; ++r) {
      for (int col = 0; col < 3; ++col) aff[r][col] = rot(r, col) * std::abs(pixdim[col + 1]);
      aff[r][3] = detail::load<float>(h + 268 + 4 * r, swap);
    }
  } else {
    for (int a = 0; a < 3; ++a) aff[a][a] = std::abs(pixdim[a + 1]);
  }
  // RAS -> LPS
  for (int c = 0; c < 4; ++c) {
    aff[0][c] = -aff[0][c];
    aff[1][c] = -aff[1][c];
  }
  Mat3 dir;
  for (int c = 0; c < 3; ++c) {
    const Vec3 col{aff[0][c], aff[1][c], aff[2][c]};
    const double len = norm(col);
    if (!(len > 0)) throw ParseError("zero voxel spacing in header");
    g.spacing[c] = len;
    for (int r = 0; r < 3; ++r) dir(r, c) = col[r] / len;
  }
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      const double d = dot(dir.column(a), dir.column(b));
      if (std::abs(d - (a == b ? 1.0 : 0.0)) > 1e-3) throw UnsupportedFormatError("sheared voxel grid");
    }
  g.direction = detail::orthonormalize(dir);
  g.origin = {aff[0][3], aff[1][3], aff[2][3]};

  const std::size_t offset = vox_offset >= static_cast<float>(kDataOffset) ? static_cast<std::size_t>(vox_offset) : kDataOffset;
  const std::size_t count = g.voxel_count();
  const std::size_t need = offset + count * static_cast<std::size_t>(bpv);
  if (input.size() < need) throw ParseError("truncated voxel data");

  RawImage out;
  out.geometry = g;
  out.datatype = datatype;
  out.values.resize(count);
  const std::uint8_t* p = input.data() + offset;
  for (std::size_t n = 0; n < count; ++n, p += bpv)
    out.values[n] = detail::voxel_value(p, datatype, swap) * slope + inter;
  return out;
}

/// Encodes voxels as a single-file NIfTI-1 byte stream (uncompressed).
template <class T>
Bytes encode(const Geometry& g, std::span<const T> voxels) {
  static_assert(std::is_same_v<T, std::uint8_t> || std::is_same_v<T, float> || std::is_same_v<T, double> ||
                std::is_same_v<T, std::int16_t>);
  std::int16_t dt = kFloat32;
  if constexpr (std::is_same_v<T, std::uint8_t>) dt = kUInt8;
  if constexpr (std::is_same_v<T, double>) dt = kFloat64;
  if constexpr (std::is_same_v<T, std::int16_t>) dt = kInt16;

  Bytes out(kDataOffset + voxels.size() * sizeof(T), 0);
  std::uint8_t* h = out.data();
  detail::store<std::int32_t>(h, 348);
  const std::int16_t dim[8] = {3, static_cast<std::int16_t>(g.dims[0]), static_cast<std::int16_t>(g.dims[1]),
                               static_cast<std::int16_t>(g.dims[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) detail::store<std::int16_t>(h + 40 + 2 * i, dim[i]);
  detail::store<std::int16_t>(h + 70, dt);
  detail::store<std::int16_t>(h + 72, static_cast<std::int16_t>(8 * sizeof(T)));

  // LPS -> RAS
  Mat3 ras = g.direction;
  for (int c = 0; c < 3; ++c) {
    ras(0, c) = -ras(0, c);
    ras(1, c) = -ras(1, c);
  }
  const Vec3 ras_origin{-g.origin[0], -g.origin[1], g.origin[2]};
  double qfac = 1.0;
  Mat3 rot = ras;
  if (rot.determinant() < 0) {
    qfac = -1.0;
    for (int r = 0; r < 3; ++r) rot(r, 2) = -rot(r, 2);
  }
  const float pixdim[8] = {static_cast<float>(qfac), static_cast<float>(g.spacing[0]), static_cast<float>(g.spacing[1]),
                           static_cast<float>(g.spacing[2]), 1, 1, 1, 1};
  for (int i = 0; i < 8; ++i) detail::store<float>(h + 76 + 4 * i, pixdim[i]);
  detail::store<float>(h + 108, static_cast<float>(kDataOffset));
  detail::store<float>(h + 112, 1.0f);
  detail::store<float>(h + 116, 0.0f);
  h[123] = 2;  // mm
  detail::store<std::int16_t>(h + 252, 1);
  detail::store<std::int16_t>(h + 254, 1);
  const auto q = detail::matrix_to_quaternion(rot);
  for (int i = 0; i < 3; ++i) {
    detail::store<float>(h + 256 + 4 * i, static_cast<float>(q[i]));
    detail::store<float>(h + 268 + 4 * i, static_cast<float>(ras_origin[i]));
  }
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) detail::store<float>(h + 280 + 16 * r + 4 * c, static_cast<float>(ras(r, c) * g.spacing[c]));
    detail::store<float>(h + 280 + 16 * r + 12, static_cast<float>(ras_origin[r]));
  }
  std::memcpy(h + 344, "n+1\0", 4);
  std::memcpy(h + kDataOffset, voxels.data(), voxels.size() * sizeof(T));
  return out;
}

inline bool wants_gzip(const std::filesystem::path& path) { return path.extension() == ".gz"; }

}  // namespace nifti

template <class T, class Tag>
Bytes encode_nifti(const Image<T, Tag>& img, bool compress) {
  Bytes raw = nifti::encode<T>(img.geometry(), img.voxels());
  return compress ? nifti::gzip(raw) : raw;
}

template <class T, class Tag>
void write_nifti(const std::filesystem::path& path, const Image<T, Tag>& img) {
  nifti::write_file(path, encode_nifti(img, nifti::wants_gzip(path)));
}

inline nifti::RawImage read_nifti_raw(const std::filesystem::path& path) { return nifti::decode(nifti::read_file(path)); }

inline Volume to_volume(const nifti::RawImage& raw) {
  Volume v(raw.geometry);
  for (std::size_t n = 0; n < v.size(); ++n) v[n] = static_cast<float>(raw.values[n]);
  return v;
}

/// Any nonzero label becomes 1.
inline Mask to_mask(const nifti::RawImage& raw) {
  Mask m(raw.geometry);
  for (std::size_t n = 0; n < m.size(); ++n) m[n] = raw.values[n] != 0.0 ? 1 : 0;
  return m;
}

inline DistanceMap to_distance_map(const nifti::RawImage& raw) { return DistanceMap(raw.geometry, raw.values); }

inline Volume read_volume(const std::filesystem::path& path) { return to_volume(read_nifti_raw(path)); }
inline Mask read_mask(const std::filesystem::path& path) { return to_mask(read_nifti_raw(path)); }
inline DistanceMap read_distance_map(const std::filesystem::path& path) { return to_distance_map(read_nifti_raw(path)); }

/// Distance maps are exchanged as 32-bit float.
inline void write_distance_map_f32(const std::filesystem::path& path, const DistanceMap& d) {
  Image<float, DistanceTag> f(d.geometry());
  for (std::size_t n = 0; n < d.size(); ++n) f[n] = static_cast<float>(d[n]);
  write_nifti(path, f);
}

/// Mask volume in millilitres.
inline double volume_ml(const Mask& m) {
  return static_cast<double>(count_nonzero(m)) * m.geometry().voxel_volume_mm3() / 1000.0;
}

}  // namespace covseg
