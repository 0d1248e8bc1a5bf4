#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flatec/error.hpp"

namespace flatec {

using Point3 = std::array<double, 3>;

/// Raw scan positions in meters. Intensity is carried through I/O only.
struct PointCloud {
  std::vector<Point3> points;
  std::vector<float> intensity;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
};

/// Binary occupancy over an H x W x D lattice; axis h <-> x, w <-> y, d <-> z.
/// Voxel (h, w, d) covers [origin + i * vs, origin + (i + 1) * vs) per axis.
struct VoxelGrid {
  std::array<int, 3> dims{0, 0, 0};
  double voxel_size = 1.0;
  Point3 origin{0, 0, 0};
  std::vector<std::uint8_t> occupancy;

  VoxelGrid() = default;
  VoxelGrid(std::array<int, 3> d, double vs, Point3 o)
      : dims(d), voxel_size(vs), origin(o), occupancy(static_cast<std::size_t>(d[0]) * d[1] * d[2], 0) {}

  std::size_t index(int h, int w, int d) const {
    return (static_cast<std::size_t>(h) * dims[1] + w) * dims[2] + d;
  }
  bool occupied(int h, int w, int d) const { return occupancy[index(h, w, d)] != 0; }
  std::size_t voxel_count() const { return occupancy.size(); }
  std::size_t occupied_count() const {
    std::size_t n = 0;
    for (auto b : occupancy) n += b != 0;
    return n;
  }
  Point3 center(int h, int w, int d) const {
    return {origin[0] + (h + 0.5) * voxel_size, origin[1] + (w + 0.5) * voxel_size,
            origin[2] + (d + 0.5) * voxel_size};
  }
  bool operator==(const VoxelGrid&) const = default;
};

struct Voxelization {
  VoxelGrid grid;
  std::size_t retained = 0;
  std::size_t dropped = 0;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write '" + path + "'");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline float le_f32(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

inline void put_le_f32(std::string& out, float v) {
  const auto bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

}  // namespace detail

/// KITTI velodyne .bin: consecutive little-endian float32 records (x, y, z, intensity).
inline PointCloud parse_kitti_bin(const std::string& bytes) {
  if (bytes.empty()) throw DataError("no points");
  const std::size_t records = bytes.size() / 16;
  if (bytes.size() % 16 != 0) throw DataError("truncated record at offset " + std::to_string(records * 16));
  PointCloud cloud;
  cloud.points.reserve(records);
  cloud.intensity.reserve(records);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t r = 0; r < records; ++r) {
    float v[4];
    for (int k = 0; k < 4; ++k) {
      v[k] = detail::le_f32(p + r * 16 + 4 * k);
      if (!std::isfinite(v[k]))
        throw DataError("non-finite float at offset " + std::to_string(r * 16 + 4 * static_cast<std::size_t>(k)));
    }
    cloud.points.push_back({v[0], v[1], v[2]});
    cloud.intensity.push_back(v[3]);
  }
  return cloud;
}

inline PointCloud load_kitti_bin(const std::string& path) { return parse_kitti_bin(detail::read_file(path)); }

inline std::string serialize_kitti_bin(const PointCloud& cloud) {
  std::string out;
  out.reserve(cloud.size() * 16);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (double c : cloud.points[i]) detail::put_le_f32(out, static_cast<float>(c));
    detail::put_le_f32(out, i < cloud.intensity.size() ? cloud.intensity[i] : 0.0f);
  }
  return out;
}

inline void save_kitti_bin(const std::string& path, const PointCloud& cloud) {
  detail::write_file(path, serialize_kitti_bin(cloud));
}

namespace detail {

inline int ply_type_size(const std::string& t) {
  static const std::map<std::string, int> sizes{
      {"char", 1},  {"int8", 1},   {"uchar", 1},  {"uint8", 1},   {"short", 2},  {"int16", 2},
      {"ushort", 2}, {"uint16", 2}, {"int", 4},    {"int32", 4},   {"uint", 4},   {"uint32", 4},
      {"float", 4}, {"float32", 4}, {"double", 8}, {"float64", 8}};
  auto it = sizes.find(t);
  if (it == sizes.end()) throw DataError("PLY: unsupported property type '" + t + "'");
  return it->second;
}

inline double ply_read_binary(const unsigned char* p, const std::string& t) {
  auto u = [&](int n) {
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
  };
  if (t == "float" || t == "float32") return le_f32(p);
  if (t == "double" || t == "float64") return std::bit_cast<double>(u(8));
  if (t == "char" || t == "int8") return static_cast<std::int8_t>(u(1));
  if (t == "uchar" || t == "uint8") return static_cast<double>(u(1));
  if (t == "short" || t == "int16") return static_cast<std::int16_t>(u(2));
  if (t == "ushort" || t == "uint16") return static_cast<double>(u(2));
  if (t == "int" || t == "int32") return static_cast<std::int32_t>(u(4));
  return static_cast<double>(u(4));
}

}  // namespace detail

/// PLY reader for the vertex element (x, y, z required), ascii or binary_little_endian.
/// The vertex element must come first.
inline PointCloud parse_ply(const std::string& bytes) {
  std::istringstream in(bytes);
  std::string line;
  if (!std::getline(in, line) || line.rfind("ply", 0) != 0) throw DataError("PLY: missing 'ply' magic");
  std::string format;
  std::size_t vertex_count = 0;
  bool in_vertex = false, seen_vertex = false;
  std::vector<std::pair<std::string, std::string>> props;  // (type, name)
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") {
      ls >> format;
    } else if (key == "element") {
      std::string name;
      std::size_t n = 0;
      ls >> name >> n;
      if (name == "vertex") {
        if (seen_vertex) throw DataError("PLY: duplicate vertex element");
        vertex_count = n;
        in_vertex = seen_vertex = true;
      } else {
        if (!seen_vertex) throw DataError("PLY: unsupported element order ('" + name + "' before vertex)");
        in_vertex = false;
      }
    } else if (key == "property" && in_vertex) {
      std::string type, name;
      ls >> type;
      if (type == "list") throw DataError("PLY: list properties on vertex are unsupported");
      ls >> name;
      props.emplace_back(type, name);
    } else if (key == "end_header") {
      break;
    }
  }
  if (!seen_vertex) throw DataError("PLY: no vertex element");
  if (format != "ascii" && format != "binary_little_endian")
    throw DataError("PLY: unsupported format '" + format + "'");
  int ix = -1, iy = -1, iz = -1;
  for (std::size_t i = 0; i < props.size(); ++i) {
    if (props[i].second == "x") ix = static_cast<int>(i);
    if (props[i].second == "y") iy = static_cast<int>(i);
    if (props[i].second == "z") iz = static_cast<int>(i);
  }
  for (auto [idx, name] : {std::pair{ix, "x"}, std::pair{iy, "y"}, std::pair{iz, "z"}})
    if (idx < 0) throw DataError(std::string("PLY: missing property '") + name + "'");
  if (vertex_count == 0) throw DataError("no points");

  PointCloud cloud;
  cloud.points.reserve(vertex_count);
  std::vector<double> row(props.size());
  if (format == "ascii") {
    for (std::size_t v = 0; v < vertex_count; ++v) {
      for (auto& value : row)
        if (!(in >> value)) throw DataError("PLY: truncated ascii body at vertex " + std::to_string(v));
      cloud.points.push_back({row[ix], row[iy], row[iz]});
    }
  } else {
    std::size_t stride = 0;
    std::vector<std::size_t> offsets;
    for (const auto& [type, name] : props) {
      offsets.push_back(stride);
      stride += static_cast<std::size_t>(detail::ply_type_size(type));
    }
    const auto body = static_cast<std::size_t>(in.tellg());
    if (body + stride * vertex_count > bytes.size())
      throw DataError("PLY: truncated binary body at offset " + std::to_string(bytes.size()));
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data()) + body;
    for (std::size_t v = 0; v < vertex_count; ++v) {
      for (std::size_t k = 0; k < props.size(); ++k)
        row[k] = detail::ply_read_binary(p + v * stride + offsets[k], props[k].first);
      cloud.points.push_back({row[ix], row[iy], row[iz]});
    }
  }
  for (const auto& pt : cloud.points)
    for (double c : pt)
      if (!std::isfinite(c)) throw DataError("PLY: non-finite coordinate");
  return cloud;
}

inline PointCloud load_ply(const std::string& path) { return parse_ply(detail::read_file(path)); }

inline std::string serialize_ply(const PointCloud& cloud, bool ascii = false) {
  std::ostringstream head;
  head << "ply\nformat " << (ascii ? "ascii" : "binary_little_endian") << " 1.0\n"
       << "element vertex " << cloud.size() << "\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
  std::string out = head.str();
  if (ascii) {
    std::ostringstream body;
    body.precision(9);
    for (const auto& p : cloud.points) body << static_cast<float>(p[0]) << ' ' << static_cast<float>(p[1]) << ' '
                                            << static_cast<float>(p[2]) << '\n';
    out += body.str();
  } else {
    for (const auto& p : cloud.points)
      for (double c : p) detail::put_le_f32(out, static_cast<float>(c));
  }
  return out;
}

inline void save_ply(const std::string& path, const PointCloud& cloud, bool ascii = false) {
  detail::write_file(path, serialize_ply(cloud, ascii));
}

/// Loads .bin (KITTI) or .ply by extension.
inline PointCloud load_scan(const std::string& path) {
  if (path.size() >= 4 && path.compare(path.size() - 4, 4, ".ply") == 0) return load_ply(path);
  return load_kitti_bin(path);
}

inline Point3 bounding_min(const PointCloud& cloud) {
  if (cloud.empty()) throw DataError("no points");
  Point3 m = cloud.points.front();
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) m[a] = std::min(m[a], p[a]);
  return m;
}

inline Point3 bounding_max(const PointCloud& cloud) {
  if (cloud.empty()) throw DataError("no points");
  Point3 m = cloud.points.front();
  for (const auto& p : cloud.points)
    for (int a = 0; a < 3; ++a) m[a] = std::max(m[a], p[a]);
  return m;
}

/// Rounds each dim up to a multiple of `multiple` (e.g. 2^S * N_g).
inline std::array<int, 3> pad_dims(std::array<int, 3> dims, int multiple) {
  for (auto& d : dims) d = ((d + multiple - 1) / multiple) * multiple;
  return dims;
}

/// Smallest padded dims covering every point for a given origin and voxel size.
inline std::array<int, 3> covering_dims(const PointCloud& cloud, double vs, const Point3& origin, int multiple) {
  const Point3 hi = bounding_max(cloud);
  std::array<int, 3> dims{};
  for (int a = 0; a < 3; ++a) dims[a] = std::max(1, static_cast<int>(std::floor((hi[a] - origin[a]) / vs)) + 1);
  return pad_dims(dims, multiple);
}

/// Occupancy of every voxel hit by at least one point; index = floor((p - origin) / vs).
inline Voxelization voxelize(const PointCloud& cloud, double vs, std::array<int, 3> dims, const Point3& origin) {
  if (!(vs > 0.0)) throw DataError("voxel size must be positive");
  for (int d : dims)
    if (d <= 0) throw DataError("voxel grid dims must be positive");
  Voxelization out{VoxelGrid(dims, vs, origin), 0, 0};
  for (const auto& p : cloud.points) {
    int idx[3];
    bool inside = true;
    for (int a = 0; a < 3; ++a) {
      const double f = std::floor((p[a] - origin[a]) / vs);
      if (!(f >= 0.0 && f < dims[a])) {
        inside = false;
        break;
      }
      idx[a] = static_cast<int>(f);
    }
    if (!inside) {
      ++out.dropped;
      continue;
    }
    ++out.retained;
    out.grid.occupancy[out.grid.index(idx[0], idx[1], idx[2])] = 1;
  }
  if (out.retained == 0) throw DataError("all " + std::to_string(cloud.size()) + " points are outside the voxel grid");
  return out;
}

/// One point at the centre of every occupied voxel, in (h, w, d) lexicographic order.
inline PointCloud devoxelize(const VoxelGrid& grid) {
  PointCloud cloud;
  for (int h = 0; h < grid.dims[0]; ++h)
    for (int w = 0; w < grid.dims[1]; ++w)
      for (int d = 0; d < grid.dims[2]; ++d)
        if (grid.occupied(h, w, d)) cloud.points.push_back(grid.center(h, w, d));
  if (cloud.empty()) throw DataError("cannot devoxelize an empty grid");
  return cloud;
}

}  // namespace flatec
