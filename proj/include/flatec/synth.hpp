#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "flatec/error.hpp"
#include "flatec/geometry.hpp"
#include "flatec/rng.hpp"

namespace flatec {

/// Synthetic scan parameters. The scene occupies [0, extent) on every axis.
struct SceneSpec {
  Point3 extent{6.4, 6.4, 6.4};
  std::size_t points = 60000;
  int boxes = 6;
  int poles = 5;
  int rings = 48;
  double fov_down_deg = -50.0;
  double fov_up_deg = 20.0;
  double sensor_height = 1.7;
  double ground_height = 0.05;
  double range_noise = 0.005;
  std::uint64_t seed = 1;

  void validate() const {
    for (double e : extent)
      if (!(e > 0.0)) throw DataError("scene extent must be positive");
    if (points == 0) throw DataError("scene point count must be positive");
    if (boxes < 0 || poles < 0 || rings < 1) throw DataError("scene object counts must be non-negative");
    if (!(fov_down_deg < fov_up_deg)) throw DataError("scene fov_down must be below fov_up");
    if (!(sensor_height > ground_height && sensor_height < extent[2]))
      throw DataError("sensor height must lie between the ground and the top of the scene");
    if (!(range_noise >= 0.0)) throw DataError("range noise must be non-negative");
  }
};

struct SceneBox {
  Point3 lo, hi;
};

struct ScenePole {
  double x, y, radius, height;
};

struct Scene {
  SceneSpec spec;
  Point3 sensor;
  std::vector<SceneBox> boxes;
  std::vector<ScenePole> poles;
};

/// Seeded layout: boxes and poles scattered on the ground, clear of the sensor.
inline Scene make_scene(const SceneSpec& spec) {
  spec.validate();
  Scene s{spec, {spec.extent[0] / 2, spec.extent[1] / 2, spec.sensor_height}, {}, {}};
  Rng rng(mix_seed(spec.seed, 0x5ce7e));
  const double ex = spec.extent[0], ey = spec.extent[1], ez = spec.extent[2];
  const double clear = 0.6;
  auto away = [&](double x, double y, double r) {
    return std::hypot(x - s.sensor[0], y - s.sensor[1]) > clear + r;
  };
  for (int i = 0, tries = 0; i < spec.boxes && tries < 1000; ++tries) {
    const double sx = rng.uniform(0.05, 0.25) * ex, sy = rng.uniform(0.05, 0.25) * ey;
    const double h = rng.uniform(0.1, 0.45) * ez;
    const double x0 = rng.uniform(0.0, ex - sx), y0 = rng.uniform(0.0, ey - sy);
    if (!away(x0 + sx / 2, y0 + sy / 2, std::hypot(sx, sy) / 2)) continue;
    s.boxes.push_back({{x0, y0, spec.ground_height}, {x0 + sx, y0 + sy, spec.ground_height + h}});
    ++i;
  }
  for (int i = 0, tries = 0; i < spec.poles && tries < 1000; ++tries) {
    const double r = rng.uniform(0.05, 0.15);
    const double x = rng.uniform(r, ex - r), y = rng.uniform(r, ey - r);
    if (!away(x, y, r)) continue;
    s.poles.push_back({x, y, r, rng.uniform(0.5, 0.95) * (ez - spec.ground_height)});
    ++i;
  }
  return s;
}

namespace detail {

inline std::optional<double> hit_box(const Point3& o, const Point3& d, const SceneBox& b) {
  double t0 = 0.0, t1 = std::numeric_limits<double>::infinity();
  for (int a = 0; a < 3; ++a) {
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < b.lo[a] || o[a] > b.hi[a]) return std::nullopt;
      continue;
    }
    double ta = (b.lo[a] - o[a]) / d[a], tb = (b.hi[a] - o[a]) / d[a];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
    if (t0 > t1) return std::nullopt;
  }
  return t0 > 1e-9 ? std::optional<double>(t0) : std::nullopt;
}

inline std::optional<double> hit_pole(const Point3& o, const Point3& d, const ScenePole& p, double base) {
  const double dx = o[0] - p.x, dy = o[1] - p.y;
  const double a = d[0] * d[0] + d[1] * d[1];
  if (a < 1e-12) return std::nullopt;
  const double b = 2 * (dx * d[0] + dy * d[1]), c = dx * dx + dy * dy - p.radius * p.radius;
  const double disc = b * b - 4 * a * c;
  if (disc < 0) return std::nullopt;
  const double t = (-b - std::sqrt(disc)) / (2 * a);
  if (t <= 1e-9) return std::nullopt;
  const double z = o[2] + t * d[2];
  if (z < base || z > base + p.height) return std::nullopt;
  return t;
}

}  // namespace detail

/// Nearest surface hit along a ray from the sensor, if any.
inline std::optional<Point3> cast_ray(const Scene& s, const Point3& dir) {
  const Point3& o = s.sensor;
  double best = std::numeric_limits<double>::infinity();
  if (dir[2] < 0) best = (s.spec.ground_height - o[2]) / dir[2];
  for (const auto& b : s.boxes)
    if (auto t = detail::hit_box(o, dir, b)) best = std::min(best, *t);
  for (const auto& p : s.poles)
    if (auto t = detail::hit_pole(o, dir, p, s.spec.ground_height)) best = std::min(best, *t);
  if (!std::isfinite(best)) return std::nullopt;
  return Point3{o[0] + best * dir[0], o[1] + best * dir[1], o[2] + best * dir[2]};
}

/// Ring-sampled scan with exactly spec.points points inside [0, extent).
inline PointCloud synth_scan(const SceneSpec& spec) {
  const Scene scene = make_scene(spec);
  Rng rng(mix_seed(spec.seed, 0x5ca9));
  PointCloud cloud;
  cloud.points.reserve(spec.points);
  const double lo = spec.fov_down_deg * std::numbers::pi / 180.0, hi = spec.fov_up_deg * std::numbers::pi / 180.0;
  const std::size_t max_rays = 1000 * spec.points + 100000;
  for (std::size_t ray = 0; cloud.size() < spec.points; ++ray) {
    if (ray == max_rays) throw DataError("synth: scene yields too few in-bounds returns");
    const int ring = static_cast<int>(rng.below(static_cast<std::uint64_t>(spec.rings)));
    const double el = spec.rings == 1 ? lo : lo + (hi - lo) * ring / (spec.rings - 1);
    const double az = rng.uniform(0.0, 2 * std::numbers::pi);
    const Point3 dir{std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el)};
    const double noise = spec.range_noise * rng.normal();
    auto hit = cast_ray(scene, dir);
    if (!hit) continue;
    Point3 p = *hit;
    for (int a = 0; a < 3; ++a) p[a] += noise * dir[a];
    bool inside = true;
    for (int a = 0; a < 3; ++a) inside = inside && p[a] >= 0.0 && p[a] < spec.extent[a];
    if (inside) cloud.points.push_back(p);
  }
  return cloud;
}

/// Parses "key=value,key=value" overrides (extent=XxYxZ, points, boxes, poles, rings, seed, noise).
inline SceneSpec parse_scene_spec(const std::string& text, SceneSpec spec = {}) {
  std::size_t pos = 0;
  while (pos < text.size()) {
    auto end = text.find(',', pos);
    if (end == std::string::npos) end = text.size();
    const std::string item = text.substr(pos, end - pos);
    pos = end + 1;
    if (item.empty()) continue;
    const auto eq = item.find('=');
    if (eq == std::string::npos) throw DataError("scene spec: expected key=value, got '" + item + "'");
    const std::string key = item.substr(0, eq), val = item.substr(eq + 1);
    try {
      if (key == "extent") {
        double x = 0, y = 0, z = 0;
        char c1 = 0, c2 = 0;
        std::istringstream vs(val);
        if (!(vs >> x >> c1 >> y >> c2 >> z) || c1 != 'x' || c2 != 'x') throw DataError("scene spec: bad extent");
        spec.extent = {x, y, z};
      } else if (key == "points") {
        spec.points = std::stoull(val);
      } else if (key == "boxes") {
        spec.boxes = std::stoi(val);
      } else if (key == "poles") {
        spec.poles = std::stoi(val);
      } else if (key == "rings") {
        spec.rings = std::stoi(val);
      } else if (key == "seed") {
        spec.seed = std::stoull(val);
      } else if (key == "noise") {
        spec.range_noise = std::stod(val);
      } else if (key == "sensor_height") {
        spec.sensor_height = std::stod(val);
      } else {
        throw DataError("scene spec: unknown key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw DataError("scene spec: bad value for '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

}  // namespace flatec
