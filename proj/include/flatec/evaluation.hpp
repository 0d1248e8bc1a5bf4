#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "flatec/error.hpp"
#include "flatec/geometry.hpp"

namespace flatec {

/// PSNR reported for an exact reconstruction (zero MSE).
inline constexpr double kPsnrExact = std::numeric_limits<double>::infinity();

/// Exact nearest-neighbour search: a median-split k-d tree, or a flat scan for small clouds.
class KdTree {
 public:
  static constexpr std::size_t kBruteForceBelow = 2000;

  explicit KdTree(const std::vector<Point3>& points) : pts_(points), idx_(points.size()) {
    std::iota(idx_.begin(), idx_.end(), 0);
    if (pts_.size() >= kBruteForceBelow) build(0, idx_.size());
  }

  std::size_t size() const { return pts_.size(); }
  const Point3& point(std::size_t i) const { return pts_[i]; }

  /// (index, squared distance) of the closest point; ties go to the smaller index.
  std::pair<std::size_t, double> nearest(const Point3& q) const {
    auto r = knn(q, 1);
    return r.front();
  }

  /// The k closest points by (squared distance, index), nearest first.
  std::vector<std::pair<std::size_t, double>> knn(const Point3& q, std::size_t k) const {
    if (pts_.empty()) throw DataError("nearest-neighbour query on an empty cloud");
    k = std::min(k, pts_.size());
    std::vector<std::pair<double, std::size_t>> heap;  // max-heap on (d2, index)
    heap.reserve(k + 1);
    auto offer = [&](std::size_t i) {
      const double d = sq(pts_[i], q);
      if (heap.size() < k) {
        heap.push_back({d, i});
        std::push_heap(heap.begin(), heap.end());
      } else if (std::pair{d, i} < heap.front()) {
        std::pop_heap(heap.begin(), heap.end());
        heap.back() = {d, i};
        std::push_heap(heap.begin(), heap.end());
      }
    };
    if (nodes_.empty()) {
      for (std::size_t i = 0; i < pts_.size(); ++i) offer(i);
    } else {
      search(0, q, k, heap, offer);
    }
    std::sort_heap(heap.begin(), heap.end());
    std::vector<std::pair<std::size_t, double>> out;
    for (const auto& [d, i] : heap) out.push_back({i, d});
    return out;
  }

 private:
  struct NodeK {
    std::size_t begin, end;  // leaf range in idx_
    int axis = -1;           // -1: leaf
    double split = 0.0;
    std::size_t left = 0, right = 0;
  };
  static constexpr std::size_t kLeaf = 16;

  static double sq(const Point3& a, const Point3& b) {
    const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
    return dx * dx + dy * dy + dz * dz;
  }

  std::size_t build(std::size_t b, std::size_t e) {
    const std::size_t id = nodes_.size();
    nodes_.push_back({b, e});
    if (e - b <= kLeaf) return id;
    Point3 lo = pts_[idx_[b]], hi = lo;
    for (std::size_t i = b; i < e; ++i)
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], pts_[idx_[i]][a]);
        hi[a] = std::max(hi[a], pts_[idx_[i]][a]);
      }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    if (hi[axis] == lo[axis]) return id;  // all points coincide
    const std::size_t mid = b + (e - b) / 2;
    std::nth_element(idx_.begin() + b, idx_.begin() + mid, idx_.begin() + e,
                     [&](std::size_t x, std::size_t y) { return pts_[x][axis] < pts_[y][axis]; });
    const double split = pts_[idx_[mid]][axis];
    const std::size_t l = build(b, mid);
    const std::size_t r = build(mid, e);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = l;
    nodes_[id].right = r;
    return id;
  }

  template <class Heap, class Offer>
  void search(std::size_t n, const Point3& q, std::size_t k, const Heap& heap, Offer& offer) const {
    const NodeK& node = nodes_[n];
    if (node.axis < 0) {
      for (std::size_t i = node.begin; i < node.end; ++i) offer(idx_[i]);
      return;
    }
    const double diff = q[node.axis] - node.split;
    const std::size_t near = diff < 0 ? node.left : node.right, far = diff < 0 ? node.right : node.left;
    search(near, q, k, heap, offer);
    // Points equal to the split can sit on either side, so ties still descend.
    if (heap.size() < k || diff * diff <= heap.front().first) search(far, q, k, heap, offer);
  }

  std::vector<Point3> pts_;
  std::vector<std::size_t> idx_;
  std::vector<NodeK> nodes_;
};

/// Peak used by the PSNR formulas: largest axis extent of the reference bounding box.
inline double default_peak(const PointCloud& reference) {
  const auto lo = bounding_min(reference), hi = bounding_max(reference);
  return std::max({hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]});
}

inline double psnr_from_mse(double mse, double peak) {
  if (!(peak > 0.0)) throw DataError("psnr: peak must be positive");
  return mse <= 0.0 ? kPsnrExact : 10.0 * std::log10(3.0 * peak * peak / mse);
}

/// Mean squared nearest-neighbour distance from each point of `a` to `b`.
inline double directional_mse_d1(const PointCloud& a, const KdTree& b) {
  double s = 0.0;
  for (const auto& p : a.points) s += b.nearest(p).second;
  return s / static_cast<double>(a.size());
}

struct D1Result {
  double psnr, mse, mse_ab, mse_ba;
};

/// Point-to-point PSNR with the symmetric (max) MSE.
inline D1Result psnr_d1(const PointCloud& a, const PointCloud& b, double peak) {
  if (a.empty() || b.empty()) throw DataError("psnr_d1: empty point cloud");
  const KdTree ta(a.points), tb(b.points);
  D1Result r{};
  r.mse_ab = directional_mse_d1(a, tb);
  r.mse_ba = directional_mse_d1(b, ta);
  r.mse = std::max(r.mse_ab, r.mse_ba);
  r.psnr = psnr_from_mse(r.mse, peak);
  return r;
}

inline D1Result psnr_d1(const PointCloud& a, const PointCloud& b) { return psnr_d1(a, b, default_peak(a)); }

struct NormalEstimate {
  Eigen::Vector3d normal = Eigen::Vector3d::Zero();
  bool degenerate = false;  // collinear or coincident neighbourhood
};

/// Plane fit over the k nearest neighbours of point i (itself included): smallest principal axis.
inline NormalEstimate estimate_normal(const KdTree& tree, std::size_t i, std::size_t k) {
  const auto nb = tree.knn(tree.point(i), k);
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& [j, d] : nb) mean += Eigen::Vector3d(tree.point(j)[0], tree.point(j)[1], tree.point(j)[2]);
  mean /= static_cast<double>(nb.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& [j, d] : nb) {
    const Eigen::Vector3d v = Eigen::Vector3d(tree.point(j)[0], tree.point(j)[1], tree.point(j)[2]) - mean;
    cov += v * v.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  const auto& ev = es.eigenvalues();  // ascending
  NormalEstimate n;
  n.normal = es.eigenvectors().col(0);
  n.degenerate = !(ev[2] > 0.0) || ev[1] <= 1e-12 * ev[2];
  return n;
}

struct D2Result {
  double psnr, mse, mse_ab, mse_ba;
  std::size_t fallbacks;  // points scored with the point-to-point residual
};

namespace detail {

inline double directional_mse_d2(const PointCloud& a, const PointCloud& ref, const KdTree& tree, std::size_t k,
                                 std::size_t& fallbacks) {
  std::vector<NormalEstimate> normals(ref.size());
  std::vector<std::uint8_t> done(ref.size(), 0);
  double s = 0.0;
  for (const auto& p : a.points) {
    const auto [j, d2] = tree.nearest(p);
    if (!done[j]) {
      normals[j] = estimate_normal(tree, j, k);
      done[j] = 1;
    }
    if (normals[j].degenerate) {
      s += d2;
      ++fallbacks;
      continue;
    }
    const auto& q = ref.points[j];
    const double proj = normals[j].normal.dot(Eigen::Vector3d(p[0] - q[0], p[1] - q[1], p[2] - q[2]));
    s += proj * proj;
  }
  return s / static_cast<double>(a.size());
}

}  // namespace detail

/// Point-to-plane PSNR: residuals projected onto normals estimated on the other cloud.
inline D2Result psnr_d2(const PointCloud& a, const PointCloud& b, double peak, std::size_t k = 9) {
  if (a.empty() || b.empty()) throw DataError("psnr_d2: empty point cloud");
  if (a.size() < k + 1 || b.size() < k + 1)
    throw DataError("psnr_d2: both clouds need at least k + 1 = " + std::to_string(k + 1) + " points");
  const KdTree ta(a.points), tb(b.points);
  D2Result r{};
  r.fallbacks = 0;
  r.mse_ab = detail::directional_mse_d2(a, b, tb, k, r.fallbacks);
  r.mse_ba = detail::directional_mse_d2(b, a, ta, k, r.fallbacks);
  r.mse = std::max(r.mse_ab, r.mse_ba);
  r.psnr = psnr_from_mse(r.mse, peak);
  return r;
}

/// Intersection over union of the voxel sets of a and b on a world-anchored grid
/// (cell = floor(p / grid_size)), so the result is symmetric in a and b.
inline double iou_grid(const PointCloud& a, const PointCloud& b, double grid_size) {
  if (!(grid_size > 0.0)) throw DataError("iou_grid: grid size must be positive");
  if (a.empty() && b.empty()) throw DataError("iou_grid: both clouds are empty");
  if (a.empty() || b.empty()) return 0.0;
  auto key = [&](const Point3& p) {
    std::uint64_t k = 0;
    for (int ax = 0; ax < 3; ++ax) {
      const double v = std::floor(p[ax] / grid_size) + (1 << 20);
      if (!(v >= 0 && v < (1 << 21))) throw DataError("iou_grid: cloud spans more than 2^20 cells");
      k = (k << 21) | static_cast<std::uint64_t>(v);
    }
    return k;
  };
  std::unordered_set<std::uint64_t> sa, sb;
  for (const auto& p : a.points) sa.insert(key(p));
  for (const auto& p : b.points) sb.insert(key(p));
  std::size_t inter = 0;
  for (auto k : sa) inter += sb.count(k);
  return static_cast<double>(inter) / static_cast<double>(sa.size() + sb.size() - inter);
}

/// Voxel-set IoU of two grids with identical geometry.
inline double iou_grid(const VoxelGrid& a, const VoxelGrid& b) {
  if (a.dims != b.dims) throw DataError("iou_grid: grid dims differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.occupancy.size(); ++i) {
    inter += a.occupancy[i] && b.occupancy[i];
    uni += a.occupancy[i] || b.occupancy[i];
  }
  if (uni == 0) throw DataError("iou_grid: both grids are empty");
  return static_cast<double>(inter) / static_cast<double>(uni);
}

struct RDPoint {
  double bpp = 0.0;
  double psnr_d1 = 0.0, psnr_d2 = 0.0;
  double iou = 0.0;
  double enc_time = 0.0, dec_time = 0.0;
  bool operator==(const RDPoint&) const = default;
};

struct RDCurve {
  std::string label;
  std::vector<RDPoint> points;

  void validate() const {
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (!(points[i].bpp > 0.0)) throw DataError("rd curve '" + label + "': bpp must be positive");
      if (i > 0 && !(points[i].bpp > points[i - 1].bpp))
        throw DataError("rd curve '" + label + "': bpp must be strictly increasing");
    }
  }
};

enum class BdMetric { d1, d2 };

struct BdResult {
  double bd_rate = 0.0;  // percent
  double bd_psnr = 0.0;  // dB
};

namespace detail {

/// Least-squares cubic c0 + c1 t + c2 t^2 + c3 t^3 (exact through 4 points).
inline std::array<double, 4> cubic_fit(const std::vector<double>& t, const std::vector<double>& y) {
  Eigen::MatrixXd A(static_cast<Eigen::Index>(t.size()), 4);
  Eigen::VectorXd b(static_cast<Eigen::Index>(t.size()));
  for (std::size_t i = 0; i < t.size(); ++i) {
    for (int j = 0; j < 4; ++j) A(static_cast<Eigen::Index>(i), j) = std::pow(t[i], j);
    b(static_cast<Eigen::Index>(i)) = y[i];
  }
  const Eigen::Vector4d c = A.colPivHouseholderQr().solve(b);
  return {c[0], c[1], c[2], c[3]};
}

/// Integral of the cubic over [lo, hi].
inline double cubic_integral(const std::array<double, 4>& c, double lo, double hi) {
  auto prim = [&](double t) { return t * (c[0] + t * (c[1] / 2 + t * (c[2] / 3 + t * c[3] / 4))); };
  return prim(hi) - prim(lo);
}

inline double psnr_of(const RDPoint& p, BdMetric m) { return m == BdMetric::d1 ? p.psnr_d1 : p.psnr_d2; }

}  // namespace detail

/// Bjontegaard deltas of `test` against `reference`: average log-rate difference over the
/// shared PSNR range (as a percentage) and average PSNR difference over the shared log-rate range.
inline BdResult bd_metrics(const RDCurve& reference, const RDCurve& test, BdMetric metric = BdMetric::d1) {
  for (const auto* c : {&reference, &test}) {
    if (c->points.size() < 4) throw DataError("bd_metrics: curve '" + c->label + "' needs at least 4 points");
    c->validate();
    for (const auto& p : c->points)
      if (!std::isfinite(detail::psnr_of(p, metric)))
        throw DataError("bd_metrics: curve '" + c->label + "' has a non-finite PSNR");
  }
  auto split = [&](const RDCurve& c, std::vector<double>& lr, std::vector<double>& q) {
    for (const auto& p : c.points) {
      lr.push_back(std::log10(p.bpp));
      q.push_back(detail::psnr_of(p, metric));
    }
  };
  std::vector<double> lr1, q1, lr2, q2;
  split(reference, lr1, q1);
  split(test, lr2, q2);
  BdResult r;
  {
    const double lo = std::max(*std::min_element(q1.begin(), q1.end()), *std::min_element(q2.begin(), q2.end()));
    const double hi = std::min(*std::max_element(q1.begin(), q1.end()), *std::max_element(q2.begin(), q2.end()));
    if (!(hi > lo)) throw DataError("bd_metrics: curves share no PSNR range");
    const double d = (detail::cubic_integral(detail::cubic_fit(q2, lr2), lo, hi) -
                      detail::cubic_integral(detail::cubic_fit(q1, lr1), lo, hi)) /
                     (hi - lo);
    r.bd_rate = (std::pow(10.0, d) - 1.0) * 100.0;
  }
  {
    const double lo = std::max(lr1.front(), lr2.front()), hi = std::min(lr1.back(), lr2.back());
    if (hi > lo) {
      r.bd_psnr = (detail::cubic_integral(detail::cubic_fit(lr2, q2), lo, hi) -
                   detail::cubic_integral(detail::cubic_fit(lr1, q1), lo, hi)) /
                  (hi - lo);
    }
  }
  return r;
}

struct RDRow {
  std::string label;
  RDPoint point;
  bool operator==(const RDRow&) const = default;
};

inline const std::vector<std::string>& rd_columns() {
  static const std::vector<std::string> cols{"label", "bpp", "d1", "d2", "iou", "enc_s", "dec_s"};
  return cols;
}

namespace detail {

inline std::string number(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline double parse_number(const std::string& s) {
  if (s == "inf") return kPsnrExact;
  if (s == "-inf") return -kPsnrExact;
  std::size_t used = 0;
  const double v = std::stod(s, &used);
  if (used != s.size()) throw std::invalid_argument(s);
  return v;
}

}  // namespace detail

/// CSV with a fixed column order; PSNRs of exact reconstructions are written as "inf".
inline std::string rd_report_csv(const std::vector<RDRow>& rows) {
  std::ostringstream os;
  const auto& cols = rd_columns();
  for (std::size_t i = 0; i < cols.size(); ++i) os << (i ? "," : "") << cols[i];
  os << '\n';
  for (const auto& r : rows) {
    if (r.label.find_first_of(",\n\"") != std::string::npos)
      throw DataError("rd report: label '" + r.label + "' contains a reserved character");
    const auto& p = r.point;
    os << r.label;
    for (double v : {p.bpp, p.psnr_d1, p.psnr_d2, p.iou, p.enc_time, p.dec_time}) os << ',' << detail::number(v);
    os << '\n';
  }
  return os.str();
}

inline std::vector<RDRow> parse_rd_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  std::vector<RDRow> rows;
  if (!std::getline(is, line)) throw DataError("rd csv: empty input");
  {
    std::string expect;
    for (const auto& c : rd_columns()) expect += (expect.empty() ? "" : ",") + c;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != expect) throw DataError("rd csv: header must be '" + expect + "'");
  }
  int lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) f.push_back(cell);
    if (f.size() != rd_columns().size()) throw DataError("rd csv line " + std::to_string(lineno) + ": wrong column count");
    try {
      rows.push_back({f[0],
                      {detail::parse_number(f[1]), detail::parse_number(f[2]), detail::parse_number(f[3]),
                       detail::parse_number(f[4]), detail::parse_number(f[5]), detail::parse_number(f[6])}});
    } catch (const std::logic_error&) {
      throw DataError("rd csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  return rows;
}

/// JSON array of objects keyed by the CSV columns; infinite PSNRs become null.
inline std::string rd_report_json(const std::vector<RDRow>& rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  auto num = [](double v) { return std::isfinite(v) ? nlohmann::ordered_json(v) : nlohmann::ordered_json(nullptr); };
  for (const auto& r : rows) {
    nlohmann::ordered_json o;
    o["label"] = r.label;
    o["bpp"] = num(r.point.bpp);
    o["d1"] = num(r.point.psnr_d1);
    o["d2"] = num(r.point.psnr_d2);
    o["iou"] = num(r.point.iou);
    o["enc_s"] = num(r.point.enc_time);
    o["dec_s"] = num(r.point.dec_time);
    arr.push_back(std::move(o));
  }
  return arr.dump(2) + "\n";
}

inline std::vector<RDRow> parse_rd_json(const std::string& text) {
  std::vector<RDRow> rows;
  try {
    const auto arr = nlohmann::json::parse(text);
    auto num = [](const nlohmann::json& v) { return v.is_null() ? kPsnrExact : v.get<double>(); };
    for (const auto& o : arr)
      rows.push_back({o.at("label").get<std::string>(),
                      {num(o.at("bpp")), num(o.at("d1")), num(o.at("d2")), num(o.at("iou")), num(o.at("enc_s")),
                       num(o.at("dec_s"))}});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("rd json: ") + e.what());
  }
  return rows;
}

/// Rows grouped into curves by label (first-seen order), each sorted by bpp.
inline std::vector<RDCurve> rd_curves(const std::vector<RDRow>& rows) {
  std::vector<RDCurve> curves;
  for (const auto& r : rows) {
    auto it = std::find_if(curves.begin(), curves.end(), [&](const RDCurve& c) { return c.label == r.label; });
    if (it == curves.end()) {
      curves.push_back({r.label, {}});
      it = curves.end() - 1;
    }
    it->points.push_back(r.point);
  }
  for (auto& c : curves)
    std::sort(c.points.begin(), c.points.end(), [](const RDPoint& a, const RDPoint& b) { return a.bpp < b.bpp; });
  return curves;
}

}  // namespace flatec
