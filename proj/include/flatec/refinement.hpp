#pragma once

#include <algorithm>
#include <array>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatec/geometry.hpp"
#include "flatec/nn/layers.hpp"
#include "flatec/nn/spectral.hpp"

namespace flatec {

using nn::Graph;
using nn::ParameterStore;
using nn::RealField;
using nn::Var;

/// w = max(4, min_dim / 8), lowered to the largest w >= 4 dividing every dim.
inline int lsa_window(const std::array<int, 3>& dims) {
  const int lo = *std::min_element(dims.begin(), dims.end());
  for (int w = std::max(4, lo / 8); w >= 4; --w)
    if (dims[0] % w == 0 && dims[1] % w == 0 && dims[2] % w == 0) return w;
  throw std::invalid_argument("lsa_window: no window size >= 4 divides " + std::to_string(dims[0]) + "x" +
                              std::to_string(dims[1]) + "x" + std::to_string(dims[2]));
}

/// Complex filter over a centred w^3 frequency window, one per channel; the raw
/// arrays are projected onto the Hermitian subspace when applied.
template <class T>
struct SpectrumFilter {
  Var<T> alpha_re, alpha_im;  // [w, w, w, C]

  static SpectrumFilter create(ParameterStore<T>& store, const std::string& id, int window, int channels) {
    return {store.add(id + ".alpha_re", RealField<T>({window, window, window, channels})),
            store.add(id + ".alpha_im", RealField<T>({window, window, window, channels}))};
  }

  int window() const { return alpha_re->value.dim(0); }
};

/// SA = Re(F^-1(alpha * F(x))) + x per window and channel.
template <class T>
Var<T> lsa_enhance(Graph<T>& g, const Var<T>& fv, const SpectrumFilter<T>& filter) {
  return nn::add(g, nn::windowed_spectral_filter(g, fv, filter.alpha_re, filter.alpha_im), fv);
}

/// LSA refinement block: spectral attention then a residual pointwise MLP.
template <class T>
struct LsaBlock {
  SpectrumFilter<T> filter;
  nn::Mlp<T> mlp;

  static LsaBlock create(ParameterStore<T>& store, const std::string& id, int window, int channels, Rng& rng) {
    return {SpectrumFilter<T>::create(store, id + ".filter", window, channels),
            nn::Mlp<T>::create(store, id + ".mlp", {channels, channels, channels}, rng)};
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    auto sa = lsa_enhance(g, x, filter);
    return nn::add(g, sa, mlp(g, sa));
  }
};

template <class T>
Var<T> lsa_refine(Graph<T>& g, Var<T> x, const std::vector<LsaBlock<T>>& blocks) {
  for (const auto& b : blocks) x = b(g, x);
  return x;
}

template <class T>
struct OccupancyHead {
  nn::ConvBlock3d<T> cb;
  nn::Dense<T> out;

  static OccupancyHead create(ParameterStore<T>& store, const std::string& id, int channels, Rng& rng) {
    return {nn::ConvBlock3d<T>::create(store, id + ".cb", channels, channels, rng),
            nn::Dense<T>::create(store, id + ".out", channels, 1, rng)};
  }
};

/// Pre-sigmoid occupancy scores [H, W, D, 1].
template <class T>
Var<T> occupancy_logits(Graph<T>& g, const Var<T>& fv, const OccupancyHead<T>& head) {
  return head.out(g, head.cb(g, fv));
}

/// Occupancy probability [H, W, D, 1] in (0, 1).
template <class T>
Var<T> occupancy_head(Graph<T>& g, const Var<T>& fv, const OccupancyHead<T>& head) {
  return nn::sigmoid(g, occupancy_logits(g, fv, head));
}

enum class BinarizeMode { top_k, threshold };

struct BinarizeOptions {
  BinarizeMode mode = BinarizeMode::top_k;
  double tau = 0.5;
  std::size_t k = 0;
};

/// Voxel indices of the k largest probabilities; ties go to the smaller index.
template <class T>
std::vector<std::size_t> top_k_indices(const std::vector<T>& prob, std::size_t k) {
  if (k == 0 || k > prob.size())
    throw std::invalid_argument("binarize: k = " + std::to_string(k) + " outside [1, " + std::to_string(prob.size()) +
                                "]");
  std::vector<std::size_t> idx(prob.size());
  std::iota(idx.begin(), idx.end(), 0);
  auto before = [&](std::size_t a, std::size_t b) { return prob[a] > prob[b] || (prob[a] == prob[b] && a < b); };
  std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k - 1), idx.end(), before);
  idx.resize(k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

/// Occupancy grid from probabilities [H, W, D, 1] on the given geometry.
template <class T>
VoxelGrid binarize(const RealField<T>& prob, double voxel_size, const Point3& origin, const BinarizeOptions& opt) {
  if (prob.rank() != 4 || prob.channels() != 1)
    throw std::invalid_argument("binarize: expected [H, W, D, 1], got " + nn::shape_string(prob.shape));
  VoxelGrid grid({prob.dim(0), prob.dim(1), prob.dim(2)}, voxel_size, origin);
  if (opt.mode == BinarizeMode::threshold) {
    if (!(opt.tau > 0.0 && opt.tau < 1.0)) throw std::invalid_argument("binarize: tau must lie in (0, 1)");
    for (std::size_t i = 0; i < prob.size(); ++i) grid.occupancy[i] = prob[i] >= static_cast<T>(opt.tau);
  } else {
    for (auto i : top_k_indices(prob.values, opt.k)) grid.occupancy[i] = 1;
  }
  return grid;
}

inline constexpr int kMaxUpliftRate = 8;

/// Per-voxel MLP emitting up to kMaxUpliftRate offsets; the last layer starts at zero.
template <class T>
struct Uplifter {
  nn::Mlp<T> mlp;

  static Uplifter create(ParameterStore<T>& store, const std::string& id, int channels, int hidden, Rng& rng) {
    Uplifter u{nn::Mlp<T>::create(store, id + ".mlp", {channels, hidden, 3 * kMaxUpliftRate}, rng)};
    auto& last = u.mlp.layers.back();
    std::fill(last.weight->value.values.begin(), last.weight->value.values.end(), T{0});
    return u;
  }
};

inline std::vector<std::size_t> occupied_indices(const VoxelGrid& grid) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < grid.occupancy.size(); ++i)
    if (grid.occupancy[i]) idx.push_back(i);
  return idx;
}

/// Points [n * f, 3]: for each occupied voxel (lexicographic order) its centre plus
/// f offsets tanh(.) * vs / 2, read from the voxel's feature vector.
template <class T>
Var<T> uplift(Graph<T>& g, const VoxelGrid& grid, const Var<T>& features, int f, const Uplifter<T>& up) {
  if (f < 1 || f > kMaxUpliftRate)
    throw std::invalid_argument("uplift: rate " + std::to_string(f) + " outside [1, " +
                                std::to_string(kMaxUpliftRate) + "]");
  const auto idx = occupied_indices(grid);
  if (idx.empty()) throw DataError("uplift: empty grid");
  if (features->size() / features->value.channels() != grid.voxel_count())
    throw std::invalid_argument("uplift: features " + nn::shape_string(features->shape()) + " do not match grid");
  auto offsets = up.mlp(g, nn::gather_rows(g, features, idx, 0, features->value.channels()));
  const int n = static_cast<int>(idx.size());
  RealField<T> centres({n * f, 3});
  for (int i = 0; i < n; ++i) {
    const std::size_t v = idx[i];
    const int h = static_cast<int>(v / (static_cast<std::size_t>(grid.dims[1]) * grid.dims[2]));
    const int w = static_cast<int>(v / grid.dims[2] % grid.dims[1]);
    const int d = static_cast<int>(v % grid.dims[2]);
    const auto c = grid.center(h, w, d);
    for (int j = 0; j < f; ++j)
      for (int a = 0; a < 3; ++a) centres[(static_cast<std::size_t>(i) * f + j) * 3 + a] = static_cast<T>(c[a]);
  }
  // [n, 3 * kMax] -> first f triples per row -> [n * f, 3]
  std::vector<std::size_t> rows(static_cast<std::size_t>(n));
  std::iota(rows.begin(), rows.end(), 0);
  auto picked = nn::gather_rows(g, offsets, rows, 0, 3 * f);
  picked->value.shape = {n * f, 3};
  auto scaled = nn::scale(g, nn::tanh(g, picked), static_cast<T>(grid.voxel_size / 2));
  return nn::add_fixed(g, scaled, centres);
}

template <class T>
PointCloud to_point_cloud(const RealField<T>& pts) {
  PointCloud cloud;
  for (std::size_t i = 0; i + 2 < pts.size(); i += 3) cloud.points.push_back({static_cast<double>(pts[i]), static_cast<double>(pts[i + 1]), static_cast<double>(pts[i + 2])});
  return cloud;
}

}  // namespace flatec
