#pragma once

#include <array>
#include <stdexcept>
#include <string>

#include "flatec/geometry.hpp"
#include "flatec/nn/layers.hpp"

namespace flatec {

using nn::Graph;
using nn::ParameterStore;
using nn::RealField;
using nn::Shape;
using nn::shape_product;
using nn::shape_string;
using nn::Var;

/// Plane order is (HW, HD, WD); each plane drops one volume axis.
inline constexpr std::array<int, 3> kDroppedAxis{2, 1, 0};
inline constexpr std::array<const char*, 3> kPlaneNames{"hw", "hd", "wd"};

template <class T>
struct TriplaneSet {
  std::array<Var<T>, 3> planes;
  int stage = 0;

  const Var<T>& hw() const { return planes[0]; }
  const Var<T>& hd() const { return planes[1]; }
  const Var<T>& wd() const { return planes[2]; }
  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& p : planes) n += p->size();
    return n;
  }
};

/// Spatial dims of plane p for a volume of the given dims.
inline std::array<int, 2> plane_dims(const std::array<int, 3>& dims, int plane) {
  const int drop = kDroppedAxis[plane];
  std::array<int, 2> out{};
  for (int a = 0, k = 0; a < 3; ++a)
    if (a != drop) out[k++] = dims[a];
  return out;
}

/// (HW + HD + WD) * C2 / (HWD * C1).
inline double storage_ratio(const std::array<int, 3>& dims, int c1, int c2) {
  const double h = dims[0], w = dims[1], d = dims[2];
  return (h * w + h * d + w * d) * c2 / (h * w * d * c1);
}

template <class T>
RealField<T> occupancy_field(const VoxelGrid& grid) {
  RealField<T> f({grid.dims[0], grid.dims[1], grid.dims[2], 1});
  for (std::size_t i = 0; i < grid.occupancy.size(); ++i) f[i] = grid.occupancy[i] ? T{1} : T{0};
  return f;
}

namespace detail {

inline std::array<std::size_t, 3> volume_strides(const Shape& s) {
  const auto c = static_cast<std::size_t>(s[3]);
  return {static_cast<std::size_t>(s[1]) * s[2] * c, static_cast<std::size_t>(s[2]) * c, c};
}

/// Calls fn(plane_row, voxel_base, axis_index) for every voxel; plane_row is the
/// flat (a, b) position on the plane that drops `axis`.
template <class F>
void for_each_voxel(const Shape& s, int axis, F&& fn) {
  const auto st = volume_strides(s);
  for (int h = 0; h < s[0]; ++h)
    for (int w = 0; w < s[1]; ++w)
      for (int d = 0; d < s[2]; ++d) {
        const int idx[3]{h, w, d};
        std::size_t prow;
        if (axis == 2) prow = static_cast<std::size_t>(h) * s[1] + w;
        else if (axis == 1) prow = static_cast<std::size_t>(h) * s[2] + d;
        else prow = static_cast<std::size_t>(w) * s[2] + d;
        fn(prow, h * st[0] + w * st[1] + d * st[2], idx[axis]);
      }
}

}  // namespace detail

/// P then R1: mean over consecutive groups of n_g voxels along `axis`, group
/// outputs concatenated into channels (channel = group * C + c).
/// [H, W, D, C] -> [A, B, (L / n_g) * C].
template <class T>
Var<T> group_pool_rearrange(Graph<T>& g, const Var<T>& fv, int axis, int n_g) {
  const Shape& s = fv->shape();
  if (s.size() != 4) throw std::invalid_argument("group_pool_rearrange: expected [H, W, D, C], got " + shape_string(s));
  const int len = s[axis], c = s[3];
  if (len % n_g) throw std::invalid_argument("group_pool_rearrange: axis length " + std::to_string(len) +
                                             " not divisible by group size " + std::to_string(n_g));
  const int groups = len / n_g;
  Shape so;
  for (int a = 0; a < 3; ++a)
    if (a != axis) so.push_back(s[a]);
  so.push_back(groups * c);
  auto out = g.result(so, {&fv});
  const T inv = T{1} / static_cast<T>(n_g);
  const auto oc = static_cast<std::size_t>(groups) * c;
  detail::for_each_voxel(s, axis, [&](std::size_t prow, std::size_t base, int l) {
    T* o = out->value.data() + prow * oc + static_cast<std::size_t>(l / n_g) * c;
    const T* in = fv->value.data() + base;
    for (int k = 0; k < c; ++k) o[k] += in[k] * inv;
  });
  if (out->requires_grad) {
    g.push([fv, out, axis, n_g, c, oc, inv] {
      auto& gx = fv->grad_buffer();
      detail::for_each_voxel(fv->shape(), axis, [&](std::size_t prow, std::size_t base, int l) {
        const T* go = out->grad.data() + prow * oc + static_cast<std::size_t>(l / n_g) * c;
        for (int k = 0; k < c; ++k) gx[base + k] += go[k] * inv;
      });
    });
  }
  return out;
}

/// R2 then T: inverse layout of group_pool_rearrange. Group slot l / n_g of the
/// plane's channels is written to every voxel along `axis` in that group.
/// [A, B, (L / n_g) * C] -> [H, W, D, C].
template <class T>
Var<T> expand_tile(Graph<T>& g, const Var<T>& plane, int axis, int n_g, const std::array<int, 3>& dims, int c) {
  const int groups = dims[axis] / n_g;
  const auto pd = [&] {
    std::array<int, 2> r{};
    for (int a = 0, k = 0; a < 3; ++a)
      if (a != axis) r[k++] = dims[a];
    return r;
  }();
  const Shape& ps = plane->shape();
  if (dims[axis] % n_g || ps.size() != 3 || ps[0] != pd[0] || ps[1] != pd[1] || ps[2] != groups * c)
    throw std::invalid_argument("expand_tile: plane " + shape_string(ps) + " inconsistent with volume " +
                                std::to_string(dims[0]) + "x" + std::to_string(dims[1]) + "x" +
                                std::to_string(dims[2]) + "x" + std::to_string(c));
  const Shape so{dims[0], dims[1], dims[2], c};
  auto out = g.result(so, {&plane});
  const auto pc = static_cast<std::size_t>(groups) * c;
  detail::for_each_voxel(so, axis, [&](std::size_t prow, std::size_t base, int l) {
    std::copy_n(plane->value.data() + prow * pc + static_cast<std::size_t>(l / n_g) * c, c, out->value.data() + base);
  });
  if (out->requires_grad) {
    g.push([plane, out, axis, n_g, c, pc, so] {
      auto& gp = plane->grad_buffer();
      detail::for_each_voxel(so, axis, [&](std::size_t prow, std::size_t base, int l) {
        T* dst = gp.data() + prow * pc + static_cast<std::size_t>(l / n_g) * c;
        for (int k = 0; k < c; ++k) dst[k] += out->grad[base + k];
      });
    });
  }
  return out;
}

/// F_V = CB3D(SiLU(conv3d(V))): occupancy (one channel) to C1 geometric features.
template <class T>
struct VoxelEmbedder {
  Var<T> weight, bias;
  nn::ConvBlock3d<T> block;

  static VoxelEmbedder create(ParameterStore<T>& store, const std::string& id, int c1, Rng& rng) {
    VoxelEmbedder e;
    e.weight = store.add(id + ".conv.weight", nn::detail::random_field<T>({3, 3, 3, 1, c1}, 27, 1.0, rng));
    e.bias = store.add(id + ".conv.bias", RealField<T>({c1}));
    e.block = nn::ConvBlock3d<T>::create(store, id + ".block", c1, c1, rng);
    return e;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& occupancy) const {
    return block(g, nn::silu(g, nn::conv3d(g, occupancy, weight, bias)));
  }
};

template <class T>
Var<T> embed_voxels(Graph<T>& g, const VoxelGrid& grid, const VoxelEmbedder<T>& embedder) {
  return embedder(g, nn::constant(occupancy_field<T>(grid)));
}

/// X_plane = Phi1(R1(P(F_V))) with separate Phi1 per plane.
template <class T>
struct PlaneProjector {
  std::array<nn::Dense<T>, 3> phi;
  int n_g = 4;

  static PlaneProjector create(ParameterStore<T>& store, const std::string& id, const std::array<int, 3>& dims,
                               int n_g, int c1, int c2, Rng& rng) {
    PlaneProjector p;
    p.n_g = n_g;
    for (int i = 0; i < 3; ++i)
      p.phi[i] = nn::Dense<T>::create(store, id + "." + kPlaneNames[i], dims[kDroppedAxis[i]] / n_g * c1, c2, rng);
    return p;
  }
};

template <class T>
Var<T> project_plane(Graph<T>& g, const Var<T>& fv, int plane, const PlaneProjector<T>& proj) {
  return proj.phi[plane](g, group_pool_rearrange(g, fv, kDroppedAxis[plane], proj.n_g));
}

template <class T>
TriplaneSet<T> project_triplane(Graph<T>& g, const Var<T>& fv, const PlaneProjector<T>& proj) {
  TriplaneSet<T> t;
  for (int i = 0; i < 3; ++i) t.planes[i] = project_plane(g, fv, i, proj);
  return t;
}

/// BP(X) = T(R2(Phi2(X))) per plane; the three volumes are summed in plane order.
template <class T>
struct BackProjector {
  std::array<nn::Dense<T>, 3> phi;
  std::array<int, 3> dims{};
  int n_g = 4;
  int c1 = 0;

  static BackProjector create(ParameterStore<T>& store, const std::string& id, const std::array<int, 3>& dims,
                              int n_g, int c1, int c2, Rng& rng) {
    BackProjector b;
    b.dims = dims;
    b.n_g = n_g;
    b.c1 = c1;
    for (int i = 0; i < 3; ++i)
      b.phi[i] = nn::Dense<T>::create(store, id + "." + kPlaneNames[i], c2, dims[kDroppedAxis[i]] / n_g * c1, rng);
    return b;
  }

  Var<T> plane_volume(Graph<T>& g, const Var<T>& plane, int i) const {
    return expand_tile(g, phi[i](g, plane), kDroppedAxis[i], n_g, dims, c1);
  }
};

template <class T>
Var<T> back_project(Graph<T>& g, const TriplaneSet<T>& planes, const BackProjector<T>& bp) {
  const auto& hw = planes.hw()->shape();
  const auto& hd = planes.hd()->shape();
  const auto& wd = planes.wd()->shape();
  if (hw[0] != hd[0] || hw[1] != wd[0] || hd[1] != wd[1] || hw[2] != hd[2] || hd[2] != wd[2])
    throw std::invalid_argument("back_project: inconsistent plane shapes " + shape_string(hw) + ", " +
                                shape_string(hd) + ", " + shape_string(wd));
  auto v = bp.plane_volume(g, planes.planes[0], 0);
  v = nn::add(g, v, bp.plane_volume(g, planes.planes[1], 1));
  return nn::add(g, v, bp.plane_volume(g, planes.planes[2], 2));
}

/// F_V^init = CB3D(F~_V || PE): a pointwise mix of the concatenation, SiLU, then a 3D block.
template <class T>
struct PositionalFusion {
  int frequencies = 8;
  nn::Dense<T> mix;
  nn::ConvBlock3d<T> block;
  mutable Var<T> table;

  const Var<T>& embedding(const Shape& s) const {
    if (!table || table->shape()[0] != s[0] || table->shape()[1] != s[1] || table->shape()[2] != s[2])
      table = nn::constant(nn::positional_embedding<T>(s[0], s[1], s[2], frequencies));
    return table;
  }

  static PositionalFusion create(ParameterStore<T>& store, const std::string& id, int c1, int frequencies, Rng& rng) {
    PositionalFusion f;
    f.frequencies = frequencies;
    f.mix = nn::Dense<T>::create(store, id + ".mix", c1 + 6 * frequencies, c1, rng);
    f.block = nn::ConvBlock3d<T>::create(store, id + ".block", c1, c1, rng);
    return f;
  }
};

template <class T>
Var<T> fuse_positional(Graph<T>& g, const Var<T>& fv, const PositionalFusion<T>& fusion) {
  const Shape& s = fv->shape();
  Var<T> x = fv;
  if (fusion.frequencies > 0)
    x = nn::concat_channels(g, fv, fusion.embedding(s));
  return fusion.block(g, nn::silu(g, fusion.mix(g, x)));
}

}  // namespace flatec
