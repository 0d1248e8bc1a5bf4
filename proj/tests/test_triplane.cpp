#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "flatec/nn/grad_check.hpp"
#include "flatec/triplane.hpp"

using namespace flatec;
using nn::Graph;

namespace {

RealField<double> random_volume(Shape s, std::uint64_t seed) {
  Rng rng(seed);
  RealField<double> f(std::move(s));
  for (auto& v : f.values) v = rng.uniform(-1, 1);
  return f;
}

std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(-1, 1);
  return w;
}

}  // namespace

TEST(Embed, ZeroGridZeroFeatures) {
  ParameterStore<double> store;
  Rng rng(1);
  auto emb = VoxelEmbedder<double>::create(store, "embed", 4, rng);
  Graph<double> g(false);
  auto f = embed_voxels(g, VoxelGrid({8, 8, 8}, 1.0, {0, 0, 0}), emb);
  EXPECT_EQ(f->shape(), (Shape{8, 8, 8, 4}));
  EXPECT_EQ(f->value.max_abs(), 0.0);
}

TEST(Embed, ImpulseReceptiveField) {
  ParameterStore<double> store;
  Rng rng(2);
  auto emb = VoxelEmbedder<double>::create(store, "embed", 4, rng);
  VoxelGrid grid({12, 12, 12}, 1.0, {0, 0, 0});
  grid.occupancy[grid.index(6, 5, 7)] = 1;
  Graph<double> g(false);
  auto f = embed_voxels(g, grid, emb);
  // two stacked 3^3 kernels: Chebyshev radius 2
  bool inside_nonzero = false;
  for (int h = 0; h < 12; ++h)
    for (int w = 0; w < 12; ++w)
      for (int d = 0; d < 12; ++d) {
        const int r = std::max({std::abs(h - 6), std::abs(w - 5), std::abs(d - 7)});
        for (int c = 0; c < 4; ++c) {
          const double v = f->value[f->value.offset({h, w, d, c})];
          if (r > 2) ASSERT_EQ(v, 0.0) << h << "," << w << "," << d;
          else if (v != 0.0) inside_nonzero = true;
        }
      }
  EXPECT_TRUE(inside_nonzero);
}

TEST(Embed, TranslationEquivariance) {
  ParameterStore<double> store;
  Rng rng(3);
  auto emb = VoxelEmbedder<double>::create(store, "embed", 3, rng);
  VoxelGrid a({12, 12, 12}, 1.0, {0, 0, 0}), b = a;
  const int pts[][3]{{4, 4, 4}, {5, 6, 4}, {6, 6, 6}, {4, 7, 5}};
  for (auto& p : pts) {
    a.occupancy[a.index(p[0], p[1], p[2])] = 1;
    b.occupancy[b.index(p[0] + 1, p[1], p[2])] = 1;
  }
  Graph<double> g(false);
  auto fa = embed_voxels(g, a, emb), fb = embed_voxels(g, b, emb);
  for (int h = 0; h < 11; ++h)
    for (int w = 0; w < 12; ++w)
      for (int d = 0; d < 12; ++d)
        for (int c = 0; c < 3; ++c)
          ASSERT_DOUBLE_EQ(fa->value[fa->value.offset({h, w, d, c})], fb->value[fb->value.offset({h + 1, w, d, c})]);
}

TEST(Project, ConstantWithIdentity) {
  ParameterStore<double> store;
  Rng rng(4);
  const std::array<int, 3> dims{4, 4, 4};
  auto proj = PlaneProjector<double>::create(store, "proj", dims, 4, 3, 3, rng);
  for (auto& phi : proj.phi) {
    std::fill(phi.weight->value.values.begin(), phi.weight->value.values.end(), 0.0);
    for (int i = 0; i < 3; ++i) phi.weight->value[i * 3 + i] = 1.0;
  }
  Graph<double> g(false);
  auto fv = nn::constant(RealField<double>({4, 4, 4, 3}, 2.5));
  auto planes = project_triplane(g, fv, proj);
  for (const auto& p : planes.planes) {
    EXPECT_EQ(p->shape(), (Shape{4, 4, 3}));
    for (double v : p->value.values) EXPECT_DOUBLE_EQ(v, 2.5);
  }
}

TEST(Project, WithinGroupPermutationInvariance) {
  ParameterStore<double> store;
  Rng rng(5);
  const std::array<int, 3> dims{8, 8, 8};
  auto proj = PlaneProjector<double>::create(store, "proj", dims, 4, 2, 5, rng);
  auto a = random_volume({8, 8, 8, 2}, 6);
  auto b = a;
  // reverse the order of voxels inside every D-group
  for (int h = 0; h < 8; ++h)
    for (int w = 0; w < 8; ++w)
      for (int d = 0; d < 8; ++d)
        for (int c = 0; c < 2; ++c) {
          const int dd = (d / 4) * 4 + (3 - d % 4);
          b[b.offset({h, w, dd, c})] = a[a.offset({h, w, d, c})];
        }
  Graph<double> g(false);
  auto pa = project_plane(g, nn::constant(a), 0, proj);
  auto pb = project_plane(g, nn::constant(b), 0, proj);
  EXPECT_LT(nn::max_abs_diff(pa->value, pb->value), 1e-12);
}

TEST(Project, LoopOracle) {
  ParameterStore<double> store;
  Rng rng(7);
  const std::array<int, 3> dims{8, 8, 8};
  const int C = 4, C2 = 5, Ng = 4;
  auto proj = PlaneProjector<double>::create(store, "proj", dims, Ng, C, C2, rng);
  for (auto& phi : proj.phi)
    for (auto& v : phi.bias->value.values) v = rng.uniform(-1, 1);
  auto fv = random_volume({8, 8, 8, C}, 8);
  Graph<double> g(false);
  auto planes = project_triplane(g, nn::constant(fv), proj);
  for (int p = 0; p < 3; ++p) {
    const int axis = kDroppedAxis[p];
    const auto& W = proj.phi[p].weight->value;
    const auto& B = proj.phi[p].bias->value;
    for (int a = 0; a < 8; ++a)
      for (int b = 0; b < 8; ++b)
        for (int o = 0; o < C2; ++o) {
          double acc = B[o];
          for (int grp = 0; grp < 8 / Ng; ++grp)
            for (int c = 0; c < C; ++c) {
              double mean = 0;
              for (int k = 0; k < Ng; ++k) {
                int idx[3];
                int rest[2]{a, b};
                for (int ax = 0, r = 0; ax < 3; ++ax) idx[ax] = ax == axis ? grp * Ng + k : rest[r++];
                mean += fv[fv.offset({idx[0], idx[1], idx[2], c})] / Ng;
              }
              acc += mean * W[(grp * C + c) * C2 + o];
            }
          ASSERT_NEAR(planes.planes[p]->value[(a * 8 + b) * C2 + o], acc, 1e-6);
        }
  }
}

TEST(Project, IndivisibleAxis) {
  Graph<double> g(false);
  EXPECT_THROW(group_pool_rearrange(g, nn::constant(RealField<double>({6, 8, 8, 1})), 0, 4), std::invalid_argument);
}

TEST(BackProject, ZeroPlanesZeroVolume) {
  ParameterStore<double> store;
  Rng rng(9);
  const std::array<int, 3> dims{8, 8, 4};
  auto bp = BackProjector<double>::create(store, "bp", dims, 4, 3, 2, rng);
  TriplaneSet<double> t;
  t.planes = {nn::constant(RealField<double>({8, 8, 2})), nn::constant(RealField<double>({8, 4, 2})),
              nn::constant(RealField<double>({8, 4, 2}))};
  Graph<double> g(false);
  auto v = back_project(g, t, bp);
  EXPECT_EQ(v->shape(), (Shape{8, 8, 4, 3}));
  EXPECT_EQ(v->value.max_abs(), 0.0);
}

TEST(BackProject, SingleCellColumn) {
  ParameterStore<double> store;
  Rng rng(10);
  const std::array<int, 3> dims{8, 8, 4};
  auto bp = BackProjector<double>::create(store, "bp", dims, 4, 3, 2, rng);
  RealField<double> hw({8, 8, 2});
  hw[hw.offset({3, 5, 1})] = 1.7;
  Graph<double> g(false);
  auto v = bp.plane_volume(g, nn::constant(hw), 0);
  for (int h = 0; h < 8; ++h)
    for (int w = 0; w < 8; ++w)
      for (int d = 0; d < 4; ++d)
        for (int c = 0; c < 3; ++c) {
          const double x = v->value[v->value.offset({h, w, d, c})];
          if (h != 3 || w != 5) ASSERT_EQ(x, 0.0);
          else ASSERT_DOUBLE_EQ(x, v->value[v->value.offset({3, 5, 0, c})]);
        }
  EXPECT_GT(v->value.max_abs(), 0.0);
}

TEST(BackProject, LoopOracleAndLocality) {
  ParameterStore<double> store;
  Rng rng(11);
  const std::array<int, 3> dims{8, 8, 8};
  const int C1 = 3, C2 = 4, Ng = 4;
  auto bp = BackProjector<double>::create(store, "bp", dims, Ng, C1, C2, rng);
  for (auto& phi : bp.phi)
    for (auto& v : phi.bias->value.values) v = rng.uniform(-1, 1);
  TriplaneSet<double> t;
  for (int p = 0; p < 3; ++p) t.planes[p] = nn::constant(random_volume({8, 8, C2}, 20 + p));
  Graph<double> g(false);
  auto v = back_project(g, t, bp);
  auto cell = [&](int p, int a, int b, int slot, int c) {
    const auto& W = bp.phi[p].weight->value;
    const int oc = 8 / Ng * C1;
    double acc = bp.phi[p].bias->value[slot * C1 + c];
    for (int k = 0; k < C2; ++k) acc += t.planes[p]->value[(a * 8 + b) * C2 + k] * W[k * oc + slot * C1 + c];
    return acc;
  };
  for (int h = 0; h < 8; ++h)
    for (int w = 0; w < 8; ++w)
      for (int d = 0; d < 8; ++d)
        for (int c = 0; c < C1; ++c) {
          const double want = cell(0, h, w, d / Ng, c) + cell(1, h, d, w / Ng, c) + cell(2, w, d, h / Ng, c);
          ASSERT_NEAR(v->value[v->value.offset({h, w, d, c})], want, 1e-6);
        }
  // perturbing one plane cell changes only voxels indexing it
  auto t2 = t;
  t2.planes[1] = nn::constant(t.planes[1]->value);
  t2.planes[1]->value[(2 * 8 + 6) * C2 + 1] += 1.0;
  auto v2 = back_project(g, t2, bp);
  for (int h = 0; h < 8; ++h)
    for (int w = 0; w < 8; ++w)
      for (int d = 0; d < 8; ++d)
        for (int c = 0; c < C1; ++c) {
          const bool touched = h == 2 && d == 6;
          const double diff = v2->value[v->value.offset({h, w, d, c})] - v->value[v->value.offset({h, w, d, c})];
          if (!touched) {
            ASSERT_EQ(diff, 0.0);
          }
        }
}

TEST(BackProject, InconsistentShapes) {
  ParameterStore<double> store;
  Rng rng(12);
  auto bp = BackProjector<double>::create(store, "bp", {8, 8, 4}, 4, 3, 2, rng);
  TriplaneSet<double> t;
  t.planes = {nn::constant(RealField<double>({8, 8, 2})), nn::constant(RealField<double>({8, 8, 2})),
              nn::constant(RealField<double>({8, 4, 2}))};
  Graph<double> g(false);
  EXPECT_THROW(back_project(g, t, bp), std::invalid_argument);
}

TEST(Positional, TableAndOrigin) {
  const int F = 3;
  auto pe = nn::positional_embedding<double>(8, 8, 8, F);
  ASSERT_EQ(pe.shape, (Shape{8, 8, 8, 6 * F}));
  for (int k = 0; k < F; ++k) {
    EXPECT_EQ(pe[2 * k], 0.0);
    EXPECT_EQ(pe[2 * k + 1], 1.0);
  }
  for (int h = 0; h < 8; ++h)
    for (int w = 0; w < 8; ++w)
      for (int d = 0; d < 8; ++d) {
        const int idx[3]{h, w, d};
        for (int a = 0; a < 3; ++a)
          for (int k = 0; k < F; ++k) {
            const double arg = std::numbers::pi * std::pow(2.0, k) * idx[a] / 8.0;
            const auto base = pe.offset({h, w, d, (a * F + k) * 2});
            ASSERT_NEAR(pe[base], std::sin(arg), 1e-12);
            ASSERT_NEAR(pe[base + 1], std::cos(arg), 1e-12);
          }
      }
}

TEST(Positional, ZeroFrequenciesIsPureConv) {
  ParameterStore<double> store;
  Rng rng(13);
  auto fusion = PositionalFusion<double>::create(store, "fuse", 3, 0, rng);
  auto fv = nn::constant(random_volume({4, 4, 4, 3}, 14));
  Graph<double> g(false);
  auto out = fuse_positional(g, fv, fusion);
  auto manual = fusion.block(g, nn::silu(g, fusion.mix(g, fv)));
  EXPECT_EQ(out->value.values, manual->value.values);
}

TEST(Triplane, StorageRatio) {
  EXPECT_NEAR(storage_ratio({128, 128, 32}, 8, 8), (2.0 * 128 * 32 + 128 * 128) / (128.0 * 128 * 32), 1e-15);
  EXPECT_NEAR(storage_ratio({128, 128, 32}, 8, 8), 0.0469, 1e-4);
  ParameterStore<float> store;
  Rng rng(15);
  const std::array<int, 3> dims{16, 16, 8};
  auto proj = PlaneProjector<float>::create(store, "p", dims, 4, 3, 5, rng);
  Graph<float> g(false);
  auto fv = nn::constant(RealField<float>({16, 16, 8, 3}));
  auto planes = project_triplane(g, fv, proj);
  EXPECT_DOUBLE_EQ(static_cast<double>(planes.element_count()) / fv->size(), storage_ratio(dims, 3, 5));
}

TEST(Triplane, GradChecks) {
  auto x = nn::leaf(random_volume({8, 4, 8, 2}, 30));
  for (int axis = 0; axis < 3; ++axis) {
    const int dims[3]{8, 4, 8};
    Shape ps{8, 4, 8};
    ps.erase(ps.begin() + axis);
    ps.push_back(dims[axis] / 4 * 2);
    const auto w = random_weights(shape_product(ps), 31 + axis);
    auto rep = nn::grad_check(
        [&](Graph<double>& g) { return nn::dot_fixed(g, group_pool_rearrange(g, x, axis, 4), w); }, {x});
    EXPECT_LT(rep.max_relative_error, 1e-6) << rep.worst;
  }
  auto plane = nn::leaf(random_volume({8, 8, 2 * 3}, 40));
  const auto w = random_weights(8 * 8 * 8 * 3, 41);
  auto rep = nn::grad_check(
      [&](Graph<double>& g) { return nn::dot_fixed(g, expand_tile(g, plane, 1, 4, {8, 8, 8}, 3), w); }, {plane});
  EXPECT_LT(rep.max_relative_error, 1e-6) << rep.worst;

  ParameterStore<double> store;
  Rng rng(42);
  auto fusion = PositionalFusion<double>::create(store, "fuse", 2, 1, rng);
  auto fv = nn::leaf(random_volume({4, 4, 4, 2}, 43));
  const auto w2 = random_weights(4 * 4 * 4 * 2, 44);
  std::vector<nn::Var<double>> inputs{fv};
  for (auto& p : store.all()) inputs.push_back(p.var);
  rep = nn::grad_check([&](Graph<double>& g) { return nn::dot_fixed(g, fuse_positional(g, fv, fusion), w2); }, inputs);
  EXPECT_LT(rep.max_relative_error, 1e-4) << rep.worst;
}
