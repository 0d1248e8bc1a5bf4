#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "flatec/nn/grad_check.hpp"
#include "flatec/refinement.hpp"

using namespace flatec;
using nn::Graph;
using nn::ParameterStore;

namespace {

RealField<double> random_field(nn::Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  RealField<double> f(std::move(s));
  for (auto& v : f.values) v = rng.uniform(-scale, scale);
  return f;
}

/// Spatial kernel of a centred frequency filter after conjugate-symmetric averaging,
/// by direct summation: K(j) = (1/N) sum_k a(k) exp(2 pi i k.j / w).
std::vector<double> kernel_of(const RealField<double>& re, const RealField<double>& im, int ch) {
  const int w = re.dim(0), C = re.dim(3);
  const int half = w / 2;
  auto at = [&](const RealField<double>& f, int a, int b, int c) {
    return f[((static_cast<std::size_t>(a) * w + b) * w + c) * C + ch];
  };
  auto mirror = [&](int s) { return (w - s) % w; };
  std::vector<double> k(static_cast<std::size_t>(w) * w * w, 0.0);
  const double n = static_cast<double>(w) * w * w;
  for (int ja = 0; ja < w; ++ja)
    for (int jb = 0; jb < w; ++jb)
      for (int jc = 0; jc < w; ++jc) {
        std::complex<double> acc = 0;
        for (int a = 0; a < w; ++a)
          for (int b = 0; b < w; ++b)
            for (int c = 0; c < w; ++c) {
              const double r = 0.5 * (at(re, a, b, c) + at(re, mirror(a), mirror(b), mirror(c)));
              const double i = 0.5 * (at(im, a, b, c) - at(im, mirror(a), mirror(b), mirror(c)));
              const double phase =
                  2.0 * std::numbers::pi * ((a - half) * ja + (b - half) * jb + (c - half) * jc) / w;
              acc += std::complex<double>(r, i) * std::polar(1.0, phase);
            }
        k[(static_cast<std::size_t>(ja) * w + jb) * w + jc] = acc.real() / n;
      }
  return k;
}

/// x + per-window circular convolution of every channel with its kernel.
RealField<double> windowed_convolution(const RealField<double>& x, const RealField<double>& re,
                                       const RealField<double>& im) {
  const int w = re.dim(0), C = x.dim(3);
  const int H = x.dim(0), W = x.dim(1), D = x.dim(2);
  RealField<double> out = x;
  for (int ch = 0; ch < C; ++ch) {
    const auto k = kernel_of(re, im, ch);
    for (int h = 0; h < H; ++h)
      for (int v = 0; v < W; ++v)
        for (int d = 0; d < D; ++d) {
          const int bh = h / w * w, bw = v / w * w, bd = d / w * w;
          double acc = 0;
          for (int a = 0; a < w; ++a)
            for (int b = 0; b < w; ++b)
              for (int c = 0; c < w; ++c) {
                const int ja = ((h - bh) - a + w) % w, jb = ((v - bw) - b + w) % w, jc = ((d - bd) - c + w) % w;
                acc += x[((static_cast<std::size_t>(bh + a) * W + bw + b) * D + bd + c) * C + ch] *
                       k[(static_cast<std::size_t>(ja) * w + jb) * w + jc];
              }
          out[((static_cast<std::size_t>(h) * W + v) * D + d) * C + ch] += acc;
        }
  }
  return out;
}

double max_abs_diff(const RealField<double>& a, const RealField<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(LsaWindow, RuleAndDivisibility) {
  EXPECT_EQ(lsa_window({64, 64, 64}), 8);
  EXPECT_EQ(lsa_window({32, 32, 32}), 4);
  EXPECT_EQ(lsa_window({448, 448, 64}), 8);
  EXPECT_EQ(lsa_window({64, 64, 40}), 4);
  EXPECT_EQ(lsa_window({128, 128, 96}), 8);
  EXPECT_EQ(lsa_window({96, 96, 96}), 12);
  EXPECT_THROW(lsa_window({18, 18, 18}), std::invalid_argument);
}

TEST(LsaEnhance, UnitFilterDoubles) {
  ParameterStore<double> store;
  auto f = SpectrumFilter<double>::create(store, "f", 4, 2);
  std::fill(f.alpha_re->value.values.begin(), f.alpha_re->value.values.end(), 1.0);
  const auto x = random_field({8, 4, 8, 2}, 3);
  Graph<double> g(false, false, 0);
  auto y = lsa_enhance(g, nn::constant(x), f);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y->value[i], 2.0 * x[i], 1e-12);
}

TEST(LsaEnhance, ZeroFilterIsIdentity) {
  ParameterStore<double> store;
  auto f = SpectrumFilter<double>::create(store, "f", 4, 3);
  const auto x = random_field({4, 8, 4, 3}, 4);
  Graph<double> g(false, false, 0);
  auto y = lsa_enhance(g, nn::constant(x), f);
  EXPECT_EQ(y->value.values, x.values);
}

TEST(LsaEnhance, MatchesCircularConvolutionOracle) {
  for (int w : {4, 8}) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      ParameterStore<double> store;
      auto f = SpectrumFilter<double>::create(store, "f", w, 2);
      f.alpha_re->value = random_field({w, w, w, 2}, 10 + seed);
      f.alpha_im->value = random_field({w, w, w, 2}, 20 + seed);
      const auto x = random_field({2 * w, w, w, 2}, 30 + seed);
      Graph<double> g(false, false, 0);
      auto y = lsa_enhance(g, nn::constant(x), f);
      const auto oracle = windowed_convolution(x, f.alpha_re->value, f.alpha_im->value);
      EXPECT_LT(max_abs_diff(y->value, oracle), 1e-10) << "w=" << w << " seed=" << seed;
    }
  }
}

TEST(LsaEnhance, RejectsIndivisibleVolume) {
  ParameterStore<double> store;
  auto f = SpectrumFilter<double>::create(store, "f", 4, 1);
  Graph<double> g(false, false, 0);
  EXPECT_THROW(lsa_enhance(g, nn::constant(RealField<double>({6, 4, 4, 1})), f), std::invalid_argument);
}

TEST(LsaEnhance, GradientMatchesFiniteDifferences) {
  ParameterStore<double> store;
  auto f = SpectrumFilter<double>::create(store, "f", 4, 2);
  f.alpha_re->value = random_field({4, 4, 4, 2}, 1);
  f.alpha_im->value = random_field({4, 4, 4, 2}, 2);
  auto x = nn::leaf(random_field({8, 4, 4, 2}, 3));
  const auto w = random_field({8, 4, 4, 2}, 4).values;
  auto report = nn::grad_check(
      [&](Graph<double>& g) { return nn::dot_fixed(g, lsa_enhance(g, x, f), w); }, {x, f.alpha_re, f.alpha_im});
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst;
}

TEST(LsaBlock, ZeroInitFilterAndMlpKeepsInput) {
  ParameterStore<double> store;
  Rng rng(5);
  auto b = LsaBlock<double>::create(store, "b", 4, 3, rng);
  for (auto& l : b.mlp.layers) std::fill(l.weight->value.values.begin(), l.weight->value.values.end(), 0.0);
  const auto x = random_field({4, 4, 4, 3}, 6);
  Graph<double> g(false, false, 0);
  EXPECT_LT(max_abs_diff(b(g, nn::constant(x))->value, x), 1e-15);
}

TEST(OccupancyHead, ZeroFeaturesZeroBiasGivesHalf) {
  ParameterStore<double> store;
  Rng rng(7);
  auto head = OccupancyHead<double>::create(store, "occ", 4, rng);
  Graph<double> g(false, false, 0);
  auto p = occupancy_head(g, nn::constant(RealField<double>({4, 4, 4, 4})), head);
  ASSERT_EQ(p->shape(), (nn::Shape{4, 4, 4, 1}));
  for (double v : p->value.values) EXPECT_DOUBLE_EQ(v, 0.5);
}

TEST(OccupancyHead, ProbabilitiesBoundedAndDifferentiable) {
  ParameterStore<double> store;
  Rng rng(8);
  auto head = OccupancyHead<double>::create(store, "occ", 3, rng);
  auto x = nn::leaf(random_field({4, 4, 4, 3}, 9, 3.0));
  Graph<double> g(false, false, 0);
  const auto prob = occupancy_head(g, x, head);
  for (double v : prob->value.values) {
    EXPECT_GT(v, 0.0);
    EXPECT_LT(v, 1.0);
  }
  const auto w = random_field({4, 4, 4, 1}, 10).values;
  std::vector<Var<double>> inputs{x};
  for (const auto& p : store.all()) inputs.push_back(p.var);
  auto report = nn::grad_check([&](Graph<double>& gg) { return nn::dot_fixed(gg, occupancy_head(gg, x, head), w); },
                               inputs);
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst;
}

TEST(Binarize, ThresholdKeepsHighProbabilities) {
  RealField<double> p({2, 2, 2, 1}, 0.9);
  auto grid = binarize(p, 0.1, {0, 0, 0}, {BinarizeMode::threshold, 0.5, 0});
  EXPECT_EQ(grid.occupied_count(), 8u);
  p[3] = 0.2;
  p[5] = 0.5;
  grid = binarize(p, 0.1, {0, 0, 0}, {BinarizeMode::threshold, 0.5, 0});
  EXPECT_EQ(grid.occupied_count(), 7u);
  EXPECT_FALSE(grid.occupancy[3]);
  EXPECT_TRUE(grid.occupancy[5]);
}

TEST(Binarize, TopOneFindsUniqueMaximum) {
  auto p = random_field({4, 4, 4, 1}, 11);
  for (auto& v : p.values) v = 0.5 + 0.4 * v;
  p[37] = 0.999;
  auto grid = binarize(p, 0.2, {1, 2, 3}, {BinarizeMode::top_k, 0.5, 1});
  EXPECT_EQ(grid.occupied_count(), 1u);
  EXPECT_TRUE(grid.occupancy[37]);
  EXPECT_EQ(grid.voxel_size, 0.2);
  EXPECT_EQ(grid.origin, (Point3{1, 2, 3}));
}

TEST(Binarize, TopKTiesMatchSortOracle) {
  Rng rng(12);
  RealField<double> p({4, 4, 8, 1});
  for (auto& v : p.values) v = static_cast<double>(rng.below(4)) / 4.0;
  for (std::size_t k : {1u, 5u, 17u, 64u, 128u}) {
    auto grid = binarize(p, 0.1, {0, 0, 0}, {BinarizeMode::top_k, 0.5, k});
    std::vector<std::size_t> order(p.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
    std::vector<std::uint8_t> expected(p.size(), 0);
    for (std::size_t i = 0; i < k; ++i) expected[order[i]] = 1;
    EXPECT_EQ(grid.occupancy, expected) << "k=" << k;
    EXPECT_EQ(grid.occupied_count(), k);
  }
}

TEST(Binarize, RejectsInvalidArguments) {
  RealField<double> p({2, 2, 2, 1}, 0.5);
  EXPECT_THROW(binarize(p, 0.1, {0, 0, 0}, {BinarizeMode::top_k, 0.5, 9}), std::invalid_argument);
  EXPECT_THROW(binarize(p, 0.1, {0, 0, 0}, {BinarizeMode::top_k, 0.5, 0}), std::invalid_argument);
  EXPECT_THROW(binarize(p, 0.1, {0, 0, 0}, {BinarizeMode::threshold, 1.0, 0}), std::invalid_argument);
}

namespace {

VoxelGrid sparse_grid() {
  VoxelGrid grid({4, 4, 4}, 0.25, {-1.0, 0.5, 2.0});
  for (std::size_t i : {0u, 7u, 21u, 42u, 63u}) grid.occupancy[i] = 1;
  return grid;
}

}  // namespace

TEST(Uplift, ZeroInitRateOneGivesCentres) {
  ParameterStore<double> store;
  Rng rng(13);
  auto up = Uplifter<double>::create(store, "up", 3, 8, rng);
  const auto grid = sparse_grid();
  Graph<double> g(false, false, 0);
  auto pts = uplift(g, grid, nn::constant(random_field({4, 4, 4, 3}, 14)), 1, up);
  ASSERT_EQ(pts->shape(), (nn::Shape{5, 3}));
  const auto cloud = devoxelize(grid);
  for (std::size_t i = 0; i < cloud.points.size(); ++i)
    for (int a = 0; a < 3; ++a) EXPECT_EQ(pts->value[i * 3 + a], cloud.points[i][a]);
}

TEST(Uplift, CountAndVoxelBoundsForSeveralRates) {
  ParameterStore<double> store;
  Rng rng(15);
  auto up = Uplifter<double>::create(store, "up", 3, 8, rng);
  up.mlp.layers.back().weight->value = random_field({8, 3 * kMaxUpliftRate}, 16, 50.0);
  const auto grid = sparse_grid();
  const auto centres = devoxelize(grid);
  const auto features = nn::constant(random_field({4, 4, 4, 3}, 17, 5.0));
  for (int f : {1, 2, 4}) {
    Graph<double> g(false, false, 0);
    auto pts = uplift(g, grid, features, f, up);
    ASSERT_EQ(pts->value.dim(0), 5 * f);
    for (int i = 0; i < 5 * f; ++i)
      for (int a = 0; a < 3; ++a)
        EXPECT_LE(std::abs(pts->value[i * 3 + a] - centres.points[i / f][a]), grid.voxel_size / 2 + 1e-12);
  }
}

TEST(Uplift, RejectsBadRateAndEmptyGrid) {
  ParameterStore<double> store;
  Rng rng(18);
  auto up = Uplifter<double>::create(store, "up", 2, 4, rng);
  Graph<double> g(false, false, 0);
  auto features = nn::constant(RealField<double>({4, 4, 4, 2}));
  EXPECT_THROW(uplift(g, sparse_grid(), features, 0, up), std::invalid_argument);
  EXPECT_THROW(uplift(g, sparse_grid(), features, 9, up), std::invalid_argument);
  EXPECT_THROW(uplift(g, VoxelGrid({4, 4, 4}, 0.25, {0, 0, 0}), features, 1, up), DataError);
}

TEST(Uplift, GradientMatchesFiniteDifferences) {
  ParameterStore<double> store;
  Rng rng(19);
  auto up = Uplifter<double>::create(store, "up", 2, 4, rng);
  up.mlp.layers.back().weight->value = random_field({4, 3 * kMaxUpliftRate}, 20);
  auto features = nn::leaf(random_field({4, 4, 4, 2}, 21));
  const auto w = random_field({10, 3}, 22).values;
  std::vector<Var<double>> inputs{features};
  for (const auto& p : store.all()) inputs.push_back(p.var);
  auto report = nn::grad_check(
      [&](Graph<double>& g) { return nn::dot_fixed(g, uplift(g, sparse_grid(), features, 2, up), w); }, inputs);
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst;
}
