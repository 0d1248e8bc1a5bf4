#include <gtest/gtest.h>

#include <cmath>
#include <complex>
#include <numbers>

#include "flatec/nn/grad_check.hpp"
#include "flatec/spectral_codec.hpp"

using namespace flatec;
using nn::Graph;

namespace {

RealField<double> random_field(Shape s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  RealField<double> f(std::move(s));
  for (auto& v : f.values) v = rng.uniform(-scale, scale);
  return f;
}

std::vector<double> random_weights(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(n);
  for (auto& v : w) v = rng.uniform(-1, 1);
  return w;
}

Var<double> scalar(double v) { return nn::constant(RealField<double>({1}, v)); }

/// Direct-summation centred Gaussian filtering of every channel of a plane.
RealField<double> brute_gaussian(const RealField<double>& x, double gain, double sigma, bool complement) {
  const int R = x.dim(0), C = x.dim(1), ch = x.dim(2);
  RealField<double> out(x.shape);
  const double norm = 1.0 / (R * C);
  for (int c = 0; c < ch; ++c)
    for (int p = 0; p < R; ++p)
      for (int q = 0; q < C; ++q) {
        std::complex<double> acc = 0;
        for (int u = 0; u < R; ++u)
          for (int v = 0; v < C; ++v) {
            // centred bin (u, v) holds frequency (u - R/2, v - C/2)
            const int fu = u - R / 2, fv = v - C / 2;
            const double gm = std::exp(-(double(fu) * fu + double(fv) * fv) / (2 * sigma * sigma));
            const double m = complement ? 1 - gain * gm : gain * gm;
            std::complex<double> X = 0;
            for (int a = 0; a < R; ++a)
              for (int b = 0; b < C; ++b)
                X += x[x.offset({a, b, c})] *
                     std::polar(1.0, -2 * std::numbers::pi * (double(fu) * a / R + double(fv) * b / C));
            acc += m * X * std::polar(1.0, 2 * std::numbers::pi * (double(fu) * p / R + double(fv) * q / C));
          }
        out[out.offset({p, q, c})] = acc.real() * norm;
      }
  return out;
}

std::vector<Var<double>> all_params(const ParameterStore<double>& store) {
  std::vector<Var<double>> v;
  for (const auto& p : store.all()) v.push_back(p.var);
  return v;
}

void randomize(ParameterStore<double>& store, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  for (auto& p : store.all())
    for (auto& v : p.var->value.values) v += rng.uniform(-scale, scale);
}

}  // namespace

TEST(ScalePredictor, ZeroInputClosedForm) {
  ParameterStore<double> store;
  Rng rng(1);
  auto sp = ScalePredictor<double>::create(store, "theta", 4, 4, rng);
  Graph<double> g(false);
  auto [scale, sigma] = scale_predictor(g, nn::constant(RealField<double>({8, 8, 4})), sp);
  EXPECT_NEAR(scale->value[0], std::log(2.0) + 0.1, 1e-12);
  EXPECT_NEAR(sigma->value[0], std::log(2.0) + 0.5, 1e-12);
  EXPECT_NEAR(scale->value[0], 0.793, 1e-3);
  EXPECT_NEAR(sigma->value[0], 1.193, 1e-3);
}

TEST(ScalePredictor, PositiveAndGradient) {
  ParameterStore<double> store;
  Rng rng(2);
  auto sp = ScalePredictor<double>::create(store, "theta", 3, 4, rng);
  for (std::uint64_t s = 0; s < 20; ++s) {
    Graph<double> g(false);
    auto [scale, sigma] = scale_predictor(g, nn::constant(random_field({6, 6, 3}, s, 50.0)), sp);
    EXPECT_GE(scale->value[0], 0.1);
    EXPECT_GE(sigma->value[0], 0.5);
  }
  auto x = nn::leaf(random_field({6, 6, 3}, 99));
  auto inputs = all_params(store);
  inputs.push_back(x);
  auto rep = nn::grad_check(
      [&](Graph<double>& g) {
        auto [scale, sigma] = scale_predictor(g, x, sp);
        return nn::add(g, nn::scale(g, scale, 0.7), nn::scale(g, sigma, -1.3));
      },
      inputs);
  EXPECT_LT(rep.max_relative_error, 1e-4) << rep.worst;
}

TEST(FreqSplit, ConstantPassesLow) {
  Graph<double> g(false);
  auto x = nn::constant(RealField<double>({8, 8, 2}, 3.0));
  auto [low, high] = freq_split(g, x, scalar(1.0), scalar(1.0));
  EXPECT_LT(nn::max_abs_diff(low->value, x->value), 1e-12);
  EXPECT_LT(high->value.max_abs(), 1e-12);
}

TEST(FreqSplit, WideSigmaPassesEverything) {
  Graph<double> g(false);
  auto x = nn::constant(random_field({8, 8, 2}, 3));
  auto [low, high] = freq_split(g, x, scalar(1.0), scalar(1e6));
  EXPECT_LT(nn::max_abs_diff(low->value, x->value), 1e-9);
}

TEST(FreqSplit, CheckerboardIsAllHigh) {
  RealField<double> cb({16, 16, 1});
  for (int p = 0; p < 16; ++p)
    for (int q = 0; q < 16; ++q) cb[p * 16 + q] = (p + q) % 2 ? -1.0 : 1.0;
  Graph<double> g(false);
  auto [low, high] = freq_split(g, nn::constant(cb), scalar(1.0), scalar(1.0));
  EXPECT_LT(low->value.max_abs(), 1e-3);
  EXPECT_LT(nn::max_abs_diff(high->value, cb), 1e-3);
  EXPECT_LT(nn::max_abs_diff(low->value, brute_gaussian(cb, 1.0, 1.0, false)), 1e-9);
}

TEST(FreqSplit, MatchesBruteForceAndPartitions) {
  auto x = random_field({6, 8, 2}, 4);
  Graph<double> g(false);
  auto [low, high] = freq_split(g, nn::constant(x), scalar(0.8), scalar(1.7));
  EXPECT_LT(nn::max_abs_diff(low->value, brute_gaussian(x, 0.8, 1.7, false)), 1e-9);
  EXPECT_LT(nn::max_abs_diff(high->value, brute_gaussian(x, 0.8, 1.7, true)), 1e-9);
  for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(low->value[i] + high->value[i], x[i], 1e-12);
}

TEST(FdBlock, ZeroInZeroOut) {
  ParameterStore<double> store;
  Rng rng(5);
  auto b = FdBlock<double>::create(store, "fd", 4, 4, 0.0, rng);
  Graph<double> g(false);
  auto z = nn::constant(RealField<double>({8, 8, 4}));
  auto [e, f] = fd_block(g, {z, z, 0}, b);
  EXPECT_EQ(e->value.max_abs(), 0.0);
  EXPECT_EQ(f->value.max_abs(), 0.0);
}

TEST(FdBlock, IdentityCompositionOracle) {
  ParameterStore<double> store;
  Rng rng(6);
  auto b = FdBlock<double>::create(store, "fd", 3, 3, 0.0, rng);
  std::fill(b.core.weight->value.values.begin(), b.core.weight->value.values.end(), 0.0);
  auto x = random_field({8, 8, 3}, 7);
  Graph<double> g(false);
  auto [e, f] = fd_block(g, {nn::constant(x), nn::constant(RealField<double>({8, 8, 3})), 0}, b);
  auto [scale, sigma] = scale_predictor(g, nn::constant(x), b.theta);
  const auto low = brute_gaussian(x, scale->value[0], sigma->value[0], false);
  auto ln = [](const std::vector<double>& v) {
    std::vector<double> out(v.size());
    for (std::size_t r = 0; r < v.size() / 3; ++r) {
      double m = 0, s = 0;
      for (int k = 0; k < 3; ++k) m += v[r * 3 + k] / 3;
      for (int k = 0; k < 3; ++k) s += (v[r * 3 + k] - m) * (v[r * 3 + k] - m) / 3;
      for (int k = 0; k < 3; ++k) out[r * 3 + k] = (v[r * 3 + k] - m) / std::sqrt(s + 1e-5);
    }
    return out;
  };
  auto inner = ln(low.values);
  for (std::size_t i = 0; i < inner.size(); ++i) inner[i] += x[i];
  const auto want = ln(inner);
  for (std::size_t i = 0; i < want.size(); ++i) ASSERT_NEAR(e->value[i], want[i], 1e-6);
}

TEST(FdBlock, GradCheck) {
  for (bool training : {false, true}) {
    ParameterStore<double> store;
    Rng rng(8);
    auto b = FdBlock<double>::create(store, "fd", 3, 2, training ? 0.2 : 0.0, rng);
    randomize(store, 9);
    auto x = nn::leaf(random_field({8, 8, 3}, 10));
    auto h = nn::leaf(random_field({8, 8, 2}, 11));
    auto inputs = all_params(store);
    inputs.push_back(x);
    inputs.push_back(h);
    const auto w1 = random_weights(8 * 8 * 3, 12), w2 = random_weights(8 * 8 * 2, 13);
    nn::GradCheckOptions opt;
    opt.training = training;
    opt.seed = 77;
    auto rep = nn::grad_check(
        [&](Graph<double>& g) {
          auto [e, f] = fd_block(g, {x, h, 0}, b);
          return nn::add(g, nn::dot_fixed(g, e, w1), nn::dot_fixed(g, f, w2));
        },
        inputs, opt);
    EXPECT_LT(rep.max_relative_error, 1e-4) << rep.worst;
    EXPECT_TRUE(rep.nan_locations.empty());
  }
}

TEST(DsBlock, ShapesZeroAndImpulse) {
  ParameterStore<double> store;
  Rng rng(14);
  auto b = DsBlock<double>::create(store, "ds", 2, 5, rng);
  Graph<double> g(false);
  auto z = nn::constant(RealField<double>({16, 16, 2}));
  auto st = ds_block(g, z, z, b, 0);
  EXPECT_EQ(st.base->shape(), (Shape{8, 8, 5}));
  EXPECT_EQ(st.hf_prior->shape(), (Shape{8, 8, 5}));
  EXPECT_EQ(st.stage, 1);
  EXPECT_EQ(st.base->value.max_abs(), 0.0);

  RealField<double> imp({16, 16, 2});
  imp[imp.offset({6, 9, 1})] = 1.0;
  st = ds_block(g, nn::constant(imp), z, b, 0);
  const auto& W = b.base.weight->value;
  for (int oy = 0; oy < 8; ++oy)
    for (int ox = 0; ox < 8; ++ox)
      for (int o = 0; o < 5; ++o) {
        double want = 0;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx)
            if (oy * 2 - 1 + ky == 6 && ox * 2 - 1 + kx == 9) want += W[W.offset({ky, kx, 1, o})];
        ASSERT_NEAR(st.base->value[st.base->value.offset({oy, ox, o})], want, 1e-12);
      }
  EXPECT_THROW(ds_block(g, nn::constant(RealField<double>({15, 16, 2})), z, b, 0), std::invalid_argument);
}

TEST(Encoder, ZeroStagesIsIdentity) {
  ParameterStore<double> store;
  Rng rng(15);
  auto enc = PlaneEncoder<double>::create(store, "enc", {4}, 0.0, rng);
  auto x = nn::constant(random_field({8, 8, 4}, 16));
  Graph<double> g(false);
  auto lat = encode_plane(g, x, enc);
  EXPECT_EQ(lat.content->value.values, x->value.values);
  EXPECT_EQ(lat.highfreq->value.max_abs(), 0.0);
}

TEST(Encoder, ShapeAndComposition) {
  ParameterStore<double> store;
  Rng rng(17);
  auto enc = PlaneEncoder<double>::create(store, "enc", {2, 4, 8}, 0.1, rng);
  auto x = nn::constant(random_field({32, 32, 2}, 18));
  Graph<double> g(false);
  auto lat = encode_plane(g, x, enc);
  EXPECT_EQ(lat.content->shape(), (Shape{8, 8, 8}));
  EXPECT_EQ(lat.highfreq->shape(), (Shape{8, 8, 8}));
  StageState<double> st{x, nn::constant(RealField<double>({32, 32, 2})), 0};
  for (int s = 0; s < 2; ++s) {
    auto [e, f] = fd_block(g, st, enc.fd[s]);
    st = ds_block(g, e, f, enc.ds[s], s);
  }
  EXPECT_EQ(st.base->value.values, lat.content->value.values);
  EXPECT_EQ(st.hf_prior->value.values, lat.highfreq->value.values);
  EXPECT_THROW(encode_plane(g, nn::constant(random_field({10, 32, 2}, 1)), enc), std::invalid_argument);
}

TEST(AlignHf, Cases) {
  Graph<double> g(false);
  auto base = random_field({8, 6, 2}, 19), hf = random_field({8, 6, 2}, 20);
  auto zero = RealField<double>({8, 6, 2});
  auto sigma = scalar(1.3);
  EXPECT_EQ(align_hf(g, nn::constant(base), nn::constant(zero), sigma)->value.max_abs(), 0.0);
  EXPECT_LT(nn::max_abs_diff(align_hf(g, nn::constant(zero), nn::constant(hf), sigma)->value, hf), 1e-15);
  auto out = align_hf(g, nn::constant(base), nn::constant(hf), sigma);
  const auto low = brute_gaussian(base, 1.0, 1.3, false);
  for (std::size_t i = 0; i < hf.size(); ++i) ASSERT_NEAR(out->value[i], hf[i] + hf[i] * low[i], 1e-6);
  EXPECT_THROW(align_hf(g, nn::constant(base), nn::constant(RealField<double>({8, 8, 2})), sigma),
               std::invalid_argument);
}

TEST(AlignHf, GradCheck) {
  auto base = nn::leaf(random_field({8, 8, 2}, 21));
  auto hf = nn::leaf(random_field({8, 8, 2}, 22));
  auto sigma = nn::leaf(RealField<double>({1}, 1.4));
  const auto w = random_weights(128, 23);
  auto rep = nn::grad_check([&](Graph<double>& g) { return nn::dot_fixed(g, align_hf(g, base, hf, sigma), w); },
                            {base, hf, sigma});
  EXPECT_LT(rep.max_relative_error, 1e-4) << rep.worst;
}

TEST(FmBlock, ZeroAndNoHf) {
  ParameterStore<double> store;
  Rng rng(24);
  auto b = FmBlock<double>::create(store, "fm", 3, rng);
  Graph<double> g(false);
  auto z = nn::constant(RealField<double>({8, 8, 3}));
  EXPECT_EQ(fm_block(g, z, z, b).first->value.max_abs(), 0.0);
  auto x = nn::constant(random_field({8, 8, 3}, 25));
  auto [r, aligned] = fm_block(g, x, z, b);
  auto want = b.ln_out(g, b.cb(g, x));
  EXPECT_EQ(r->value.values, want->value.values);
}

TEST(FmBlock, GradCheck) {
  ParameterStore<double> store;
  Rng rng(26);
  auto b = FmBlock<double>::create(store, "fm", 3, rng);
  randomize(store, 27);
  auto base = nn::leaf(random_field({8, 8, 3}, 28));
  auto hf = nn::leaf(random_field({8, 8, 3}, 29));
  auto inputs = all_params(store);
  inputs.push_back(base);
  inputs.push_back(hf);
  const auto w1 = random_weights(192, 30), w2 = random_weights(192, 31);
  auto rep = nn::grad_check(
      [&](Graph<double>& g) {
        auto [r, a] = fm_block(g, base, hf, b);
        return nn::add(g, nn::dot_fixed(g, r, w1), nn::dot_fixed(g, a, w2));
      },
      inputs);
  EXPECT_LT(rep.max_relative_error, 1e-4) << rep.worst;
}

TEST(Decoder, ZeroStagesAndShapes) {
  ParameterStore<double> store;
  Rng rng(32);
  auto d0 = PlaneDecoder<double>::create(store, "d0", {3}, rng);
  Graph<double> g(false);
  auto x = nn::constant(random_field({8, 8, 3}, 33)), h = nn::constant(random_field({8, 8, 3}, 34));
  EXPECT_EQ(decode_plane(g, {x, h}, d0)->value.values, fm_block(g, x, h, d0.fm[0]).first->value.values);

  auto d2 = PlaneDecoder<double>::create(store, "d2", {2, 4, 8}, rng);
  auto c = nn::constant(random_field({8, 8, 8}, 35)), hh = nn::constant(random_field({8, 8, 8}, 36));
  auto out = decode_plane(g, {c, hh}, d2);
  EXPECT_EQ(out->shape(), (Shape{32, 32, 2}));
  auto [r2, a2] = fm_block(g, c, hh, d2.fm[2]);
  auto [r1, a1] = fm_block(g, d2.us[1].base(g, r2), d2.us[1].hf(g, a2), d2.fm[1]);
  auto [r0, a0] = fm_block(g, d2.us[0].base(g, r1), d2.us[0].hf(g, a1), d2.fm[0]);
  EXPECT_EQ(out->value.values, r0->value.values);
  EXPECT_THROW(decode_plane(g, {c, nn::constant(random_field({8, 8, 4}, 1))}, d2), std::invalid_argument);
}

TEST(Codec, EvalDeterminism) {
  ParameterStore<float> store;
  Rng rng(37);
  const std::array<int, 3> dims{16, 16, 8};
  auto enc = TriplaneEncoder<float>::create(store, "enc", {4, 8}, 0.1, rng);
  auto dec = TriplaneDecoder<float>::create(store, "dec", {4, 8}, rng);
  TriplaneSet<float> t;
  Rng data(38);
  for (int p = 0; p < 3; ++p) {
    const auto pd = plane_dims(dims, p);
    RealField<float> f({pd[0], pd[1], 4});
    for (auto& v : f.values) v = static_cast<float>(data.uniform(-1, 1));
    t.planes[p] = nn::constant(f);
  }
  auto run = [&] {
    Graph<float> g(false, false, 5);
    return decode_triplane(g, encode_triplane(g, t, enc), dec);
  };
  auto a = run(), b = run();
  for (int p = 0; p < 3; ++p) {
    EXPECT_EQ(a.planes[p]->shape(), t.planes[p]->shape());
    EXPECT_EQ(a.planes[p]->value.values, b.planes[p]->value.values);
    EXPECT_TRUE(a.planes[p]->value.all_finite());
  }
}

TEST(Codec, SpectralPartitionRandomPlanes) {
  Rng rng(39);
  for (int trial = 0; trial < 30; ++trial) {
    const int r = 8 + static_cast<int>(rng.below(25)), c = 8 + static_cast<int>(rng.below(25));
    auto x = random_field({r, c, 3}, 100 + trial, 5.0);
    Graph<double> g(false);
    auto [low, high] = freq_split(g, nn::constant(x), scalar(rng.uniform(0.1, 2.0)), scalar(rng.uniform(0.5, 6)));
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(low->value[i] + high->value[i] - x[i]));
    EXPECT_LT(worst, 1e-5 * x.max_abs());
  }
}
