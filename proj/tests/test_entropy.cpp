#include <gtest/gtest.h>

#include <cmath>

#include "flatec/entropy.hpp"
#include "flatec/nn/grad_check.hpp"

using namespace flatec;
using nn::Graph;
using nn::ParameterStore;

namespace {

/// Density whose tanh factors are zero and biases zero, so c(x) = sigmoid(9 a^3 x)
/// with a = softplus(raw) for every matrix entry.
FactorizedDensity<double> logistic_density(ParameterStore<double>& store, int channels, double slope) {
  Rng rng(1);
  auto d = FactorizedDensity<double>::create(store, "d", channels, rng);
  const double a = std::cbrt(slope / 9.0);
  const double raw = std::log(std::expm1(a));
  for (auto& m : d.matrices) std::fill(m->value.values.begin(), m->value.values.end(), raw);
  for (auto& b : d.biases) std::fill(b->value.values.begin(), b->value.values.end(), 0.0);
  return d;
}

/// Random but well-conditioned density parameters.
FactorizedDensity<double> random_density(ParameterStore<double>& store, int channels, std::uint64_t seed) {
  Rng rng(seed);
  auto d = FactorizedDensity<double>::create(store, "d", channels, rng);
  for (auto& m : d.matrices)
    for (auto& v : m->value.values) v += rng.uniform(-0.5, 0.5);
  for (auto& b : d.biases)
    for (auto& v : b->value.values) v = rng.uniform(-1.0, 1.0);
  for (auto& f : d.factors)
    for (auto& v : f->value.values) v = rng.uniform(-1.0, 1.0);
  return d;
}

/// Inverse-CDF sample from channel c, by linear search over bins.
int sample(const FactorizedDensity<double>& d, int c, Rng& rng) {
  const double u = rng.uniform();
  for (int n = -300; n < 300; ++n)
    if (u < d.cdf(c, n + 0.5)) return n;
  return 300;
}

QuantizedStream random_stream(const FactorizedDensity<double>& d, int channels, Rng& rng) {
  QuantizedStream s;
  s.channels = channels;
  s.shapes = {{{4 + static_cast<int>(rng.below(5)), 4 + static_cast<int>(rng.below(5))},
               {4 + static_cast<int>(rng.below(5)), 4 + static_cast<int>(rng.below(5))},
               {4 + static_cast<int>(rng.below(5)), 4 + static_cast<int>(rng.below(5))}}};
  for (int p = 0; p < 3; ++p) {
    s.planes[p].resize(static_cast<std::size_t>(s.shapes[p][0]) * s.shapes[p][1] * channels);
    for (std::size_t i = 0; i < s.planes[p].size(); ++i)
      s.planes[p][i] = sample(d, p * channels + static_cast<int>(i % channels), rng);
  }
  return s;
}

}  // namespace

TEST(Quantize, TrainNoiseBoundedAndCentred) {
  RealField<double> zeros({1000000});
  Graph<double> g(false, true, 0);
  auto y = quantize_train(g, nn::constant(zeros), 9);
  double mean = 0.0;
  for (double v : y->value.values) {
    ASSERT_GE(v, -0.5);
    ASSERT_LT(v, 0.5);
    mean += v;
  }
  EXPECT_LT(std::abs(mean / 1e6), 1e-2);
}

TEST(Quantize, TrainDeterministicPerSeed) {
  RealField<double> x({64}, 0.3);
  Graph<double> g(false, true, 0);
  auto a = quantize_train(g, nn::constant(x), 5);
  auto b = quantize_train(g, nn::constant(x), 5);
  auto c = quantize_train(g, nn::constant(x), 6);
  EXPECT_EQ(a->value.values, b->value.values);
  EXPECT_NE(a->value.values, c->value.values);
}

TEST(Quantize, TrainGradientIsIdentity) {
  auto x = nn::leaf(RealField<double>({8}, 0.1));
  Graph<double> g(true, true, 0);
  auto s = nn::sum(g, quantize_train(g, x, 3));
  g.backward(s);
  for (double v : x->grad) EXPECT_DOUBLE_EQ(v, 1.0);
}

TEST(Quantize, EvalRoundsHalfAwayFromZero) {
  RealField<double> y({6});
  y.values = {0.5, -0.5, 1.4, -1.6, 2.5, 0.49};
  EXPECT_EQ(quantize_eval(y), (std::vector<std::int32_t>{1, -1, 1, -2, 3, 0}));
  Rng rng(4);
  RealField<double> r({1000});
  for (auto& v : r.values) v = rng.uniform(-50, 50);
  const auto q = quantize_eval(r);
  for (std::size_t i = 0; i < q.size(); ++i) EXPECT_LE(std::abs(r[i] - q[i]), 0.5);
}

TEST(Density, CdfMonotoneWithLimits) {
  ParameterStore<double> store;
  auto d = random_density(store, 4, 11);
  for (int c = 0; c < 4; ++c) {
    EXPECT_LT(d.cdf(c, -1e4), 1e-6);
    EXPECT_GT(d.cdf(c, 1e4), 1.0 - 1e-6);
    for (int n = -127; n <= 127; ++n) EXPECT_GT(d.cdf(c, n + 0.5), d.cdf(c, n - 0.5)) << c << " " << n;
  }
}

TEST(Rate, HalfLikelihoodGivesOneBitPerElement) {
  ParameterStore<double> store;
  // sigmoid(k/2) = 3/4 makes p(0) = 1/2.
  auto d = logistic_density(store, 1, 2.0 * std::log(3.0));
  EXPECT_NEAR(d.likelihood(0, 0), 0.5, 1e-12);
  Graph<double> g(false, false, 0);
  auto bits = rate_bits(g, nn::constant(RealField<double>({100, 1})), d);
  EXPECT_NEAR(bits->value[0], 100.0, 1e-9);
}

TEST(Rate, QuarterLikelihoodGivesTwoBits) {
  ParameterStore<double> store;
  // sigmoid(k/2) = 5/8 makes p(0) = 1/4.
  auto d = logistic_density(store, 1, 2.0 * std::log(5.0 / 3.0));
  Graph<double> g(false, false, 0);
  auto bits = rate_bits(g, nn::constant(RealField<double>({1, 1})), d);
  EXPECT_NEAR(bits->value[0], 2.0, 1e-9);
}

TEST(Rate, ChannelOffsetSelectsDensity) {
  ParameterStore<double> store;
  auto d = random_density(store, 6, 3);
  RealField<double> x({3, 2});
  x.values = {0.2, -1.0, 1.5, 0.0, -0.4, 2.0};
  Graph<double> g(false, false, 0);
  auto bits = rate_bits(g, nn::constant(x), d, 4);
  double expected = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) expected -= std::log2(d.likelihood(4 + static_cast<int>(i % 2), x[i]));
  EXPECT_NEAR(bits->value[0], expected, 1e-9);
  EXPECT_THROW(rate_bits(g, nn::constant(x), d, 5), std::invalid_argument);
}

TEST(Rate, GradientMatchesFiniteDifferences) {
  ParameterStore<double> store;
  auto d = random_density(store, 2, 21);
  Rng rng(8);
  RealField<double> x0({4, 4, 2});
  for (auto& v : x0.values) v = rng.uniform(-3, 3);
  auto x = nn::leaf(x0);
  auto inputs = d.parameters();
  inputs.push_back(x);
  auto report = nn::grad_check([&](Graph<double>& g) { return rate_bits(g, x, d); }, inputs);
  EXPECT_LT(report.max_relative_error, 1e-4) << report.worst;
  EXPECT_TRUE(report.nan_locations.empty());
}

TEST(Pmf, QuantizedFrequenciesSumAndPositive) {
  std::vector<double> pmf{0.9999, 1e-9, 0.0, 1e-4, 0.0};
  const auto f = quantize_pmf(pmf);
  std::uint64_t total = 0;
  for (auto v : f) {
    EXPECT_GE(v, 1u);
    total += v;
  }
  EXPECT_EQ(total, kProbTotal);
}

TEST(Coder, RawRoundTrip) {
  Rng rng(2);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> syms;
  RangeEncoder enc;
  std::vector<std::uint32_t> bits;
  for (int i = 0; i < 5000; ++i) {
    const std::uint32_t cum = static_cast<std::uint32_t>(rng.below(kProbTotal - 1));
    const std::uint32_t freq = 1 + static_cast<std::uint32_t>(rng.below(kProbTotal - cum));
    syms.push_back({cum, freq});
    enc.encode(cum, freq);
    bits.push_back(static_cast<std::uint32_t>(rng.below(1u << 16)));
    enc.encode_bits(bits.back(), 16);
  }
  const auto bytes = enc.finish();
  RangeDecoder dec(bytes);
  for (int i = 0; i < 5000; ++i) {
    const auto slot = dec.peek();
    ASSERT_GE(slot, syms[i].first);
    ASSERT_LT(slot, syms[i].first + syms[i].second);
    dec.consume(syms[i].first, syms[i].second);
    ASSERT_EQ(dec.decode_bits(16), bits[i]);
  }
}

TEST(Coder, TenThousandSymbolsRoundTrip) {
  ParameterStore<double> store;
  auto d = random_density(store, 3, 5);
  const auto tables = build_cdf_tables(d);
  Rng rng(6);
  std::vector<std::int32_t> symbols(10000);
  for (std::size_t i = 0; i < symbols.size(); ++i) symbols[i] = sample(d, static_cast<int>(i % 3), rng);
  RangeEncoder enc;
  auto channel = [](std::size_t i) { return i % 3; };
  ec_encode_into(enc, symbols, tables, channel);
  const auto bytes = enc.finish();
  RangeDecoder dec(bytes);
  std::vector<std::int32_t> back(symbols.size());
  ec_decode_into(dec, back, tables, channel);
  EXPECT_EQ(back, symbols);
}

TEST(Coder, EscapeValuesRoundTrip) {
  ParameterStore<double> store;
  auto d = logistic_density(store, 3, 2.0);
  const auto tables = build_cdf_tables(d);
  QuantizedStream s;
  s.channels = 1;
  s.shapes = {{{2, 3}, {1, 2}, {1, 1}}};
  s.planes = {std::vector<std::int32_t>{0, 1, -1, 500, -2147483647, 2147483647}, std::vector<std::int32_t>{-128, 128},
              std::vector<std::int32_t>{7}};
  const auto bytes = ec_encode(s, tables);
  QuantizedStream geom = s;
  for (auto& p : geom.planes) p.clear();
  EXPECT_EQ(ec_decode(bytes, geom, tables), s);
}

TEST(Coder, PeakedZerosCompressWell) {
  ParameterStore<double> store;
  auto d = logistic_density(store, 6, 20.0);
  const auto tables = build_cdf_tables(d);
  QuantizedStream s;
  s.channels = 2;
  s.shapes = {{{32, 32}, {32, 32}, {32, 32}}};
  for (auto& p : s.planes) p.assign(32 * 32 * 2, 0);
  const auto bytes = ec_encode(s, tables);
  EXPECT_LT(bytes.size(), 6144u / 50);
}

TEST(Coder, LosslessAndRateConsistentOverRandomTrials) {
  for (int trial = 0; trial < 20; ++trial) {
    ParameterStore<double> store;
    auto d = random_density(store, 3 * 4, 100 + trial);
    const auto tables = build_cdf_tables(d);
    Rng rng(200 + trial);
    const auto s = random_stream(d, 4, rng);
    const auto bytes = ec_encode(s, tables);
    QuantizedStream geom = s;
    for (auto& p : geom.planes) p.clear();
    EXPECT_EQ(ec_decode(bytes, geom, tables), s) << trial;
    const double est = stream_rate_bits(s, d);
    const double measured = 8.0 * static_cast<double>(bytes.size());
    EXPECT_GE(measured, 0.98 * est) << trial;
    EXPECT_LE(measured, 1.02 * est + 256.0) << trial;
  }
}

TEST(Coder, TruncatedStreamReportsOffset) {
  ParameterStore<double> store;
  auto d = random_density(store, 3, 5);
  const auto tables = build_cdf_tables(d);
  Rng rng(1);
  QuantizedStream s = random_stream(d, 1, rng);
  auto bytes = ec_encode(s, tables);
  bytes.resize(bytes.size() / 2);
  QuantizedStream geom = s;
  try {
    const auto back = ec_decode(bytes, geom, tables);
    EXPECT_NE(back, s);
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("offset"), std::string::npos);
  }
}

namespace {

Bitstream sample_bitstream() {
  Bitstream bs;
  auto& h = bs.header;
  h.config_hash = 0x0123456789abcdefULL;
  h.voxel_size = 0.1f;
  h.origin = {-3.2f, -3.2f, -1.0f};
  h.dims = {64, 64, 64};
  h.stages = 2;
  h.group = 4;
  h.content_channels = 32;
  h.hf_channels = 32;
  h.latent_shapes = {{{16, 16}, {16, 16}, {16, 16}}};
  h.occupied_voxels = 5123;
  h.point_count = 40000;
  bs.content = std::string("\x01\x02\x03\xff", 4);
  bs.highfreq = std::string(100, '\x7f');
  return bs;
}

}  // namespace

TEST(Bitstream, RoundTripIsBitExact) {
  const auto bs = sample_bitstream();
  const auto bytes = serialize_bitstream(bs);
  EXPECT_EQ(bytes.size(), kBitstreamHeaderBytes + 104);
  const auto back = parse_bitstream(bytes);
  EXPECT_EQ(back, bs);
  EXPECT_EQ(serialize_bitstream(back), bytes);
}

TEST(Bitstream, FlippedMagicRejected) {
  auto bytes = serialize_bitstream(sample_bitstream());
  bytes[0] ^= 0x20;
  try {
    parse_bitstream(bytes);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()), "bad magic");
  }
}

TEST(Bitstream, TruncatedSubstreamReportsOffset) {
  auto bytes = serialize_bitstream(sample_bitstream());
  bytes.resize(bytes.size() - 10);
  try {
    parse_bitstream(bytes);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_EQ(std::string(e.what()), "truncated at offset " + std::to_string(bytes.size()));
  }
}

TEST(Bitstream, VersionMismatchRejected) {
  auto bytes = serialize_bitstream(sample_bitstream());
  bytes[5] = 9;
  EXPECT_THROW(parse_bitstream(bytes), DataError);
}

TEST(Bitstream, FlippedPayloadByteReportsRange) {
  const auto bs = sample_bitstream();
  const auto clean = serialize_bitstream(bs);
  const std::size_t a = kBitstreamHeaderBytes, b = a + bs.content.size();
  auto expect_corrupt = [&](std::size_t at, const std::string& msg) {
    auto bytes = clean;
    bytes[at] ^= 0x01;
    try {
      parse_bitstream(bytes);
      FAIL() << at;
    } catch (const DataError& e) {
      EXPECT_EQ(std::string(e.what()), msg);
    }
  };
  expect_corrupt(a + 1, "corrupt substream A between offsets " + std::to_string(a) + " and " + std::to_string(b));
  expect_corrupt(b + 50, "corrupt substream B between offsets " + std::to_string(b) + " and " +
                             std::to_string(clean.size()));
  expect_corrupt(20, "corrupt header between offsets 0 and " + std::to_string(kBitstreamHeaderBytes - 12));
}
