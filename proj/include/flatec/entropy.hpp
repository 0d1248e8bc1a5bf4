#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include "flatec/error.hpp"
#include "flatec/nn/layers.hpp"

namespace flatec {

using nn::Graph;
using nn::ParameterStore;
using nn::RealField;
using nn::Var;

/// y + u, u ~ U[-0.5, 0.5) drawn from a seeded stream; identity gradient.
template <class T>
Var<T> quantize_train(Graph<T>& g, const Var<T>& y, std::uint64_t seed) {
  Rng rng(seed);
  RealField<T> noise(y->shape());
  for (auto& v : noise.values) v = static_cast<T>(rng.uniform() - 0.5);
  return nn::add_fixed(g, y, noise);
}

/// Round half away from zero.
template <class T>
std::vector<std::int32_t> quantize_eval(const RealField<T>& y) {
  std::vector<std::int32_t> q(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double r = std::round(static_cast<double>(y[i]));
    q[i] = static_cast<std::int32_t>(std::clamp(r, -2147483647.0, 2147483647.0));
  }
  return q;
}

/// Rounded values as a field (the decoder's input in evaluation mode).
template <class T>
RealField<T> dequantize(const std::vector<std::int32_t>& q, nn::Shape shape) {
  RealField<T> f(std::move(shape));
  for (std::size_t i = 0; i < q.size(); ++i) f[i] = static_cast<T>(q[i]);
  return f;
}

inline constexpr int kDensityLayers = 3;
inline constexpr std::array<int, kDensityLayers + 1> kDensityWidths{1, 3, 3, 1};
inline constexpr double kLikelihoodFloor = 1e-9;

/// Per-channel learned CDF c(x) = sigmoid(f3(f2(f1(x)))) with
/// f_k(z) = g_k(softplus(H_k) z + b_k), g_k(u) = u + tanh(a_k) * tanh(u) (not on the last map).
/// Positive matrices and |tanh(a_k)| < 1 make every map monotone.
template <class T>
struct FactorizedDensity {
  int channels = 0;
  std::array<Var<T>, kDensityLayers> matrices;  // [C, out, in] raw (pre-softplus)
  std::array<Var<T>, kDensityLayers> biases;    // [C, out]
  std::array<Var<T>, kDensityLayers - 1> factors;  // [C, out] raw (pre-tanh)

  static FactorizedDensity create(ParameterStore<T>& store, const std::string& id, int channels, Rng& rng,
                                  double init_scale = 10.0) {
    FactorizedDensity d;
    d.channels = channels;
    const double scale = std::pow(init_scale, 1.0 / (kDensityLayers));
    for (int k = 0; k < kDensityLayers; ++k) {
      const int in = kDensityWidths[k], out = kDensityWidths[k + 1];
      const double init = std::log(std::expm1(1.0 / scale / out));
      d.matrices[k] = store.add(id + ".matrix" + std::to_string(k), RealField<T>({channels, out, in}, static_cast<T>(init)));
      RealField<T> b({channels, out});
      for (auto& v : b.values) v = static_cast<T>(rng.uniform(-0.5, 0.5));
      d.biases[k] = store.add(id + ".bias" + std::to_string(k), std::move(b));
      if (k < kDensityLayers - 1) d.factors[k] = store.add(id + ".factor" + std::to_string(k), RealField<T>({channels, out}));
    }
    return d;
  }

  /// Parameters of one channel with the constraints applied, in double.
  struct Channel {
    std::array<std::array<double, 9>, kDensityLayers> a{};  // softplus(H), [out][in]
    std::array<std::array<double, 3>, kDensityLayers> b{};
    std::array<std::array<double, 3>, kDensityLayers - 1> t{};  // tanh(factor)
  };

  Channel channel(int c) const {
    Channel ch;
    for (int k = 0; k < kDensityLayers; ++k) {
      const int in = kDensityWidths[k], out = kDensityWidths[k + 1];
      for (int o = 0; o < out; ++o) {
        for (int i = 0; i < in; ++i)
          ch.a[k][o * in + i] = nn::detail::softplus(static_cast<double>(matrices[k]->value[(c * out + o) * in + i]));
        ch.b[k][o] = static_cast<double>(biases[k]->value[c * out + o]);
        if (k < kDensityLayers - 1) ch.t[k][o] = std::tanh(static_cast<double>(factors[k]->value[c * out + o]));
      }
    }
    return ch;
  }

  static double logit(const Channel& ch, double x) {
    std::array<double, 3> z{x, 0, 0};
    for (int k = 0; k < kDensityLayers; ++k) {
      const int in = kDensityWidths[k], out = kDensityWidths[k + 1];
      std::array<double, 3> pre{};
      for (int o = 0; o < out; ++o) {
        double acc = ch.b[k][o];
        for (int i = 0; i < in; ++i) acc += ch.a[k][o * in + i] * z[i];
        pre[o] = k < kDensityLayers - 1 ? acc + ch.t[k][o] * std::tanh(acc) : acc;
      }
      z = pre;
    }
    return z[0];
  }

  double cdf(int c, double x) const { return nn::detail::sigmoid(logit(channel(c), x)); }

  /// c(v + 1/2) - c(v - 1/2), evaluated on the stable side of the sigmoid.
  static double likelihood(const Channel& ch, double v) {
    const double lu = logit(ch, v + 0.5), ll = logit(ch, v - 0.5);
    const double s = lu + ll > 0 ? -1.0 : 1.0;
    return std::abs(nn::detail::sigmoid(s * lu) - nn::detail::sigmoid(s * ll));
  }

  double likelihood(int c, double v) const { return likelihood(channel(c), v); }

  std::vector<Var<T>> parameters() const {
    std::vector<Var<T>> v(matrices.begin(), matrices.end());
    v.insert(v.end(), biases.begin(), biases.end());
    v.insert(v.end(), factors.begin(), factors.end());
    return v;
  }
};

namespace detail {

/// Forward pass of one density channel at x, keeping what backward needs.
struct DensityTrace {
  std::array<std::array<double, 3>, kDensityLayers + 1> z{};  // z[0] = x, z[k+1] = layer k output
  std::array<std::array<double, 3>, kDensityLayers> th{};     // tanh of the affine outputs
};

/// Gradients of one channel with respect to the transformed (a, b, t) values.
struct DensityGrad {
  std::array<std::array<double, 9>, kDensityLayers> a{};
  std::array<std::array<double, 3>, kDensityLayers> b{};
  std::array<std::array<double, 3>, kDensityLayers> t{};
};

template <class T>
double density_forward(const typename FactorizedDensity<T>::Channel& ch, double x, DensityTrace& tr) {
  tr.z[0] = {x, 0, 0};
  for (int k = 0; k < kDensityLayers; ++k) {
    const int in = kDensityWidths[k], out = kDensityWidths[k + 1];
    for (int o = 0; o < out; ++o) {
      double acc = ch.b[k][o];
      for (int i = 0; i < in; ++i) acc += ch.a[k][o * in + i] * tr.z[k][i];
      if (k < kDensityLayers - 1) {
        tr.th[k][o] = std::tanh(acc);
        tr.z[k + 1][o] = acc + ch.t[k][o] * tr.th[k][o];
      } else {
        tr.z[k + 1][o] = acc;
      }
    }
  }
  return tr.z[kDensityLayers][0];
}

/// Accumulates d(logit)/d(a, b, t) * dl into `grad`; returns d(logit)/dx * dl.
template <class T>
double density_backward(const typename FactorizedDensity<T>::Channel& ch, const DensityTrace& tr, double dl,
                        DensityGrad& grad) {
  std::array<double, 3> dz{dl, 0, 0};
  for (int k = kDensityLayers - 1; k >= 0; --k) {
    const int in = kDensityWidths[k], out = kDensityWidths[k + 1];
    std::array<double, 3> dpre{};
    for (int o = 0; o < out; ++o) {
      if (k < kDensityLayers - 1) {
        const double th = tr.th[k][o];
        dpre[o] = dz[o] * (1.0 + ch.t[k][o] * (1.0 - th * th));
        grad.t[k][o] += dz[o] * th;
      } else {
        dpre[o] = dz[o];
      }
      grad.b[k][o] += dpre[o];
    }
    std::array<double, 3> dprev{};
    for (int o = 0; o < out; ++o)
      for (int i = 0; i < in; ++i) {
        grad.a[k][o * in + i] += dpre[o] * tr.z[k][i];
        dprev[i] += ch.a[k][o * in + i] * dpre[o];
      }
    dz = dprev;
  }
  return dz[0];
}

/// Chains a channel's (a, b, t) gradients through softplus / tanh into the raw parameters.
template <class T>
void apply_density_grad(const FactorizedDensity<T>& d, const typename FactorizedDensity<T>::Channel& ch, int c,
                        const DensityGrad& grad) {
  for (int k = 0; k < kDensityLayers; ++k) {
    const int in = kDensityWidths[k], out = kDensityWidths[k + 1];
    if (d.matrices[k]->requires_grad) {
      auto& gm = d.matrices[k]->grad_buffer();
      for (int j = 0; j < out * in; ++j) {
        const std::size_t idx = static_cast<std::size_t>(c) * out * in + j;
        gm[idx] += static_cast<T>(grad.a[k][j] * nn::detail::sigmoid(static_cast<double>(d.matrices[k]->value[idx])));
      }
    }
    if (d.biases[k]->requires_grad) {
      auto& gb = d.biases[k]->grad_buffer();
      for (int o = 0; o < out; ++o) gb[static_cast<std::size_t>(c) * out + o] += static_cast<T>(grad.b[k][o]);
    }
    if (k < kDensityLayers - 1 && d.factors[k]->requires_grad) {
      auto& gf = d.factors[k]->grad_buffer();
      for (int o = 0; o < out; ++o)
        gf[static_cast<std::size_t>(c) * out + o] += static_cast<T>(grad.t[k][o] * (1.0 - ch.t[k][o] * ch.t[k][o]));
    }
  }
}

}  // namespace detail

/// Sum over elements of -log2(c(v + 1/2) - c(v - 1/2)) for latents x [..., C]
/// whose channel k uses density channel channel_offset + k. Differentiable in x
/// and in the density parameters. Likelihoods are floored at 1e-9 (zero gradient below).
template <class T>
Var<T> rate_bits(Graph<T>& g, const Var<T>& x, const FactorizedDensity<T>& density, int channel_offset = 0) {
  const int C = x->value.channels();
  if (channel_offset < 0 || channel_offset + C > density.channels)
    throw std::invalid_argument("rate_bits: latent channels " + std::to_string(C) + " at offset " +
                                std::to_string(channel_offset) + " exceed density channels " +
                                std::to_string(density.channels));
  const auto params = density.parameters();
  bool wants = g.wants_grad({&x});
  for (const auto& p : params) wants = wants || g.wants_grad({&p});
  auto out = g.result({1}, {&x});
  out->requires_grad = wants;
  std::vector<typename FactorizedDensity<T>::Channel> chans;
  for (int c = 0; c < C; ++c) chans.push_back(density.channel(channel_offset + c));
  double bits = 0.0;
  for (std::size_t i = 0; i < x->size(); ++i) {
    const double p = FactorizedDensity<T>::likelihood(chans[i % C], static_cast<double>(x->value[i]));
    if (!std::isfinite(p)) throw ModelError("rate_bits: non-finite likelihood (model corruption)");
    bits -= std::log2(std::max(p, kLikelihoodFloor));
  }
  out->value[0] = static_cast<T>(bits);
  if (wants) {
    g.push([x, out, density, chans = std::move(chans), C, channel_offset] {
      const double go = static_cast<double>(out->grad[0]);
      T* gx = x->requires_grad ? x->grad_buffer().data() : nullptr;
      detail::DensityTrace tu, tl;
      std::vector<detail::DensityGrad> grads(static_cast<std::size_t>(C));
      for (std::size_t i = 0; i < x->size(); ++i) {
        const int c = static_cast<int>(i % C);
        const auto& ch = chans[c];
        const double v = static_cast<double>(x->value[i]);
        const double lu = detail::density_forward<T>(ch, v + 0.5, tu);
        const double ll = detail::density_forward<T>(ch, v - 0.5, tl);
        const double s = lu + ll > 0 ? -1.0 : 1.0;
        const double p = std::abs(nn::detail::sigmoid(s * lu) - nn::detail::sigmoid(s * ll));
        if (p <= kLikelihoodFloor) continue;
        const double dp = -go / (p * std::numbers::ln2);
        const double dlu = dp * nn::detail::sigmoid(lu) * nn::detail::sigmoid(-lu);
        const double dll = -dp * nn::detail::sigmoid(ll) * nn::detail::sigmoid(-ll);
        const double dx = detail::density_backward<T>(ch, tu, dlu, grads[c]) +
                          detail::density_backward<T>(ch, tl, dll, grads[c]);
        if (gx) gx[i] += static_cast<T>(dx);
      }
      for (int c = 0; c < C; ++c) detail::apply_density_grad(density, chans[c], channel_offset + c, grads[c]);
    });
  }
  return out;
}

inline constexpr int kSymbolMax = 127;
inline constexpr int kProbBits = 16;
inline constexpr std::uint32_t kProbTotal = 1u << kProbBits;
inline constexpr double kTableTail = 1e-7;

/// Quantized CDF of one channel: symbols lo..hi then an escape symbol.
struct CdfTable {
  int lo = 0, hi = 0;
  std::vector<std::uint32_t> cum;  // size (hi - lo + 2) + 1, cum.front() = 0, cum.back() = 2^16

  int escape_index() const { return hi - lo + 1; }
  std::uint32_t freq(int idx) const { return cum[idx + 1] - cum[idx]; }
};

/// Integer frequencies summing to 2^16 with every entry >= 1.
inline std::vector<std::uint32_t> quantize_pmf(const std::vector<double>& pmf) {
  const std::size_t n = pmf.size();
  if (n > kProbTotal) throw std::invalid_argument("quantize_pmf: alphabet too large");
  std::vector<std::uint32_t> f(n);
  std::int64_t total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double scaled = std::max(pmf[i], 0.0) * kProbTotal;
    f[i] = std::max<std::uint32_t>(1, static_cast<std::uint32_t>(std::llround(scaled)));
    total += f[i];
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return f[a] > f[b]; });
  std::int64_t diff = static_cast<std::int64_t>(kProbTotal) - total;
  if (diff > 0) f[order[0]] += static_cast<std::uint32_t>(diff);
  for (std::size_t k = 0; diff < 0; k = (k + 1) % n) {
    const std::size_t i = order[k];
    if (f[i] > 1) {
      const auto take = static_cast<std::uint32_t>(std::min<std::int64_t>(-diff, std::max<std::int64_t>(1, (f[i] - 1) / 2)));
      f[i] -= take;
      diff += take;
    }
  }
  return f;
}

template <class T>
CdfTable build_cdf_table(const FactorizedDensity<T>& density, int c) {
  const auto ch = density.channel(c);
  auto cdf = [&](double x) { return nn::detail::sigmoid(FactorizedDensity<T>::logit(ch, x)); };
  CdfTable t;
  t.lo = -kSymbolMax;
  t.hi = kSymbolMax;
  while (t.lo < 0 && cdf(t.lo + 0.5) < kTableTail) ++t.lo;
  while (t.hi > 0 && 1.0 - cdf(t.hi - 0.5) < kTableTail) --t.hi;
  std::vector<double> pmf;
  for (int n = t.lo; n <= t.hi; ++n) pmf.push_back(FactorizedDensity<T>::likelihood(ch, n));
  pmf.push_back(cdf(t.lo - 0.5) + (1.0 - cdf(t.hi + 0.5)));
  const auto f = quantize_pmf(pmf);
  t.cum.assign(f.size() + 1, 0);
  for (std::size_t i = 0; i < f.size(); ++i) t.cum[i + 1] = t.cum[i] + f[i];
  return t;
}

template <class T>
std::vector<CdfTable> build_cdf_tables(const FactorizedDensity<T>& density) {
  std::vector<CdfTable> tables;
  for (int c = 0; c < density.channels; ++c) tables.push_back(build_cdf_table(density, c));
  return tables;
}

/// Multi-symbol range coder over 2^16 probability totals: 32-bit range, 64-bit
/// low with byte-wise carry propagation.
class RangeEncoder {
 public:
  void encode(std::uint32_t cum, std::uint32_t freq) {
    const std::uint32_t r = range_ >> kProbBits;
    low_ += static_cast<std::uint64_t>(r) * cum;
    range_ = r * freq;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  /// Uniform `bits`-bit value (bits <= 16).
  void encode_bits(std::uint32_t value, int bits) {
    const std::uint32_t r = range_ >> bits;
    low_ += static_cast<std::uint64_t>(r) * value;
    range_ = r;
    while (range_ < kTop) {
      range_ <<= 8;
      shift_low();
    }
  }

  std::string finish() {
    for (int i = 0; i < 5; ++i) shift_low();
    return std::move(out_);
  }

 private:
  static constexpr std::uint32_t kTop = 1u << 24;

  void shift_low() {
    if (static_cast<std::uint32_t>(low_) < 0xFF000000u || (low_ >> 32) != 0) {
      const auto carry = static_cast<std::uint8_t>(low_ >> 32);
      std::uint8_t temp = cache_;
      do {
        out_.push_back(static_cast<char>(static_cast<std::uint8_t>(temp + carry)));
        temp = 0xFF;
      } while (--cache_size_ != 0);
      cache_ = static_cast<std::uint8_t>(low_ >> 24);
    }
    ++cache_size_;
    low_ = (low_ & 0x00FFFFFFu) << 8;
  }

  std::uint64_t low_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint8_t cache_ = 0;
  std::uint64_t cache_size_ = 1;
  std::string out_;
};

class RangeDecoder {
 public:
  RangeDecoder(const std::string& bytes, std::size_t base_offset = 0) : in_(bytes), base_(base_offset) {
    for (int i = 0; i < 5; ++i) code_ = (code_ << 8) | next();
  }

  /// Target frequency slot in [0, 2^16).
  std::uint32_t peek() {
    r_ = range_ >> kProbBits;
    const std::uint32_t v = code_ / r_;
    if (v >= kProbTotal) throw DataError("corrupt substream at offset " + std::to_string(base_ + pos_));
    return v;
  }

  void consume(std::uint32_t cum, std::uint32_t freq) {
    code_ -= r_ * cum;
    range_ = r_ * freq;
    normalize();
  }

  std::uint32_t decode_bits(int bits) {
    const std::uint32_t r = range_ >> bits;
    const std::uint32_t v = code_ / r;
    if (v >> bits) throw DataError("corrupt substream at offset " + std::to_string(base_ + pos_));
    code_ -= r * v;
    range_ = r;
    normalize();
    return v;
  }

  std::size_t position() const { return base_ + pos_; }

 private:
  static constexpr std::uint32_t kTop = 1u << 24;

  std::uint32_t next() {
    if (pos_ >= in_.size()) {
      if (++overrun_ > 4) throw DataError("truncated at offset " + std::to_string(base_ + in_.size()));
      ++pos_;
      return 0;
    }
    return static_cast<std::uint8_t>(in_[pos_++]);
  }

  void normalize() {
    while (range_ < kTop) {
      code_ = (code_ << 8) | next();
      range_ <<= 8;
    }
  }

  const std::string& in_;
  std::size_t base_;
  std::size_t pos_ = 0;
  int overrun_ = 0;
  std::uint32_t code_ = 0;
  std::uint32_t range_ = 0xFFFFFFFFu;
  std::uint32_t r_ = 1;
};

namespace detail {

inline std::uint32_t zigzag(std::int32_t v) {
  return (static_cast<std::uint32_t>(v) << 1) ^ static_cast<std::uint32_t>(v >> 31);
}
inline std::int32_t unzigzag(std::uint32_t u) {
  return static_cast<std::int32_t>(u >> 1) ^ -static_cast<std::int32_t>(u & 1);
}

}  // namespace detail

/// Codes symbols whose i-th entry uses table channel_of(i). Out-of-table values
/// are sent as the escape symbol followed by a raw 32-bit zigzag code.
template <class ChannelOf>
void ec_encode_into(RangeEncoder& enc, const std::vector<std::int32_t>& symbols, const std::vector<CdfTable>& tables,
                    ChannelOf channel_of) {
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const CdfTable& t = tables[channel_of(i)];
    const std::int32_t v = symbols[i];
    if (v >= t.lo && v <= t.hi) {
      const int idx = v - t.lo;
      enc.encode(t.cum[idx], t.freq(idx));
    } else {
      const int esc = t.escape_index();
      enc.encode(t.cum[esc], t.freq(esc));
      const std::uint32_t z = detail::zigzag(v);
      enc.encode_bits(z >> 16, 16);
      enc.encode_bits(z & 0xFFFFu, 16);
    }
  }
}

template <class ChannelOf>
void ec_decode_into(RangeDecoder& dec, std::vector<std::int32_t>& symbols, const std::vector<CdfTable>& tables,
                    ChannelOf channel_of) {
  for (std::size_t i = 0; i < symbols.size(); ++i) {
    const CdfTable& t = tables[channel_of(i)];
    const std::uint32_t slot = dec.peek();
    const auto it = std::upper_bound(t.cum.begin(), t.cum.end(), slot);
    const int idx = static_cast<int>(it - t.cum.begin()) - 1;
    dec.consume(t.cum[idx], t.freq(idx));
    if (idx == t.escape_index()) {
      const std::uint32_t hi = dec.decode_bits(16);
      const std::uint32_t lo = dec.decode_bits(16);
      symbols[i] = detail::unzigzag((hi << 16) | lo);
    } else {
      symbols[i] = t.lo + idx;
    }
  }
}

/// Integer latents of one stream: per plane a [rows, cols, channels] array;
/// density channel = plane * channels + c (planes ordered HW, HD, WD).
struct QuantizedStream {
  int channels = 0;
  std::array<std::array<int, 2>, 3> shapes{};
  std::array<std::vector<std::int32_t>, 3> planes;

  bool operator==(const QuantizedStream&) const = default;
};

inline std::string ec_encode(const QuantizedStream& s, const std::vector<CdfTable>& tables) {
  if (static_cast<int>(tables.size()) != 3 * s.channels)
    throw ModelError("ec_encode: " + std::to_string(tables.size()) + " tables for " + std::to_string(3 * s.channels) +
                     " channels");
  RangeEncoder enc;
  for (int p = 0; p < 3; ++p) {
    const auto off = static_cast<std::size_t>(p * s.channels);
    const auto C = static_cast<std::size_t>(s.channels);
    ec_encode_into(enc, s.planes[p], tables, [&](std::size_t i) { return off + i % C; });
  }
  return enc.finish();
}

/// Inverse of ec_encode given the stream geometry (channels and shapes).
inline QuantizedStream ec_decode(const std::string& bytes, QuantizedStream geometry,
                                 const std::vector<CdfTable>& tables, std::size_t base_offset = 0) {
  if (static_cast<int>(tables.size()) != 3 * geometry.channels)
    throw ModelError("ec_decode: table count does not match channel count");
  RangeDecoder dec(bytes, base_offset);
  for (int p = 0; p < 3; ++p) {
    const auto off = static_cast<std::size_t>(p * geometry.channels);
    const auto C = static_cast<std::size_t>(geometry.channels);
    geometry.planes[p].assign(static_cast<std::size_t>(geometry.shapes[p][0]) * geometry.shapes[p][1] * C, 0);
    ec_decode_into(dec, geometry.planes[p], tables, [&](std::size_t i) { return off + i % C; });
  }
  return geometry;
}

/// Ideal code length of integer symbols under the continuous density, in bits.
template <class T>
double stream_rate_bits(const QuantizedStream& s, const FactorizedDensity<T>& density) {
  double bits = 0.0;
  for (int p = 0; p < 3; ++p) {
    std::vector<typename FactorizedDensity<T>::Channel> chans;
    for (int c = 0; c < s.channels; ++c) chans.push_back(density.channel(p * s.channels + c));
    for (std::size_t i = 0; i < s.planes[p].size(); ++i)
      bits -= std::log2(std::max(FactorizedDensity<T>::likelihood(chans[i % s.channels], s.planes[p][i]),
                                 kLikelihoodFloor));
  }
  return bits;
}

inline constexpr const char kBitstreamMagic[5] = {'F', 'L', 'T', 'C', '1'};
inline constexpr std::uint8_t kBitstreamVersion = 1;

struct BitstreamHeader {
  std::uint8_t version = kBitstreamVersion;
  std::uint64_t config_hash = 0;
  float voxel_size = 0.0f;
  std::array<float, 3> origin{};
  std::array<std::uint16_t, 3> dims{};
  std::uint8_t stages = 0;
  std::uint8_t group = 0;
  std::uint16_t content_channels = 0;
  std::uint16_t hf_channels = 0;
  std::array<std::array<std::uint16_t, 2>, 3> latent_shapes{};
  std::uint32_t occupied_voxels = 0;
  std::uint32_t point_count = 0;

  bool operator==(const BitstreamHeader&) const = default;
};

/// Container layout (little-endian):
///   "FLTC1" | version u8 | config_hash u64 | voxel_size f32 | origin 3xf32 | dims 3xu16 |
///   S u8 | N_g u8 | content channels u16 | hf channels u16 | latent shapes 3x(u16, u16) |
///   occupied voxels u32 | point count u32 | len A u32 | len B u32 |
///   crc32 of the preceding header bytes | crc32 A | crc32 B | substream A | substream B
struct Bitstream {
  BitstreamHeader header;
  std::string content;   // substream A
  std::string highfreq;  // substream B

  bool operator==(const Bitstream&) const = default;
};

inline constexpr std::size_t kBitstreamHeaderBytes = 5 + 1 + 8 + 4 + 12 + 6 + 1 + 1 + 2 + 2 + 12 + 4 + 4 + 8 + 12;

namespace detail {

inline std::uint32_t crc32_of(const char* p, std::size_t n) {
  return static_cast<std::uint32_t>(
      ::crc32(::crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(p), static_cast<uInt>(n)));
}

inline std::uint32_t crc32_of(const std::string& s) { return crc32_of(s.data(), s.size()); }

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xFF));
}

class ByteReader {
 public:
  explicit ByteReader(const std::string& b) : b_(b) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }

  std::string bytes(std::size_t n) {
    need(n);
    auto s = b_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) {
    if (pos_ + n > b_.size()) throw DataError("truncated at offset " + std::to_string(b_.size()));
  }
  const std::string& b_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_bitstream(const Bitstream& bs) {
  const auto& h = bs.header;
  std::string out(kBitstreamMagic, 5);
  detail::put_le(out, h.version);
  detail::put_le(out, h.config_hash);
  detail::put_le(out, std::bit_cast<std::uint32_t>(h.voxel_size));
  for (float o : h.origin) detail::put_le(out, std::bit_cast<std::uint32_t>(o));
  for (auto d : h.dims) detail::put_le(out, d);
  detail::put_le(out, h.stages);
  detail::put_le(out, h.group);
  detail::put_le(out, h.content_channels);
  detail::put_le(out, h.hf_channels);
  for (const auto& s : h.latent_shapes)
    for (auto d : s) detail::put_le(out, d);
  detail::put_le(out, h.occupied_voxels);
  detail::put_le(out, h.point_count);
  detail::put_le(out, static_cast<std::uint32_t>(bs.content.size()));
  detail::put_le(out, static_cast<std::uint32_t>(bs.highfreq.size()));
  detail::put_le(out, detail::crc32_of(out));
  detail::put_le(out, detail::crc32_of(bs.content));
  detail::put_le(out, detail::crc32_of(bs.highfreq));
  out += bs.content;
  out += bs.highfreq;
  return out;
}

inline Bitstream parse_bitstream(const std::string& bytes) {
  if (bytes.size() < 5 || bytes.compare(0, 5, kBitstreamMagic, 5) != 0) throw DataError("bad magic");
  detail::ByteReader r(bytes);
  r.bytes(5);
  Bitstream bs;
  auto& h = bs.header;
  h.version = r.get<std::uint8_t>();
  if (h.version != kBitstreamVersion)
    throw DataError("unsupported bitstream version " + std::to_string(h.version) + " (expected " +
                    std::to_string(kBitstreamVersion) + ")");
  h.config_hash = r.get<std::uint64_t>();
  h.voxel_size = r.get_f32();
  for (auto& o : h.origin) o = r.get_f32();
  for (auto& d : h.dims) d = r.get<std::uint16_t>();
  h.stages = r.get<std::uint8_t>();
  h.group = r.get<std::uint8_t>();
  h.content_channels = r.get<std::uint16_t>();
  h.hf_channels = r.get<std::uint16_t>();
  for (auto& s : h.latent_shapes)
    for (auto& d : s) d = r.get<std::uint16_t>();
  h.occupied_voxels = r.get<std::uint32_t>();
  h.point_count = r.get<std::uint32_t>();
  const auto la = r.get<std::uint32_t>();
  const auto lb = r.get<std::uint32_t>();
  const std::size_t header_end = r.position();
  const auto crc_header = r.get<std::uint32_t>();
  const auto crc_a = r.get<std::uint32_t>();
  const auto crc_b = r.get<std::uint32_t>();
  const std::size_t a_begin = r.position();
  bs.content = r.bytes(la);
  bs.highfreq = r.bytes(lb);
  if (r.position() != bytes.size())
    throw DataError("trailing bytes at offset " + std::to_string(r.position()));
  auto corrupt = [](const std::string& what, std::size_t lo, std::size_t hi) {
    return DataError("corrupt " + what + " between offsets " + std::to_string(lo) + " and " + std::to_string(hi));
  };
  if (detail::crc32_of(bytes.data(), header_end) != crc_header) throw corrupt("header", 0, header_end);
  if (detail::crc32_of(bs.content) != crc_a) throw corrupt("substream A", a_begin, a_begin + la);
  if (detail::crc32_of(bs.highfreq) != crc_b) throw corrupt("substream B", a_begin + la, a_begin + la + lb);
  return bs;
}

}  // namespace flatec
