#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "flatec/nn/layers.hpp"
#include "flatec/nn/spectral.hpp"
#include "flatec/triplane.hpp"

namespace flatec {

inline constexpr double kScaleFloor = 0.1;
inline constexpr double kSigmaFloor = 0.5;

/// Encoder state at one stage: base features X_s and accumulated high-frequency prior X_s^H.
template <class T>
struct StageState {
  Var<T> base, hf_prior;
  int stage = 0;
};

/// Quantities entering the entropy bottleneck for one plane.
template <class T>
struct PlaneLatents {
  Var<T> content, highfreq;
};

/// theta: GAP -> Dense -> SiLU -> Dense(2) -> (softplus + 0.1, softplus + 0.5).
template <class T>
struct ScalePredictor {
  nn::Mlp<T> mlp;

  static ScalePredictor create(ParameterStore<T>& store, const std::string& id, int channels, int hidden, Rng& rng) {
    return {nn::Mlp<T>::create(store, id, {channels, hidden, 2}, rng)};
  }
};

template <class T>
std::pair<Var<T>, Var<T>> scale_predictor(Graph<T>& g, const Var<T>& x, const ScalePredictor<T>& sp) {
  auto o = sp.mlp(g, nn::global_avg_pool(g, x));
  auto scale = nn::add_constant(g, nn::softplus(g, nn::slice(g, o, 0, 1)), static_cast<T>(kScaleFloor));
  auto sigma = nn::add_constant(g, nn::softplus(g, nn::slice(g, o, 1, 1)), static_cast<T>(kSigmaFloor));
  return {scale, sigma};
}

/// Complementary soft-mask split: low uses scale * G_sigma, high uses 1 - scale * G_sigma.
template <class T>
std::pair<Var<T>, Var<T>> freq_split(Graph<T>& g, const Var<T>& x, const Var<T>& scale, const Var<T>& sigma) {
  return {nn::gaussian_filter(g, x, scale, sigma, false), nn::gaussian_filter(g, x, scale, sigma, true)};
}

template <class T>
struct FdBlock {
  ScalePredictor<T> theta;
  nn::ConvBlock2d<T> core;
  nn::LayerNorm<T> ln_low, ln_out;
  nn::ConvBlock2d<T> prior;
  nn::ConvBlock2d<T> fuse;
  double dropout = 0.1;

  static FdBlock create(ParameterStore<T>& store, const std::string& id, int channels, int hf_channels,
                        double dropout, Rng& rng) {
    FdBlock b;
    b.theta = ScalePredictor<T>::create(store, id + ".theta", channels, channels, rng);
    b.core = nn::ConvBlock2d<T>::create(store, id + ".core", channels, channels, true, rng);
    b.ln_low = nn::LayerNorm<T>::create(store, id + ".ln_low", channels);
    b.ln_out = nn::LayerNorm<T>::create(store, id + ".ln_out", channels);
    b.prior = nn::ConvBlock2d<T>::create(store, id + ".prior", hf_channels, hf_channels, true, rng);
    b.fuse = nn::ConvBlock2d<T>::create(store, id + ".fuse", channels + hf_channels, hf_channels, false, rng);
    b.dropout = dropout;
    return b;
  }
};

/// Returns (X_s^e, X_s^{hf}).
template <class T>
std::pair<Var<T>, Var<T>> fd_block(Graph<T>& g, const StageState<T>& state, const FdBlock<T>& b) {
  const auto& x = state.base;
  auto core = b.core(g, x);
  auto [scale, sigma] = scale_predictor(g, x, b.theta);
  auto [low, high] = freq_split(g, x, scale, sigma);
  auto enhanced = b.ln_out(g, nn::add(g, core, b.ln_low(g, nn::dropout(g, low, b.dropout))));
  auto fused = b.fuse(g, nn::concat_channels(g, high, b.prior(g, state.hf_prior)));
  return {enhanced, fused};
}

template <class T>
struct DsBlock {
  nn::DownConv2d<T> base, hf;

  static DsBlock create(ParameterStore<T>& store, const std::string& id, int cin, int cout, Rng& rng) {
    return {nn::DownConv2d<T>::create(store, id + ".base", cin, cout, rng),
            nn::DownConv2d<T>::create(store, id + ".hf", cin, cout, rng)};
  }
};

template <class T>
StageState<T> ds_block(Graph<T>& g, const Var<T>& enhanced, const Var<T>& fused, const DsBlock<T>& b, int stage) {
  return {b.base(g, enhanced), b.hf(g, fused), stage + 1};
}

/// channels[s] is the width at stage s (S + 1 entries).
template <class T>
struct PlaneEncoder {
  std::vector<FdBlock<T>> fd;
  std::vector<DsBlock<T>> ds;

  static PlaneEncoder create(ParameterStore<T>& store, const std::string& id, const std::vector<int>& channels,
                             double dropout, Rng& rng) {
    PlaneEncoder e;
    for (std::size_t s = 0; s + 1 < channels.size(); ++s) {
      const std::string sid = id + ".s" + std::to_string(s);
      e.fd.push_back(FdBlock<T>::create(store, sid + ".fd", channels[s], channels[s], dropout, rng));
      e.ds.push_back(DsBlock<T>::create(store, sid + ".ds", channels[s], channels[s + 1], rng));
    }
    return e;
  }

  int stages() const { return static_cast<int>(fd.size()); }
};

template <class T>
PlaneLatents<T> encode_plane(Graph<T>& g, const Var<T>& x, const PlaneEncoder<T>& enc) {
  const int S = enc.stages();
  const int f = 1 << S;
  if (x->value.dim(0) % f || x->value.dim(1) % f)
    throw std::invalid_argument("encode_plane: plane " + shape_string(x->shape()) + " not divisible by 2^" +
                                std::to_string(S));
  StageState<T> st{x, nn::constant(RealField<T>(x->shape())), 0};
  for (int s = 0; s < S; ++s) {
    auto [enhanced, fused] = fd_block(g, st, enc.fd[s]);
    st = ds_block(g, enhanced, fused, enc.ds[s], s);
  }
  return {st.base, st.hf_prior};
}

template <class T>
struct TriplaneEncoder {
  std::array<PlaneEncoder<T>, 3> planes;

  static TriplaneEncoder create(ParameterStore<T>& store, const std::string& id, const std::vector<int>& channels,
                                double dropout, Rng& rng) {
    TriplaneEncoder e;
    for (int p = 0; p < 3; ++p)
      e.planes[p] = PlaneEncoder<T>::create(store, id + "." + kPlaneNames[p], channels, dropout, rng);
    return e;
  }
};

template <class T>
std::array<PlaneLatents<T>, 3> encode_triplane(Graph<T>& g, const TriplaneSet<T>& t, const TriplaneEncoder<T>& enc) {
  std::array<PlaneLatents<T>, 3> out;
  for (int p = 0; p < 3; ++p) out[p] = encode_plane(g, t.planes[p], enc.planes[p]);
  return out;
}

/// X^{ha} = hf + hf * Re(F^-1(F(base) * G_sigma)).
template <class T>
Var<T> align_hf(Graph<T>& g, const Var<T>& base, const Var<T>& hf, const Var<T>& sigma) {
  if (base->shape() != hf->shape())
    throw std::invalid_argument("align_hf: shape mismatch " + shape_string(base->shape()) + " vs " +
                                shape_string(hf->shape()));
  auto low = nn::gaussian_filter(g, base, Var<T>{}, sigma, false);
  return nn::add(g, hf, nn::mul(g, hf, low));
}

template <class T>
struct FmBlock {
  nn::ConvBlock2d<T> cb;
  nn::LayerNorm<T> ln_hf, ln_out;
  Var<T> sigma_raw;

  static FmBlock create(ParameterStore<T>& store, const std::string& id, int channels, Rng& rng) {
    FmBlock b;
    b.cb = nn::ConvBlock2d<T>::create(store, id + ".cb", channels, channels, true, rng);
    b.ln_hf = nn::LayerNorm<T>::create(store, id + ".ln_hf", channels);
    b.ln_out = nn::LayerNorm<T>::create(store, id + ".ln_out", channels);
    b.sigma_raw = store.add(id + ".sigma_raw", RealField<T>({1}));
    return b;
  }

  Var<T> sigma(Graph<T>& g) const {
    return nn::add_constant(g, nn::softplus(g, sigma_raw), static_cast<T>(kSigmaFloor));
  }
};

/// Returns (X^r, X^{ha}).
template <class T>
std::pair<Var<T>, Var<T>> fm_block(Graph<T>& g, const Var<T>& base, const Var<T>& hf, const FmBlock<T>& b) {
  auto aligned = align_hf(g, base, hf, b.sigma(g));
  auto r = b.ln_out(g, nn::add(g, b.cb(g, base), b.ln_hf(g, aligned)));
  return {r, aligned};
}

template <class T>
struct UsBlock {
  nn::UpConv2d<T> base, hf;

  static UsBlock create(ParameterStore<T>& store, const std::string& id, int cin, int cout, Rng& rng) {
    return {nn::UpConv2d<T>::create(store, id + ".base", cin, cout, rng),
            nn::UpConv2d<T>::create(store, id + ".hf", cin, cout, rng)};
  }
};

/// fm[s] and us[s] act at stage s; decoding runs s = S, ..., 0.
template <class T>
struct PlaneDecoder {
  std::vector<FmBlock<T>> fm;
  std::vector<UsBlock<T>> us;

  static PlaneDecoder create(ParameterStore<T>& store, const std::string& id, const std::vector<int>& channels,
                             Rng& rng) {
    PlaneDecoder d;
    for (std::size_t s = 0; s < channels.size(); ++s) {
      const std::string sid = id + ".s" + std::to_string(s);
      d.fm.push_back(FmBlock<T>::create(store, sid + ".fm", channels[s], rng));
      if (s > 0) d.us.push_back(UsBlock<T>::create(store, sid + ".us", channels[s], channels[s - 1], rng));
    }
    return d;
  }

  int stages() const { return static_cast<int>(us.size()); }
};

template <class T>
Var<T> decode_plane(Graph<T>& g, const PlaneLatents<T>& latents, const PlaneDecoder<T>& dec) {
  if (latents.content->shape() != latents.highfreq->shape())
    throw std::invalid_argument("decode_plane: latent shapes differ " + shape_string(latents.content->shape()) +
                                " vs " + shape_string(latents.highfreq->shape()));
  Var<T> base = latents.content, hf = latents.highfreq;
  for (int s = dec.stages(); s >= 0; --s) {
    auto [r, aligned] = fm_block(g, base, hf, dec.fm[s]);
    if (s == 0) return r;
    base = dec.us[s - 1].base(g, r);
    hf = dec.us[s - 1].hf(g, aligned);
  }
  return base;
}

template <class T>
struct TriplaneDecoder {
  std::array<PlaneDecoder<T>, 3> planes;

  static TriplaneDecoder create(ParameterStore<T>& store, const std::string& id, const std::vector<int>& channels,
                                Rng& rng) {
    TriplaneDecoder d;
    for (int p = 0; p < 3; ++p) d.planes[p] = PlaneDecoder<T>::create(store, id + "." + kPlaneNames[p], channels, rng);
    return d;
  }
};

template <class T>
TriplaneSet<T> decode_triplane(Graph<T>& g, const std::array<PlaneLatents<T>, 3>& latents,
                               const TriplaneDecoder<T>& dec) {
  TriplaneSet<T> t;
  for (int p = 0; p < 3; ++p) t.planes[p] = decode_plane(g, latents[p], dec.planes[p]);
  return t;
}

}  // namespace flatec
