#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "flatec/nn/autograd.hpp"
#include "flatec/nn/conv.hpp"
#include "flatec/nn/ops.hpp"
#include "flatec/rng.hpp"

namespace flatec::nn {

namespace detail {

template <class T>
RealField<T> random_field(Shape shape, int fan_in, double gain, Rng& rng) {
  RealField<T> f(std::move(shape));
  const double std_dev = gain / std::sqrt(static_cast<double>(std::max(fan_in, 1)));
  for (auto& v : f.values) v = static_cast<T>(rng.normal() * std_dev);
  return f;
}

}  // namespace detail

/// Affine channel map (an MLP layer / 1x1 convolution).
template <class T>
struct Dense {
  Var<T> weight, bias;

  static Dense create(ParameterStore<T>& store, const std::string& id, int cin, int cout, Rng& rng,
                      double gain = 1.0) {
    return {store.add(id + ".weight", detail::random_field<T>({cin, cout}, cin, gain, rng)),
            store.add(id + ".bias", RealField<T>({cout}))};
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return linear(g, x, weight, bias); }
};

/// Stack of Dense layers with SiLU between them (none after the last).
template <class T>
struct Mlp {
  std::vector<Dense<T>> layers;

  static Mlp create(ParameterStore<T>& store, const std::string& id, const std::vector<int>& widths, Rng& rng) {
    Mlp m;
    for (std::size_t i = 0; i + 1 < widths.size(); ++i)
      m.layers.push_back(Dense<T>::create(store, id + "." + std::to_string(i), widths[i], widths[i + 1], rng));
    return m;
  }

  Var<T> operator()(Graph<T>& g, Var<T> x) const {
    for (std::size_t i = 0; i < layers.size(); ++i) {
      x = layers[i](g, x);
      if (i + 1 < layers.size()) x = silu(g, x);
    }
    return x;
  }
};

template <class T>
struct LayerNorm {
  Var<T> gamma, beta;

  static LayerNorm create(ParameterStore<T>& store, const std::string& id, int channels) {
    return {store.add(id + ".gamma", RealField<T>({channels}, T{1})), store.add(id + ".beta", RealField<T>({channels}))};
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return layer_norm(g, x, gamma, beta); }
};

/// 2D convolution block: SiLU(conv3x3(x)), plus x when `residual` (requires cin == cout).
/// With zero weights and bias a residual block is the identity.
template <class T>
struct ConvBlock2d {
  Var<T> weight, bias;
  bool residual = false;

  static ConvBlock2d create(ParameterStore<T>& store, const std::string& id, int cin, int cout, bool residual,
                            Rng& rng, double gain = 1.0) {
    if (residual && cin != cout) throw std::invalid_argument("ConvBlock2d: residual needs cin == cout");
    return {store.add(id + ".weight", detail::random_field<T>({3, 3, cin, cout}, 9 * cin, gain, rng)),
            store.add(id + ".bias", RealField<T>({cout})), residual};
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    auto y = silu(g, conv2d(g, x, weight, bias, 1, 1));
    return residual ? add(g, x, y) : y;
  }
};

/// 3D convolution block: depthwise k^3 convolution, pointwise channel mix, SiLU,
/// residual when cin == cout.
template <class T>
struct ConvBlock3d {
  Var<T> depthwise, depthwise_bias;
  Dense<T> pointwise;
  bool residual = false;

  static ConvBlock3d create(ParameterStore<T>& store, const std::string& id, int cin, int cout, Rng& rng,
                            int kernel = 3, double gain = 1.0) {
    ConvBlock3d b;
    b.depthwise = store.add(id + ".dw.weight",
                            detail::random_field<T>({kernel, kernel, kernel, cin}, kernel * kernel * kernel, gain, rng));
    b.depthwise_bias = store.add(id + ".dw.bias", RealField<T>({cin}));
    b.pointwise = Dense<T>::create(store, id + ".pw", cin, cout, rng, gain);
    b.residual = cin == cout;
    return b;
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    auto y = silu(g, pointwise(g, depthwise_conv3d(g, x, depthwise, depthwise_bias)));
    return residual ? add(g, x, y) : y;
  }
};

/// Stride-2 3x3 convolution halving both spatial dims (even inputs).
template <class T>
struct DownConv2d {
  Var<T> weight, bias;

  static DownConv2d create(ParameterStore<T>& store, const std::string& id, int cin, int cout, Rng& rng) {
    return {store.add(id + ".weight", detail::random_field<T>({3, 3, cin, cout}, 9 * cin, 1.0, rng)),
            store.add(id + ".bias", RealField<T>({cout}))};
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const {
    if (x->value.dim(0) % 2 || x->value.dim(1) % 2)
      throw std::invalid_argument("DownConv2d: odd spatial dims " + shape_string(x->shape()));
    return conv2d(g, x, weight, bias, 2, 1);
  }
};

/// Transposed 4x4 stride-2 convolution doubling both spatial dims.
template <class T>
struct UpConv2d {
  Var<T> weight, bias;

  static UpConv2d create(ParameterStore<T>& store, const std::string& id, int cin, int cout, Rng& rng) {
    return {store.add(id + ".weight", detail::random_field<T>({4, 4, cin, cout}, 4 * cin, 1.0, rng)),
            store.add(id + ".bias", RealField<T>({cout}))};
  }

  Var<T> operator()(Graph<T>& g, const Var<T>& x) const { return conv_transpose2d(g, x, weight, bias, 2, 1); }
};

/// Sinusoidal embedding of normalized voxel coordinates t = i / n in [0, 1).
/// Channel order: axis (h, w, d), then frequency pi * 2^k, then (sin, cos).
template <class T>
RealField<T> positional_embedding(int H, int W, int D, int frequencies) {
  const int channels = 6 * frequencies;
  RealField<T> pe({H, W, D, channels});
  if (frequencies == 0) return pe;
  const std::array<int, 3> dims{H, W, D};
  // per-axis tables first; the volume is a gather over them
  std::array<std::vector<T>, 3> table;
  for (int a = 0; a < 3; ++a) {
    table[a].resize(static_cast<std::size_t>(dims[a]) * 2 * frequencies);
    for (int i = 0; i < dims[a]; ++i) {
      const double t = static_cast<double>(i) / dims[a];
      for (int k = 0; k < frequencies; ++k) {
        const double f = std::numbers::pi * std::ldexp(1.0, k);
        table[a][(static_cast<std::size_t>(i) * frequencies + k) * 2] = static_cast<T>(std::sin(f * t));
        table[a][(static_cast<std::size_t>(i) * frequencies + k) * 2 + 1] = static_cast<T>(std::cos(f * t));
      }
    }
  }
  const std::size_t per_axis = 2 * static_cast<std::size_t>(frequencies);
  T* out = pe.data();
  for (int h = 0; h < H; ++h)
    for (int w = 0; w < W; ++w)
      for (int d = 0; d < D; ++d) {
        std::copy_n(table[0].data() + h * per_axis, per_axis, out);
        std::copy_n(table[1].data() + w * per_axis, per_axis, out + per_axis);
        std::copy_n(table[2].data() + d * per_axis, per_axis, out + 2 * per_axis);
        out += channels;
      }
  return pe;
}

}  // namespace flatec::nn
