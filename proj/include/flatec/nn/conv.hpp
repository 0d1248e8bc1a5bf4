#pragma once

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "flatec/nn/autograd.hpp"

namespace flatec::nn {

namespace detail {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<Mat<T>>;
template <class T>
using CMapM = Eigen::Map<const Mat<T>>;

/// Geometry shared by strided convolution and its transpose: small-grid pixel
/// (y, x) touches big-grid pixel (y * stride - pad + ky, x * stride - pad + kx).
struct PatchMap {
  int bh, bw, sh, sw, k, stride, pad;

  template <class F>
  void visit(F&& fn) const {
    for (int y = 0; y < sh; ++y)
      for (int x = 0; x < sw; ++x)
        for (int ky = 0; ky < k; ++ky) {
          const int by = y * stride - pad + ky;
          if (by < 0 || by >= bh) continue;
          for (int kx = 0; kx < k; ++kx) {
            const int bx = x * stride - pad + kx;
            if (bx < 0 || bx >= bw) continue;
            fn(static_cast<std::size_t>(y) * sw + x, ky * k + kx, static_cast<std::size_t>(by) * bw + bx);
          }
        }
  }
};

/// [sh * sw, k * k * c] patches of a big-grid field with c channels.
template <class T>
Mat<T> im2col(const T* big, int c, const PatchMap& pm) {
  Mat<T> col = Mat<T>::Zero(static_cast<Eigen::Index>(pm.sh) * pm.sw, static_cast<Eigen::Index>(pm.k) * pm.k * c);
  pm.visit([&](std::size_t row, int tap, std::size_t b) {
    std::copy_n(big + b * c, c, col.data() + row * col.cols() + static_cast<std::size_t>(tap) * c);
  });
  return col;
}

template <class T>
void col2im_add(const Mat<T>& col, T* big, int c, const PatchMap& pm) {
  pm.visit([&](std::size_t row, int tap, std::size_t b) {
    const T* src = col.data() + row * col.cols() + static_cast<std::size_t>(tap) * c;
    T* dst = big + b * c;
    for (int i = 0; i < c; ++i) dst[i] += src[i];
  });
}

/// weight [k*k, cin, cout] <-> [cin, k*k*cout]
template <class T>
Mat<T> taps_to_columns(const T* wt, int taps, int cin, int cout) {
  Mat<T> m(cin, static_cast<Eigen::Index>(taps) * cout);
  for (int t = 0; t < taps; ++t)
    for (int ci = 0; ci < cin; ++ci)
      std::copy_n(wt + (static_cast<std::size_t>(t) * cin + ci) * cout, cout, m.data() + ci * m.cols() + t * cout);
  return m;
}

template <class T>
void columns_to_taps_add(const Mat<T>& m, T* wt, int taps, int cin, int cout) {
  for (int t = 0; t < taps; ++t)
    for (int ci = 0; ci < cin; ++ci) {
      const T* src = m.data() + ci * m.cols() + t * cout;
      T* dst = wt + (static_cast<std::size_t>(t) * cin + ci) * cout;
      for (int co = 0; co < cout; ++co) dst[co] += src[co];
    }
}

}  // namespace detail

/// 2D convolution, channel-last. x [H, W, Cin], weight [k, k, Cin, Cout], bias [Cout] (nullable).
/// Zero padding `pad` on each side.
template <class T>
Var<T> conv2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride, int pad) {
  const auto& ws = weight->shape();
  if (ws.size() != 4 || x->value.rank() != 3 || x->value.dim(2) != ws[2])
    throw std::invalid_argument("conv2d: input " + shape_string(x->shape()) + " incompatible with weight " +
                                shape_string(ws));
  const int k = ws[0], cin = ws[2], cout = ws[3];
  const int h = x->value.dim(0), w = x->value.dim(1);
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d: empty output");
  auto out = g.result({oh, ow, cout}, {&x, &weight, &bias});
  const detail::PatchMap pm{h, w, oh, ow, k, stride, pad};
  const auto rows = static_cast<Eigen::Index>(oh) * ow, kc = static_cast<Eigen::Index>(k) * k * cin;
  auto col = detail::im2col(x->value.data(), cin, pm);
  detail::MapM<T> o(out->value.data(), rows, cout);
  const detail::CMapM<T> wm(weight->value.data(), kc, cout);
  o.noalias() = col * wm;
  if (bias) o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value.data(), cout);
  if (out->requires_grad) {
    g.push([x, weight, bias, out, pm, rows, kc, cin, cout, col = std::move(col)] {
      const detail::CMapM<T> go(out->grad.data(), rows, cout);
      if (bias && bias->requires_grad)
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->grad_buffer().data(), cout) += go.colwise().sum();
      if (weight->requires_grad)
        detail::MapM<T>(weight->grad_buffer().data(), kc, cout).noalias() += col.transpose() * go;
      if (x->requires_grad) {
        const detail::Mat<T> gcol = go * detail::CMapM<T>(weight->value.data(), kc, cout).transpose();
        detail::col2im_add(gcol, x->grad_buffer().data(), cin, pm);
      }
    });
  }
  return out;
}

/// Transposed 2D convolution: each input pixel scatters weight[ky, kx] into
/// output position (iy * stride - pad + ky, ix * stride - pad + kx).
/// Output size is (H - 1) * stride - 2 pad + k.
template <class T>
Var<T> conv_transpose2d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias, int stride,
                        int pad) {
  const auto& ws = weight->shape();
  if (ws.size() != 4 || x->value.rank() != 3 || x->value.dim(2) != ws[2])
    throw std::invalid_argument("conv_transpose2d: input " + shape_string(x->shape()) +
                                " incompatible with weight " + shape_string(ws));
  const int k = ws[0], cin = ws[2], cout = ws[3];
  const int h = x->value.dim(0), w = x->value.dim(1);
  const int oh = (h - 1) * stride - 2 * pad + k;
  const int ow = (w - 1) * stride - 2 * pad + k;
  auto out = g.result({oh, ow, cout}, {&x, &weight, &bias});
  const detail::PatchMap pm{oh, ow, h, w, k, stride, pad};
  const auto rows = static_cast<Eigen::Index>(h) * w;
  const int taps = k * k;
  if (bias)
    detail::MapM<T>(out->value.data(), static_cast<Eigen::Index>(oh) * ow, cout).rowwise() +=
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->value.data(), cout);
  {
    const detail::Mat<T> col =
        detail::CMapM<T>(x->value.data(), rows, cin) * detail::taps_to_columns(weight->value.data(), taps, cin, cout);
    detail::col2im_add(col, out->value.data(), cout, pm);
  }
  if (out->requires_grad) {
    g.push([x, weight, bias, out, pm, rows, taps, cin, cout, oh, ow] {
      if (bias && bias->requires_grad)
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->grad_buffer().data(), cout) +=
            detail::CMapM<T>(out->grad.data(), static_cast<Eigen::Index>(oh) * ow, cout).colwise().sum();
      if (!x->requires_grad && !weight->requires_grad) return;
      const auto gcol = detail::im2col(out->grad.data(), cout, pm);
      if (x->requires_grad)
        detail::MapM<T>(x->grad_buffer().data(), rows, cin).noalias() +=
            gcol * detail::taps_to_columns(weight->value.data(), taps, cin, cout).transpose();
      if (weight->requires_grad) {
        const detail::Mat<T> gw = detail::CMapM<T>(x->value.data(), rows, cin).transpose() * gcol;
        detail::columns_to_taps_add(gw, weight->grad_buffer().data(), taps, cin, cout);
      }
    });
  }
  return out;
}

/// Dense 3D convolution, stride 1, zero "same" padding (k odd).
/// x [H, W, D, Cin], weight [k, k, k, Cin, Cout], bias [Cout] (nullable).
/// Evaluated as a scatter from nonzero inputs, so sparse occupancy volumes are cheap.
template <class T>
Var<T> conv3d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& ws = weight->shape();
  if (ws.size() != 5 || x->value.rank() != 4 || x->value.dim(3) != ws[3] || ws[0] % 2 == 0)
    throw std::invalid_argument("conv3d: input " + shape_string(x->shape()) + " incompatible with weight " +
                                shape_string(ws));
  const int k = ws[0], cin = ws[3], cout = ws[4], r = k / 2;
  const int H = x->value.dim(0), W = x->value.dim(1), D = x->value.dim(2);
  auto out = g.result({H, W, D, cout}, {&x, &weight, &bias});
  auto vox = [W, D](int h, int w, int d) { return (static_cast<std::size_t>(h) * W + w) * D + d; };
  // fn(input offset, output offset, weight offset) for every in-bounds (input voxel, tap) pair,
  // restricted to voxels flagged in `mask` when given.
  auto for_pairs = [=](const std::uint8_t* mask, auto&& fn) {
    for (int h = 0; h < H; ++h)
      for (int w = 0; w < W; ++w)
        for (int d = 0; d < D; ++d) {
          if (mask && !mask[vox(h, w, d)]) continue;
          for (int a = 0; a < k; ++a) {
            const int oh = h - a + r;
            if (oh < 0 || oh >= H) continue;
            for (int b = 0; b < k; ++b) {
              const int ow = w - b + r;
              if (ow < 0 || ow >= W) continue;
              for (int c = 0; c < k; ++c) {
                const int od = d - c + r;
                if (od < 0 || od >= D) continue;
                fn(vox(h, w, d) * cin, vox(oh, ow, od) * cout, ((static_cast<std::size_t>(a) * k + b) * k + c) * cin * cout);
              }
            }
          }
        }
  };
  // Voxels with at least one nonzero input channel.
  std::vector<std::uint8_t> live(static_cast<std::size_t>(H) * W * D);
  for (std::size_t v = 0; v < live.size(); ++v)
    for (int ci = 0; ci < cin; ++ci) live[v] |= x->value[v * cin + ci] != T{0};
  {
    T* o = out->value.data();
    const T* in = x->value.data();
    const T* wt = weight->value.data();
    if (bias)
      for (std::size_t v = 0; v < out->size(); v += cout) std::copy_n(bias->value.data(), cout, o + v);
    for_pairs(live.data(), [&](std::size_t io, std::size_t oo, std::size_t wo) {
      for (int ci = 0; ci < cin; ++ci) {
        const T v = in[io + ci];
        const T* wr = wt + wo + static_cast<std::size_t>(ci) * cout;
        for (int co = 0; co < cout; ++co) o[oo + co] += v * wr[co];
      }
    });
  }
  if (out->requires_grad) {
    g.push([x, weight, bias, out, cin, cout, for_pairs, live = std::move(live)] {
      const T* in = x->value.data();
      const T* wt = weight->value.data();
      const T* go = out->grad.data();
      if (bias && bias->requires_grad) {
        T* gb = bias->grad_buffer().data();
        for (std::size_t v = 0; v < out->size(); v += cout)
          for (int co = 0; co < cout; ++co) gb[co] += go[v + co];
      }
      T* gw = weight->requires_grad ? weight->grad_buffer().data() : nullptr;
      T* gx = x->requires_grad ? x->grad_buffer().data() : nullptr;
      if (!gw && !gx) return;
      for_pairs(gx ? nullptr : live.data(), [&](std::size_t io, std::size_t oo, std::size_t wo) {
        const bool hot = live[io / cin];
        for (int ci = 0; ci < cin; ++ci) {
          const std::size_t wr = wo + static_cast<std::size_t>(ci) * cout;
          if (gx) {
            T acc{0};
            for (int co = 0; co < cout; ++co) acc += go[oo + co] * wt[wr + co];
            gx[io + ci] += acc;
          }
          if (gw && hot) {
            const T v = in[io + ci];
            for (int co = 0; co < cout; ++co) gw[wr + co] += v * go[oo + co];
          }
        }
      });
    });
  }
  return out;
}


/// Depthwise 3D convolution, stride 1, "same" zero padding (k odd).
/// x [H, W, D, C], weight [k, k, k, C], bias [C] (nullable).
template <class T>
Var<T> depthwise_conv3d(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  const auto& ws = weight->shape();
  if (ws.size() != 4 || x->value.rank() != 4 || x->value.dim(3) != ws[3] || ws[0] % 2 == 0)
    throw std::invalid_argument("depthwise_conv3d: input " + shape_string(x->shape()) +
                                " incompatible with weight " + shape_string(ws));
  const int k = ws[0], C = ws[3], r = k / 2;
  const int H = x->value.dim(0), W = x->value.dim(1), D = x->value.dim(2);
  auto out = g.result(x->shape(), {&x, &weight, &bias});
  auto vox = [W, D](int h, int w, int d) { return (static_cast<std::size_t>(h) * W + w) * D + d; };
  // Visits every (tap, output row) pair with the valid d-span: fn(tap weights, out offset, in offset, span length).
  auto for_spans = [=](auto&& fn) {
    for (int a = 0; a < k; ++a)
      for (int b = 0; b < k; ++b)
        for (int c = 0; c < k; ++c) {
          const int dh = a - r, dw = b - r, dd = c - r;
          const std::size_t tap = ((static_cast<std::size_t>(a) * k + b) * k + c) * C;
          const int d0 = std::max(0, -dd), d1 = std::min(D, D - dd);
          if (d1 <= d0) continue;
          for (int h = std::max(0, -dh); h < std::min(H, H - dh); ++h)
            for (int w = std::max(0, -dw); w < std::min(W, W - dw); ++w)
              fn(tap, vox(h, w, d0) * C, vox(h + dh, w + dw, d0 + dd) * C, d1 - d0);
        }
  };
  // Tap weights repeated along a full d-row, so span loops run flat over len * C values.
  const std::size_t row = static_cast<std::size_t>(D) * C;
  auto tiled = [=](const T* wt) {
    std::vector<T> t(static_cast<std::size_t>(k) * k * k * row);
    for (std::size_t tap = 0; tap < static_cast<std::size_t>(k) * k * k; ++tap)
      for (std::size_t i = 0; i < row; ++i) t[tap * row + i] = wt[tap * C + i % C];
    return t;
  };
  {
    T* o = out->value.data();
    const T* in = x->value.data();
    const auto wt = tiled(weight->value.data());
    if (bias)
      for (std::size_t v = 0; v < x->size(); v += C) std::copy_n(bias->value.data(), C, o + v);
    for_spans([&](std::size_t tap, std::size_t oo, std::size_t io, int len) {
      const T* wp = wt.data() + tap / C * row;
      T* op = o + oo;
      const T* ip = in + io;
      const std::size_t n = static_cast<std::size_t>(len) * C;
      for (std::size_t i = 0; i < n; ++i) op[i] += ip[i] * wp[i];
    });
  }
  if (out->requires_grad) {
    g.push([x, weight, bias, out, C, k, row, for_spans, tiled] {
      const T* in = x->value.data();
      const T* go = out->grad.data();
      T* gx = x->requires_grad ? x->grad_buffer().data() : nullptr;
      T* gw = weight->requires_grad ? weight->grad_buffer().data() : nullptr;
      if (bias && bias->requires_grad) {
        T* gb = bias->grad_buffer().data();
        for (std::size_t v = 0; v < out->size(); v += C)
          for (int ch = 0; ch < C; ++ch) gb[ch] += go[v + ch];
      }
      const auto wt = tiled(weight->value.data());
      std::vector<T> acc(gw ? wt.size() : 0);
      for_spans([&](std::size_t tap, std::size_t oo, std::size_t io, int len) {
        const T* gp = go + oo;
        const std::size_t n = static_cast<std::size_t>(len) * C;
        if (gx) {
          const T* wp = wt.data() + tap / C * row;
          T* xp = gx + io;
          for (std::size_t i = 0; i < n; ++i) xp[i] += gp[i] * wp[i];
        }
        if (gw) {
          const T* ip = in + io;
          T* ap = acc.data() + tap / C * row;
          for (std::size_t i = 0; i < n; ++i) ap[i] += gp[i] * ip[i];
        }
      });
      if (gw)
        for (std::size_t t = 0; t < static_cast<std::size_t>(k) * k * k; ++t)
          for (std::size_t i = 0; i < row; ++i) gw[t * C + i % C] += acc[t * row + i];
    });
  }
  return out;
}

}  // namespace flatec::nn
