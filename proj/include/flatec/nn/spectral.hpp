#pragma once

#include <array>
#include <cmath>
#include <complex>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatec/nn/autograd.hpp"
#include "flatec/nn/fft.hpp"

namespace flatec::nn {

/// Centred isotropic Gaussian over a rows x cols frequency grid with peak 1 at
/// the DC bin. Distances are in frequency bins.
template <class T>
std::vector<T> gaussian_mask(int rows, int cols, double sigma) {
  std::vector<T> m(static_cast<std::size_t>(rows) * cols);
  const int hr = rows / 2, hc = cols / 2;
  for (int p = 0; p < rows; ++p)
    for (int q = 0; q < cols; ++q) {
      const double r2 = double(p - hr) * (p - hr) + double(q - hc) * (q - hc);
      m[static_cast<std::size_t>(p) * cols + q] = static_cast<T>(std::exp(-r2 / (2.0 * sigma * sigma)));
    }
  return m;
}

/// Squared centred radius per bin, same layout as gaussian_mask.
template <class T>
std::vector<T> radius_squared(int rows, int cols) {
  std::vector<T> m(static_cast<std::size_t>(rows) * cols);
  const int hr = rows / 2, hc = cols / 2;
  for (int p = 0; p < rows; ++p)
    for (int q = 0; q < cols; ++q)
      m[static_cast<std::size_t>(p) * cols + q] = static_cast<T>(double(p - hr) * (p - hr) + double(q - hc) * (q - hc));
  return m;
}

namespace detail {

/// Re(F^-1(F(x) * mask)) for a plane [rows, cols, C] with a per-bin real mask shared by channels.
template <class T>
std::vector<T> apply_plane_mask(const std::vector<std::complex<T>>& spectrum, const std::vector<T>& mask,
                                const Shape& shape) {
  const auto c = static_cast<std::size_t>(shape[2]);
  std::vector<std::complex<T>> buf(spectrum.size());
  for (std::size_t i = 0; i < spectrum.size(); ++i) buf[i] = spectrum[i] * mask[i / c];
  transform_axes(buf.data(), std::span<const int>(shape.data(), 2), static_cast<int>(c), true, true);
  std::vector<T> out(buf.size());
  for (std::size_t i = 0; i < buf.size(); ++i) out[i] = buf[i].real();
  return out;
}

template <class T>
std::vector<std::complex<T>> plane_spectrum(const std::vector<T>& values, const Shape& shape) {
  std::vector<std::complex<T>> s(values.begin(), values.end());
  transform_axes(s.data(), std::span<const int>(shape.data(), 2), shape[2], false, true);
  return s;
}

}  // namespace detail

/// y = Re(F^-1(F(x) * M)) on a plane x [rows, cols, C], where
/// M = gain * G_sigma (low-pass) or 1 - gain * G_sigma (complement).
/// `gain` may be null (treated as 1). Differentiable in x, gain and sigma.
template <class T>
Var<T> gaussian_filter(Graph<T>& g, const Var<T>& x, const Var<T>& gain, const Var<T>& sigma, bool complement) {
  if (x->value.rank() != 3) throw std::invalid_argument("gaussian_filter: expected [rows, cols, C], got " +
                                                        shape_string(x->shape()));
  const int rows = x->value.dim(0), cols = x->value.dim(1);
  const T s = gain ? gain->value[0] : T{1};
  const T sg = sigma->value[0];
  if (!(sg > T{0})) throw std::invalid_argument("gaussian_filter: sigma must be positive");
  const auto G = gaussian_mask<T>(rows, cols, static_cast<double>(sg));
  std::vector<T> mask(G.size());
  for (std::size_t i = 0; i < G.size(); ++i) mask[i] = complement ? T{1} - s * G[i] : s * G[i];
  auto spectrum = detail::plane_spectrum(x->value.values, x->shape());
  auto out = g.result(x->shape(), {&x, &gain, &sigma});
  out->value.values = detail::apply_plane_mask(spectrum, mask, x->shape());
  if (out->requires_grad) {
    g.push([x, gain, sigma, out, G, mask, spectrum = std::move(spectrum), s, sg, complement, rows, cols] {
      const T sign = complement ? T{-1} : T{1};
      if (x->requires_grad) {
        const auto gs = detail::plane_spectrum(out->grad, x->shape());
        const auto gx = detail::apply_plane_mask(gs, mask, x->shape());
        auto& buf = x->grad_buffer();
        for (std::size_t i = 0; i < buf.size(); ++i) buf[i] += gx[i];
      }
      if (gain && gain->requires_grad) {
        const auto dy = detail::apply_plane_mask(spectrum, G, x->shape());
        T acc{0};
        for (std::size_t i = 0; i < dy.size(); ++i) acc += out->grad[i] * dy[i];
        gain->grad_buffer()[0] += sign * acc;
      }
      if (sigma->requires_grad) {
        const auto r2 = radius_squared<T>(rows, cols);
        std::vector<T> dG(G.size());
        for (std::size_t i = 0; i < G.size(); ++i) dG[i] = G[i] * r2[i] / (sg * sg * sg);
        const auto dy = detail::apply_plane_mask(spectrum, dG, x->shape());
        T acc{0};
        for (std::size_t i = 0; i < dy.size(); ++i) acc += out->grad[i] * dy[i];
        sigma->grad_buffer()[0] += sign * s * acc;
      }
    });
  }
  return out;
}

/// Projects raw (re, im) filter arrays [w, w, w, C] onto the conjugate-symmetric subspace:
/// re <- (re + re(-k)) / 2, im <- (im - im(-k)) / 2. The projection is its own adjoint.
template <class T>
void hermitian_project(const std::vector<T>& re, const std::vector<T>& im, const Shape& shape,
                       std::vector<T>& re_out, std::vector<T>& im_out) {
  const std::span<const int> dims(shape.data(), shape.size() - 1);
  const int c = shape.back();
  re_out.resize(re.size());
  im_out.resize(im.size());
  for (std::size_t i = 0; i < re.size(); ++i) {
    const std::size_t m = mirrored_index(dims, c, i);
    re_out[i] = (re[i] + re[m]) / T{2};
    im_out[i] = (im[i] - im[m]) / T{2};
  }
}

/// Windowed spectral filtering of a volume x [H, W, D, C]: every w^3 window is
/// transformed with the centred orthonormal 3D DFT, multiplied by the complex
/// filter alpha (per channel, Hermitian-projected from raw re/im parameters of
/// shape [w, w, w, C]), inverse transformed, and the real part kept.
template <class T>
Var<T> windowed_spectral_filter(Graph<T>& g, const Var<T>& x, const Var<T>& alpha_re, const Var<T>& alpha_im) {
  const auto& as = alpha_re->shape();
  if (as.size() != 4 || alpha_im->shape() != as || x->value.rank() != 4 || as[3] != x->value.dim(3) ||
      as[0] != as[1] || as[1] != as[2])
    throw std::invalid_argument("windowed_spectral_filter: filter " + shape_string(as) +
                                " incompatible with volume " + shape_string(x->shape()));
  const int w = as[0], C = as[3];
  const int H = x->value.dim(0), W = x->value.dim(1), D = x->value.dim(2);
  if (H % w || W % w || D % w)
    throw std::invalid_argument("windowed_spectral_filter: volume " + shape_string(x->shape()) +
                                " not divisible by window " + std::to_string(w));
  std::vector<T> are, aim;
  hermitian_project(alpha_re->value.values, alpha_im->value.values, as, are, aim);
  const std::array<int, 3> wdims{w, w, w};
  const std::size_t wsize = static_cast<std::size_t>(w) * w * w * C;
  const int nh = H / w, nw = W / w, nd = D / w;
  const std::size_t nwin = static_cast<std::size_t>(nh) * nw * nd;

  auto for_window = [=](std::size_t win, auto&& fn) {
    const int bh = static_cast<int>(win / (static_cast<std::size_t>(nw) * nd)) * w;
    const int bw = static_cast<int>((win / nd) % nw) * w;
    const int bd = static_cast<int>(win % nd) * w;
    std::size_t local = 0;
    for (int a = 0; a < w; ++a)
      for (int b = 0; b < w; ++b)
        for (int c = 0; c < w; ++c) {
          const std::size_t base = ((static_cast<std::size_t>(bh + a) * W + (bw + b)) * D + (bd + c)) * C;
          for (int ch = 0; ch < C; ++ch, ++local) fn(base + ch, local);
        }
  };

  auto out = g.result(x->shape(), {&x, &alpha_re, &alpha_im});
  std::vector<std::complex<T>> spectra(nwin * wsize);
  std::vector<std::complex<T>> buf(wsize);
  for (std::size_t win = 0; win < nwin; ++win) {
    std::complex<T>* spec = spectra.data() + win * wsize;
    for_window(win, [&](std::size_t gidx, std::size_t l) { spec[l] = x->value[gidx]; });
    transform_axes(spec, std::span<const int>(wdims), C, false, true);
    for (std::size_t l = 0; l < wsize; ++l) buf[l] = spec[l] * std::complex<T>(are[l], aim[l]);
    transform_axes(buf.data(), std::span<const int>(wdims), C, true, true);
    for_window(win, [&](std::size_t gidx, std::size_t l) { out->value[gidx] = buf[l].real(); });
  }
  if (out->requires_grad) {
    g.push([x, alpha_re, alpha_im, out, are = std::move(are), aim = std::move(aim), spectra = std::move(spectra),
            for_window, wdims, wsize, nwin, as, C] {
      std::vector<std::complex<T>> gspec(wsize), buf(wsize);
      std::vector<T> gre(wsize, T{0}), gim(wsize, T{0});
      const bool want_alpha = alpha_re->requires_grad || alpha_im->requires_grad;
      for (std::size_t win = 0; win < nwin; ++win) {
        for_window(win, [&](std::size_t gidx, std::size_t l) { gspec[l] = out->grad[gidx]; });
        transform_axes(gspec.data(), std::span<const int>(wdims), C, false, true);
        if (want_alpha) {
          const std::complex<T>* spec = spectra.data() + win * wsize;
          for (std::size_t l = 0; l < wsize; ++l) {
            const std::complex<T> z = spec[l] * std::conj(gspec[l]);
            gre[l] += z.real();
            gim[l] -= z.imag();
          }
        }
        if (x->requires_grad) {
          for (std::size_t l = 0; l < wsize; ++l) buf[l] = std::conj(std::complex<T>(are[l], aim[l])) * gspec[l];
          transform_axes(buf.data(), std::span<const int>(wdims), C, true, true);
          auto& gx = x->grad_buffer();
          for_window(win, [&](std::size_t gidx, std::size_t l) { gx[gidx] += buf[l].real(); });
        }
      }
      if (want_alpha) {
        std::vector<T> pre, pim;
        hermitian_project(gre, gim, as, pre, pim);
        if (alpha_re->requires_grad) {
          auto& ga = alpha_re->grad_buffer();
          for (std::size_t l = 0; l < wsize; ++l) ga[l] += pre[l];
        }
        if (alpha_im->requires_grad) {
          auto& ga = alpha_im->grad_buffer();
          for (std::size_t l = 0; l < wsize; ++l) ga[l] += pim[l];
        }
      }
    });
  }
  return out;
}

}  // namespace flatec::nn
