#pragma once

#include <cmath>
#include <complex>
#include <map>
#include <memory>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "flatec/nn/field.hpp"

namespace flatec::nn {

/// Unnormalized 1D DFT of a fixed length. Radix-2 for powers of two,
/// direct summation otherwise.
// TODO: Bluestein for non-power-of-two lengths; the 448/384/320 presets hit the O(n^2) path.
template <class T>
class Fft1d {
 public:
  explicit Fft1d(int n) : n_(n), pow2_(n > 0 && (n & (n - 1)) == 0) {
    if (n <= 0) throw std::invalid_argument("Fft1d: length must be positive");
    twiddle_.resize(static_cast<std::size_t>(n));
    for (int j = 0; j < n; ++j) {
      const double angle = -2.0 * std::numbers::pi * j / n;
      twiddle_[static_cast<std::size_t>(j)] = {static_cast<T>(std::cos(angle)), static_cast<T>(std::sin(angle))};
    }
    if (pow2_) {
      int bits = 0;
      while ((1 << bits) < n) ++bits;
      reversed_.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        int r = 0;
        for (int b = 0; b < bits; ++b)
          if (i & (1 << b)) r |= 1 << (bits - 1 - b);
        reversed_[static_cast<std::size_t>(i)] = r;
      }
    }
    scratch_.resize(static_cast<std::size_t>(n));
  }

  int size() const { return n_; }
  bool is_pow2() const { return pow2_; }
  std::size_t reversed(std::size_t i) const { return static_cast<std::size_t>(reversed_[i]); }

  /// Radix-2 butterflies over the rows of an n x cols matrix whose rows are
  /// already in bit-reversed order; every column is transformed.
  void run_columns(std::complex<T>* x, std::size_t cols, bool inverse) const {
    const auto n = static_cast<std::size_t>(n_);
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t step = n / len;
      for (std::size_t start = 0; start < n; start += len) {
        for (std::size_t k = 0; k < len / 2; ++k) {
          const std::complex<T> w = tw(k * step, inverse);
          std::complex<T>* a = x + (start + k) * cols;
          std::complex<T>* b = x + (start + k + len / 2) * cols;
          const T wr = w.real(), wi = w.imag();
          for (std::size_t i = 0; i < cols; ++i) {
            const T br = b[i].real(), bi = b[i].imag();
            const std::complex<T> v(br * wr - bi * wi, br * wi + bi * wr);
            const std::complex<T> u = a[i];
            a[i] = u + v;
            b[i] = u - v;
          }
        }
      }
    }
  }

  /// In-place transform; forward uses exp(-2 pi i jk / n), inverse the conjugate, no scaling.
  void run(std::complex<T>* x, bool inverse) const {
    if (pow2_)
      run_radix2(x, inverse);
    else
      run_direct(x, inverse);
  }

 private:
  std::complex<T> tw(std::size_t j, bool inverse) const {
    return inverse ? std::conj(twiddle_[j]) : twiddle_[j];
  }

  void run_radix2(std::complex<T>* x, bool inverse) const {
    const auto n = static_cast<std::size_t>(n_);
    for (std::size_t i = 0; i < n; ++i) {
      const auto r = static_cast<std::size_t>(reversed_[i]);
      if (i < r) std::swap(x[i], x[r]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
      const std::size_t step = n / len;
      for (std::size_t start = 0; start < n; start += len) {
        for (std::size_t k = 0; k < len / 2; ++k) {
          const std::complex<T> w = tw(k * step, inverse);
          const std::complex<T> u = x[start + k];
          const std::complex<T> v = x[start + k + len / 2] * w;
          x[start + k] = u + v;
          x[start + k + len / 2] = u - v;
        }
      }
    }
  }

  void run_direct(std::complex<T>* x, bool inverse) const {
    const auto n = static_cast<std::size_t>(n_);
    for (std::size_t k = 0; k < n; ++k) {
      std::complex<T> acc{0, 0};
      for (std::size_t j = 0; j < n; ++j) acc += x[j] * tw((j * k) % n, inverse);
      scratch_[k] = acc;
    }
    std::copy(scratch_.begin(), scratch_.end(), x);
  }

  int n_;
  bool pow2_;
  std::vector<std::complex<T>> twiddle_;
  std::vector<int> reversed_;
  mutable std::vector<std::complex<T>> scratch_;
};

template <class T>
const Fft1d<T>& fft_plan(int n) {
  thread_local std::map<int, std::unique_ptr<Fft1d<T>>> cache;
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Fft1d<T>>(n);
  return *slot;
}

/// Orthonormal multi-axis DFT over the leading spatial dims of a channel-last
/// complex buffer. When `centered`, the forward pass writes the DC bin to index
/// n/2 of every axis and the inverse pass reads it from there.
template <class T>
void transform_axes(std::complex<T>* buf, std::span<const int> dims, int channels, bool inverse, bool centered) {
  std::size_t total = static_cast<std::size_t>(channels);
  for (int d : dims) total *= static_cast<std::size_t>(d);
  std::vector<std::complex<T>> line, block;
  for (std::size_t axis = 0; axis < dims.size(); ++axis) {
    const int n = dims[axis];
    const auto un = static_cast<std::size_t>(n);
    std::size_t stride = static_cast<std::size_t>(channels);
    for (std::size_t a = axis + 1; a < dims.size(); ++a) stride *= static_cast<std::size_t>(dims[a]);
    const std::size_t outer = total / (stride * un);
    const auto& plan = fft_plan<T>(n);
    const T scale = static_cast<T>(1.0 / std::sqrt(static_cast<double>(n)));
    const std::size_t half = un / 2;
    if (plan.is_pow2()) {
      // Each outer slice is an n x stride matrix; transform all columns together row by row.
      block.resize(un * stride);
      for (std::size_t o = 0; o < outer; ++o) {
        std::complex<T>* base = buf + o * un * stride;
        for (std::size_t k = 0; k < un; ++k) {
          const std::size_t src = (centered && inverse) ? (k + half) % un : k;
          std::copy_n(base + src * stride, stride, block.data() + plan.reversed(k) * stride);
        }
        plan.run_columns(block.data(), stride, inverse);
        for (std::size_t k = 0; k < un; ++k) {
          const std::size_t dst = (centered && !inverse) ? (k + half) % un : k;
          const std::complex<T>* from = block.data() + k * stride;
          std::complex<T>* to = base + dst * stride;
          for (std::size_t i = 0; i < stride; ++i) to[i] = from[i] * scale;
        }
      }
      continue;
    }
    line.resize(un);
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t inner = 0; inner < stride; ++inner) {
        std::complex<T>* base = buf + o * un * stride + inner;
        for (std::size_t k = 0; k < un; ++k) {
          const std::size_t src = (centered && inverse) ? (k + half) % un : k;
          line[k] = base[src * stride];
        }
        plan.run(line.data(), inverse);
        for (std::size_t k = 0; k < un; ++k) {
          const std::size_t dst = (centered && !inverse) ? (k + half) % un : k;
          base[dst * stride] = line[k] * scale;
        }
      }
    }
  }
}

/// Complex array over spatial dims (+ trailing channel dim), DC optionally centered.
template <class T>
struct ComplexSpectrum {
  Shape shape;
  int spatial_rank = 0;
  std::vector<std::complex<T>> values;
  bool dc_centered = true;

  std::span<const int> spatial_dims() const { return {shape.data(), static_cast<std::size_t>(spatial_rank)}; }
  int channels() const {
    return static_cast<int>(shape.size()) > spatial_rank ? shape.back() : 1;
  }
};

namespace detail {

inline void check_spatial(const Shape& shape, int spatial_rank, const char* who) {
  if (spatial_rank < 2 || spatial_rank > 3)
    throw std::invalid_argument(std::string(who) + ": spatial rank must be 2 or 3");
  const int rank = static_cast<int>(shape.size());
  if (rank != spatial_rank && rank != spatial_rank + 1)
    throw std::invalid_argument(std::string(who) + ": shape " + shape_string(shape) +
                                " does not have " + std::to_string(spatial_rank) + " spatial dims");
  for (int i = 0; i < spatial_rank; ++i)
    if (shape[static_cast<std::size_t>(i)] < 2)
      throw std::invalid_argument(std::string(who) + ": spatial dims must be >= 2, got " + shape_string(shape));
}

}  // namespace detail

/// Orthonormal DFT with the DC bin moved to the spatial centre, per channel.
template <class T>
ComplexSpectrum<T> dft_centered(const RealField<T>& x, int spatial_rank) {
  detail::check_spatial(x.shape, spatial_rank, "dft_centered");
  for (std::size_t i = 0; i < x.size(); ++i)
    if (!std::isfinite(x[i]))
      throw std::invalid_argument("dft_centered: non-finite input at flat index " + std::to_string(i));
  ComplexSpectrum<T> s{x.shape, spatial_rank, {}, true};
  s.values.assign(x.values.begin(), x.values.end());
  transform_axes(s.values.data(), s.spatial_dims(), s.channels(), false, true);
  return s;
}

/// Full complex inverse of a spectrum.
template <class T>
std::vector<std::complex<T>> idft_centered(const ComplexSpectrum<T>& s) {
  detail::check_spatial(s.shape, s.spatial_rank, "idft_centered");
  if (s.values.size() != shape_product(s.shape))
    throw std::invalid_argument("idft_centered: value count does not match shape " + shape_string(s.shape));
  std::vector<std::complex<T>> out = s.values;
  transform_axes(out.data(), s.spatial_dims(), s.channels(), true, s.dc_centered);
  return out;
}

template <class T>
RealField<T> idft_centered_real(const ComplexSpectrum<T>& s) {
  if (!s.dc_centered) throw std::invalid_argument("idft_centered_real: spectrum is not DC-centred");
  const auto full = idft_centered(s);
  RealField<T> out(s.shape);
  for (std::size_t i = 0; i < full.size(); ++i) out[i] = full[i].real();
  return out;
}

/// max |imag| / max |real| of the inverse transform. Near zero iff the
/// spectrum is conjugate-symmetric about the centred origin.
template <class T>
double imaginary_residue(const ComplexSpectrum<T>& s) {
  const auto full = idft_centered(s);
  double max_re = 0.0, max_im = 0.0;
  for (const auto& v : full) {
    max_re = std::max(max_re, static_cast<double>(std::abs(v.real())));
    max_im = std::max(max_im, static_cast<double>(std::abs(v.imag())));
  }
  return max_re > 0.0 ? max_im / max_re : max_im;
}

template <class T>
bool is_hermitian(const ComplexSpectrum<T>& s, double tol = 1e-5) {
  return imaginary_residue(s) < tol;
}

/// Flat index of the centred bin mirrored through the origin (k -> -k mod n per axis).
inline std::size_t mirrored_index(std::span<const int> dims, int channels, std::size_t flat) {
  const auto c = flat % static_cast<std::size_t>(channels);
  std::size_t rest = flat / static_cast<std::size_t>(channels);
  std::vector<std::size_t> idx(dims.size());
  for (std::size_t a = dims.size(); a-- > 0;) {
    idx[a] = rest % static_cast<std::size_t>(dims[a]);
    rest /= static_cast<std::size_t>(dims[a]);
  }
  std::size_t out = 0;
  for (std::size_t a = 0; a < dims.size(); ++a) {
    const auto n = static_cast<std::size_t>(dims[a]);
    const std::size_t half = n / 2;
    // centred position p holds natural frequency k = (p - half) mod n; mirror is -k
    const std::size_t k = (idx[a] + n - half) % n;
    const std::size_t mk = (n - k) % n;
    out = out * n + (mk + half) % n;
  }
  return out * static_cast<std::size_t>(channels) + c;
}

}  // namespace flatec::nn
