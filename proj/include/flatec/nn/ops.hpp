#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "flatec/nn/autograd.hpp"
#include "flatec/rng.hpp"

namespace flatec::nn {

namespace detail {

template <class T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* who) {
  if (a->shape() != b->shape())
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + shape_string(a->shape()) + " vs " +
                                shape_string(b->shape()));
}

template <class T>
T sigmoid(T x) {
  return x >= 0 ? T{1} / (T{1} + std::exp(-x)) : std::exp(x) / (T{1} + std::exp(x));
}

template <class T>
T softplus(T x) {
  return x > T{20} ? x : std::log1p(std::exp(x));
}

/// Elementwise unary op with derivative expressed through (x, y).
template <class T, class F, class DF>
Var<T> unary(Graph<T>& g, const Var<T>& x, F f, DF df) {
  auto out = g.result(x->shape(), {&x});
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = f(x->value[i]);
  if (out->requires_grad) {
    g.push([x, out, df] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < x->size(); ++i) gx[i] += out->grad[i] * df(x->value[i], out->value[i]);
    });
  }
  return out;
}

}  // namespace detail

template <class T>
Var<T> add(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "add");
  auto out = g.result(a->shape(), {&a, &b});
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] + b->value[i];
  if (out->requires_grad) {
    g.push([a, b, out] {
      for (const auto* v : {&a, &b}) {
        if (!(*v)->requires_grad) continue;
        auto& gv = (*v)->grad_buffer();
        for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += out->grad[i];
      }
    });
  }
  return out;
}

template <class T>
Var<T> sub(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "sub");
  auto out = g.result(a->shape(), {&a, &b});
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] - b->value[i];
  if (out->requires_grad) {
    g.push([a, b, out] {
      if (a->requires_grad) {
        auto& ga = a->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out->grad[i];
      }
      if (b->requires_grad) {
        auto& gb = b->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= out->grad[i];
      }
    });
  }
  return out;
}

/// Hadamard product.
template <class T>
Var<T> mul(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  detail::require_same_shape(a, b, "mul");
  auto out = g.result(a->shape(), {&a, &b});
  for (std::size_t i = 0; i < a->size(); ++i) out->value[i] = a->value[i] * b->value[i];
  if (out->requires_grad) {
    g.push([a, b, out] {
      if (a->requires_grad) {
        auto& ga = a->grad_buffer();
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += out->grad[i] * b->value[i];
      }
      if (b->requires_grad) {
        auto& gb = b->grad_buffer();
        for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += out->grad[i] * a->value[i];
      }
    });
  }
  return out;
}

template <class T>
Var<T> scale(Graph<T>& g, const Var<T>& x, T factor) {
  return detail::unary(
      g, x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <class T>
Var<T> add_constant(Graph<T>& g, const Var<T>& x, T c) {
  return detail::unary(
      g, x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

/// x + c where c is a fixed field (no gradient into c).
template <class T>
Var<T> add_fixed(Graph<T>& g, const Var<T>& x, const RealField<T>& c) {
  if (c.shape != x->shape()) throw std::invalid_argument("add_fixed: shape mismatch");
  auto out = g.result(x->shape(), {&x});
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = x->value[i] + c[i];
  if (out->requires_grad) {
    g.push([x, out] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out->grad[i];
    });
  }
  return out;
}

template <class T>
Var<T> silu(Graph<T>& g, const Var<T>& x) {
  using A = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x->size());
  const Eigen::Map<const A> xv(x->value.data(), n);
  A s = (T{1} + (-xv).exp()).inverse();
  auto out = g.result(x->shape(), {&x});
  Eigen::Map<A>(out->value.data(), n) = xv * s;
  if (out->requires_grad) {
    g.push([x, out, n, s = std::move(s)] {
      const Eigen::Map<const A> xv(x->value.data(), n), go(out->grad.data(), n);
      Eigen::Map<A>(x->grad_buffer().data(), n) += go * s * (T{1} + xv * (T{1} - s));
    });
  }
  return out;
}

template <class T>
Var<T> sigmoid(Graph<T>& g, const Var<T>& x) {
  using A = Eigen::Array<T, Eigen::Dynamic, 1>;
  const auto n = static_cast<Eigen::Index>(x->size());
  auto out = g.result(x->shape(), {&x});
  Eigen::Map<A>(out->value.data(), n) = (T{1} + (-Eigen::Map<const A>(x->value.data(), n)).exp()).inverse();
  if (out->requires_grad) {
    g.push([x, out, n] {
      const Eigen::Map<const A> y(out->value.data(), n), go(out->grad.data(), n);
      Eigen::Map<A>(x->grad_buffer().data(), n) += go * y * (T{1} - y);
    });
  }
  return out;
}

template <class T>
Var<T> tanh(Graph<T>& g, const Var<T>& x) {
  return detail::unary(
      g, x, [](T v) { return std::tanh(v); }, [](T, T y) { return T{1} - y * y; });
}

template <class T>
Var<T> softplus(Graph<T>& g, const Var<T>& x) {
  return detail::unary(
      g, x, [](T v) { return detail::softplus(v); }, [](T v, T) { return detail::sigmoid(v); });
}

/// Identity in value, no gradient.
template <class T>
Var<T> detach(const Var<T>& x) {
  return constant(x->value);
}

/// round() forward, identity gradient.
template <class T>
Var<T> round_straight_through(Graph<T>& g, const Var<T>& x) {
  return detail::unary(
      g, x, [](T v) { return std::round(v); }, [](T, T) { return T{1}; });
}

/// Concatenation along the trailing channel dimension.
template <class T>
Var<T> concat_channels(Graph<T>& g, const Var<T>& a, const Var<T>& b) {
  const auto& sa = a->shape();
  const auto& sb = b->shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw std::invalid_argument("concat_channels: spatial shape mismatch " + shape_string(sa) + " vs " +
                                shape_string(sb));
  const auto ca = static_cast<std::size_t>(sa.back());
  const auto cb = static_cast<std::size_t>(sb.back());
  Shape so = sa;
  so.back() = static_cast<int>(ca + cb);
  auto out = g.result(so, {&a, &b});
  const std::size_t rows = a->size() / ca;
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(a->value.data() + r * ca, ca, out->value.data() + r * (ca + cb));
    std::copy_n(b->value.data() + r * cb, cb, out->value.data() + r * (ca + cb) + ca);
  }
  if (out->requires_grad) {
    g.push([a, b, out, ca, cb, rows] {
      if (a->requires_grad) {
        auto& ga = a->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < ca; ++c) ga[r * ca + c] += out->grad[r * (ca + cb) + c];
      }
      if (b->requires_grad) {
        auto& gb = b->grad_buffer();
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cb; ++c) gb[r * cb + c] += out->grad[r * (ca + cb) + ca + c];
      }
    });
  }
  return out;
}

/// Affine map over the channel dim: y[..., o] = sum_i x[..., i] w[i, o] + b[o].
/// `bias` may be null.
template <class T>
Var<T> linear(Graph<T>& g, const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using Row = Eigen::Matrix<T, 1, Eigen::Dynamic>;
  const int cin = weight->value.dim(0);
  const int cout = weight->value.dim(1);
  if (x->value.channels() != cin)
    throw std::invalid_argument("linear: input channels " + std::to_string(x->value.channels()) +
                                " != weight rows " + std::to_string(cin));
  Shape so = x->shape();
  so.back() = cout;
  auto out = g.result(so, {&x, &weight, &bias});
  const auto rows = static_cast<Eigen::Index>(x->size() / static_cast<std::size_t>(cin));
  Eigen::Map<const Mat> X(x->value.data(), rows, cin);
  Eigen::Map<const Mat> W(weight->value.data(), cin, cout);
  Eigen::Map<Mat> O(out->value.data(), rows, cout);
  O.noalias() = X * W;
  if (bias) O.rowwise() += Eigen::Map<const Row>(bias->value.data(), cout);
  if (out->requires_grad) {
    g.push([x, weight, bias, out, rows, cin, cout] {
      Eigen::Map<const Mat> GO(out->grad.data(), rows, cout);
      if (x->requires_grad) {
        Eigen::Map<Mat> GX(x->grad_buffer().data(), rows, cin);
        GX.noalias() += GO * Eigen::Map<const Mat>(weight->value.data(), cin, cout).transpose();
      }
      if (weight->requires_grad) {
        Eigen::Map<Mat> GW(weight->grad_buffer().data(), cin, cout);
        GW.noalias() += Eigen::Map<const Mat>(x->value.data(), rows, cin).transpose() * GO;
      }
      if (bias && bias->requires_grad) Eigen::Map<Row>(bias->grad_buffer().data(), cout) += GO.colwise().sum();
    });
  }
  return out;
}

/// Layer normalization over each channel vector, with per-channel gain and bias.
template <class T>
Var<T> layer_norm(Graph<T>& g, const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const auto c = static_cast<std::size_t>(x->value.channels());
  if (gamma->size() != c || beta->size() != c) throw std::invalid_argument("layer_norm: affine size mismatch");
  auto out = g.result(x->shape(), {&x, &gamma, &beta});
  const std::size_t rows = x->size() / c;
  std::vector<T> inv_std(rows);
  std::vector<T> normed(x->size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x->value.data() + r * c;
    T mean{0};
    for (std::size_t k = 0; k < c; ++k) mean += in[k];
    mean /= static_cast<T>(c);
    T var{0};
    for (std::size_t k = 0; k < c; ++k) var += (in[k] - mean) * (in[k] - mean);
    var /= static_cast<T>(c);
    const T is = T{1} / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t k = 0; k < c; ++k) {
      const T n = (in[k] - mean) * is;
      normed[r * c + k] = n;
      out->value[r * c + k] = n * gamma->value[k] + beta->value[k];
    }
  }
  if (out->requires_grad) {
    g.push([x, gamma, beta, out, c, rows, inv_std = std::move(inv_std), normed = std::move(normed)] {
      T* gx = x->requires_grad ? x->grad_buffer().data() : nullptr;
      T* gg = gamma->requires_grad ? gamma->grad_buffer().data() : nullptr;
      T* gbeta = beta->requires_grad ? beta->grad_buffer().data() : nullptr;
      std::vector<T> dn(c);
      for (std::size_t r = 0; r < rows; ++r) {
        const T* go = out->grad.data() + r * c;
        const T* n = normed.data() + r * c;
        T mean_dn{0}, mean_dn_n{0};
        for (std::size_t k = 0; k < c; ++k) {
          if (gg) gg[k] += go[k] * n[k];
          if (gbeta) gbeta[k] += go[k];
          dn[k] = go[k] * gamma->value[k];
          mean_dn += dn[k];
          mean_dn_n += dn[k] * n[k];
        }
        if (!gx) continue;
        mean_dn /= static_cast<T>(c);
        mean_dn_n /= static_cast<T>(c);
        for (std::size_t k = 0; k < c; ++k) gx[r * c + k] += inv_std[r] * (dn[k] - mean_dn - n[k] * mean_dn_n);
      }
    });
  }
  return out;
}

/// Inverted dropout; identity outside training mode or at rate 0.
template <class T>
Var<T> dropout(Graph<T>& g, const Var<T>& x, double rate) {
  if (!g.training() || rate <= 0.0) return x;
  if (rate >= 1.0) throw std::invalid_argument("dropout: rate must be < 1");
  Rng rng(g.next_seed());
  RealField<T> mask(x->shape());
  const T keep = static_cast<T>(1.0 / (1.0 - rate));
  for (auto& m : mask.values) m = rng.uniform() < rate ? T{0} : keep;
  auto out = g.result(x->shape(), {&x});
  for (std::size_t i = 0; i < x->size(); ++i) out->value[i] = x->value[i] * mask[i];
  if (out->requires_grad) {
    g.push([x, out, mask = std::move(mask)] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += out->grad[i] * mask[i];
    });
  }
  return out;
}

/// Mean over all spatial positions per channel -> [C].
template <class T>
Var<T> global_avg_pool(Graph<T>& g, const Var<T>& x) {
  const auto c = static_cast<std::size_t>(x->value.channels());
  const std::size_t rows = x->size() / c;
  auto out = g.result({static_cast<int>(c)}, {&x});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) out->value[k] += x->value[r * c + k];
  for (auto& v : out->value.values) v /= static_cast<T>(rows);
  if (out->requires_grad) {
    g.push([x, out, c, rows] {
      auto& gx = x->grad_buffer();
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t k = 0; k < c; ++k) gx[r * c + k] += out->grad[k] / static_cast<T>(rows);
    });
  }
  return out;
}

/// Scalar sum -> [1].
template <class T>
Var<T> sum(Graph<T>& g, const Var<T>& x) {
  auto out = g.result({1}, {&x});
  T acc{0};
  for (T v : x->value.values) acc += v;
  out->value[0] = acc;
  if (out->requires_grad) {
    g.push([x, out] {
      auto& gx = x->grad_buffer();
      for (auto& v : gx) v += out->grad[0];
    });
  }
  return out;
}

template <class T>
Var<T> mean(Graph<T>& g, const Var<T>& x) {
  return scale(g, sum(g, x), T{1} / static_cast<T>(x->size()));
}

/// sum_i x_i w_i with fixed weights -> [1]. Random projections for gradient checks.
template <class T>
Var<T> dot_fixed(Graph<T>& g, const Var<T>& x, const std::vector<T>& w) {
  if (w.size() != x->size()) throw std::invalid_argument("dot_fixed: size mismatch");
  auto out = g.result({1}, {&x});
  T acc{0};
  for (std::size_t i = 0; i < w.size(); ++i) acc += x->value[i] * w[i];
  out->value[0] = acc;
  if (out->requires_grad) {
    g.push([x, out, w] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < w.size(); ++i) gx[i] += out->grad[0] * w[i];
    });
  }
  return out;
}

/// Flat elements [begin, begin + count) as a rank-1 field.
template <class T>
Var<T> slice(Graph<T>& g, const Var<T>& x, std::size_t begin, std::size_t count) {
  if (begin + count > x->size()) throw std::invalid_argument("slice: range exceeds " + shape_string(x->shape()));
  auto out = g.result({static_cast<int>(count)}, {&x});
  std::copy_n(x->value.data() + begin, count, out->value.data());
  if (out->requires_grad) {
    g.push([x, out, begin, count] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < count; ++i) gx[begin + i] += out->grad[i];
    });
  }
  return out;
}

/// a + k * b for scalars [1].
/// Rows of x viewed as [N, C] (C = last dim), channels [c0, c0 + cn): output [rows.size(), cn].
template <class T>
Var<T> gather_rows(Graph<T>& g, const Var<T>& x, const std::vector<std::size_t>& rows, int c0, int cn) {
  const int C = x->value.channels();
  const std::size_t n = x->size() / static_cast<std::size_t>(C);
  if (c0 < 0 || cn < 0 || c0 + cn > C) throw std::invalid_argument("gather_rows: channel range exceeds " + shape_string(x->shape()));
  for (auto r : rows)
    if (r >= n) throw std::invalid_argument("gather_rows: row " + std::to_string(r) + " out of range");
  auto out = g.result({static_cast<int>(rows.size()), cn}, {&x});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x->value.data() + rows[i] * C + c0, cn, out->value.data() + i * cn);
  if (out->requires_grad) {
    g.push([x, out, rows, c0, cn, C] {
      auto& gx = x->grad_buffer();
      for (std::size_t i = 0; i < rows.size(); ++i)
        for (int c = 0; c < cn; ++c) gx[rows[i] * C + c0 + c] += out->grad[i * cn + c];
    });
  }
  return out;
}

template <class T>
Var<T> axpy(Graph<T>& g, const Var<T>& a, T k, const Var<T>& b) {
  return add(g, a, scale(g, b, k));
}

}  // namespace flatec::nn
