#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace flatec::nn {

using Shape = std::vector<int>;

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  return os.str();
}

/// Dense row-major array with the channel dimension last.
///
/// Planes are [rows, cols, C], volumes [H, W, D, C], vectors [C].
template <class T>
struct RealField {
  Shape shape;
  std::vector<T> values;

  RealField() = default;
  explicit RealField(Shape s, T fill = T{0}) : shape(std::move(s)), values(shape_product(shape), fill) {}
  RealField(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
    if (values.size() != shape_product(shape))
      throw std::invalid_argument("RealField: value count " + std::to_string(values.size()) +
                                  " does not match shape " + shape_string(shape));
  }

  std::size_t size() const { return values.size(); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i < 0 ? rank() + i : i)]; }
  int channels() const { return shape.empty() ? 1 : shape.back(); }

  T* data() { return values.data(); }
  const T* data() const { return values.data(); }
  std::span<T> span() { return values; }
  std::span<const T> span() const { return values; }

  T& operator[](std::size_t i) { return values[i]; }
  const T& operator[](std::size_t i) const { return values[i]; }

  /// Flat offset of a channel-last multi-index.
  std::size_t offset(std::initializer_list<int> idx) const {
    std::size_t off = 0;
    std::size_t k = 0;
    for (int i : idx) off = off * static_cast<std::size_t>(shape[k++]) + static_cast<std::size_t>(i);
    for (; k < shape.size(); ++k) off *= static_cast<std::size_t>(shape[k]);
    return off;
  }

  bool all_finite() const {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
  }

  T max_abs() const {
    T m{0};
    for (T v : values) m = std::max(m, std::abs(v));
    return m;
  }
};

template <class U, class T>
RealField<U> field_cast(const RealField<T>& in) {
  RealField<U> out(in.shape);
  std::transform(in.values.begin(), in.values.end(), out.values.begin(),
                 [](T v) { return static_cast<U>(v); });
  return out;
}

template <class T>
T max_abs_diff(const RealField<T>& a, const RealField<T>& b) {
  if (a.shape != b.shape) throw std::invalid_argument("max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace flatec::nn
