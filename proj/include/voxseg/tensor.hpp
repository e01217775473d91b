#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <limits>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

#include "voxseg/parallel.hpp"

namespace voxseg {

/// Extents of a dense 5-D array: batch, channels, depth, height, width.
/// All five are at least 1 and the element count fits in int64.
struct Shape5 {
  std::int64_t n = 1, c = 1, d = 1, h = 1, w = 1;

  bool operator==(const Shape5&) const = default;

  std::int64_t numel() const { return n * c * d * h * w; }
  std::int64_t spatial() const { return d * h * w; }

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(d) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }

  void validate() const {
    const std::array<std::int64_t, 5> e{n, c, d, h, w};
    for (std::int64_t v : e)
      if (v < 1) throw std::invalid_argument("Shape5: extents must be >= 1, got " + str());
    std::int64_t prod = 1;
    for (std::int64_t v : e) {
      if (prod > std::numeric_limits<std::int64_t>::max() / v)
        throw std::invalid_argument("Shape5: element count overflows index type: " + str());
      prod *= v;
    }
  }
};

/// Dense 5-D tensor, row-major with w fastest:
///   index(n,c,z,y,x) = (((n*C + c)*D + z)*H + y)*W + x.
/// Deep-copy value semantics; operations never mutate their inputs.
template <class T>
class Tensor {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "Tensor supports single and double precision only");

public:
  Tensor() = default;

  static Tensor filled(Shape5 shape, T value) {
    Tensor t = uninitialized(shape);
    std::fill_n(t.data(), t.size(), value);
    return t;
  }

  static Tensor zeros(Shape5 shape) { return filled(shape, T(0)); }

  /// Storage is allocated but not written; every element must be assigned
  /// before it is read.
  static Tensor uninitialized(Shape5 shape) {
    shape.validate();
    Tensor t;
    t.shape_ = shape;
    t.size_ = shape.numel();
    t.data_ = std::make_unique_for_overwrite<T[]>(static_cast<std::size_t>(t.size_));
    return t;
  }

  static Tensor from_vector(Shape5 shape, const std::vector<T>& values) {
    shape.validate();
    if (static_cast<std::int64_t>(values.size()) != shape.numel())
      throw std::invalid_argument("Tensor::from_vector: got " + std::to_string(values.size()) +
                                  " values for shape " + shape.str());
    Tensor t = uninitialized(shape);
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  Tensor(const Tensor& other) { *this = other; }
  Tensor& operator=(const Tensor& other) {
    if (this == &other) return *this;
    shape_ = other.shape_;
    size_ = other.size_;
    if (other.data_) {
      data_ = std::make_unique_for_overwrite<T[]>(static_cast<std::size_t>(size_));
      std::memcpy(data_.get(), other.data_.get(), static_cast<std::size_t>(size_) * sizeof(T));
    } else {
      data_.reset();
    }
    return *this;
  }
  Tensor(Tensor&&) noexcept = default;
  Tensor& operator=(Tensor&&) noexcept = default;

  bool empty() const { return data_ == nullptr; }
  const Shape5& shape() const { return shape_; }
  std::int64_t size() const { return size_; }

  T* data() { return data_.get(); }
  const T* data() const { return data_.get(); }
  std::span<T> span() { return {data_.get(), static_cast<std::size_t>(size_)}; }
  std::span<const T> span() const { return {data_.get(), static_cast<std::size_t>(size_)}; }

  std::int64_t index(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y,
                     std::int64_t x) const {
    return (((n * shape_.c + c) * shape_.d + z) * shape_.h + y) * shape_.w + x;
  }
  T& at(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) {
    return data_[index(n, c, z, y, x)];
  }
  T at(std::int64_t n, std::int64_t c, std::int64_t z, std::int64_t y, std::int64_t x) const {
    return data_[index(n, c, z, y, x)];
  }
  T& operator[](std::int64_t i) { return data_[i]; }
  T operator[](std::int64_t i) const { return data_[i]; }

private:
  Shape5 shape_;
  std::int64_t size_ = 0;
  std::unique_ptr<T[]> data_;
};

template <class T>
Tensor<T> new_filled(Shape5 shape, T value) {
  return Tensor<T>::filled(shape, value);
}

enum class EwOp { add, sub, mul };

template <class T>
Tensor<T> elementwise(const Tensor<T>& a, const Tensor<T>& b, EwOp op) {
  if (!(a.shape() == b.shape()))
    throw std::invalid_argument("elementwise: shape mismatch " + a.shape().str() + " vs " +
                                b.shape().str());
  Tensor<T> out = Tensor<T>::uninitialized(a.shape());
  const T* pa = a.data();
  const T* pb = b.data();
  T* po = out.data();
  const std::int64_t n = a.size();
  switch (op) {
    case EwOp::add:
      parallel_for(n, [&](std::int64_t i) { po[i] = pa[i] + pb[i]; }, 1 << 18);
      break;
    case EwOp::sub:
      parallel_for(n, [&](std::int64_t i) { po[i] = pa[i] - pb[i]; }, 1 << 18);
      break;
    case EwOp::mul:
      parallel_for(n, [&](std::int64_t i) { po[i] = pa[i] * pb[i]; }, 1 << 18);
      break;
    default:
      throw std::invalid_argument("elementwise: unknown op");
  }
  return out;
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, EwOp::add); }
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, EwOp::sub); }
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) { return elementwise(a, b, EwOp::mul); }

/// Axes are indexed n=0, c=1, d=2, h=3, w=4.
struct AxisSet {
  std::array<bool, 5> reduce{};

  static AxisSet all() { return {{true, true, true, true, true}}; }
  static AxisSet spatial() { return {{false, false, true, true, true}}; }
  static AxisSet of(std::initializer_list<int> axes) {
    AxisSet s;
    for (int a : axes) {
      if (a < 0 || a > 4) throw std::invalid_argument("AxisSet: axis out of range");
      s.reduce[static_cast<std::size_t>(a)] = true;
    }
    return s;
  }
};

/// Reduced axes keep extent 1. Accumulation visits input elements in
/// ascending linear order, single-threaded, so the result is bitwise
/// reproducible and equal to a sequential left fold.
template <class T>
Tensor<T> reduce_sum(const Tensor<T>& a, AxisSet axes) {
  const Shape5 in = a.shape();
  Shape5 out_shape{axes.reduce[0] ? 1 : in.n, axes.reduce[1] ? 1 : in.c,
                   axes.reduce[2] ? 1 : in.d, axes.reduce[3] ? 1 : in.h,
                   axes.reduce[4] ? 1 : in.w};
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* pa = a.data();
  T* po = out.data();
  std::int64_t i = 0;
  for (std::int64_t n = 0; n < in.n; ++n)
    for (std::int64_t c = 0; c < in.c; ++c)
      for (std::int64_t z = 0; z < in.d; ++z)
        for (std::int64_t y = 0; y < in.h; ++y)
          for (std::int64_t x = 0; x < in.w; ++x, ++i)
            po[out.index(axes.reduce[0] ? 0 : n, axes.reduce[1] ? 0 : c, axes.reduce[2] ? 0 : z,
                         axes.reduce[3] ? 0 : y, axes.reduce[4] ? 0 : x)] += pa[i];
  return out;
}

/// Sequential left fold over the linear buffer.
template <class T>
T sum_all(const Tensor<T>& a) {
  const T* p = a.data();
  T acc = 0;
  for (std::int64_t i = 0; i < a.size(); ++i) acc += p[i];
  return acc;
}

/// Per-spatial-axis (before, after) zero padding, ordered (d, h, w).
using Pad3 = std::array<std::array<std::int64_t, 2>, 3>;

template <class T>
Tensor<T> pad_zero(const Tensor<T>& a, const Pad3& pad) {
  for (const auto& p : pad)
    if (p[0] < 0 || p[1] < 0) throw std::invalid_argument("pad_zero: negative pad");
  const Shape5 in = a.shape();
  const Shape5 os{in.n, in.c, in.d + pad[0][0] + pad[0][1], in.h + pad[1][0] + pad[1][1],
                  in.w + pad[2][0] + pad[2][1]};
  Tensor<T> out = Tensor<T>::zeros(os);
  const std::int64_t rows = in.n * in.c * in.d * in.h;
  parallel_for(rows, [&](std::int64_t r) {
    const std::int64_t y = r % in.h;
    std::int64_t rest = r / in.h;
    const std::int64_t z = rest % in.d;
    rest /= in.d;
    const std::int64_t c = rest % in.c;
    const std::int64_t n = rest / in.c;
    const T* src = a.data() + a.index(n, c, z, y, 0);
    T* dst = out.data() + out.index(n, c, z + pad[0][0], y + pad[1][0], pad[2][0]);
    std::memcpy(dst, src, static_cast<std::size_t>(in.w) * sizeof(T));
  }, 1 << 12);
  return out;
}

/// Spatial sub-block copy; origin and size are (d, h, w) triples.
template <class T>
Tensor<T> crop(const Tensor<T>& a, const std::array<std::int64_t, 3>& origin,
               const std::array<std::int64_t, 3>& size) {
  const Shape5 in = a.shape();
  const std::array<std::int64_t, 3> ext{in.d, in.h, in.w};
  for (int i = 0; i < 3; ++i) {
    if (origin[i] < 0 || size[i] < 1 || origin[i] + size[i] > ext[i])
      throw std::invalid_argument("crop: block [" + std::to_string(origin[i]) + ", " +
                                  std::to_string(origin[i] + size[i]) + ") out of bounds for axis " +
                                  std::to_string(i) + " extent " + std::to_string(ext[i]));
  }
  const Shape5 os{in.n, in.c, size[0], size[1], size[2]};
  Tensor<T> out = Tensor<T>::uninitialized(os);
  const std::int64_t rows = os.n * os.c * os.d * os.h;
  parallel_for(rows, [&](std::int64_t r) {
    const std::int64_t y = r % os.h;
    std::int64_t rest = r / os.h;
    const std::int64_t z = rest % os.d;
    rest /= os.d;
    const std::int64_t c = rest % os.c;
    const std::int64_t n = rest / os.c;
    const T* src = a.data() + a.index(n, c, z + origin[0], y + origin[1], origin[2]);
    T* dst = out.data() + out.index(n, c, z, y, 0);
    std::memcpy(dst, src, static_cast<std::size_t>(os.w) * sizeof(T));
  }, 1 << 12);
  return out;
}

/// Channel concatenation, a's channels first. Batch and spatial extents must agree.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const Shape5 sa = a.shape(), sb = b.shape();
  if (sa.n != sb.n || sa.d != sb.d || sa.h != sb.h || sa.w != sb.w)
    throw std::invalid_argument("concat_channels: mismatch " + sa.str() + " vs " + sb.str());
  const Shape5 os{sa.n, sa.c + sb.c, sa.d, sa.h, sa.w};
  Tensor<T> out = Tensor<T>::uninitialized(os);
  const std::int64_t block = sa.spatial();
  parallel_for(os.n * os.c, [&](std::int64_t nc) {
    const std::int64_t n = nc / os.c;
    const std::int64_t c = nc % os.c;
    const T* src = c < sa.c ? a.data() + (n * sa.c + c) * block
                            : b.data() + (n * sb.c + (c - sa.c)) * block;
    std::memcpy(out.data() + nc * block, src, static_cast<std::size_t>(block) * sizeof(T));
  }, 4);
  return out;
}

template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& a) {
  Tensor<To> out = Tensor<To>::uninitialized(a.shape());
  const From* src = a.data();
  To* dst = out.data();
  for (std::int64_t i = 0; i < a.size(); ++i) dst[i] = static_cast<To>(src[i]);
  return out;
}

}  // namespace voxseg
