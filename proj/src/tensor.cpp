#include "ssmavs/tensor.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <type_traits>

namespace ssmavs {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

i64 shape_numel(const Shape& s) {
  i64 n = 1;
  for (i64 d : s) {
    check(d >= 0, "shape: negative extent in " + shape_str(s));
    n *= d;
  }
  return n;
}

Tensor Tensor::empty(Shape shape, Dtype dt) {
  Tensor t;
  t.dtype_ = dt;
  t.numel_ = shape_numel(shape);
  t.shape_ = std::move(shape);
  if (dt == Dtype::F32) {
    t.f32_ = std::make_shared<std::vector<float>>(t.numel_);
  } else {
    t.d64_ = std::make_shared<std::vector<double>>(t.numel_);
  }
  return t;
}

Tensor Tensor::zeros(Shape shape, Dtype dt) {
  return empty(std::move(shape), dt);
}

Tensor Tensor::full(Shape shape, double value, Dtype dt) {
  Tensor t = empty(std::move(shape), dt);
  dispatch(dt, [&](auto tag) {
    using T = decltype(tag);
    T* p = t.mut<T>();
    for (i64 i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(value);
  });
  return t;
}

Tensor Tensor::from_f32(Shape shape, std::vector<float> values) {
  i64 n = shape_numel(shape);
  check(n == static_cast<i64>(values.size()),
        "tensor: " + std::to_string(values.size()) +
            " values for shape " + shape_str(shape));
  Tensor t;
  t.dtype_ = Dtype::F32;
  t.numel_ = n;
  t.shape_ = std::move(shape);
  t.f32_ = std::make_shared<std::vector<float>>(std::move(values));
  return t;
}

Tensor Tensor::from_f64(Shape shape, std::vector<double> values) {
  i64 n = shape_numel(shape);
  check(n == static_cast<i64>(values.size()),
        "tensor: " + std::to_string(values.size()) +
            " values for shape " + shape_str(shape));
  Tensor t;
  t.dtype_ = Dtype::F64;
  t.numel_ = n;
  t.shape_ = std::move(shape);
  t.d64_ = std::make_shared<std::vector<double>>(std::move(values));
  return t;
}

i64 Tensor::dim(i64 axis) const {
  check(axis >= 0 && axis < rank(),
        "tensor: axis " + std::to_string(axis) + " out of range for " +
            shape_str(shape_));
  return shape_[axis];
}

double Tensor::scalar_at(i64 flat) const {
  check(flat >= 0 && flat < numel_, "tensor: flat index out of range");
  return dtype_ == Dtype::F32 ? static_cast<double>((*f32_)[flat])
                              : (*d64_)[flat];
}

void Tensor::set_scalar(i64 flat, double v) {
  check(flat >= 0 && flat < numel_, "tensor: flat index out of range");
  if (dtype_ == Dtype::F32) {
    (*f32_)[flat] = static_cast<float>(v);
  } else {
    (*d64_)[flat] = v;
  }
}

double Tensor::item() const {
  check(numel_ == 1, "tensor: item() on tensor of " +
                         std::to_string(numel_) + " elements");
  return scalar_at(0);
}

Tensor Tensor::astype(Dtype dt) const {
  if (dt == dtype_) return *this;
  Tensor out = Tensor::empty(shape_, dt);
  for (i64 i = 0; i < numel_; ++i) out.set_scalar(i, scalar_at(i));
  return out;
}

Tensor Tensor::clone() const {
  Tensor out = Tensor::empty(shape_, dtype_);
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(out.mut<T>(), data<T>(), numel_ * sizeof(T));
  });
  return out;
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  if (dtype_ != other.dtype_ || shape_ != other.shape_) return false;
  bool same = true;
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    same = std::memcmp(data<T>(), other.data<T>(), numel_ * sizeof(T)) == 0;
  });
  return same;
}

bool Tensor::all_finite() const {
  bool ok = true;
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    // Exponent-bits test, branch-free so the pass vectorizes; NaN and both
    // infinities all carry a saturated exponent field.
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, u64>;
    const U mask = sizeof(T) == 4 ? U(0x7f800000u) : U(0x7ff0000000000000ull);
    const T* p = data<T>();
    U bad = 0;
    for (i64 i = 0; i < numel_; ++i) {
      bad |= static_cast<U>((std::bit_cast<U>(p[i]) & mask) == mask);
    }
    ok = bad == 0;
  });
  return ok;
}

void Tensor::ensure_finite(const std::string& what) const {
  if (!all_finite()) {
    fail("non-finite values in " + what + " (shape " + shape_str(shape_) +
         ")");
  }
}

Tensor reshape(const Tensor& t, Shape shape) {
  check(shape_numel(shape) == t.numel(),
        "reshape: " + shape_str(t.shape()) + " -> " + shape_str(shape) +
            " changes element count");
  Tensor out = Tensor::empty(std::move(shape), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::memcpy(out.mut<T>(), t.data<T>(), t.numel() * sizeof(T));
  });
  return out;
}

Tensor permute(const Tensor& t, const std::vector<i64>& axes) {
  const i64 r = t.rank();
  check(static_cast<i64>(axes.size()) == r,
        "permute: got " + std::to_string(axes.size()) + " axes for rank " +
            std::to_string(r));
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (i64 i = 0; i < r; ++i) {
    i64 a = axes[i];
    check(a >= 0 && a < r && !seen[a], "permute: invalid axis list");
    seen[a] = true;
    out_shape[i] = t.dim(a);
  }
  Tensor out = Tensor::empty(out_shape, t.dtype());

  std::vector<i64> in_strides(r, 1);
  for (i64 i = r - 2; i >= 0; --i) {
    in_strides[i] = in_strides[i + 1] * t.dim(i + 1);
  }
  std::vector<i64> gather_strides(r);
  for (i64 i = 0; i < r; ++i) gather_strides[i] = in_strides[axes[i]];

  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = t.data<T>();
    T* dst = out.mut<T>();
    std::vector<i64> idx(r, 0);
    i64 src_off = 0;
    for (i64 flat = 0; flat < out.numel(); ++flat) {
      dst[flat] = src[src_off];
      for (i64 ax = r - 1; ax >= 0; --ax) {
        src_off += gather_strides[ax];
        if (++idx[ax] < out_shape[ax]) break;
        src_off -= gather_strides[ax] * out_shape[ax];
        idx[ax] = 0;
      }
    }
  });
  return out;
}

Tensor reverse_axis(const Tensor& t, i64 axis) {
  check(axis >= 0 && axis < t.rank(),
        "reverse_axis: axis " + std::to_string(axis) + " out of range for " +
            shape_str(t.shape()));
  const i64 n = t.dim(axis);
  i64 inner = 1;
  for (i64 i = axis + 1; i < t.rank(); ++i) inner *= t.dim(i);
  i64 outer = t.numel() / (n * std::max<i64>(inner, 1));
  if (t.numel() == 0) outer = 0;
  Tensor out = Tensor::empty(t.shape(), t.dtype());
  dispatch(t.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* src = t.data<T>();
    T* dst = out.mut<T>();
    for (i64 o = 0; o < outer; ++o) {
      for (i64 j = 0; j < n; ++j) {
        std::memcpy(dst + (o * n + j) * inner,
                    src + (o * n + (n - 1 - j)) * inner, inner * sizeof(T));
      }
    }
  });
  return out;
}

}  // namespace ssmavs
