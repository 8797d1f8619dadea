#pragma once

#include <memory>
#include <string>
#include <vector>

#include "ssmavs/common.hpp"

namespace ssmavs {

enum class Dtype : std::uint8_t { F32 = 0, F64 = 1 };

inline const char* dtype_name(Dtype dt) {
  return dt == Dtype::F32 ? "f32" : "f64";
}
inline i64 dtype_size(Dtype dt) { return dt == Dtype::F32 ? 4 : 8; }

using Shape = std::vector<i64>;

std::string shape_str(const Shape& s);
i64 shape_numel(const Shape& s);

// Dense row-major tensor. The element buffer is shared between copies and
// treated as immutable once a tensor escapes the function that built it;
// mut() is only for filling freshly allocated outputs.
class Tensor {
 public:
  Tensor() = default;

  static Tensor empty(Shape shape, Dtype dt);
  static Tensor zeros(Shape shape, Dtype dt);
  static Tensor full(Shape shape, double value, Dtype dt);
  static Tensor from_f32(Shape shape, std::vector<float> values);
  static Tensor from_f64(Shape shape, std::vector<double> values);

  bool defined() const { return f32_ != nullptr || d64_ != nullptr; }
  Dtype dtype() const { return dtype_; }
  const Shape& shape() const { return shape_; }
  i64 rank() const { return static_cast<i64>(shape_.size()); }
  i64 dim(i64 axis) const;
  i64 numel() const { return numel_; }

  template <typename T>
  const T* data() const;
  template <typename T>
  T* mut();

  // Dtype-erased scalar access for tests and glue code; the hot paths use
  // typed pointers.
  double scalar_at(i64 flat) const;
  void set_scalar(i64 flat, double v);
  double item() const;

  Tensor astype(Dtype dt) const;
  Tensor clone() const;
  bool bitwise_equal(const Tensor& other) const;
  bool all_finite() const;
  void ensure_finite(const std::string& what) const;

 private:
  Dtype dtype_ = Dtype::F32;
  Shape shape_;
  i64 numel_ = 0;
  std::shared_ptr<std::vector<float>> f32_;
  std::shared_ptr<std::vector<double>> d64_;
};

template <>
inline const float* Tensor::data<float>() const {
  check(f32_ != nullptr, "tensor: f32 data requested from " +
                             std::string(dtype_name(dtype_)) + " tensor");
  return f32_->data();
}
template <>
inline const double* Tensor::data<double>() const {
  check(d64_ != nullptr, "tensor: f64 data requested from " +
                             std::string(dtype_name(dtype_)) + " tensor");
  return d64_->data();
}
template <>
inline float* Tensor::mut<float>() {
  check(f32_ != nullptr, "tensor: f32 data requested from " +
                             std::string(dtype_name(dtype_)) + " tensor");
  return f32_->data();
}
template <>
inline double* Tensor::mut<double>() {
  check(d64_ != nullptr, "tensor: f64 data requested from " +
                             std::string(dtype_name(dtype_)) + " tensor");
  return d64_->data();
}

// Calls fn with a value of the tensor's scalar type as a tag:
// dispatch(dt, [&](auto tag) { using T = decltype(tag); ... });
template <typename F>
decltype(auto) dispatch(Dtype dt, F&& fn) {
  if (dt == Dtype::F32) return fn(float{});
  return fn(double{});
}

// Shape-changing views; every one of these materializes a fresh buffer.
Tensor reshape(const Tensor& t, Shape shape);
Tensor permute(const Tensor& t, const std::vector<i64>& axes);
Tensor reverse_axis(const Tensor& t, i64 axis);

}  // namespace ssmavs
