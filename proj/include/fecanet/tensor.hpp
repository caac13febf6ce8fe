#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fecanet/errors.hpp"

namespace fecanet {

inline int64_t numel_of(const std::vector<int64_t>& dims) {
  int64_t n = 1;
  for (int64_t d : dims) n *= d;
  return n;
}

// Dense row-major tensor.  Rank 1..5 is what the pipeline uses:
// [C] vectors, [M,N] matrices, [C,H,W] feature maps, [Ch,Hq,Wq,Hs,Ws]
// correlation volumes.  float for production, double for oracle-grade
// gradient checking; both share every kernel.
template <typename T>
struct Tensor {
  std::vector<int64_t> dims;
  std::vector<T> data;

  Tensor() = default;

  explicit Tensor(std::vector<int64_t> dims_) : dims(std::move(dims_)) {
    validate_dims();
    data.assign(static_cast<size_t>(numel_of(dims)), T(0));
  }

  Tensor(std::vector<int64_t> dims_, std::vector<T> values)
      : dims(std::move(dims_)), data(std::move(values)) {
    validate_dims();
    require_shape(numel_of(dims) == static_cast<int64_t>(data.size()),
                  "tensor data length does not match product of dims");
  }

  static Tensor zeros(std::vector<int64_t> dims_) { return Tensor(std::move(dims_)); }

  static Tensor full(std::vector<int64_t> dims_, T v) {
    Tensor t(std::move(dims_));
    for (auto& x : t.data) x = v;
    return t;
  }

  static Tensor scalar(T v) { return Tensor({1}, {v}); }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(dims.size()); }
  bool same_dims(const Tensor& o) const { return dims == o.dims; }

  T& at(int64_t a, int64_t b) { return data[static_cast<size_t>(a * dims[1] + b)]; }
  T at(int64_t a, int64_t b) const { return data[static_cast<size_t>(a * dims[1] + b)]; }

  T& at(int64_t a, int64_t b, int64_t c) {
    return data[static_cast<size_t>((a * dims[1] + b) * dims[2] + c)];
  }
  T at(int64_t a, int64_t b, int64_t c) const {
    return data[static_cast<size_t>((a * dims[1] + b) * dims[2] + c)];
  }

  T& at(int64_t a, int64_t b, int64_t c, int64_t d) {
    return data[static_cast<size_t>(((a * dims[1] + b) * dims[2] + c) * dims[3] + d)];
  }
  T at(int64_t a, int64_t b, int64_t c, int64_t d) const {
    return data[static_cast<size_t>(((a * dims[1] + b) * dims[2] + c) * dims[3] + d)];
  }

  T& at(int64_t a, int64_t b, int64_t c, int64_t d, int64_t e) {
    return data[static_cast<size_t>(
        (((a * dims[1] + b) * dims[2] + c) * dims[3] + d) * dims[4] + e)];
  }
  T at(int64_t a, int64_t b, int64_t c, int64_t d, int64_t e) const {
    return data[static_cast<size_t>(
        (((a * dims[1] + b) * dims[2] + c) * dims[3] + d) * dims[4] + e)];
  }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

 private:
  void validate_dims() const {
    require_shape(!dims.empty(), "tensor must have at least one dimension");
    for (int64_t d : dims)
      require_shape(d >= 1, "tensor extents must be positive");
  }
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename To, typename From>
Tensor<To> tensor_cast(const Tensor<From>& t) {
  Tensor<To> out(t.dims);
  for (int64_t i = 0; i < t.numel(); ++i) out.data[static_cast<size_t>(i)] = static_cast<To>(t.data[static_cast<size_t>(i)]);
  return out;
}

inline std::string dims_str(const std::vector<int64_t>& dims) {
  std::string s = "[";
  for (size_t i = 0; i < dims.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(dims[i]);
  }
  return s + "]";
}

}  // namespace fecanet
