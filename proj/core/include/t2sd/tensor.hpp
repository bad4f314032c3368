// Copyright 2026 The t2sd Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "t2sd/errors.hpp"
#include "t2sd/rng.hpp"

namespace t2sd {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

/// Dense row-major tensor. S is float in train mode, double in test mode;
/// everything downstream of the graph is templated on it.
template <typename S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    for (int64_t d : shape_) {
      if (d <= 0) throw DataError("tensor extent must be positive, got shape " + shape_str(shape_));
    }
    data_.assign(shape_numel(shape_), S(0));
  }

  Tensor(Shape shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != shape_numel(shape_)) {
      throw DataError("tensor data length does not match shape " + shape_str(shape_));
    }
  }

  static Tensor full(Shape shape, S v) {
    Tensor t(std::move(shape));
    for (S& x : t.data_) x = v;
    return t;
  }

  static Tensor scalar(S v) { return full({1}, v); }

  /// I.i.d. N(mean, stddev^2) entries drawn from `rng`.
  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
    Tensor t(std::move(shape));
    for (S& x : t.data_) x = static_cast<S>(rng.normal(mean, stddev));
    return t;
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int64_t numel() const { return static_cast<int64_t>(data_.size()); }
  /// Extent of the last axis (the feature axis for most ops).
  int64_t last() const { return shape_.empty() ? 1 : shape_.back(); }
  /// Number of rows when the tensor is viewed as [rows, last()].
  int64_t rows() const { return shape_.empty() ? 0 : numel() / last(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  S& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S x : data_) {
      if (!std::isfinite(static_cast<double>(x))) return false;
    }
    return true;
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DataError("reshape " + shape_str(shape_) + " -> " + shape_str(shape) + " changes element count");
    }
    return Tensor(std::move(shape), data_);
  }

  /// Converts element type (e.g. double-valued test tensors to float params).
  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> out(data_.size());
    for (size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<T>(data_[i]);
    return Tensor<T>(shape_, std::move(out));
  }

 private:
  Shape shape_;
  std::vector<S> data_;
};

}  // namespace t2sd
