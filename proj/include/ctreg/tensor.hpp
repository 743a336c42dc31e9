#pragma once

#include <algorithm>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "ctreg/error.hpp"

namespace ctreg {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

/// Heap buffer with Eigen's packet alignment. Vectorized reductions peel an
/// unaligned head, so without this the summation order (and the last bits of
/// every result) would depend on where the allocator placed the buffer.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

/// Dense batch x channels x height x width tensor, row-major per plane.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w, T fill = T(0))
      : n_(n), c_(c), h_(h), w_(w),
        data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t plane() const { return static_cast<std::size_t>(h_) * w_; }
  std::size_t sample_size() const { return plane() * c_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  T* sample(int n) { return data_.data() + n * sample_size(); }
  const T* sample(int n) const { return data_.data() + n * sample_size(); }
  T* channel(int n, int c) { return sample(n) + c * plane(); }
  const T* channel(int n, int c) const { return sample(n) + c * plane(); }

  T& at(int n, int c, int y, int x) { return channel(n, c)[static_cast<std::size_t>(y) * w_ + x]; }
  const T& at(int n, int c, int y, int x) const {
    return channel(n, c)[static_cast<std::size_t>(y) * w_ + x];
  }

  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  std::string shape_string() const {
    return std::to_string(n_) + "x" + std::to_string(c_) + "x" + std::to_string(h_) + "x" +
           std::to_string(w_);
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Elementwise accumulate; shapes must agree.
  Tensor& operator+=(const Tensor& o) {
    if (!same_shape(o)) throw ShapeError("tensor add: " + shape_string() + " vs " + o.shape_string());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  AlignedVector<T> data_;
};

}  // namespace ctreg
