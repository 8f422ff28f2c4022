#pragma once

#include <cstddef>
#include <numeric>
#include <string>
#include <vector>

#include "fontgen/common.hpp"

namespace fontgen {

// Dense row-major tensor of doubles. Images and activations use NCHW order,
// matrices [rows, cols]. No views; ops copy.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(checked_numel(shape_), real(0));
  }

  Tensor(std::vector<int> shape, std::vector<real> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_numel(shape_)) throw ShapeError("Tensor: data size does not match shape");
  }

  static Tensor full(std::vector<int> shape, real v) {
    Tensor t(std::move(shape));
    t.fill(v);
    return t;
  }

  static Tensor scalar(real v) { return Tensor({1}, {v}); }

  int rank() const { return static_cast<int>(shape_.size()); }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::size_t numel() const { return data_.size(); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }

  real& operator[](std::size_t i) { return data_[i]; }
  real operator[](std::size_t i) const { return data_[i]; }

  // NCHW element access.
  real& at4(int n, int c, int h, int w) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  real at4(int n, int c, int h, int w) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  real& at2(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  real at2(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }

  void fill(real v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(real(0)); }

  Tensor reshaped(std::vector<int> shape) const {
    if (checked_numel(shape) != numel()) throw ShapeError("Tensor::reshaped: element count mismatch");
    return Tensor(std::move(shape), data_);
  }

  std::string shape_string() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

 private:
  static std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d <= 0) throw ShapeError("Tensor: nonpositive dimension");
      n *= static_cast<std::size_t>(d);
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<real> data_;
};

}  // namespace fontgen
