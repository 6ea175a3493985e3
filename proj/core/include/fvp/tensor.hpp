#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace fvp {

#ifdef FVP_SINGLE_PRECISION
using real = float;
#else
using real = double;
#endif

namespace ad {

// Dense row-major array of reals. Rank 0 (empty shape) is a scalar.
class Tensor {
 public:
  Tensor() : data_(1, real(0)) {}
  explicit Tensor(std::vector<int> shape);
  Tensor(std::vector<int> shape, std::vector<real> data);

  static Tensor scalar(real v);
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, real v);

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const { return shape_[static_cast<size_t>(axis)]; }
  int64_t size() const { return static_cast<int64_t>(data_.size()); }

  real* data() { return data_.data(); }
  const real* data() const { return data_.data(); }
  std::vector<real>& vec() { return data_; }
  const std::vector<real>& vec() const { return data_; }

  real& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
  real operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // 2-d convenience accessor (row-major).
  real& at(int r, int c) { return data_[static_cast<size_t>(r) * shape_.back() + c]; }
  real at(int r, int c) const { return data_[static_cast<size_t>(r) * shape_.back() + c]; }

  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  std::string shape_str() const;

  Tensor reshaped(std::vector<int> new_shape) const;

 private:
  std::vector<int> shape_;
  std::vector<real> data_;
};

int64_t shape_product(const std::vector<int>& shape);
std::string shape_to_string(const std::vector<int>& shape);

}  // namespace ad
}  // namespace fvp
