#include "fvp/tensor.hpp"

#include <cmath>
#include <sstream>

#include "fvp/errors.hpp"

namespace fvp::ad {

int64_t shape_product(const std::vector<int>& shape) {
  int64_t p = 1;
  for (int d : shape) p *= d;
  return p;
}

std::string shape_to_string(const std::vector<int>& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << "]";
  return os.str();
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
  for (int d : shape_) {
    if (d < 0) throw ValidationError("Tensor: negative extent in shape " + shape_to_string(shape_));
  }
  data_.assign(static_cast<size_t>(shape_product(shape_)), real(0));
}

Tensor::Tensor(std::vector<int> shape, std::vector<real> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != static_cast<int64_t>(data_.size())) {
    throw ValidationError("Tensor: shape " + shape_to_string(shape_) + " does not match data length " +
                          std::to_string(data_.size()));
  }
}

Tensor Tensor::scalar(real v) {
  Tensor t;
  t.data_[0] = v;
  return t;
}

Tensor Tensor::full(std::vector<int> shape, real v) {
  Tensor t(std::move(shape));
  for (auto& x : t.data_) x = v;
  return t;
}

bool Tensor::all_finite() const {
  for (real x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return shape_to_string(shape_); }

Tensor Tensor::reshaped(std::vector<int> new_shape) const {
  if (shape_product(new_shape) != size()) {
    throw ValidationError("Tensor::reshaped: size mismatch " + shape_to_string(shape_) + " -> " +
                          shape_to_string(new_shape));
  }
  return Tensor(std::move(new_shape), data_);
}

}  // namespace fvp::ad
