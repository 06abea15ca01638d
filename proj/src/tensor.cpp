#include "mitr/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mitr/error.hpp"

namespace mitr {

Tensor::Tensor(std::size_t rows, std::size_t cols, double fill)
    : shape{rows, cols}, data(rows * cols, fill) {
  if (rows == 0 || cols == 0) {
    throw ShapeError("tensor: extents must be positive, got " + shape_str());
  }
}

Tensor::Tensor(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
    : Tensor(rows, cols) {
  if (values.size() != data.size()) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " initial values for shape " + shape_str());
  }
  std::copy(values.begin(), values.end(), data.begin());
}

double Tensor::item() const {
  if (data.size() != 1) {
    throw ShapeError("tensor: item() on non-scalar " + shape_str());
  }
  return data[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
  return std::to_string(shape[0]) + "x" + std::to_string(shape[1]);
}

}  // namespace mitr
