#pragma once

#include <cstddef>
#include <initializer_list>
#include <string>
#include <vector>

namespace mitr {

// Dense row-major matrix of doubles. Every tensor in the engine is rank 2;
// vectors are 1 x n and scalars are 1 x 1.
struct Tensor {
  std::vector<std::size_t> shape{0, 0};
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0);
  Tensor(std::size_t rows, std::size_t cols, std::initializer_list<double> values);

  static Tensor scalar(double v) { return Tensor(1, 1, v); }

  std::size_t rows() const { return shape[0]; }
  std::size_t cols() const { return shape[1]; }
  std::size_t size() const { return data.size(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  const double& operator()(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  double item() const;
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape == other.shape; }

  // "2x3"
  std::string shape_str() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;
};

}  // namespace mitr
