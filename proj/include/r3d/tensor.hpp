#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace r3d {

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Violated call contract (e.g. backward on a non-scalar, K < G in matching).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of doubles. Plain value type; the autodiff graph owns
// its own copies.
struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor vector(std::initializer_list<double> values);

  std::size_t rank() const { return shape.size(); }
  std::size_t size() const { return data.size(); }
  // First extent; 1 for scalars.
  std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
  // Last extent; 1 for scalars.
  std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }

  std::span<double> row(std::size_t i) { return {data.data() + i * cols(), cols()}; }
  std::span<const double> row(std::size_t i) const {
    return {data.data() + i * cols(), cols()};
  }

  // Value of a single-element tensor.
  double item() const;

  bool all_finite() const;

  bool operator==(const Tensor&) const = default;
};

// Throws ShapeError unless t is rank 2.
void require_matrix(const Tensor& t, const char* what);

}  // namespace r3d
