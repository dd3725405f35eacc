#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace clipvs::nn {

using Rng = std::mt19937_64;
using Shape = std::vector<int>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
/// Aligned storage so vectorized kernels take the same path for every allocation.
using Storage = std::vector<double, Eigen::aligned_allocator<double>>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

/// Dense row-major double tensor. Feature maps use NHWC layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor randn(Shape shape, double stddev, Rng& rng);
  static Tensor from_matrix(const RowMatrix& m);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }
  std::vector<double> to_vector() const { return {data_.begin(), data_.end()}; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  /// Views the tensor as a rows x (size/rows) matrix.
  MatrixMap matrix(int rows);
  ConstMatrixMap matrix(int rows) const;
  /// Leading dimension as rows, everything else flattened.
  MatrixMap as_rows() { return matrix(rank() ? dim(0) : 1); }
  ConstMatrixMap as_rows() const { return matrix(rank() ? dim(0) : 1); }

  Tensor reshaped(Shape shape) const;
  void fill(double v);
  Tensor& operator+=(const Tensor& other);

  /// FNV-1a over the raw bytes of shape and data.
  std::uint64_t hash() const;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  Storage data_;
};

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed = 1469598103934665603ULL);

}  // namespace clipvs::nn
