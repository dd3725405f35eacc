#include "clipvs/tensor.hpp"

#include <sstream>

#include "clipvs/errors.hpp"

namespace clipvs::nn {

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ContractError("negative dimension in shape " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
  if (data_.size() != shape_size(shape_))
    throw ContractError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                        shape_string(shape_));
}

Tensor Tensor::randn(Shape shape, double stddev, Rng& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::from_matrix(const RowMatrix& m) {
  Tensor t({static_cast<int>(m.rows()), static_cast<int>(m.cols())});
  t.matrix(static_cast<int>(m.rows())) = m;
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix(int rows) {
  const auto cols = rows ? static_cast<Eigen::Index>(data_.size() / static_cast<std::size_t>(rows)) : 0;
  return MatrixMap(data_.data(), rows, cols);
}

ConstMatrixMap Tensor::matrix(int rows) const {
  const auto cols = rows ? static_cast<Eigen::Index>(data_.size() / static_cast<std::size_t>(rows)) : 0;
  return ConstMatrixMap(data_.data(), rows, cols);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    throw ContractError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.data_.size() != data_.size())
    throw ContractError("shape mismatch in += : " + shape_string(shape_) + " vs " +
                        shape_string(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

std::uint64_t fnv1a(const void* bytes, std::size_t n, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t Tensor::hash() const {
  std::uint64_t h = fnv1a(shape_.data(), shape_.size() * sizeof(int));
  return fnv1a(data_.data(), data_.size() * sizeof(double), h);
}

}  // namespace clipvs::nn
