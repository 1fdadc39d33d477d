#include "kpp/tensor.hpp"

#include <sstream>

namespace kpp {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index shape_size(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  data_ = Eigen::ArrayXd::Constant(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, Eigen::ArrayXd data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_size(shape_) != data_.size()) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor::Tensor(Shape shape, std::initializer_list<double> values) : shape_(std::move(shape)) {
  if (shape_size(shape_) != static_cast<Index>(values.size())) {
    throw ShapeError("tensor: shape " + to_string(shape_) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  data_.resize(static_cast<Index>(values.size()));
  Index i = 0;
  for (double v : values) data_[i++] = v;
}

Index Tensor::dim(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape_));
  return data_[0];
}

MatrixMap Tensor::matrix(Index rows, Index cols) {
  if (rows * cols != size()) {
    throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " of tensor " + to_string(shape_));
  }
  return MatrixMap(data_.data(), rows, cols);
}

ConstMatrixMap Tensor::matrix(Index rows, Index cols) const {
  if (rows * cols != size()) {
    throw ShapeError("matrix view " + std::to_string(rows) + "x" + std::to_string(cols) +
                     " of tensor " + to_string(shape_));
  }
  return ConstMatrixMap(data_.data(), rows, cols);
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size()) {
    throw ShapeError("reshape: cannot view " + to_string(shape_) + " as " + to_string(shape));
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

}  // namespace kpp
