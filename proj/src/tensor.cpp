#include "max360iq/tensor.hpp"

#include <cmath>
#include <sstream>

#include "max360iq/errors.hpp"

namespace max360iq {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {
void check_extents(const Shape& shape) {
  if (shape.empty()) throw PreconditionError("tensor shape must have at least one extent");
  for (std::size_t e : shape)
    if (e == 0) throw PreconditionError("tensor extents must be positive: " + shape_str(shape));
}
}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  if (data_.size() != shape_numel(shape_))
    throw PreconditionError("tensor data length " + std::to_string(data_.size()) +
                            " does not match shape " + shape_str(shape_));
}

double Tensor::item() const {
  if (data_.size() != 1)
    throw PreconditionError("item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw PreconditionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

void require_finite(const Tensor& t, const char* op) {
  if (!t.all_finite())
    throw NumericError(std::string("non-finite value produced by ") + op + " (shape " +
                       shape_str(t.shape()) + ")");
}

}  // namespace max360iq
