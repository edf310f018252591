#include "cts/tensor.hpp"

#include <cmath>
#include <sstream>

#include "cts/error.hpp"

namespace cts {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::kOk: return "ok";
    case ErrorCode::kInvalidArgument: return "invalid_argument";
    case ErrorCode::kShapeMismatch: return "shape_mismatch";
    case ErrorCode::kNonFinite: return "non_finite";
    case ErrorCode::kUnsupported: return "unsupported";
    case ErrorCode::kDivergence: return "divergence";
    case ErrorCode::kEmptyTicket: return "empty_ticket";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kBudgetExceeded: return "budget_exceeded";
    case ErrorCode::kState: return "state";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_extents(const Shape& shape) {
  for (auto e : shape) {
    require(e > 0, ErrorCode::kInvalidArgument, "tensor extents must be positive, got ",
            shape_str(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_extents(shape_);
  data_.assign(static_cast<std::size_t>(numel(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  check_extents(shape_);
  require(static_cast<std::int64_t>(data_.size()) == numel(shape_), ErrorCode::kShapeMismatch,
          "tensor data length ", data_.size(), " does not match shape ", shape_str(shape_));
}

Tensor Tensor::vector(std::vector<double> values) {
  const auto n = static_cast<std::int64_t>(values.size());
  return Tensor(Shape{n}, std::move(values));
}

double Tensor::item() const {
  require(data_.size() == 1, ErrorCode::kShapeMismatch, "item() on tensor of shape ",
          shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  require(numel(shape) == static_cast<std::int64_t>(data_.size()), ErrorCode::kShapeMismatch,
          "reshape ", shape_str(shape_), " -> ", shape_str(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace cts
