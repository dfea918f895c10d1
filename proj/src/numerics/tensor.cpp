#include "mimic/numerics/tensor.hpp"

#include <cmath>
#include <sstream>

namespace mimic::num {

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

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

Tensor::Tensor() : Tensor(Shape{0}, {}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : s_(std::make_shared<detail::Storage>()) {
  if (shape.empty() || shape.size() > 2) {
    throw DimensionError("tensor rank must be 1 or 2, got shape " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->data = std::move(data);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{1}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(data), requires_grad);
}

Tensor Tensor::vector(std::vector<double> data, bool requires_grad) {
  const auto n = data.size();
  return Tensor(Shape{n}, std::move(data), requires_grad);
}

std::size_t Tensor::rows() const { return rank() == 1 ? 1 : s_->shape[0]; }
std::size_t Tensor::cols() const { return rank() == 1 ? s_->shape[0] : s_->shape[1]; }

double Tensor::item() const {
  if (size() != 1) throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
  return s_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (s_->grad.empty()) return std::vector<double>(s_->data.size(), 0.0);
  return s_->grad;
}

Tensor Tensor::clone() const { return Tensor(s_->shape, s_->data, s_->requires_grad); }

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->data, false); }

namespace {
thread_local Tape* g_active = nullptr;

struct FaultState {
  bool enabled = false;
  std::string op;
};
FaultState& fault_state() {
  static FaultState state;
  return state;
}
}  // namespace

Tape* active_tape() { return g_active; }

TapeScope::TapeScope(Tape& tape) : previous_(g_active) { g_active = &tape; }
TapeScope::~TapeScope() { g_active = previous_; }

NoGradScope::NoGradScope() : previous_(g_active) { g_active = nullptr; }
NoGradScope::~NoGradScope() { g_active = previous_; }

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw std::logic_error("backward: loss was not produced on a tape from trainable inputs");
  }
  if (!std::isfinite(loss.item())) {
    throw std::runtime_error("backward: loss is not finite");
  }
  loss.storage()->grad_buffer()[0] += 1.0;
  for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
}

void backward(const Tensor& loss) {
  Tape* tape = active_tape();
  if (!tape) throw std::logic_error("backward called without an active tape");
  tape->backward(loss);
}

void set_adjoint_fault(std::string op_name) {
  fault_state().enabled = true;
  fault_state().op = std::move(op_name);
}

void clear_adjoint_fault() {
  fault_state().enabled = false;
  fault_state().op.clear();
}

double adjoint_fault_factor(const char* op_name) {
  const auto& state = fault_state();
  if (!state.enabled) return 1.0;
  return state.op == op_name ? 1.5 : 1.0;
}

}  // namespace mimic::num
