#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mimic::num {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {
struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something flows into it
  bool requires_grad = false;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};
}  // namespace detail

// Dense row-major double tensor of rank 1 or 2. Copies share storage; use
// clone() for an independent value.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                       bool requires_grad = false);
  static Tensor vector(std::vector<double> data, bool requires_grad = false);

  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t size() const { return s_->data.size(); }
  // Rank-1 tensors behave as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return s_->data; }
  std::span<double> mutable_data() { return s_->data; }
  const std::vector<double>& values() const { return s_->data; }
  double operator[](std::size_t i) const { return s_->data[i]; }
  double at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool flag) { s_->requires_grad = flag; }
  bool has_grad() const { return !s_->grad.empty(); }
  // Zero-filled view when nothing has accumulated yet.
  std::vector<double> grad() const;
  void zero_grad() { s_->grad.clear(); }

  Tensor clone() const;
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

  const std::shared_ptr<detail::Storage>& storage() const { return s_; }

 private:
  std::shared_ptr<detail::Storage> s_;
};

// Ordered record of adjoint closures. Operations append while a TapeScope is
// active; backward() replays them in reverse, which is a valid reverse
// topological order because every op is recorded after its inputs exist.
class Tape {
 public:
  void record(std::function<void()> adjoint) { adjoints_.push_back(std::move(adjoint)); }
  void backward(const Tensor& loss);
  std::size_t size() const { return adjoints_.size(); }
  void clear() { adjoints_.clear(); }

 private:
  std::vector<std::function<void()>> adjoints_;
};

Tape* active_tape();

class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

// Suspends recording; everything computed inside is a constant.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

// Seeds d(loss)/d(loss)=1 and replays the active tape.
void backward(const Tensor& loss);

// Test hook: when set, the named op's adjoint is deliberately scaled by 1.5 so
// verification suites can prove they notice a broken derivative.
void set_adjoint_fault(std::string op_name);
void clear_adjoint_fault();
double adjoint_fault_factor(const char* op_name);

}  // namespace mimic::num
