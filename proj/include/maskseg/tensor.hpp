#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace maskseg {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised when an op receives operands whose shapes violate its shape rule.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] void throw_shape_error(std::string_view op, const Shape& a, const Shape& b);
[[noreturn]] void throw_shape_error(std::string_view op, const Shape& a, std::string_view what);

struct Node;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until the first backward that reaches this tensor
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
};

/// Gradient slots handed to a node's backward function. A null entry means the
/// corresponding input does not need a gradient.
using GradSlots = std::vector<std::vector<double>*>;

using BackwardFn = std::function<void(const Node& node, std::span<const double> grad_out, GradSlots& grad_in)>;

/// One recorded operation on the tape.
struct Node {
  std::string op;
  std::uint64_t seq = 0;  // execution order; reverse replay sorts on this
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  TensorImpl* output = nullptr;  // owned by the tensor that owns this node
  BackwardFn backward;
};

/// Shared handle to a dense row-major array of doubles.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  /// Gradient buffer; allocated as zeros when absent.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad();

  /// Copy of the values with no tape history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  const Node* grad_fn() const { return impl_->grad_fn.get(); }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Thread-local switch for tape recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set_enabled(false); }
  ~NoGradGuard() { GradMode::set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Builds the output of an op and records it on the tape if any input needs a gradient.
Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, BackwardFn backward);
Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward);

/// Nodes reachable from `root`, in the order backward replays them.
std::vector<const Node*> tape_of(const Tensor& root);

/// Reverse-mode sweep from a scalar. Gradients accumulate across calls.
void backward(const Tensor& loss);

}  // namespace maskseg
