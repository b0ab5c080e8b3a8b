#include "maskseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace maskseg {

namespace {

std::atomic<std::uint64_t> g_next_seq{1};
thread_local bool t_grad_enabled = true;

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
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

void throw_shape_error(std::string_view op, const Shape& a, const Shape& b) {
  std::ostringstream os;
  os << op << ": shape mismatch " << shape_str(a) << " vs " << shape_str(b);
  throw ShapeError(os.str());
}

void throw_shape_error(std::string_view op, const Shape& a, std::string_view what) {
  std::ostringstream os;
  os << op << ": invalid shape " << shape_str(a) << " (" << what << ")";
  throw ShapeError(os.str());
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(maskseg::numel(shape), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<double> data) {
  if (maskseg::numel(shape) != data.size()) {
    throw ShapeError("from: " + shape_str(shape) + " needs " + std::to_string(maskseg::numel(shape)) +
                     " values, got " + std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

double Tensor::item() const {
  if (numel() != 1) throw_shape_error("item", shape(), "expected a single element");
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

std::span<const double> Tensor::grad() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->data.size(), 0.0); }

Tensor Tensor::detach() const { return from(impl_->shape, impl_->data); }

bool GradMode::enabled() { return t_grad_enabled; }
void GradMode::set_enabled(bool on) { t_grad_enabled = on; }

Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   const std::vector<Tensor>& inputs, BackwardFn backward) {
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& t : inputs) needs = needs || (t.defined() && t.requires_grad());
  }
  if (needs) {
    auto node = std::make_shared<Node>();
    node->op = std::string(op);
    node->seq = g_next_seq.fetch_add(1, std::memory_order_relaxed);
    node->inputs.reserve(inputs.size());
    for (const auto& t : inputs) node->inputs.push_back(t.impl());
    node->output = out.get();
    node->backward = std::move(backward);
    out->requires_grad = true;
    out->grad_fn = std::move(node);
  }
  return Tensor(std::move(out));
}

Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                   std::initializer_list<Tensor> inputs, BackwardFn backward) {
  return make_result(op, std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(backward));
}

std::vector<const Node*> tape_of(const Tensor& root) {
  std::vector<const Node*> nodes;
  std::unordered_set<const Node*> seen;
  std::vector<const Node*> stack;
  if (root.grad_fn()) stack.push_back(root.grad_fn());
  while (!stack.empty()) {
    const Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (const auto& in : n->inputs) {
      if (in && in->grad_fn) stack.push_back(in->grad_fn.get());
    }
  }
  std::sort(nodes.begin(), nodes.end(), [](const Node* a, const Node* b) { return a->seq > b->seq; });
  return nodes;
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be scalar-shaped, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  std::unordered_map<TensorImpl*, std::vector<double>> pending;
  pending[loss.impl().get()] = {1.0};

  auto flush = [](TensorImpl* t, const std::vector<double>& g) {
    if (!t->requires_grad) return;
    if (t->grad.empty()) t->grad.assign(t->data.size(), 0.0);
    for (std::size_t i = 0; i < g.size(); ++i) t->grad[i] += g[i];
  };

  for (const Node* node : tape_of(loss)) {
    auto it = pending.find(node->output);
    if (it == pending.end()) continue;
    std::vector<double> gout = std::move(it->second);
    pending.erase(it);
    flush(node->output, gout);

    GradSlots slots(node->inputs.size(), nullptr);
    for (std::size_t k = 0; k < node->inputs.size(); ++k) {
      TensorImpl* in = node->inputs[k].get();
      if (!in || !in->requires_grad) continue;
      auto& buf = pending[in];
      if (buf.empty()) buf.assign(in->data.size(), 0.0);
      slots[k] = &buf;
    }
    node->backward(*node, gout, slots);
  }
  // Whatever remains belongs to leaves.
  for (auto& [t, g] : pending) flush(t, g);
}

}  // namespace maskseg
