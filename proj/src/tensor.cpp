#include "dseq/tensor.hpp"

#include <algorithm>
#include <sstream>

DSEQ_BEGIN_NAMESPACE

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

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

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), Real(0), requires_grad); }

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->data.assign(dseq::numel(shape), value);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::vector<Real> values, bool requires_grad) {
  if (dseq::numel(shape) != values.size()) {
    throw ShapeError("Tensor::from: shape " + to_string(shape) + " needs " +
                     std::to_string(dseq::numel(shape)) + " values, got " + std::to_string(values.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(values.begin(), values.end());
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(Real value, bool requires_grad) { return from({}, {value}, requires_grad); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape()));
  }
  return impl_->shape[axis];
}

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

Real Tensor::at(std::size_t row, std::size_t col) const {
  if (rank() != 2) throw ShapeError("at(row, col) on tensor of shape " + to_string(shape()));
  return impl_->data[row * impl_->shape[1] + col];
}

void Tensor::set_requires_grad(bool value) {
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

std::span<Real> Tensor::grad_buffer() const {
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), Real(0));
  return impl_->grad;
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tape& Tape::current() {
  thread_local Tape tape;
  return tape;
}

bool Tape::record(const char* op, std::initializer_list<const Tensor*> inputs, Tensor& out,
                  std::function<void()> backward) {
  if (!enabled_) return false;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  if (!any) return false;
  Node node{op, {}, out.impl(), std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor* t : inputs) node.inputs.push_back(t->node());
  out.impl()->requires_grad = true;
  out.impl()->node = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return true;
}

bool Tape::record(const char* op, const std::vector<Tensor>& inputs, Tensor& out, std::function<void()> backward) {
  if (!enabled_) return false;
  bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return false;
  Node node{op, {}, out.impl(), std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node.inputs.push_back(t.node());
  out.impl()->requires_grad = true;
  out.impl()->node = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return true;
}

void Tape::clear() {
  for (auto& node : nodes_) node.output->node = -1;
  nodes_.clear();
}

void Tape::backward(Tensor root) {
  if (!root.defined() || root.rank() != 0) {
    throw ShapeError("backward: root must be a scalar of shape [], got " +
                     (root.defined() ? to_string(root.shape()) : std::string("<undefined>")));
  }
  if (!root.requires_grad()) return;
  root.grad_buffer()[0] += Real(1);
  int top = root.node();
  if (top < 0) return;

  std::vector<char> reachable(static_cast<std::size_t>(top) + 1, 0);
  std::vector<int> stack{top};
  reachable[top] = 1;
  while (!stack.empty()) {
    int id = stack.back();
    stack.pop_back();
    for (int in : nodes_[id].inputs) {
      if (in >= 0 && !reachable[in]) {
        reachable[in] = 1;
        stack.push_back(in);
      }
    }
  }
  for (int id = top; id >= 0; --id) {
    if (reachable[id] && !nodes_[id].output->grad.empty()) nodes_[id].backward();
  }
}

DSEQ_END_NAMESPACE
