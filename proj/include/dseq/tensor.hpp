#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

#include "dseq/config.hpp"
#include "dseq/errors.hpp"

DSEQ_BEGIN_NAMESPACE

using Shape = std::vector<std::size_t>;

/// Storage is 64-byte aligned so that vectorized kernels see the same
/// alignment, and therefore the same summation order, on every run.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using RealBuffer = std::vector<Real, AlignedAllocator<Real>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct TensorImpl {
  Shape shape;
  RealBuffer data;
  RealBuffer grad;  // empty until the first accumulation
  bool requires_grad = false;
  int node = -1;  // tape node that produced this tensor, -1 for leaves
};

/// Shared handle to a dense row-major array of Real with an optional gradient.
///
/// Copies of a Tensor alias the same storage. Values are treated as immutable
/// once created; only gradients accumulate. Parameters are the exception:
/// the optimizer and EMA update them in place between steps through
/// mutable_data().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const Real> data() const { return impl_->data; }
  std::span<Real> mutable_data() { return impl_->data; }
  Real item() const;
  Real operator[](std::size_t i) const { return impl_->data[i]; }
  Real at(std::size_t row, std::size_t col) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool value);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const Real> grad() const { return impl_->grad; }
  std::span<Real> mutable_grad() { return impl_->grad; }
  /// Zero-filled gradient buffer, allocated on first use.
  std::span<Real> grad_buffer() const;
  void zero_grad() { impl_->grad.clear(); }

  int node() const { return impl_->node; }

  /// Deep copy of the values without gradient or graph linkage.
  Tensor detach() const;

  TensorImpl* impl() const { return impl_.get(); }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  std::shared_ptr<TensorImpl> impl_;
};

/// Append-only record of differentiable operations, rebuilt every forward pass.
///
/// Node ids are assigned in creation order, so inputs always precede outputs.
class Tape {
 public:
  struct Node {
    const char* op;
    std::vector<int> inputs;  // producing node ids of the inputs, -1 for leaves
    TensorImpl* output;       // kept alive by the backward closure
    std::function<void()> backward;
  };

  static Tape& current();

  bool enabled() const { return enabled_; }
  void set_enabled(bool value) { enabled_ = value; }

  /// Registers `out` as produced by `op` from `inputs` if recording is on and
  /// any input requires grad. Returns true when a node was recorded.
  bool record(const char* op, std::initializer_list<const Tensor*> inputs, Tensor& out,
              std::function<void()> backward);
  bool record(const char* op, const std::vector<Tensor>& inputs, Tensor& out,
              std::function<void()> backward);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t id) const { return nodes_[id]; }
  /// Drops every node; tensors produced by them become graph leaves.
  void clear();

  /// Runs reverse-mode accumulation from a rank-0 root. Each node reachable
  /// from the root is visited exactly once.
  void backward(Tensor root);

 private:
  std::vector<Node> nodes_;
  bool enabled_ = true;
};

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(Tape::current().enabled()) { Tape::current().set_enabled(false); }
  ~NoGradGuard() { Tape::current().set_enabled(previous_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline void backward(const Tensor& root) { Tape::current().backward(root); }

DSEQ_END_NAMESPACE
