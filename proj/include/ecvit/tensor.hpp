#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ecvit/error.hpp"

namespace ecvit {

enum class DType : std::uint8_t { kFloat32, kFloat64 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>,
                "tensors hold float or double");
  return std::is_same_v<T, float> ? DType::kFloat32 : DType::kFloat64;
}

const char* dtype_name(DType d);

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Mode { kTrain, kEval };

/// Gradient recording is on by default and is a per-thread switch.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

std::uint64_t next_object_id();

template <typename T>
struct TensorImpl;

/// One recorded operation. `fn` receives the gradient of the node's output
/// and adds the input gradients into `grad_in` (one span per input; empty for
/// inputs that do not need a gradient).
template <typename T>
struct Node {
  using BackwardFn = std::function<void(std::span<const T> grad_out,
                                        std::span<const std::span<T>> grad_in)>;

  std::uint64_t id = next_object_id();
  std::string op;
  std::int64_t numel = 0;
  std::vector<std::shared_ptr<Node>> next;
  BackwardFn fn;
  std::weak_ptr<TensorImpl<T>> leaf;  // set only on leaf accumulators
  std::vector<T> pending;
};

template <typename T>
struct TensorImpl {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;
  bool requires_grad = false;
  std::vector<T> grad;
  std::shared_ptr<Node<T>> grad_fn;      // producer, for results of recorded ops
  std::shared_ptr<Node<T>> accumulator;  // for leaves that require grad
  std::uint64_t id = next_object_id();
};

/// Dense row-major tensor handle. Copies share storage; use clone() for a
/// deep copy. Reshaped tensors alias their source's values.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) {
    check_shape(shape);
    const auto n = shape_numel(shape);
    init(std::move(shape), std::make_shared<std::vector<T>>(static_cast<std::size_t>(n), fill));
  }

  Tensor(Shape shape, std::vector<T> values) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
      throw ShapeError("tensor of shape " + shape_str(shape) + " cannot hold " +
                       std::to_string(values.size()) + " values");
    }
    init(std::move(shape), std::make_shared<std::vector<T>>(std::move(values)));
  }

  Tensor(Shape shape, std::shared_ptr<std::vector<T>> storage) {
    check_shape(shape);
    if (!storage || static_cast<std::int64_t>(storage->size()) != shape_numel(shape)) {
      throw ShapeError("storage size does not match shape " + shape_str(shape));
    }
    init(std::move(shape), std::move(storage));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), T(0)); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), T(1)); }
  static Tensor scalar(T v) { return Tensor(Shape{1}, v); }

  bool defined() const { return impl_ != nullptr; }

  const Shape& shape() const { return impl_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(impl_->shape.size()); }
  std::int64_t dim(std::int64_t axis) const {
    return impl_->shape[static_cast<std::size_t>(normalize_axis(axis))];
  }
  std::int64_t numel() const { return static_cast<std::int64_t>(impl_->storage->size()); }
  static constexpr DType dtype() { return dtype_of<T>(); }

  std::int64_t normalize_axis(std::int64_t axis) const {
    const auto r = rank();
    if (axis < -r || axis >= r) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                       shape_str(shape()));
    }
    return axis < 0 ? axis + r : axis;
  }

  const T* data() const { return impl_->storage->data(); }
  T* mutable_data() { return impl_->storage->data(); }
  std::span<const T> values() const { return {impl_->storage->data(), impl_->storage->size()}; }
  std::span<T> mutable_values() { return {impl_->storage->data(), impl_->storage->size()}; }
  std::vector<T> to_vector() const { return *impl_->storage; }
  const std::shared_ptr<std::vector<T>>& storage() const { return impl_->storage; }

  T item() const {
    if (numel() != 1) {
      throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return (*impl_->storage)[0];
  }

  T at(std::initializer_list<std::int64_t> index) const {
    return (*impl_->storage)[static_cast<std::size_t>(offset(index))];
  }
  void set(std::initializer_list<std::int64_t> index, T v) {
    (*impl_->storage)[static_cast<std::size_t>(offset(index))] = v;
  }

  bool requires_grad() const { return impl_->requires_grad; }

  /// Marks a leaf as trainable. Results of recorded operations are not leaves.
  Tensor& set_requires_grad(bool on) {
    if (impl_->grad_fn) {
      throw ContractError("set_requires_grad on a non-leaf tensor");
    }
    impl_->requires_grad = on;
    if (!on) impl_->accumulator.reset();
    return *this;
  }

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const T> grad() const { return {impl_->grad.data(), impl_->grad.size()}; }
  std::span<T> mutable_grad() { return {impl_->grad.data(), impl_->grad.size()}; }
  Tensor grad_tensor() const {
    if (!has_grad()) throw ContractError("tensor has no gradient");
    return Tensor(shape(), impl_->grad);
  }
  void zero_grad() { std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }
  void clear_grad() { impl_->grad.clear(); impl_->grad.shrink_to_fit(); }

  bool is_leaf() const { return impl_->grad_fn == nullptr; }
  const std::shared_ptr<Node<T>>& grad_fn() const { return impl_->grad_fn; }
  std::uint64_t id() const { return impl_->id; }

  /// Same values, no history, no gradient.
  Tensor detach() const { return Tensor(shape(), impl_->storage); }
  Tensor clone() const { return Tensor(shape(), std::vector<T>(*impl_->storage)); }

  /// Internal: the node that receives this tensor's gradient, if any.
  std::shared_ptr<Node<T>> gradient_edge() const {
    if (impl_->grad_fn) return impl_->grad_fn;
    if (!impl_->requires_grad) return nullptr;
    if (!impl_->accumulator) {
      auto node = std::make_shared<Node<T>>();
      node->op = "leaf";
      node->numel = numel();
      node->leaf = impl_;
      impl_->accumulator = std::move(node);
    }
    return impl_->accumulator;
  }

  /// Internal: attach a producer node (used by record_op).
  void attach_grad_fn(std::shared_ptr<Node<T>> node) {
    impl_->grad_fn = std::move(node);
    impl_->requires_grad = true;
  }

  static std::vector<T>& leaf_grad_buffer(TensorImpl<T>& impl) {
    if (impl.grad.empty()) impl.grad.assign(impl.storage->size(), T(0));
    return impl.grad;
  }

 private:
  static void check_shape(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor rank must be at least 1");
    for (auto d : shape) {
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
    }
  }

  void init(Shape shape, std::shared_ptr<std::vector<T>> storage) {
    impl_ = std::make_shared<TensorImpl<T>>();
    impl_->shape = std::move(shape);
    impl_->storage = std::move(storage);
  }

  std::int64_t offset(std::initializer_list<std::int64_t> index) const {
    if (static_cast<std::int64_t>(index.size()) != rank()) {
      throw ShapeError("index rank does not match shape " + shape_str(shape()));
    }
    std::int64_t off = 0;
    std::size_t a = 0;
    for (auto i : index) {
      const auto d = impl_->shape[a++];
      if (i < 0 || i >= d) throw ShapeError("index out of range for shape " + shape_str(shape()));
      off = off * d + i;
    }
    return off;
  }

  std::shared_ptr<TensorImpl<T>> impl_;
};

/// Attaches a backward function to `out` when gradient recording is on and at
/// least one input needs a gradient. Returns `out`.
template <typename T>
Tensor<T> record_op(std::string op, Tensor<T> out, const std::vector<Tensor<T>>& inputs,
                    typename Node<T>::BackwardFn fn) {
  if (!grad_enabled()) return out;
  std::vector<std::shared_ptr<Node<T>>> edges;
  edges.reserve(inputs.size());
  bool any = false;
  for (const auto& in : inputs) {
    edges.push_back(in.gradient_edge());
    any = any || edges.back() != nullptr;
  }
  if (!any) return out;
  auto node = std::make_shared<Node<T>>();
  node->op = std::move(op);
  node->numel = out.numel();
  node->next = std::move(edges);
  node->fn = std::move(fn);
  out.attach_grad_fn(std::move(node));
  return out;
}

struct TapeEntry {
  std::string op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output = 0;
};

/// Operations reachable from a root, in topological order (producers first).
template <typename T>
class Tape {
 public:
  static Tape record(const Tensor<T>& root) {
    Tape tape;
    auto start = root.gradient_edge();
    if (!start) return tape;
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS: graphs can be thousands of nodes deep.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(start.get(), 0);
    seen.insert(start.get());
    std::vector<std::shared_ptr<Node<T>>> holder{start};
    while (!stack.empty()) {
      auto& [node, child] = stack.back();
      if (child < node->next.size()) {
        Node<T>* nxt = node->next[child++].get();
        if (nxt && seen.insert(nxt).second) stack.emplace_back(nxt, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    tape.root_ = std::move(start);
    return tape;
  }

  const std::vector<Node<T>*>& nodes() const { return order_; }

  std::vector<TapeEntry> entries() const {
    std::vector<TapeEntry> out;
    out.reserve(order_.size());
    for (const auto* n : order_) {
      TapeEntry e{n->op, {}, n->id};
      for (const auto& in : n->next) {
        if (in) e.inputs.push_back(in->id);
      }
      out.push_back(std::move(e));
    }
    return out;
  }

 private:
  std::shared_ptr<Node<T>> root_;  // keeps the graph alive while the tape exists
  std::vector<Node<T>*> order_;
};

/// Reverse-mode sweep from a single-element loss. Leaf gradients accumulate
/// across calls until cleared.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  const Tape<T> tape = Tape<T>::record(loss);
  const auto& order = tape.nodes();
  if (order.empty()) {
    throw ContractError("backward() on a loss that does not depend on any trainable tensor");
  }
  for (auto* n : order) n->pending.clear();
  order.back()->pending.assign(1, T(1));

  std::vector<std::span<T>> spans;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->pending.empty()) continue;
    if (auto leaf = node->leaf.lock()) {
      auto& g = Tensor<T>::leaf_grad_buffer(*leaf);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node->pending[i];
    } else if (node->fn) {
      spans.clear();
      for (auto& in : node->next) {
        if (!in) {
          spans.emplace_back();
          continue;
        }
        if (in->pending.empty()) in->pending.assign(static_cast<std::size_t>(in->numel), T(0));
        spans.emplace_back(in->pending.data(), in->pending.size());
      }
      node->fn(std::span<const T>(node->pending.data(), node->pending.size()),
               std::span<const std::span<T>>(spans.data(), spans.size()));
    }
    node->pending.clear();
    node->pending.shrink_to_fit();
  }
}

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace ecvit
