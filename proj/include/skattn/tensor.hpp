#pragma once

// Dense float64 tensors with tape-style reverse-mode differentiation.
//
// A Tensor is a cheap handle onto shared storage. Values are immutable once
// created; only gradient buffers (and leaf values, through mutable_data(), for
// optimizers and finite-difference probes) change afterwards.
//
// Recording happens only while a Graph is active on the calling thread
// (see GraphScope). Outside a scope every op is a plain forward computation.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace skattn {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Graph;

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty when absent
  bool requires_grad = false;
  bool leaf = true;
  Graph* graph = nullptr;  // producing graph for non-leaf tensors
  int node = -1;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  /// Throws ShapeMismatch if the element count disagrees with the shape, or
  /// InvalidArgument for a non-positive extent.
  static Tensor create(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int dim(int axis) const;
  std::size_t numel() const { return impl_->data.size(); }

  std::span<const double> data() const { return impl_->data; }
  const std::vector<double>& values() const { return impl_->data; }
  /// Leaf tensors only.
  std::span<double> mutable_data();

  double item() const;
  double at(std::initializer_list<int> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->leaf; }
  void set_requires_grad(bool value);

  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  /// Copy of the values as a fresh constant leaf.
  Tensor detach() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Append-only tape. Insertion order is a topological order.
class Graph {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Node {
    std::string_view op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    std::shared_ptr<TensorImpl> output;
    BackwardFn backward;
  };

  Graph() = default;
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  int record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
             std::shared_ptr<TensorImpl> output, BackwardFn backward);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  /// Throws NotScalar / DetachedGraph.
  void backward(const Tensor& loss);

 private:
  std::vector<Node> nodes_;
};

/// Makes `graph` the recording target for the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

/// Runs backward on the graph that produced `loss`.
void backward(const Tensor& loss);

namespace detail {

/// True when `t` takes part in differentiation on the active graph.
bool tracks(const TensorImpl& t);

/// Lazily allocated gradient buffer.
std::span<double> grad_buffer(TensorImpl& t);

/// Builds the output tensor and records a node when any input is tracked.
/// `make_backward` is only invoked when a node is recorded.
Tensor finish(std::string_view op, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs,
              const std::function<Graph::BackwardFn(const std::shared_ptr<TensorImpl>&)>&
                  make_backward);

}  // namespace detail

}  // namespace skattn
