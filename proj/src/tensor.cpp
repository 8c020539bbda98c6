#include "skattn/tensor.hpp"

#include <sstream>

#include "skattn/error.hpp"

namespace skattn {

namespace {
thread_local Graph* tls_graph = nullptr;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::create(Shape shape, std::vector<double> data, bool requires_grad) {
  for (int e : shape) {
    if (e < 1) throw InvalidArgument("tensor extents must be >= 1, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeMismatch("shape " + shape_str(shape) + " needs " +
                        std::to_string(shape_numel(shape)) + " values, got " +
                        std::to_string(data.size()));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return create(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return create({1}, {value}, requires_grad); }

int Tensor::dim(int axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) throw InvalidArgument("axis out of range");
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::span<double> Tensor::mutable_data() {
  if (!impl_->leaf) throw InvalidArgument("mutable_data() is only available on leaf tensors");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw NotScalar("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> index) const {
  if (index.size() != impl_->shape.size()) throw InvalidArgument("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (int i : index) {
    const int extent = impl_->shape[axis++];
    if (i < 0 || i >= extent) throw InvalidArgument("index out of range");
    flat = flat * static_cast<std::size_t>(extent) + static_cast<std::size_t>(i);
  }
  return impl_->data[flat];
}

void Tensor::set_requires_grad(bool value) {
  if (!impl_->leaf) throw InvalidArgument("requires_grad can only be set on leaf tensors");
  impl_->requires_grad = value;
}

Tensor Tensor::detach() const { return create(impl_->shape, impl_->data, false); }

Graph::~Graph() {
  for (auto& n : nodes_) {
    n.output->graph = nullptr;
    n.output->node = -1;
    n.output->requires_grad = false;
  }
}

int Graph::record(std::string_view op, std::vector<std::shared_ptr<TensorImpl>> inputs,
                  std::shared_ptr<TensorImpl> output, BackwardFn backward) {
  const int id = static_cast<int>(nodes_.size());
  output->graph = this;
  output->node = id;
  output->leaf = false;
  output->requires_grad = true;
  nodes_.push_back(Node{op, std::move(inputs), std::move(output), std::move(backward)});
  return id;
}

void Graph::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw NotScalar("backward() needs a scalar loss");
  }
  const auto& li = *loss.impl();
  if (li.graph != this || li.node < 0) {
    throw DetachedGraph("loss was not produced on this graph");
  }
  for (auto& n : nodes_) n.output->grad.clear();
  loss.impl()->grad.assign(1, 1.0);
  for (int i = li.node; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (n.output->grad.empty()) continue;
    n.backward(n.output->grad);
  }
}

GraphScope::GraphScope(Graph& graph) : previous_(tls_graph) { tls_graph = &graph; }

GraphScope::~GraphScope() { tls_graph = previous_; }

Graph* active_graph() { return tls_graph; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) throw NotScalar("backward() needs a scalar loss");
  Graph* g = loss.impl()->graph;
  if (g == nullptr) throw DetachedGraph("loss is not attached to a recorded graph");
  g->backward(loss);
}

namespace detail {

bool tracks(const TensorImpl& t) {
  const Graph* g = tls_graph;
  if (g == nullptr || !t.requires_grad) return false;
  return t.leaf || t.graph == g;
}

std::span<double> grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

Tensor finish(std::string_view op, Shape shape, std::vector<double> data,
              std::initializer_list<const Tensor*> inputs,
              const std::function<Graph::BackwardFn(const std::shared_ptr<TensorImpl>&)>&
                  make_backward) {
  auto out = std::make_shared<TensorImpl>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  out->leaf = false;

  bool any = false;
  for (const Tensor* in : inputs) {
    if (in != nullptr && in->defined() && tracks(*in->impl())) any = true;
  }
  if (!any) return Tensor(std::move(out));

  std::vector<std::shared_ptr<TensorImpl>> impls;
  impls.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (in != nullptr && in->defined()) impls.push_back(in->impl());
  }
  auto fn = make_backward(out);
  tls_graph->record(op, std::move(impls), out, std::move(fn));
  return Tensor(std::move(out));
}

}  // namespace detail

}  // namespace skattn
