#include "ptnet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "ptnet/errors.hpp"

namespace ptnet {

namespace {

thread_local bool t_grad_enabled = true;
thread_local GradSink* t_sink = nullptr;
std::atomic<std::uint64_t> g_next_id{1};

std::shared_ptr<detail::Node> make_node(Shape shape, std::vector<double> values, bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  if (values.size() != shape_numel(shape)) {
    throw ShapeError("tensor: data length " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  }
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  node->id = detail::next_node_id();
  return node;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
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

namespace detail {

std::uint64_t next_node_id() { return g_next_id.fetch_add(1, std::memory_order_relaxed); }

std::vector<double>& Node::grad_buffer() {
  if (leaf && t_sink != nullptr) return t_sink->buffer_for(*this);
  if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  return grad;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_node(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("tensor: undefined");
  return node_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node_ ? node_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!node_) throw std::logic_error("tensor: undefined");
  return node_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!node_) throw std::logic_error("tensor: undefined");
  if (!node_->leaf) throw std::logic_error("tensor: only leaves may be mutated in place");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->data[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool flag) {
  if (!node_) throw std::logic_error("tensor: undefined");
  if (!node_->leaf) throw std::logic_error("set_requires_grad: only valid on leaves");
  node_->requires_grad = flag;
  return *this;
}

bool Tensor::is_leaf() const { return node_ && node_->leaf; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size() && !node_->data.empty(); }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) return {};
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() {
  if (!node_) throw std::logic_error("tensor: undefined");
  if (node_->grad.size() != node_->data.size()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) {
    node_->grad.clear();
    node_->consumed = false;
  }
}

std::uint64_t Tensor::node_id() const { return node_ ? node_->id : 0; }

bool Tensor::all_finite() const {
  return std::all_of(node_->data.begin(), node_->data.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::detach() const { return Tensor::from(shape(), node_->data, false); }

std::vector<double> Tensor::to_vector() const { return std::vector<double>(data().begin(), data().end()); }

void backward(const Tensor& loss) { backward(loss, 1.0); }

void backward(const Tensor& loss, double seed) {
  if (!loss.defined()) throw std::logic_error("backward: undefined loss");
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw std::logic_error("backward: loss is not on the tape");
  auto root = loss.node();
  if (root->consumed) throw std::logic_error("backward: graph already consumed; rebuild the forward pass");

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  // Interior nodes start from a clean buffer; leaves keep accumulating.
  for (auto* n : order) {
    if (!n->leaf) n->grad.assign(n->data.size(), 0.0);
  }
  root->grad_buffer()[0] += seed;
  if (root->leaf) {
    root->consumed = true;
    return;
  }
  for (auto* n : order) {
    if (n->leaf) {
      n->grad_buffer();
      continue;
    }
    if (n->backward_fn) n->backward_fn(*n);
  }
  for (auto* n : order) {
    if (!n->leaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
      n->consumed = true;
    }
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

std::vector<double>& GradSink::buffer_for(detail::Node& leaf) {
  auto it = buffers_.find(&leaf);
  if (it == buffers_.end()) {
    it = buffers_.emplace(&leaf, std::vector<double>(leaf.data.size(), 0.0)).first;
    order_.push_back(&leaf);
  }
  return it->second;
}

void GradSink::flush() {
  for (auto* leaf : order_) {
    auto& buf = buffers_.at(leaf);
    if (leaf->grad.size() != leaf->data.size()) leaf->grad.assign(leaf->data.size(), 0.0);
    for (std::size_t i = 0; i < buf.size(); ++i) leaf->grad[i] += buf[i];
  }
  buffers_.clear();
  order_.clear();
}

GradSinkScope::GradSinkScope(GradSink& sink) : previous_(t_sink) { t_sink = &sink; }
GradSinkScope::~GradSinkScope() { t_sink = previous_; }

}  // namespace ptnet
