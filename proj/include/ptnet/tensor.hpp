#pragma once

// Dense row-major tensor with a dynamic reverse-mode tape.
//
// Every op that sees an input with requires_grad() (while gradients are
// enabled on the calling thread) records a node whose parents are the inputs
// and whose backward closure accumulates into the parents' gradients. Node ids
// come from a global monotonic counter, so descending id order is a valid
// reverse topological order for any graph.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ptnet {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  bool consumed = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  // Buffer that receives this node's gradient contributions. Leaves are
  // redirected to the calling thread's GradSink when one is active.
  std::vector<double>& grad_buffer();
};

std::uint64_t next_node_id();

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Direct mutation is reserved for leaves (parameters updated by an optimizer,
  // buffers being filled before use).
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  Tensor& set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad();

  std::uint64_t node_id() const;
  bool all_finite() const;

  /// Copy of the values with no tape history.
  Tensor detach() const;

  std::vector<double> to_vector() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Runs reverse-mode accumulation from a scalar loss. Every requires_grad leaf
/// reachable from the loss receives a gradient buffer (zeros when no path
/// contributes). Leaves not reachable from the loss are untouched. A loss can
/// be differentiated once; a second call throws std::logic_error.
void backward(const Tensor& loss);

/// Same as backward() but seeds d(loss) with `seed` instead of 1.
void backward(const Tensor& loss, double seed);

bool grad_enabled();

/// Disables tape recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Collects leaf gradients for one thread so independent graphs that share
/// parameters can be differentiated concurrently. Flush in a fixed order to
/// keep results bit-reproducible. Leaves must outlive the sink (parameters
/// owned by a ParamStore always do).
class GradSink {
 public:
  std::vector<double>& buffer_for(detail::Node& leaf);
  void flush();
  bool empty() const { return buffers_.empty(); }

 private:
  std::unordered_map<detail::Node*, std::vector<double>> buffers_;
  std::vector<detail::Node*> order_;
};

class GradSinkScope {
 public:
  explicit GradSinkScope(GradSink& sink);
  ~GradSinkScope();
  GradSinkScope(const GradSinkScope&) = delete;
  GradSinkScope& operator=(const GradSinkScope&) = delete;

 private:
  GradSink* previous_;
};

}  // namespace ptnet
