#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "r3d/tensor.hpp"

namespace r3d {

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
 public:
  Var() = default;

  bool valid() const { return graph_ != nullptr; }
  Graph& graph() const { return *graph_; }
  int id() const { return id_; }

  const Tensor& value() const;
  const Shape& shape() const { return value().shape; }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

// Receives the gradient of the node's output and accumulates into parents.
using BackwardFn = std::function<void(Graph&, const Tensor& grad_out)>;

// Append-only tape. Node ids are a topological order, so backward is a single
// reverse sweep. Values are never mutated once recorded.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Tensor value);
  Var parameter(Tensor value);

  // Records an op output. The backward rule is kept only if some parent
  // requires a gradient; otherwise the node is a constant.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, const std::vector<Var>& parents, BackwardFn backward);

  // Reverse sweep from a scalar loss. Gradients accumulate across calls.
  void backward(const Var& loss);

  const Tensor& value(const Var& v) const { return nodes_[check(v)].value; }
  bool requires_grad(const Var& v) const { return nodes_[check(v)].requires_grad; }

  // Gradient of a node after backward; a zero tensor when nothing flowed in.
  Tensor grad(const Var& v) const;
  bool has_grad(const Var& v) const { return nodes_[check(v)].has_grad; }

  // Mutable gradient buffer of v, zero-initialised on first use. Only meant
  // for backward rules; v must require a gradient.
  Tensor& grad_buffer(const Var& v);

  // Adds g into v's gradient if v requires one.
  void accumulate(const Var& v, const Tensor& g);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  int check(const Var& v) const;
  Var push(Tensor value, bool requires_grad, BackwardFn backward);

  // deque keeps references to earlier nodes stable while recording.
  std::deque<Node> nodes_;
};

}  // namespace r3d
