#include "r3d/graph.hpp"

#include <string>

namespace r3d {

const Tensor& Var::value() const { return graph_->value(*this); }

bool Var::requires_grad() const { return graph_->requires_grad(*this); }

int Graph::check(const Var& v) const {
  if (v.graph_ != this || v.id_ < 0 || static_cast<std::size_t>(v.id_) >= nodes_.size()) {
    throw ContractError("graph: variable does not belong to this graph");
  }
  return v.id_;
}

Var Graph::push(Tensor value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Graph::constant(Tensor value) { return push(std::move(value), false, nullptr); }

Var Graph::parameter(Tensor value) { return push(std::move(value), true, nullptr); }

Var Graph::record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward) {
  bool any = false;
  for (const Var& p : parents) any = any || nodes_[check(p)].requires_grad;
  return push(std::move(value), any, std::move(backward));
}

Var Graph::record(Tensor value, const std::vector<Var>& parents, BackwardFn backward) {
  bool any = false;
  for (const Var& p : parents) any = any || nodes_[check(p)].requires_grad;
  return push(std::move(value), any, std::move(backward));
}

void Graph::backward(const Var& loss) {
  const int root = check(loss);
  if (nodes_[root].value.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_str(nodes_[root].value.shape));
  }
  if (!nodes_[root].requires_grad) return;
  grad_buffer(loss).data[0] += 1.0;
  for (int id = root; id >= 0; --id) {
    Node& node = nodes_[id];
    if (!node.has_grad || !node.backward) continue;
    node.backward(*this, node.grad);
  }
}

Tensor Graph::grad(const Var& v) const {
  const Node& node = nodes_[check(v)];
  if (node.has_grad) return node.grad;
  return Tensor(node.value.shape, 0.0);
}

Tensor& Graph::grad_buffer(const Var& v) {
  Node& node = nodes_[check(v)];
  if (!node.has_grad) {
    node.grad = Tensor(node.value.shape, 0.0);
    node.has_grad = true;
  }
  return node.grad;
}

void Graph::accumulate(const Var& v, const Tensor& g) {
  if (!requires_grad(v)) return;
  Tensor& buf = grad_buffer(v);
  if (buf.size() != g.size()) {
    throw ShapeError("accumulate: gradient " + shape_str(g.shape) + " vs value " +
                     shape_str(buf.shape));
  }
  for (std::size_t i = 0; i < g.size(); ++i) buf.data[i] += g.data[i];
}

}  // namespace r3d
