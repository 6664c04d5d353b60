#pragma once

#include <algorithm>
#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "persona/diff/tensor.hpp"
#include "persona/error.hpp"

namespace persona::diff {

// Trainable leaf. Owned by the model and shared by pointer wherever the
// same weights are used in several places (tied embeddings, shared layers).
class Parameter {
 public:
  Parameter(std::string name, Tensor value)
      : name_(std::move(name)), value_(std::move(value)), grad_(value_.shape()) {}

  const std::string& name() const noexcept { return name_; }
  void rename(std::string name) { name_ = std::move(name); }

  Tensor& value() noexcept { return value_; }
  const Tensor& value() const noexcept { return value_; }
  Tensor& grad() noexcept { return grad_; }
  const Tensor& grad() const noexcept { return grad_; }
  const Shape& shape() const noexcept { return value_.shape(); }
  std::size_t size() const noexcept { return value_.size(); }

  // Frozen parameters enter graphs as constants and never receive gradient.
  bool frozen() const noexcept { return frozen_; }
  void set_frozen(bool frozen) noexcept { frozen_ = frozen; }

  void zero_grad() { grad_.fill(0.0); }

 private:
  std::string name_;
  Tensor value_;
  Tensor grad_;
  bool frozen_ = false;
};

using ParameterPtr = std::shared_ptr<Parameter>;

class Graph;

// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
struct Var {
  Graph* graph = nullptr;
  int id = -1;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  double item() const { return value().item(); }
  bool valid() const noexcept { return graph != nullptr && id >= 0; }
};

// Define-by-run tape. Nodes are appended in execution order, so parents
// always precede children and the reverse sweep is a plain reverse loop.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, int)>;

  // With recording off, no backward closures are kept (inference mode).
  explicit Graph(bool record = true) : record_(record) {}

  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const noexcept { return record_; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  Var constant(Tensor value) {
    Node node;
    node.value = std::move(value);
    return push(std::move(node));
  }

  // Leaf for a parameter. Repeated calls return the same node.
  Var parameter(Parameter& p) {
    if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) {
      return Var{this, it->second};
    }
    Node node;
    node.external = &p.value();
    node.param = &p;
    node.needs_grad = record_ && !p.frozen();
    Var v = push(std::move(node));
    param_nodes_.emplace(&p, v.id);
    param_order_.push_back(&p);
    return v;
  }

  // Parameters registered with this graph, in first-use order.
  const std::vector<Parameter*>& parameters() const noexcept { return param_order_; }

  const Tensor& value(int id) const {
    const Node& n = nodes_.at(static_cast<std::size_t>(id));
    return n.external != nullptr ? *n.external : n.value;
  }

  bool needs_grad(int id) const { return nodes_.at(static_cast<std::size_t>(id)).needs_grad; }

  std::span<const int> parents(int id) const { return nodes_.at(static_cast<std::size_t>(id)).parents; }

  // Gradient buffer of a node, allocated (zeroed) on first access. A
  // parameter node accumulates straight into the parameter's gradient.
  Buffer& grad(int id) {
    Node& n = nodes_.at(static_cast<std::size_t>(id));
    if (n.param != nullptr) {
      return n.param->grad().buffer();
    }
    if (n.grad.empty()) {
      n.grad.assign(value(id).size(), 0.0);
    }
    return n.grad;
  }

  // Appends an op result. `fn` is dropped when no parent needs gradient.
  Var record(Tensor value, std::vector<int> parents, BackwardFn fn) {
    Node node;
    node.value = std::move(value);
    bool any = false;
    for (int p : parents) {
      any = any || needs_grad(p);
    }
    node.needs_grad = record_ && any;
    if (node.needs_grad) {
      node.backward = std::move(fn);
      node.parents = std::move(parents);
    }
    return push(std::move(node));
  }

  // Sets every registered parameter's grad to d(loss)/d(param); parameters
  // the loss does not reach get zero.
  void backward(Var loss) {
    for (Parameter* p : param_order_) {
      if (!p->frozen()) {
        p->zero_grad();
      }
    }
    accumulate_backward(loss, 1.0);
  }

  // Adds scale * d(loss)/d(param) into parameter grads.
  void accumulate_backward(Var loss, double scale = 1.0) {
    if (loss.graph != this) {
      throw ContractError("backward: loss belongs to a different graph");
    }
    if (value(loss.id).size() != 1) {
      throw ContractError("backward: loss must be a scalar, got shape " + to_string(value(loss.id).shape()));
    }
    if (!record_) {
      throw ContractError("backward: graph was built without recording");
    }
    for (Node& n : nodes_) {
      n.grad.clear();
    }
    if (!needs_grad(loss.id)) {
      return;
    }
    grad(loss.id)[0] += scale;
    for (int id = loss.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.needs_grad && n.backward && !n.grad.empty()) {
        n.backward(*this, id);
      }
    }
  }

 private:
  struct Node {
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    std::vector<int> parents;
    Buffer grad;
    BackwardFn backward;
    bool needs_grad = false;
  };

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
  }

  bool record_;
  std::deque<Node> nodes_;
  std::unordered_map<const Parameter*, int> param_nodes_;
  std::vector<Parameter*> param_order_;
};

inline const Tensor& Var::value() const { return graph->value(id); }

}  // namespace persona::diff
