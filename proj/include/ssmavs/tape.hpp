#pragma once

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <unordered_map>
#include <vector>

#include "ssmavs/tensor.hpp"

namespace ssmavs {

// Learnable weight: value plus a same-shaped gradient accumulator that
// backward passes add into and the optimizer zeroes between steps.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  void zero_grad() { grad = Tensor::zeros(value.shape(), value.dtype()); }
};

// Owns parameters keyed by dotted path (e.g. "mte.layer0.vss.ssm.A_log").
// Iteration order is the sorted name order, which fixes checkpoint manifest
// order and optimizer update order.
class ParamStore {
 public:
  Parameter& add(const std::string& name, Tensor init);
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;
  bool contains(const std::string& name) const;
  void zero_grad();
  i64 size() const { return static_cast<i64>(params_.size()); }
  i64 total_elements() const;

  template <typename F>
  void for_each(F&& fn) {
    for (auto& [name, p] : params_) fn(*p);
  }
  template <typename F>
  void for_each(F&& fn) const {
    for (const auto& [name, p] : params_) fn(*p);
  }

 private:
  std::map<std::string, std::unique_ptr<Parameter>> params_;
};

class Tape;

// Handle to a tape node.
struct Var {
  i64 idx = -1;
  bool defined() const { return idx >= 0; }
};

// Reads the output gradient of its node from the tape and accumulates
// contributions into the node's parents.
using BackwardFn = std::function<void(Tape&, i64)>;

// Reverse-mode tape at tensor granularity. Nodes are appended in execution
// order, so indices are already topologically sorted and backward is a
// single reverse sweep. All intermediates stay materialized until the tape
// is destroyed.
class Tape {
 public:
  explicit Tape(Dtype dt) : dtype_(dt) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Dtype dtype() const { return dtype_; }

  // Leaf that blocks gradient flow (data, masks, targets).
  Var constant(Tensor v);
  // Leaf whose gradient is kept readable after backward.
  Var input(Tensor v);
  // Leaf bound to a parameter; repeated binding returns the same node, and
  // backward() adds the node gradient into p.grad.
  Var param(Parameter& p);

  Var emit(Tensor value, std::vector<i64> parents, BackwardFn fn);

  // The reference stays valid for the tape's lifetime; emitting more nodes
  // never moves existing values.
  const Tensor& val(Var v) const;
  i64 size() const { return static_cast<i64>(nodes_.size()); }

  // Runs reverse accumulation from a scalar loss, seeding with `scale`
  // (batch averaging hooks in here). Node gradients are recomputed from
  // scratch on every call while parameter gradients accumulate across
  // calls, so two backward passes without zero_grad yield exactly 2x.
  void backward(Var loss, double scale = 1.0);

  bool has_grad(i64 idx) const;
  const Tensor& grad_of(i64 idx) const;
  // Gradient of a leaf created with input(); zeros if unreached.
  Tensor grad(Var v) const;
  void accum_grad(i64 idx, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    std::vector<i64> parents;
    BackwardFn backward;
    Parameter* bound = nullptr;
    bool track = true;
  };

  Dtype dtype_;
  std::deque<Node> nodes_;
  std::vector<Tensor> grads_;
  std::unordered_map<const Parameter*, i64> param_nodes_;
};

}  // namespace ssmavs
