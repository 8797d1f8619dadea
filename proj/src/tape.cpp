#include "ssmavs/tape.hpp"

namespace ssmavs {

Parameter& ParamStore::add(const std::string& name, Tensor init) {
  check(!name.empty(), "param store: empty parameter name");
  check(!contains(name), "param store: duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = std::move(init);
  p->zero_grad();
  Parameter& ref = *p;
  params_.emplace(name, std::move(p));
  return ref;
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  check(it != params_.end(), "param store: unknown parameter " + name);
  return *it->second;
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  check(it != params_.end(), "param store: unknown parameter " + name);
  return *it->second;
}

bool ParamStore::contains(const std::string& name) const {
  return params_.find(name) != params_.end();
}

void ParamStore::zero_grad() {
  for (auto& [name, p] : params_) p->zero_grad();
}

i64 ParamStore::total_elements() const {
  i64 n = 0;
  for (const auto& [name, p] : params_) n += p->value.numel();
  return n;
}

Var Tape::constant(Tensor v) {
  check(v.dtype() == dtype_, "tape: constant dtype mismatch");
  Node n;
  n.value = std::move(v);
  n.track = false;
  nodes_.push_back(std::move(n));
  return Var{static_cast<i64>(nodes_.size()) - 1};
}

Var Tape::input(Tensor v) {
  check(v.dtype() == dtype_, "tape: input dtype mismatch");
  Node n;
  n.value = std::move(v);
  nodes_.push_back(std::move(n));
  return Var{static_cast<i64>(nodes_.size()) - 1};
}

Var Tape::param(Parameter& p) {
  auto it = param_nodes_.find(&p);
  if (it != param_nodes_.end()) return Var{it->second};
  check(p.value.dtype() == dtype_,
        "tape: parameter " + p.name + " is " + dtype_name(p.value.dtype()) +
            " but tape is " + dtype_name(dtype_));
  Node n;
  n.value = p.value;
  n.bound = &p;
  nodes_.push_back(std::move(n));
  const i64 idx = static_cast<i64>(nodes_.size()) - 1;
  param_nodes_.emplace(&p, idx);
  return Var{idx};
}

Var Tape::emit(Tensor value, std::vector<i64> parents, BackwardFn fn) {
  check(value.dtype() == dtype_, "tape: op output dtype mismatch");
  for (i64 p : parents) {
    check(p >= 0 && p < size(), "tape: parent index out of range");
  }
  Node n;
  n.value = std::move(value);
  n.parents = std::move(parents);
  n.backward = std::move(fn);
  nodes_.push_back(std::move(n));
  return Var{static_cast<i64>(nodes_.size()) - 1};
}

const Tensor& Tape::val(Var v) const {
  check(v.defined() && v.idx < size(), "tape: invalid var");
  return nodes_[v.idx].value;
}

bool Tape::has_grad(i64 idx) const {
  return idx >= 0 && idx < static_cast<i64>(grads_.size()) &&
         grads_[idx].defined();
}

const Tensor& Tape::grad_of(i64 idx) const {
  check(has_grad(idx), "tape: node has no gradient");
  return grads_[idx];
}

Tensor Tape::grad(Var v) const {
  check(v.defined() && v.idx < size(), "tape: invalid var");
  if (has_grad(v.idx)) return grads_[v.idx];
  return Tensor::zeros(nodes_[v.idx].value.shape(), dtype_);
}

void Tape::accum_grad(i64 idx, const Tensor& g) {
  check(idx >= 0 && idx < size(), "tape: gradient index out of range");
  if (!nodes_[idx].track && !nodes_[idx].backward && !nodes_[idx].bound &&
      nodes_[idx].parents.empty()) {
    return;  // constants absorb gradients
  }
  const Node& n = nodes_[idx];
  check(g.shape() == n.value.shape(),
        "tape: gradient shape " + shape_str(g.shape()) +
            " does not match value shape " + shape_str(n.value.shape()));
  if (!grads_[idx].defined()) {
    grads_[idx] = g.clone();
    return;
  }
  dispatch(dtype_, [&](auto tag) {
    using T = decltype(tag);
    T* acc = grads_[idx].mut<T>();
    const T* add = g.data<T>();
    for (i64 i = 0; i < g.numel(); ++i) acc[i] += add[i];
  });
}

void Tape::backward(Var loss, double scale) {
  check(loss.defined() && loss.idx < size(), "tape: invalid loss var");
  check(nodes_[loss.idx].value.numel() == 1,
        "tape: backward requires a scalar loss, got shape " +
            shape_str(nodes_[loss.idx].value.shape()));
  grads_.assign(nodes_.size(), Tensor{});
  grads_[loss.idx] =
      Tensor::full(nodes_[loss.idx].value.shape(), scale, dtype_);
  for (i64 idx = loss.idx; idx >= 0; --idx) {
    if (!grads_[idx].defined()) continue;
    if (nodes_[idx].backward) nodes_[idx].backward(*this, idx);
  }
  for (i64 idx = 0; idx <= loss.idx; ++idx) {
    Parameter* p = nodes_[idx].bound;
    if (p == nullptr || !grads_[idx].defined()) continue;
    Tensor g = grads_[idx].dtype() == p->grad.dtype()
                   ? grads_[idx]
                   : grads_[idx].astype(p->grad.dtype());
    dispatch(p->grad.dtype(), [&](auto tag) {
      using T = decltype(tag);
      T* acc = p->grad.mut<T>();
      const T* add = g.data<T>();
      for (i64 i = 0; i < g.numel(); ++i) acc[i] += add[i];
    });
  }
}

}  // namespace ssmavs
