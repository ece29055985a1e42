#include "ttq/autodiff.hpp"

#include <algorithm>

#include "ttq/errors.hpp"

namespace ttq::ad {

Tensor& GradientSet::at(const Param& p) {
  auto it = grads_.find(&p);
  if (it == grads_.end()) it = grads_.emplace(&p, Tensor(p.value.shape, 0.0)).first;
  return it->second;
}

const Tensor* GradientSet::find(const Param& p) const {
  auto it = grads_.find(&p);
  return it == grads_.end() ? nullptr : &it->second;
}

void GradientSet::accumulate(const GradientSet& other, double scale) {
  for (const auto& [param, grad] : other.grads_) {
    auto it = grads_.find(param);
    if (it == grads_.end()) it = grads_.emplace(param, Tensor(grad.shape, 0.0)).first;
    auto& dst = it->second.data;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * grad.data[i];
  }
}

void GradientSet::scale(double s) {
  for (auto& [param, grad] : grads_)
    for (double& g : grad.data) g *= s;
}

const Tensor& Var::value() const {
  if (!tape_) throw UsageError("value() on an empty Var");
  return tape_->value(*this);
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  return push(std::move(n));
}

Var Tape::param(const Param& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Node n;
  n.value = p.value;
  n.param = &p;
  n.needs_grad = record_;
  Var v = push(std::move(n));
  param_nodes_.emplace(&p, v.id());
  return v;
}

Var Tape::record(Tensor value, std::span<const Var> inputs, Backward backward) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (const auto& in : inputs) {
      if (in.tape() != this) throw UsageError("op inputs belong to a different tape");
      if (nodes_[in.id()].needs_grad) n.needs_grad = true;
    }
    if (n.needs_grad) n.backward = std::move(backward);
  }
  return push(std::move(n));
}

Tensor& Tape::grad_buffer(Var v) {
  Node& n = nodes_[v.id()];
  if (n.grad.data.size() != n.value.data.size()) n.grad = Tensor(n.value.shape, 0.0);
  return n.grad;
}

void Tape::accumulate(Var v, std::span<const double> grad) {
  Node& n = nodes_[v.id()];
  if (!n.needs_grad) return;
  if (grad.size() != n.value.data.size()) throw StructuralError("gradient size does not match value size");
  Tensor& g = grad_buffer(v);
  for (std::size_t i = 0; i < grad.size(); ++i) g.data[i] += grad[i];
}

GradientSet Tape::backward(Var loss) {
  if (!record_) throw UsageError("backward() on a tape created without recording");
  if (consumed_) throw UsageError("backward() called twice on the same tape");
  if (loss.tape() != this) throw UsageError("loss belongs to a different tape");
  if (value(loss).size() != 1) throw UsageError("backward() needs a scalar loss");
  consumed_ = true;

  GradientSet grads;
  grad_buffer(loss).data[0] = 1.0;
  for (std::size_t id = loss.id() + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.needs_grad || n.grad.data.empty()) continue;
    if (n.param) {
      auto& dst = grads.at(*n.param).data;
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += n.grad.data[i];
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
  return grads;
}

}  // namespace ttq::ad
