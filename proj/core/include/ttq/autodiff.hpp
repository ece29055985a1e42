#pragma once

// Minimal reverse-mode automatic differentiation over FP64 tensors.
//
// A Tape records the values produced during one forward pass together with closures that
// propagate output gradients to their inputs. Parameters live outside the tape; backward()
// returns their gradients as a GradientSet keyed by parameter address. A tape supports
// exactly one backward pass.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ttq/tensor.hpp"

namespace ttq::ad {

enum class ParamKind : std::uint8_t {
  Weight = 0,
  /// Quantization scale; kept >= quant::kMinScale by the optimizer.
  Scale = 1,
};

struct Param {
  std::string name;
  Tensor value;
  ParamKind kind = ParamKind::Weight;
};

class GradientSet {
 public:
  /// Gradient buffer for p, zero-initialized on first access.
  Tensor& at(const Param& p);
  const Tensor* find(const Param& p) const;

  void accumulate(const GradientSet& other, double scale = 1.0);
  void scale(double s);

  std::size_t size() const noexcept { return grads_.size(); }
  bool empty() const noexcept { return grads_.empty(); }

 private:
  std::unordered_map<const Param*, Tensor> grads_;
};

class Tape;

/// Handle to a value recorded on a tape.
class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  std::size_t id() const noexcept { return id_; }
  Tape* tape() const noexcept { return tape_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Tensor& grad_out)>;

  /// With record = false no backward closures are kept (inference).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter. Repeated calls for the same parameter return the same node.
  Var param(const Param& p);

  /// Records an op output. `backward` is kept only when recording and some input needs a
  /// gradient; it must route grad_out to the inputs through accumulate().
  Var record(Tensor value, std::span<const Var> inputs, Backward backward);
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
    return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(backward));
  }

  const Tensor& value(Var v) const { return nodes_[v.id()].value; }
  bool needs_grad(Var v) const { return nodes_[v.id()].needs_grad; }
  bool recording() const noexcept { return record_; }

  /// Adds `grad` into v's gradient buffer; no-op for values that need no gradient.
  void accumulate(Var v, std::span<const double> grad);
  /// Gradient buffer of v, allocated on demand (only valid during backward).
  Tensor& grad_buffer(Var v);

  /// Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse order.
  /// Throws UsageError on a second call or a non-scalar loss.
  GradientSet backward(Var loss);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    Backward backward;
    const Param* param = nullptr;
    bool needs_grad = false;
  };

  Var push(Node node);

  std::deque<Node> nodes_;
  std::unordered_map<const Param*, std::size_t> param_nodes_;
  bool record_;
  bool consumed_ = false;
};

}  // namespace ttq::ad
