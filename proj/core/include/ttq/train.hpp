#pragma once

// End-to-end training: Adam over the model's parameters, joint intent + slot loss.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "ttq/autodiff.hpp"
#include "ttq/dataset.hpp"
#include "ttq/model.hpp"

namespace ttq::train {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 1;
  /// Training examples used to initialize activation scales and calibrate the integer path.
  std::size_t calibration_examples = 64;
  bool calibrate_activations = true;
  /// Decay the rate linearly to zero over the run (per step); constant otherwise.
  bool linear_decay = true;

  void validate() const;
};

struct CoreGradients {
  std::vector<Tensor> cores;
  std::vector<double> x;
};

/// Gradients of upstream^T (W x) with respect to each core and x, without materializing W.
CoreGradients tt_matvec_vjp(std::span<const Tensor> cores, const tt::TensorShapePlan& plan,
                            std::span<const double> x, std::span<const double> upstream);

/// Reverse pass from a scalar loss; a tape supports one call.
ad::GradientSet backward(ad::Tape& tape, ad::Var loss);

class Adam {
 public:
  Adam(double lr, double beta1, double beta2, double eps);
  explicit Adam(const TrainConfig& c) : Adam(c.lr, c.beta1, c.beta2, c.eps) {}

  /// Parameters without an entry in `grads` are left alone. Scale parameters take the step on
  /// log(scale) and are clamped to at least quant::kMinScale. Throws NumericError on a
  /// non-finite gradient.
  void step(std::span<ad::Param* const> params, const ad::GradientSet& grads);

  void set_lr(double lr) noexcept { lr_ = lr; }
  double lr() const noexcept { return lr_; }
  std::uint64_t steps() const noexcept { return t_; }

  struct Moments {
    Tensor m;
    Tensor v;
  };
  const Moments* moments(const ad::Param& p) const;

 private:
  double lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
  std::unordered_map<const ad::Param*, Moments> state_;
};

struct Metrics {
  double loss = 0.0;
  double intent_accuracy = 0.0;
  /// Token-level F1 over non-outside slot labels.
  double slot_f1 = 0.0;
  std::size_t examples = 0;
};

/// Joint loss: cross entropy of the intent plus mean cross entropy of the slot labels.
ad::Var example_loss(const model::ForwardTrace& trace, const data::Example& ex);

Metrics evaluate(const model::TransformerModel& model, std::span<const data::Example> examples,
                 model::Mode mode = model::Mode::Train);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  Metrics dev;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  /// Mean batch loss for every optimizer step, in order.
  std::vector<double> step_losses;
  /// Dev metrics of the checkpointable snapshot of the final model.
  Metrics final_dev;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Throws NumericError on divergence after restoring the parameters from the start of the
/// failing epoch.
TrainReport train_end_to_end(model::TransformerModel& model, const data::Dataset& ds, const TrainConfig& config,
                             const EpochCallback& on_epoch = {});

/// Checks vocabulary and label counts against the model.
void check_compatible(const model::TransformerModel& model, const data::Dataset& ds);

std::vector<Tensor> save_params(const model::TransformerModel& model);
void restore_params(model::TransformerModel& model, const std::vector<Tensor>& saved);

}  // namespace ttq::train
