#include "ttq/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "ttq/errors.hpp"
#include "ttq/ops.hpp"
#include "ttq/quant.hpp"

namespace ttq::train {

void TrainConfig::validate() const {
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
  if (!(eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
}

CoreGradients tt_matvec_vjp(std::span<const Tensor> cores, const tt::TensorShapePlan& plan,
                            std::span<const double> x, std::span<const double> upstream) {
  tt::check_cores(cores, plan);
  if (x.size() != plan.cols) throw InputError("tt_matvec_vjp: x length differs from plan columns");
  if (upstream.size() != plan.rows) throw InputError("tt_matvec_vjp: upstream length differs from plan rows");
  const auto ptrs = tt::core_pointers(cores);
  const auto fwd = tt::tt_contract(plan, ptrs, x, 1);
  CoreGradients g;
  std::vector<double*> gptrs;
  for (const auto& c : cores) g.cores.emplace_back(c.shape, 0.0);
  for (auto& c : g.cores) gptrs.push_back(c.data.data());
  g.x.assign(x.size(), 0.0);
  tt::tt_contract_vjp(plan, ptrs, fwd, upstream, gptrs, g.x);
  return g;
}

ad::GradientSet backward(ad::Tape& tape, ad::Var loss) { return tape.backward(loss); }

Adam::Adam(double lr, double beta1, double beta2, double eps) : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

const Adam::Moments* Adam::moments(const ad::Param& p) const {
  auto it = state_.find(&p);
  return it == state_.end() ? nullptr : &it->second;
}

void Adam::step(std::span<ad::Param* const> params, const ad::GradientSet& grads) {
  for (const ad::Param* p : params) {
    if (const Tensor* g = grads.find(*p)) {
      for (double v : g->data)
        if (!std::isfinite(v)) throw NumericError("non-finite gradient for parameter " + p->name);
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (ad::Param* p : params) {
    const Tensor* g = grads.find(*p);
    if (!g) continue;
    auto [it, fresh] = state_.try_emplace(p);
    if (fresh) it->second = {Tensor(p->value.shape, 0.0), Tensor(p->value.shape, 0.0)};
    auto& m = it->second.m.data;
    auto& v = it->second.v.data;
    auto& w = p->value.data;
    // Scales step in log space: an additive step of size lr would wipe out an 8-bit delta
    // (typically ~1e-3) in one update.
    const bool log_space = p->kind == ad::ParamKind::Scale;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = log_space ? g->data[i] * w[i] : g->data[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * gi;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * gi * gi;
      const double step = lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      if (log_space) {
        w[i] = std::max(w[i] * std::exp(-step), quant::kMinScale);
      } else {
        w[i] -= step;
      }
    }
  }
}

ad::Var example_loss(const model::ForwardTrace& trace, const data::Example& ex) {
  const std::size_t intent[1] = {ex.intent};
  ad::Var terms[2] = {ad::cross_entropy(trace.intent_logits, intent), ad::cross_entropy(trace.slot_logits, ex.slots)};
  return ad::sum(terms);
}

Metrics evaluate(const model::TransformerModel& model, std::span<const data::Example> examples, model::Mode mode) {
  Metrics m;
  m.examples = examples.size();
  if (examples.empty()) return m;
  std::size_t correct = 0, tp = 0, fp = 0, fn = 0;
  double loss = 0.0;
  for (const auto& ex : examples) {
    ad::Tape tape(false);
    const auto trace = model.forward(tape, ex.tokens, mode);
    loss += example_loss(trace, ex).value()[0];
    const Tensor& il = trace.intent_logits.value();
    const auto pred = static_cast<std::size_t>(std::max_element(il.data.begin(), il.data.end()) - il.data.begin());
    if (pred == ex.intent) ++correct;
    const Tensor& sl = trace.slot_logits.value();
    const std::size_t c = sl.cols();
    for (std::size_t r = 0; r < ex.slots.size(); ++r) {
      const auto row = sl.data.begin() + r * c;
      const auto p = static_cast<std::size_t>(std::max_element(row, row + c) - row);
      const std::size_t gold = ex.slots[r];
      if (p == gold) {
        if (gold != 0) ++tp;
      } else {
        if (p != 0) ++fp;
        if (gold != 0) ++fn;
      }
    }
  }
  const double n = static_cast<double>(examples.size());
  m.loss = loss / n;
  m.intent_accuracy = static_cast<double>(correct) / n;
  const std::size_t denom = 2 * tp + fp + fn;
  m.slot_f1 = denom == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  return m;
}

void check_compatible(const model::TransformerModel& model, const data::Dataset& ds) {
  const auto& c = model.config();
  if (ds.vocab_size > c.vocab_size)
    throw ConfigError("dataset vocabulary (" + std::to_string(ds.vocab_size) + ") exceeds model vocab_size (" +
                      std::to_string(c.vocab_size) + ")");
  if (ds.num_intents != c.num_intents) throw ConfigError("dataset and model disagree on num_intents");
  if (ds.num_slots != c.num_slots) throw ConfigError("dataset and model disagree on num_slots");
  for (const auto* split : {&ds.train, &ds.dev, &ds.test}) {
    for (const auto& ex : *split) {
      if (ex.tokens.size() > c.max_seq_len)
        throw DataError("example with " + std::to_string(ex.tokens.size()) + " tokens exceeds max_seq_len");
    }
  }
}

std::vector<Tensor> save_params(const model::TransformerModel& model) {
  std::vector<Tensor> out;
  for (const ad::Param* p : model.params()) out.push_back(p->value);
  return out;
}

void restore_params(model::TransformerModel& model, const std::vector<Tensor>& saved) {
  auto params = model.params();
  if (params.size() != saved.size()) throw StructuralError("restore_params: parameter count changed");
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = saved[i];
}

TrainReport train_end_to_end(model::TransformerModel& model, const data::Dataset& ds, const TrainConfig& config,
                             const EpochCallback& on_epoch) {
  config.validate();
  if (ds.train.empty()) throw DataError("training split is empty");
  check_compatible(model, ds);

  const auto calibration = data::token_sequences(ds.train, config.calibration_examples);
  const bool quantized = model.has_quantized_layers();
  if (quantized && config.calibrate_activations) model::init_activation_scales(model, calibration);

  auto params = model.params();
  Adam adam(config);
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  TrainReport report;
  const std::size_t steps_per_epoch = (order.size() + config.batch_size - 1) / config.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch * config.epochs);

  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto last_good = save_params(model);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      ad::GradientSet batch;
      double batch_loss = 0.0;
      for (std::size_t i = start; i < end; ++i) {
        const auto& ex = ds.train[order[i]];
        ad::Tape tape;
        const auto trace = model.forward(tape, ex.tokens, model::Mode::Train);
        ad::Var loss = example_loss(trace, ex);
        batch_loss += loss.value()[0];
        batch.accumulate(tape.backward(loss));
      }
      const double n = static_cast<double>(end - start);
      batch_loss /= n;
      if (!std::isfinite(batch_loss)) {
        restore_params(model, last_good);
        throw NumericError("training diverged at epoch " + std::to_string(epoch) + " (loss " +
                           std::to_string(batch_loss) + "); parameters restored to the start of the epoch");
      }
      batch.scale(1.0 / n);
      if (config.linear_decay)
        adam.set_lr(config.lr * (1.0 - static_cast<double>(adam.steps()) / total_steps));
      try {
        adam.step(params, batch);
      } catch (const NumericError& e) {
        restore_params(model, last_good);
        throw NumericError(std::string(e.what()) + " at epoch " + std::to_string(epoch) +
                           "; parameters restored to the start of the epoch");
      }
      report.step_losses.push_back(batch_loss);
      epoch_loss += batch_loss * n;
    }
    if (quantized) model::calibrate_int_stages(model, calibration);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(order.size());
    rec.dev = evaluate(model::snapshot(model), ds.dev);
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  if (quantized && config.epochs == 0) model::calibrate_int_stages(model, calibration);
  report.final_dev = evaluate(model::snapshot(model), ds.dev);
  return report;
}

}  // namespace ttq::train
