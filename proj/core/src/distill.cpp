#include "ttq/distill.hpp"

#include <cmath>
#include <numeric>
#include <random>

#include "ttq/errors.hpp"
#include "ttq/ops.hpp"

namespace ttq::distill {

void DistillConfig::validate() const {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) throw ConfigError("temperature must be positive");
  if (!(stage_lr > 0.0) || !(final_lr > 0.0)) throw ConfigError("distillation learning rates must be positive");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in (0, 1)");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  for (double w : {weights.mse, weights.cos, weights.attn, weights.soft})
    if (!(w >= 0.0)) throw ConfigError("loss weights must be >= 0");
}

TraceValues TraceValues::from(const model::ForwardTrace& t) {
  TraceValues v;
  v.y_emb = t.y_emb.value();
  for (const auto& y : t.y) v.y.push_back(y.value());
  for (const auto& layer : t.attn) {
    v.attn.emplace_back();
    for (const auto& p : layer) v.attn.back().push_back(p.value());
  }
  v.intent_logits = t.intent_logits.value();
  return v;
}

namespace {

struct TermVars {
  ad::Var mse_emb, cos_emb;
  std::vector<ad::Var> mse, cos, ce_attn;
  ad::Var ce_soft;
};

/// Builds the terms needed for `stage` (all terms when stage > L).
TermVars build_terms(ad::Tape& tape, const TraceValues& t, ad::Var s_emb, const std::vector<ad::Var>& s_y,
                     const std::vector<std::vector<ad::Var>>& s_scores, ad::Var s_intent, double temperature,
                     std::size_t stage) {
  const std::size_t layers = t.y.size();
  if (s_y.size() != layers || s_scores.size() != layers)
    throw StructuralError("teacher and student traces have different depths");
  TermVars v;
  ad::Var te = tape.constant(t.y_emb);
  v.mse_emb = ad::mse(s_emb, te);
  v.cos_emb = ad::cosine_distance(s_emb, te);
  for (std::size_t i = 0; i < layers && i < stage; ++i) {
    ad::Var ty = tape.constant(t.y[i]);
    v.mse.push_back(ad::mse(s_y[i], ty));
    v.cos.push_back(ad::cosine_distance(s_y[i], ty));
    if (s_scores[i].size() != t.attn[i].size()) throw StructuralError("teacher and student head counts differ");
    std::vector<ad::Var> heads;
    for (std::size_t h = 0; h < t.attn[i].size(); ++h)
      heads.push_back(ad::distribution_cross_entropy(tape.constant(t.attn[i][h]), s_scores[i][h]));
    v.ce_attn.push_back(ad::scale(ad::sum(heads), 1.0 / static_cast<double>(heads.size())));
  }
  if (stage > layers) v.ce_soft = ad::soft_cross_entropy(tape.constant(t.intent_logits), s_intent, temperature);
  return v;
}

ad::Var combine(const TermVars& v, std::size_t stage, std::size_t layers, const LossWeights& w) {
  std::vector<ad::Var> parts{ad::scale(v.mse_emb, w.mse), ad::scale(v.cos_emb, w.cos)};
  for (std::size_t i = 0; i < layers && i < stage; ++i) {
    parts.push_back(ad::scale(v.mse[i], w.mse));
    parts.push_back(ad::scale(v.cos[i], w.cos));
    parts.push_back(ad::scale(v.ce_attn[i], w.attn));
  }
  if (stage > layers) parts.push_back(ad::scale(v.ce_soft, w.soft));
  return ad::sum(parts);
}

LossTerms extract(const TermVars& v) {
  LossTerms out;
  out.mse_emb = v.mse_emb.value()[0];
  out.cos_emb = v.cos_emb.value()[0];
  for (std::size_t i = 0; i < v.mse.size(); ++i) {
    out.mse.push_back(v.mse[i].value()[0]);
    out.cos.push_back(v.cos[i].value()[0]);
    out.ce_attn.push_back(v.ce_attn[i].value()[0]);
  }
  out.ce_soft = v.ce_soft.value()[0];
  return out;
}

}  // namespace

LossTerms loss_terms(const TraceValues& teacher, const TraceValues& student, double temperature) {
  if (teacher.y.size() != student.y.size()) throw StructuralError("teacher and student traces have different depths");
  ad::Tape tape(false);
  // Student attention enters as scores; log of the probabilities gives the same log-softmax.
  std::vector<ad::Var> s_y;
  std::vector<std::vector<ad::Var>> s_scores;
  for (std::size_t i = 0; i < student.y.size(); ++i) {
    s_y.push_back(tape.constant(student.y[i]));
    s_scores.emplace_back();
    for (const auto& p : student.attn[i]) {
      Tensor logp = p;
      for (double& x : logp.data) x = std::log(x);
      s_scores.back().push_back(tape.constant(std::move(logp)));
    }
  }
  const auto v = build_terms(tape, teacher, tape.constant(student.y_emb), s_y, s_scores,
                             tape.constant(student.intent_logits), temperature, teacher.y.size() + 1);
  return extract(v);
}

LossTerms loss_terms(const model::ForwardTrace& teacher, const model::ForwardTrace& student, double temperature) {
  // Scores rather than probabilities keep the student attention CE exact when rows have zeros.
  const TraceValues t = TraceValues::from(teacher);
  ad::Tape tape(false);
  std::vector<ad::Var> s_y;
  std::vector<std::vector<ad::Var>> s_scores;
  for (std::size_t i = 0; i < student.y.size(); ++i) {
    s_y.push_back(tape.constant(student.y[i].value()));
    s_scores.emplace_back();
    for (const auto& s : student.attn_scores[i]) s_scores.back().push_back(tape.constant(s.value()));
  }
  if (t.y.size() != s_y.size()) throw StructuralError("teacher and student traces have different depths");
  const auto v = build_terms(tape, t, tape.constant(student.y_emb.value()), s_y, s_scores,
                             tape.constant(student.intent_logits.value()), temperature, t.y.size() + 1);
  return extract(v);
}

double stage_loss(std::size_t stage, const LossTerms& t, const LossWeights& w) {
  const std::size_t layers = t.layers();
  if (stage > layers + 1)
    throw ParameterError("stage " + std::to_string(stage) + " out of range for " + std::to_string(layers) + " layers");
  double loss = w.mse * t.mse_emb + w.cos * t.cos_emb;
  for (std::size_t i = 0; i < stage && i < layers; ++i) loss += w.mse * t.mse[i] + w.cos * t.cos[i] + w.attn * t.ce_attn[i];
  if (stage == layers + 1) loss += w.soft * t.ce_soft;
  return loss;
}

ad::Var stage_loss_var(ad::Tape& tape, std::size_t stage, const TraceValues& teacher,
                       const model::ForwardTrace& student, const DistillConfig& config) {
  const std::size_t layers = teacher.y.size();
  if (stage > layers + 1) throw ParameterError("stage " + std::to_string(stage) + " out of range");
  const auto v = build_terms(tape, teacher, student.y_emb, student.y, student.attn_scores, student.intent_logits,
                             config.temperature, stage);
  return combine(v, stage, layers, config.weights);
}

std::string stage_name(std::size_t stage, std::size_t layers) {
  return stage > layers ? "L_all" : "L_" + std::to_string(stage);
}

void check_congruent(const model::TransformerModel& teacher, const model::TransformerModel& student) {
  const auto& a = teacher.config();
  const auto& b = student.config();
  if (a.layers != b.layers || a.hidden != b.hidden || a.heads != b.heads || a.num_intents != b.num_intents ||
      a.num_slots != b.num_slots || a.vocab_size != b.vocab_size || a.max_seq_len < b.max_seq_len) {
    throw ConfigError("teacher and student architectures are not congruent");
  }
}

namespace {

struct Phase {
  std::size_t stage;
  std::size_t epochs;
  double lr;
};

double dev_stage_loss(const model::TransformerModel& student, const std::vector<TraceValues>& teacher_dev,
                      const data::Dataset& ds, std::size_t stage, const DistillConfig& config) {
  if (ds.dev.empty()) return 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < ds.dev.size(); ++i) {
    ad::Tape tape(false);
    const auto trace = student.forward(tape, ds.dev[i].tokens, model::Mode::Train);
    total += stage_loss_var(tape, stage, teacher_dev[i], trace, config).value()[0];
  }
  return total / static_cast<double>(ds.dev.size());
}

DistillReport run_phases(const model::TransformerModel& teacher, model::TransformerModel& student,
                         const data::Dataset& ds, const DistillConfig& config, const std::vector<Phase>& phases,
                         const StageCallback& on_stage) {
  config.validate();
  check_congruent(teacher, student);
  train::check_compatible(student, ds);
  if (ds.train.empty()) throw DataError("training split is empty");

  auto teacher_traces = [&](const std::vector<data::Example>& split) {
    std::vector<TraceValues> out;
    out.reserve(split.size());
    for (const auto& ex : split) {
      ad::Tape tape(false);
      out.push_back(TraceValues::from(teacher.forward(tape, ex.tokens, model::Mode::InferFp)));
    }
    return out;
  };
  const auto teacher_train = teacher_traces(ds.train);
  const auto teacher_dev = teacher_traces(ds.dev);

  const auto calibration = data::token_sequences(ds.train, config.calibration_examples);
  const bool quantized = student.has_quantized_layers();
  if (quantized) model::init_activation_scales(student, calibration);

  const std::size_t layers = student.config().layers;
  auto params = student.params();
  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);

  DistillReport report;
  for (const auto& phase : phases) {
    StageRecord rec;
    rec.stage = phase.stage;
    rec.name = stage_name(phase.stage, layers);
    rec.epochs = phase.epochs;
    rec.lr = phase.lr;
    const auto stage_start = train::save_params(student);
    train::Adam adam(phase.lr, config.beta1, config.beta2, config.eps);
    for (std::size_t epoch = 0; epoch < phase.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0.0;
      for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
        const std::size_t end = std::min(order.size(), start + config.batch_size);
        ad::GradientSet batch;
        double batch_loss = 0.0;
        for (std::size_t i = start; i < end; ++i) {
          ad::Tape tape;
          const auto trace = student.forward(tape, ds.train[order[i]].tokens, model::Mode::Train);
          ad::Var loss = stage_loss_var(tape, phase.stage, teacher_train[order[i]], trace, config);
          batch_loss += loss.value()[0];
          batch.accumulate(tape.backward(loss));
        }
        const double n = static_cast<double>(end - start);
        if (!std::isfinite(batch_loss)) {
          train::restore_params(student, stage_start);
          throw NumericError("distillation diverged in stage " + rec.name + "; student restored to the stage start");
        }
        batch.scale(1.0 / n);
        try {
          adam.step(params, batch);
        } catch (const NumericError& e) {
          train::restore_params(student, stage_start);
          throw NumericError(std::string(e.what()) + " in stage " + rec.name + "; student restored to the stage start");
        }
        epoch_loss += batch_loss;
      }
      rec.epoch_losses.push_back(epoch_loss / static_cast<double>(order.size()));
      report.trajectory.push_back(rec.epoch_losses.back());
    }
    if (quantized) model::calibrate_int_stages(student, calibration);
    const auto frozen = model::snapshot(student);
    rec.dev_loss = dev_stage_loss(frozen, teacher_dev, ds, phase.stage, config);
    rec.dev = train::evaluate(frozen, ds.dev);
    report.stages.push_back(rec);
    if (on_stage) on_stage(rec);
  }
  if (quantized && phases.empty()) model::calibrate_int_stages(student, calibration);
  const auto frozen = model::snapshot(student);
  report.final_dev = train::evaluate(frozen, ds.dev);
  report.final_test = train::evaluate(frozen, ds.test);
  return report;
}

}  // namespace

DistillReport run_distillation(const model::TransformerModel& teacher, model::TransformerModel& student,
                               const data::Dataset& ds, const DistillConfig& config, const StageCallback& on_stage) {
  const std::size_t layers = student.config().layers;
  std::vector<Phase> phases;
  for (std::size_t i = 0; i <= layers; ++i) phases.push_back({i, config.stage_epochs, config.stage_lr});
  phases.push_back({layers + 1, config.final_epochs, config.final_lr});
  return run_phases(teacher, student, ds, config, phases, on_stage);
}

DistillReport run_all_at_once(const model::TransformerModel& teacher, model::TransformerModel& student,
                              const data::Dataset& ds, const DistillConfig& config, const StageCallback& on_stage) {
  const std::size_t layers = student.config().layers;
  std::vector<Phase> phases;
  for (std::size_t i = 0; i <= layers; ++i) phases.push_back({layers + 1, config.stage_epochs, config.stage_lr});
  phases.push_back({layers + 1, config.final_epochs, config.final_lr});
  return run_phases(teacher, student, ds, config, phases, on_stage);
}

ScheduleComparison compare_schedules(const model::TransformerModel& teacher,
                                     const std::function<model::TransformerModel()>& student_factory,
                                     const data::Dataset& ds, const DistillConfig& config) {
  ScheduleComparison out;
  auto a = student_factory();
  out.layer_by_layer = run_distillation(teacher, a, ds, config);
  auto b = student_factory();
  out.all_at_once = run_all_at_once(teacher, b, ds, config);
  return out;
}

}  // namespace ttq::distill
