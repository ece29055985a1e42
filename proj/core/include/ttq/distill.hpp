#pragma once

// Layer-by-layer distillation from a dense teacher into a TT/quantized student.
//
// Stage i (0 <= i <= L) minimizes L_i = L_{i-1} + MSE(y_i) + COS(y_i) + CE(attn_i) with
// L_0 = MSE(y_emb) + COS(y_emb); the final stage adds the soft-label term to L_L. COS is
// 1 - mean cosine similarity so that it vanishes for aligned outputs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ttq/autodiff.hpp"
#include "ttq/dataset.hpp"
#include "ttq/model.hpp"
#include "ttq/train.hpp"

namespace ttq::distill {

struct LossWeights {
  double mse = 1.0;
  double cos = 1.0;
  double attn = 1.0;
  double soft = 1.0;
};

struct DistillConfig {
  double temperature = 1.0;
  std::size_t stage_epochs = 2;
  std::size_t final_epochs = 2;
  double stage_lr = 1e-3;
  double final_lr = 5e-5;
  LossWeights weights;
  std::size_t batch_size = 32;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double eps = 1e-8;
  std::uint64_t seed = 1;
  std::size_t calibration_examples = 64;

  void validate() const;
};

struct LossTerms {
  double mse_emb = 0.0;
  double cos_emb = 0.0;
  std::vector<double> mse;      // per encoder
  std::vector<double> cos;      // per encoder
  std::vector<double> ce_attn;  // per encoder, averaged over heads and query rows
  double ce_soft = 0.0;         // on the intent logits

  std::size_t layers() const noexcept { return mse.size(); }
};

/// Values of a teacher trace, detached from its tape.
struct TraceValues {
  Tensor y_emb;
  std::vector<Tensor> y;
  std::vector<std::vector<Tensor>> attn;
  Tensor intent_logits;

  static TraceValues from(const model::ForwardTrace& trace);
};

LossTerms loss_terms(const TraceValues& teacher, const TraceValues& student, double temperature);
LossTerms loss_terms(const model::ForwardTrace& teacher, const model::ForwardTrace& student, double temperature);

/// Stage index i in [0, L] gives L_i; i = L + 1 gives L_all. Unit weights unless given.
double stage_loss(std::size_t stage, const LossTerms& terms, const LossWeights& weights = {});

/// Differentiable stage loss against a detached teacher trace.
ad::Var stage_loss_var(ad::Tape& tape, std::size_t stage, const TraceValues& teacher,
                       const model::ForwardTrace& student, const DistillConfig& config);

std::string stage_name(std::size_t stage, std::size_t layers);

struct StageRecord {
  std::size_t stage = 0;
  std::string name;
  std::size_t epochs = 0;
  double lr = 0.0;
  std::vector<double> epoch_losses;
  /// Mean stage loss on the dev split after the stage.
  double dev_loss = 0.0;
  train::Metrics dev;
};

struct DistillReport {
  std::vector<StageRecord> stages;
  /// Epoch losses of all stages, concatenated.
  std::vector<double> trajectory;
  train::Metrics final_dev;
  train::Metrics final_test;
};

using StageCallback = std::function<void(const StageRecord&)>;

/// Trains the student on L_0, ..., L_L at the stage rate, then L_all at the final rate. The
/// teacher is only read. Throws NumericError naming the stage on divergence, after restoring
/// the student to the start of that stage.
DistillReport run_distillation(const model::TransformerModel& teacher, model::TransformerModel& student,
                               const data::Dataset& ds, const DistillConfig& config,
                               const StageCallback& on_stage = {});

/// L_all for the whole budget, with the same learning-rate schedule as the staged run.
DistillReport run_all_at_once(const model::TransformerModel& teacher, model::TransformerModel& student,
                              const data::Dataset& ds, const DistillConfig& config,
                              const StageCallback& on_stage = {});

struct ScheduleComparison {
  DistillReport layer_by_layer;
  DistillReport all_at_once;
};

ScheduleComparison compare_schedules(const model::TransformerModel& teacher,
                                     const std::function<model::TransformerModel()>& student_factory,
                                     const data::Dataset& ds, const DistillConfig& config);

void check_congruent(const model::TransformerModel& teacher, const model::TransformerModel& student);

}  // namespace ttq::distill
