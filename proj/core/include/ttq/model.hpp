#pragma once

// Quantization-aware TT/TTM transformer: embedding, post-LN encoder blocks, and two
// classification heads (intent from mean-pooled states, slots per token).
//
// Only TT/TTM layers are quantized. Layer norms, biases, position embeddings, softmax and
// the dense second head layers stay in floating point.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ttq/autodiff.hpp"
#include "ttq/tensor_core.hpp"

namespace ttq::model {

using Rng = std::mt19937_64;

enum class Mode : std::uint8_t {
  /// Fake-quantized surrogate (also used for evaluation).
  Train = 0,
  /// Integer stage kernels with static per-stage requantization.
  InferInt = 1,
  /// Master weights, no quantization.
  InferFp = 2,
};

const char* to_string(Mode m);

/// Called with each linear layer's real-valued input during a forward pass (calibration hook).
class LinearLayer;
using LinearObserver = std::function<void(const LinearLayer&, const Tensor& input)>;

class LinearLayer {
 public:
  static LinearLayer dense(std::string name, std::size_t out_features, std::size_t in_features, Rng& rng);
  /// weight_bits = 32 keeps the layer in full precision; otherwise inputs use activation_bits.
  static LinearLayer tt(std::string name, tt::TensorShapePlan plan, int weight_bits, int activation_bits, Rng& rng);

  std::string name;
  bool compressed = false;
  tt::TensorShapePlan plan;
  std::vector<ad::Param> cores;
  ad::Param weight;  // out x in, dense layers only
  ad::Param bias;
  int weight_bits = 32;
  int activation_bits = 32;
  ad::Param weight_scale;
  ad::Param activation_scale;
  /// Requantization scales after each of the first 2d-1 contraction stages; 0 = uncalibrated.
  std::vector<double> stage_scales;

  std::size_t out_features() const;
  std::size_t in_features() const;
  bool quantized() const noexcept { return compressed && weight_bits < 32; }
  bool int_ready() const;

  /// x is R x in_features; returns R x out_features.
  ad::Var forward(ad::Tape& tape, ad::Var x, Mode mode) const;
  /// Integer path on its own; requires a quantized, calibrated layer.
  Tensor forward_int(const Tensor& x) const;

  /// Weight matrix from the master parameters (no quantization).
  Tensor dense_weight() const;
  /// Quantized core values delta * code (the surrogate the forward pass uses).
  std::vector<Tensor> surrogate_cores() const;
  /// max |state| after each requantized stage for the surrogate contraction of x.
  std::vector<double> stage_maxima(const Tensor& x) const;

  void collect(std::vector<ad::Param*>& out);
  void collect(std::vector<const ad::Param*>& out) const;
};

class Embedding {
 public:
  static Embedding dense(std::string name, std::size_t vocab, std::size_t hidden, double std, Rng& rng);
  static Embedding ttm(std::string name, tt::TensorShapePlan plan, int weight_bits, double std, Rng& rng);

  std::string name;
  bool compressed = false;
  tt::TensorShapePlan plan;
  std::vector<ad::Param> cores;
  ad::Param table;
  int weight_bits = 32;
  ad::Param weight_scale;

  std::size_t vocab_size() const;
  std::size_t hidden() const;
  bool quantized() const noexcept { return compressed && weight_bits < 32; }

  ad::Var forward(ad::Tape& tape, std::span<const std::size_t> ids, Mode mode) const;
  Tensor dense_table() const;
  std::vector<Tensor> surrogate_cores() const;

  void collect(std::vector<ad::Param*>& out);
  void collect(std::vector<const ad::Param*>& out) const;
};

struct LayerNorm {
  std::string name;
  ad::Param gamma;
  ad::Param beta;

  static LayerNorm make(std::string name, std::size_t dim);
  ad::Var forward(ad::Tape& tape, ad::Var x) const;
};

struct ForwardTrace {
  ad::Var y_emb;
  /// Output of each encoder block.
  std::vector<ad::Var> y;
  /// [layer][head] attention probabilities (R x R) and the pre-softmax scores.
  std::vector<std::vector<ad::Var>> attn;
  std::vector<std::vector<ad::Var>> attn_scores;
  ad::Var intent_logits;  // 1 x intents
  ad::Var slot_logits;    // R x slots
};

struct EncoderBlock {
  LinearLayer query, key, value, output;
  LinearLayer ffn_up, ffn_down;
  LayerNorm ln1, ln2;
  std::size_t heads = 1;

  /// Returns the block output; appends per-head probabilities and scores.
  ad::Var forward(ad::Tape& tape, ad::Var x, Mode mode, std::vector<ad::Var>& probs,
                  std::vector<ad::Var>& scores, const LinearObserver* observer) const;

  std::vector<LinearLayer*> linears();
  std::vector<const LinearLayer*> linears() const;
};

struct Head {
  LinearLayer fc1;
  LinearLayer fc2;
  ad::Var forward(ad::Tape& tape, ad::Var x, Mode mode, const LinearObserver* observer) const;
};

/// Compression settings for one group of layers.
struct LayerGroup {
  bool compressed = true;
  /// Explicit factors; planned automatically (with `order`) when empty.
  std::vector<std::size_t> row_factors;
  std::vector<std::size_t> col_factors;
  std::size_t rank = 4;
  /// Explicit full rank tuple; overrides `rank` when non-empty.
  std::vector<std::size_t> ranks;
  std::size_t order = 2;

  bool operator==(const LayerGroup&) const = default;
};

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t hidden = 32;
  std::size_t layers = 2;
  std::size_t heads = 2;
  std::size_t ffn = 64;
  std::size_t max_seq_len = 16;
  std::size_t num_intents = 4;
  std::size_t num_slots = 4;
  LayerGroup embedding;
  LayerGroup attention;
  /// Factors describe the down projection (hidden x ffn); the up projection uses the
  /// transposed plan.
  LayerGroup feed_forward;
  /// First layer of each classification head (always full precision).
  LayerGroup head;
  int weight_bits = 32;
  /// Used by quantized layers only.
  int activation_bits = 8;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;

  tt::TensorShapePlan embedding_plan() const;
  tt::TensorShapePlan attention_plan() const;
  tt::TensorShapePlan ffn_down_plan() const;
  tt::TensorShapePlan ffn_up_plan() const;
  tt::TensorShapePlan head_plan() const;
};

/// Same architecture with every group uncompressed and full precision.
ModelConfig dense_variant(ModelConfig config);

/// ATIS-sized model: TTM embedding (800 x 768), TT attention/FFN/head at rank 10.
ModelConfig atis_config(int weight_bits);
/// BERT-base shapes with all groups at one rank.
ModelConfig bert_config(std::size_t rank, int weight_bits);

class TransformerModel {
 public:
  TransformerModel() = default;
  explicit TransformerModel(const ModelConfig& config);

  const ModelConfig& config() const noexcept { return config_; }

  ForwardTrace forward(ad::Tape& tape, std::span<const std::size_t> ids, Mode mode,
                       const LinearObserver* observer = nullptr) const;

  std::vector<ad::Param*> params();
  std::vector<const ad::Param*> params() const;
  std::vector<LinearLayer*> linears();
  std::vector<const LinearLayer*> linears() const;
  bool has_quantized_layers() const;

  Embedding embedding;
  ad::Param position;
  std::vector<EncoderBlock> encoders;
  Head intent_head;
  Head slot_head;

 private:
  ModelConfig config_;
};

struct Prediction {
  std::size_t intent = 0;
  std::vector<std::size_t> slots;
};

Prediction predict(const TransformerModel& model, std::span<const std::size_t> ids, Mode mode = Mode::Train);

/// Activation scales from InferFp input maxima over the given sequences.
void init_activation_scales(TransformerModel& model, std::span<const std::vector<std::size_t>> sequences);
/// Per-stage requantization scales from surrogate (Train-mode) stage maxima.
void calibrate_int_stages(TransformerModel& model, std::span<const std::vector<std::size_t>> sequences);

/// Dense FP model with every TT/TTM layer replaced by its reconstructed matrix.
TransformerModel to_dense(const TransformerModel& model);
/// Full-precision TT model whose layers exactly re-represent the dense model's matrices.
/// Factor shapes come from `layout`; ranks are whatever exactness needs.
TransformerModel exact_tt_copy(const TransformerModel& dense, const ModelConfig& layout);

/// Rounds every stored value to what a checkpoint keeps: quantized cores become delta * code,
/// other floats and scales are rounded to FP32.
TransformerModel snapshot(const TransformerModel& model);
void snapshot_in_place(TransformerModel& model);

// ---------------------------------------------------------------------------------------------
// Accounting (from the configuration, so shapes that are too large to build can be costed).

struct SizeItem {
  std::string name;
  std::uint64_t params = 0;
  std::uint64_t weight_bytes = 0;  // cores or dense matrix
  std::uint64_t bias_bytes = 0;
  std::uint64_t scale_bytes = 0;
  std::uint64_t other_bytes = 0;  // layer norms, position table
  std::uint64_t total() const noexcept { return weight_bytes + bias_bytes + scale_bytes + other_bytes; }
};

struct SizeReport {
  std::vector<SizeItem> items;
  std::uint64_t total_bytes = 0;
  std::uint64_t total_params = 0;
};

SizeReport size_breakdown(const ModelConfig& config);
tt::CostReport model_size_bytes(const ModelConfig& config);
tt::CostReport model_size_bytes(const TransformerModel& model);

/// Encoder linear layers only, per forward pass over seq_len tokens.
tt::CostReport model_flops(const ModelConfig& config, std::size_t seq_len);

}  // namespace ttq::model
