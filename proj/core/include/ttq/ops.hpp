#pragma once

// Differentiable ops on the tape. Activations are row-major (rows x features) matrices, one
// row per token.

#include <cstddef>
#include <span>

#include "ttq/autodiff.hpp"
#include "ttq/tensor_core.hpp"

namespace ttq::ad {

Var add(Var a, Var b);
/// x (R x C) + bias (C), broadcast over rows.
Var add_bias(Var x, Var bias);
Var scale(Var a, double s);
/// a (R x K) * b (K x C), or a * b^T with b stored (C x K).
Var matmul(Var a, Var b, bool trans_b = false);

/// tanh-approximated GELU.
Var gelu(Var a);
Var softmax_rows(Var a);
Var log_softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t begin, std::size_t count);
Var gather_rows(Var table, std::span<const std::size_t> ids);
/// 1 x C mean over rows.
Var mean_rows(Var a);

/// Fake quantization with a learnable scalar scale and straight-through gradients.
Var fake_quant(Var x, Var scale, int bits);

/// X (R x N) -> X W^T (R x M) through the TT contraction.
Var tt_linear(Var x, std::span<const Var> cores, const tt::TensorShapePlan& plan);
/// Rows of the TTM-format table selected by ids (R x N).
Var ttm_embedding(std::span<const std::size_t> ids, std::span<const Var> cores, const tt::TensorShapePlan& plan);

// Losses (scalar outputs).

/// Mean over rows of -log softmax(logits)[target].
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
Var mse(Var a, Var b);
/// 1 - mean over rows of cos(a_r, b_r).
Var cosine_distance(Var a, Var b);
/// Mean over rows of CE(softmax(target_logits / T), softmax(logits / T)); target_logits is
/// treated as a constant.
Var soft_cross_entropy(Var target_logits, Var logits, double temperature);
/// Mean over rows of -sum_c target_probs * log_softmax(scores); target_probs is a constant.
Var distribution_cross_entropy(Var target_probs, Var scores);

Var sum(std::span<const Var> scalars);

}  // namespace ttq::ad
