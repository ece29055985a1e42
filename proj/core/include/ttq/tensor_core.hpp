#pragma once

// Tensor-train (TT) and tensor-train-matrix (TTM) representations of weight matrices.
//
// Index conventions: a logical row index i of the padded M' x N' matrix is the mixed-radix
// number (i_1, ..., i_d) over row_factors with i_1 most significant; columns likewise.
// TT core k (0-based) has shape (r_k, mode_k, r_{k+1}) where mode_k = m_{k+1} for k < d
// and n_{k-d+1} for k >= d. TTM core k has shape (p_k, m_{k+1}, n_{k+1}, p_{k+1}).

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ttq/tensor.hpp"

namespace ttq::tt {

enum class Format : std::uint8_t { TT = 0, TTM = 1 };

const char* to_string(Format f);

struct TensorShapePlan {
  Format format = Format::TT;
  std::vector<std::size_t> row_factors;
  std::vector<std::size_t> col_factors;
  /// TT: r_0..r_2d, TTM: p_0..p_d.
  std::vector<std::size_t> ranks;
  std::size_t rows = 0;  // logical M
  std::size_t cols = 0;  // logical N

  static TensorShapePlan tt(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_factors,
                            std::vector<std::size_t> col_factors, std::vector<std::size_t> ranks);
  static TensorShapePlan ttm(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_factors,
                             std::vector<std::size_t> col_factors, std::vector<std::size_t> ranks);
  /// (1, r, ..., r, 1) of the right length for the format.
  static std::vector<std::size_t> uniform_ranks(Format format, std::size_t order, std::size_t rank);

  std::size_t order() const noexcept { return row_factors.size(); }
  std::size_t padded_rows() const noexcept;
  std::size_t padded_cols() const noexcept;
  bool is_padded() const noexcept { return padded_rows() != rows || padded_cols() != cols; }

  std::size_t num_cores() const noexcept { return format == Format::TT ? 2 * order() : order(); }
  std::vector<std::size_t> core_shape(std::size_t k) const;
  std::size_t core_size(std::size_t k) const;

  /// N x M plan with the mirrored core chain (factor lists and ranks reversed), so core sizes
  /// and parameter counts match. Reversed cores represent W^T with the digits of each index
  /// in reverse order, not W^T itself.
  TensorShapePlan transposed() const;

  /// Throws StructuralError when the invariants do not hold.
  void validate() const;

  bool operator==(const TensorShapePlan&) const = default;
};

std::string describe(const TensorShapePlan& plan);

/// Near-balanced factors with minimal padding. d = 1 is always allowed; otherwise d must
/// not exceed floor(log2(min(M, N))).
TensorShapePlan plan_factorization(std::size_t rows, std::size_t cols, std::size_t order,
                                   std::size_t rank, Format format);

/// Mixed-radix digits of `index` over `factors`, most significant first.
std::vector<std::size_t> mixed_radix_digits(std::size_t index, std::span<const std::size_t> factors);

/// Checks every core against plan.core_shape(k).
void check_cores(std::span<const Tensor> cores, const TensorShapePlan& plan);

/// Materializes the logical M x N matrix from the slice-product definition.
Tensor tt_to_dense(std::span<const Tensor> cores, const TensorShapePlan& plan);
Tensor ttm_to_dense(std::span<const Tensor> cores, const TensorShapePlan& plan);

// ---------------------------------------------------------------------------------------------
// Factorized matvec. The contraction is a fixed sequence of 2d GEMM stages: column cores are
// swept from core 2d down to d+1 against the input reshaped as (n_1..n_d), then row cores from
// core d down to 1 expand the rank vector into the output modes. Intermediates are
// (rank x remaining-modes) matrices.

enum class StageKind : std::uint8_t { Column, Row };

struct ContractionStage {
  StageKind kind;
  std::size_t core;  // 0-based core index
  // GEMM geometry for a batch of B vectors:
  //   Column: out(P x r_in) = in(P x mode*r_out) * core^T
  //   Row:    out(r_in*mode x Q) = core(r_in*mode x r_out) * in(r_out x Q)
  std::size_t m, n, k;
  std::uint64_t multiplies() const noexcept { return static_cast<std::uint64_t>(m) * n * k; }
};

std::vector<ContractionStage> contraction_stages(const TensorShapePlan& plan, std::size_t batch);

/// Multiplies performed by one (batch = 1) factorized matvec.
std::uint64_t tt_matvec_multiplies(const TensorShapePlan& plan);

struct ContractionCounter {
  std::uint64_t multiplies = 0;
  std::uint64_t adds = 0;
};

/// Intermediates of one batched contraction, kept for the vector-Jacobian product.
struct TTContraction {
  std::size_t batch = 0;
  /// states[0] is the padded input (B x N'); states[s+1] is the output of stage s in the
  /// stage's GEMM layout, except states[d] which is stored transposed (r_d x B) for the row sweep.
  std::vector<std::vector<double>> states;
  /// B x M, cropped to logical rows.
  std::vector<double> output;
};

/// Y(B x M) = X(B x N) W^T, W the TT matrix. Cores are given as raw pointers so callers can
/// contract quantized surrogates without copying.
TTContraction tt_contract(const TensorShapePlan& plan, std::span<const double* const> cores,
                          std::span<const double> x, std::size_t batch,
                          ContractionCounter* counter = nullptr);

/// Given dY (B x M), accumulates dL/dcore into core_grads[k] (same layout as the cores) and
/// writes dL/dX (B x N) into x_grad when non-empty.
void tt_contract_vjp(const TensorShapePlan& plan, std::span<const double* const> cores,
                     const TTContraction& fwd, std::span<const double> y_grad,
                     std::span<double* const> core_grads, std::span<double> x_grad);

/// y = W x for a single vector without materializing W.
std::vector<double> tt_matvec(std::span<const Tensor> cores, const TensorShapePlan& plan,
                              std::span<const double> x, ContractionCounter* counter = nullptr);

std::vector<const double*> core_pointers(std::span<const Tensor> cores);

// ---------------------------------------------------------------------------------------------
// TTM row extraction (embedding lookup).

struct TTMLookup {
  /// states[k] (k = 0..d) is the (n_1..n_k) x p_k partial product for the looked-up row.
  std::vector<std::vector<double>> states;
  std::vector<std::size_t> digits;
};

TTMLookup ttm_lookup(const TensorShapePlan& plan, std::span<const double* const> cores, std::size_t row);
/// Row of the logical matrix, length N.
std::vector<double> ttm_lookup_output(const TensorShapePlan& plan, const TTMLookup& lookup);
void ttm_lookup_vjp(const TensorShapePlan& plan, std::span<const double* const> cores,
                    const TTMLookup& lookup, std::span<const double> row_grad,
                    std::span<double* const> core_grads);

std::vector<double> ttm_row_lookup(std::span<const Tensor> cores, const TensorShapePlan& plan,
                                   std::size_t row);

// ---------------------------------------------------------------------------------------------
// Exact re-representation of a dense matrix (no truncation). Cores left of a pivot are 0/1
// selectors that accumulate the left mode index, cores right of it accumulate the right
// index, and the pivot core carries the matrix entries. Ranks are min(left, right) mode
// products, so reconstruction is exact in floating point.

struct ExactTT {
  TensorShapePlan plan;
  std::vector<Tensor> cores;
};

ExactTT exact_tt_from_dense(const Tensor& dense, std::vector<std::size_t> row_factors,
                            std::vector<std::size_t> col_factors);
ExactTT exact_ttm_from_dense(const Tensor& dense, std::vector<std::size_t> row_factors,
                             std::vector<std::size_t> col_factors);

// ---------------------------------------------------------------------------------------------
// Accounting.

struct CostReport {
  std::uint64_t param_count_compressed = 0;
  std::uint64_t param_count_dense = 0;
  double compression_ratio = 0.0;
  /// Weighted fixed-point-op equivalents per forward pass.
  double flops = 0.0;
  /// Same structure as an uncompressed FP32 matvec, for comparison.
  double dense_flops = 0.0;
  std::uint64_t bytes = 0;
  bool fixed_point = false;
  std::string convention;
};

/// Counting rule: an m-bit x n-bit multiply costs mn/64; adds are weighted like multiplies;
/// FP32 x FP32 ops cost 1.
inline constexpr const char* kFlopsConvention =
    "mul and add each weighted (weight_bits*activation_bits)/64 when any operand is fixed-point, "
    "1.0 for fp32 x fp32; accumulator width ignored";

CostReport param_count(const TensorShapePlan& plan);

/// bits in {2, 4, 8, 32}. `dense` counts a plain M x N matvec instead of the factorized one.
CostReport flops_estimate(const TensorShapePlan& plan, int weight_bits, int activation_bits,
                          std::size_t seq_len, bool dense);

double op_weight(int weight_bits, int activation_bits);

}  // namespace ttq::tt
