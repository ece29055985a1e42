#pragma once

// Symmetric fixed-point quantization Q(x, delta, b) = delta * round(clip(x / delta, -2^(b-1), 2^(b-1) - 1))
// with straight-through gradients, plus the integer kernels used by the INT8 inference path.
//
// Rounding is half away from zero. b = 32 is the full-precision sentinel: Q is the identity.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace ttq::quant {

inline constexpr int kFullPrecision = 32;
inline constexpr double kMinScale = 1e-8;

/// Throws ParameterError unless bits is one of 2, 4, 8, 32.
void check_bits(int bits);
inline bool is_quantized(int bits) noexcept { return bits < kFullPrecision; }

inline constexpr std::int32_t code_min(int bits) noexcept { return -(std::int32_t{1} << (bits - 1)); }
inline constexpr std::int32_t code_max(int bits) noexcept { return (std::int32_t{1} << (bits - 1)) - 1; }

struct QuantSpec {
  int bits = kFullPrecision;
  double scale = 1.0;
  bool learnable = true;

  void validate() const;
};

struct QuantizedTensor {
  std::vector<std::int8_t> codes;
  double scale = 1.0;
  int bits = 8;
  std::vector<std::size_t> shape;

  std::vector<double> dequantize() const;
};

/// Integer code of a single value.
std::int32_t quantize_code(double x, double scale, int bits);

QuantizedTensor quantize(std::span<const double> x, std::vector<std::size_t> shape, double scale, int bits);
inline QuantizedTensor quantize(std::span<const double> x, double scale, int bits) {
  return quantize(x, {x.size()}, scale, bits);
}

/// delta * codes; identity for the full-precision sentinel.
std::vector<double> fake_quant_forward(std::span<const double> x, double scale, int bits);

/// dQ/dx surrogate: 1 where -2^(b-1) <= x/delta <= 2^(b-1)-1, else 0.
std::vector<double> ste_grad_input(std::span<const double> x, double scale, int bits);

/// dQ/ddelta surrogate: (Q(x)-x)/delta in range, -2^(b-1) below, 2^(b-1)-1 above.
std::vector<double> ste_grad_scale(std::span<const double> x, double scale, int bits);

/// max|x| / (2^(b-1) - 1), or 1 when x is all zeros.
double init_scale(std::span<const double> x, int bits);

/// Largest inner dimension accepted by the INT8 kernels: |a*b| <= 2^14, so 2^15 terms stay
/// well inside an int32 accumulator.
inline constexpr std::size_t kMaxInnerDim = std::size_t{1} << 15;

/// C(m x n) = A(m x k) * op(B), int8 operands, int32 accumulation. op(B) is B (k x n) or
/// B^T with B stored n x k.
void int_gemm(std::size_t m, std::size_t n, std::size_t k, const std::int8_t* a, const std::int8_t* b,
              bool trans_b, std::int32_t* c);
/// C(m x n) = A(m x k) * B(k x n) with A the quantized weight and B the activations.
void int_gemm_left(std::size_t m, std::size_t n, std::size_t k, const std::int8_t* a, const std::int8_t* b,
                   std::int32_t* c);

struct IntMatvecResult {
  std::vector<std::int32_t> accumulator;
  /// Real result = accumulator * combined_scale.
  double combined_scale = 1.0;
};

IntMatvecResult int_matvec(const QuantizedTensor& w, const QuantizedTensor& x);

/// Requantizes real values to INT8 codes with the given scale (saturating).
std::vector<std::int8_t> requantize(std::span<const std::int32_t> acc, double acc_scale, double out_scale);

// Bit packing: element i occupies bits [(i*b) mod 8, ...) of byte floor(i*b/8), least significant
// bits first, two's complement truncated to b bits.
std::size_t packed_size(std::size_t count, int bits);
std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes, int bits);
std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, int bits);

}  // namespace ttq::quant
