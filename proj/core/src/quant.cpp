#include "ttq/quant.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "ttq/errors.hpp"

namespace ttq::quant {

void check_bits(int bits) {
  if (bits != 2 && bits != 4 && bits != 8 && bits != kFullPrecision) {
    throw ParameterError("unsupported bit width " + std::to_string(bits) + " (expected 2, 4, 8 or 32)");
  }
}

void QuantSpec::validate() const {
  check_bits(bits);
  if (!(scale > 0.0) || !std::isfinite(scale)) throw ParameterError("quantization scale must be positive");
}

namespace {

void check_scale(double scale) {
  if (!(scale > 0.0) || !std::isfinite(scale)) {
    throw ParameterError("quantization scale must be positive, got " + std::to_string(scale));
  }
}

void check_finite(std::span<const double> x) {
  for (double v : x)
    if (!std::isfinite(v)) throw InputError("non-finite value passed to the quantizer");
}

}  // namespace

std::int32_t quantize_code(double x, double scale, int bits) {
  const double lo = code_min(bits);
  const double hi = code_max(bits);
  return static_cast<std::int32_t>(std::round(std::clamp(x / scale, lo, hi)));
}

std::vector<double> QuantizedTensor::dequantize() const {
  std::vector<double> out(codes.size());
  for (std::size_t i = 0; i < codes.size(); ++i) out[i] = scale * codes[i];
  return out;
}

QuantizedTensor quantize(std::span<const double> x, std::vector<std::size_t> shape, double scale, int bits) {
  check_bits(bits);
  if (!is_quantized(bits)) throw ParameterError("cannot produce integer codes at full precision");
  check_scale(scale);
  check_finite(x);
  QuantizedTensor q;
  q.scale = scale;
  q.bits = bits;
  q.shape = std::move(shape);
  q.codes.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) q.codes[i] = static_cast<std::int8_t>(quantize_code(x[i], scale, bits));
  return q;
}

std::vector<double> fake_quant_forward(std::span<const double> x, double scale, int bits) {
  check_bits(bits);
  if (!is_quantized(bits)) return {x.begin(), x.end()};
  check_scale(scale);
  check_finite(x);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = scale * quantize_code(x[i], scale, bits);
  return out;
}

std::vector<double> ste_grad_input(std::span<const double> x, double scale, int bits) {
  check_bits(bits);
  if (!is_quantized(bits)) return std::vector<double>(x.size(), 1.0);
  check_scale(scale);
  const double lo = code_min(bits);
  const double hi = code_max(bits);
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = x[i] / scale;
    g[i] = (t >= lo && t <= hi) ? 1.0 : 0.0;
  }
  return g;
}

std::vector<double> ste_grad_scale(std::span<const double> x, double scale, int bits) {
  check_bits(bits);
  if (!is_quantized(bits)) return std::vector<double>(x.size(), 0.0);
  check_scale(scale);
  const double lo = code_min(bits);
  const double hi = code_max(bits);
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double t = x[i] / scale;
    if (t < lo) {
      g[i] = lo;
    } else if (t > hi) {
      g[i] = hi;
    } else {
      g[i] = (scale * std::round(t) - x[i]) / scale;
    }
  }
  return g;
}

double init_scale(std::span<const double> x, int bits) {
  check_bits(bits);
  if (x.empty()) throw InputError("init_scale needs a non-empty tensor");
  double m = 0.0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m == 0.0 || !is_quantized(bits)) return 1.0;
  return m / static_cast<double>(code_max(bits));
}

void int_gemm(std::size_t m, std::size_t n, std::size_t k, const std::int8_t* a, const std::int8_t* b, bool trans_b,
              std::int32_t* c) {
  if (k >= kMaxInnerDim) {
    throw KernelError("int_gemm: inner dimension " + std::to_string(k) + " exceeds the int32 accumulator bound");
  }
  std::fill(c, c + m * n, 0);
  if (trans_b) {
    for (std::size_t i = 0; i < m; ++i) {
      const std::int8_t* arow = a + i * k;
      for (std::size_t j = 0; j < n; ++j) {
        const std::int8_t* brow = b + j * k;
        std::int32_t acc = 0;
        for (std::size_t p = 0; p < k; ++p) acc += static_cast<std::int32_t>(arow[p]) * brow[p];
        c[i * n + j] = acc;
      }
    }
  } else {
    for (std::size_t i = 0; i < m; ++i) {
      std::int32_t* crow = c + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const std::int32_t av = a[i * k + p];
        if (av == 0) continue;
        const std::int8_t* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

void int_gemm_left(std::size_t m, std::size_t n, std::size_t k, const std::int8_t* a, const std::int8_t* b,
                   std::int32_t* c) {
  int_gemm(m, n, k, a, b, false, c);
}

IntMatvecResult int_matvec(const QuantizedTensor& w, const QuantizedTensor& x) {
  if (w.shape.size() != 2) throw StructuralError("int_matvec: weight must be 2-D");
  const std::size_t rows = w.shape[0], cols = w.shape[1];
  if (x.codes.size() != cols) throw StructuralError("int_matvec: inner dimensions differ");
  for (const auto* q : {&w, &x}) {
    for (auto code : q->codes) {
      if (code < code_min(q->bits) || code > code_max(q->bits)) throw KernelError("int_matvec: code out of range");
    }
  }
  IntMatvecResult r;
  r.accumulator.resize(rows);
  int_gemm(rows, 1, cols, w.codes.data(), x.codes.data(), false, r.accumulator.data());
  r.combined_scale = w.scale * x.scale;
  return r;
}

std::vector<std::int8_t> requantize(std::span<const std::int32_t> acc, double acc_scale, double out_scale) {
  check_scale(out_scale);
  std::vector<std::int8_t> out(acc.size());
  const double ratio = acc_scale / out_scale;
  for (std::size_t i = 0; i < acc.size(); ++i) {
    out[i] = static_cast<std::int8_t>(std::round(std::clamp(acc[i] * ratio, -128.0, 127.0)));
  }
  return out;
}

std::size_t packed_size(std::size_t count, int bits) {
  return (count * static_cast<std::size_t>(bits) + 7) / 8;
}

std::vector<std::uint8_t> pack_codes(std::span<const std::int8_t> codes, int bits) {
  check_bits(bits);
  if (!is_quantized(bits)) throw ParameterError("pack_codes: full-precision tensors are stored as fp32");
  std::vector<std::uint8_t> out(packed_size(codes.size(), bits), 0);
  const std::uint32_t mask = (1u << bits) - 1u;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    const auto value = static_cast<std::uint32_t>(static_cast<std::int32_t>(codes[i])) & mask;
    out[bit / 8] |= static_cast<std::uint8_t>(value << (bit % 8));
  }
  return out;
}

std::vector<std::int8_t> unpack_codes(std::span<const std::uint8_t> bytes, std::size_t count, int bits) {
  check_bits(bits);
  if (!is_quantized(bits)) throw ParameterError("unpack_codes: full-precision tensors are stored as fp32");
  if (bytes.size() < packed_size(count, bits)) throw InputError("unpack_codes: buffer too short");
  std::vector<std::int8_t> out(count);
  const std::uint32_t mask = (1u << bits) - 1u;
  const std::uint32_t sign = 1u << (bits - 1);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t bit = i * static_cast<std::size_t>(bits);
    std::uint32_t v = (static_cast<std::uint32_t>(bytes[bit / 8]) >> (bit % 8)) & mask;
    auto s = static_cast<std::int32_t>(v);
    if (v & sign) s -= static_cast<std::int32_t>(1u << bits);
    out[i] = static_cast<std::int8_t>(s);
  }
  return out;
}

}  // namespace ttq::quant
