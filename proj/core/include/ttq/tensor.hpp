#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace ttq {

/// Dense row-major FP64 array. Everything numeric in the library is built on it.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> dims, double fill = 0.0);
  Tensor(std::vector<std::size_t> dims, std::vector<double> values);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor vector(std::vector<double> values);
  static Tensor scalar(double v) { return Tensor({1}, std::vector<double>{v}); }

  std::size_t size() const noexcept { return data.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  // 2-D views; a 1-D tensor is treated as a single row.
  std::size_t rows() const noexcept { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const noexcept { return shape.empty() ? 0 : shape.back(); }

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> span() noexcept { return data; }
  std::span<const double> span() const noexcept { return data; }

  bool operator==(const Tensor&) const = default;
};

std::size_t shape_size(std::span<const std::size_t> shape);

/// C(m x n) = alpha * op(A) * op(B) + beta * C, all row-major with leading dims equal
/// to the stored column counts. op(X) is X or X^T.
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, const double* b, double beta, double* c);

/// Out-of-place transpose of a rows x cols row-major block.
void transpose(const double* src, std::size_t rows, std::size_t cols, double* dst);

double max_abs(std::span<const double> v);
double norm2(std::span<const double> v);
/// ||a - b|| / max(||b||, tiny)
double relative_error(std::span<const double> a, std::span<const double> b);

}  // namespace ttq
