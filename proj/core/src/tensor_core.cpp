#include "ttq/tensor_core.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "ttq/errors.hpp"

namespace ttq::tt {

namespace {

std::size_t product(std::span<const std::size_t> v) {
  return std::accumulate(v.begin(), v.end(), std::size_t{1}, std::multiplies<>());
}

std::string join(std::span<const std::size_t> v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

// Enumerates nondecreasing factorizations of n into `parts` factors >= 2 and keeps the one
// with the smallest largest factor.
void search_factors(std::size_t n, std::size_t parts, std::size_t min_factor,
                    std::vector<std::size_t>& current, std::vector<std::size_t>& best) {
  if (parts == 1) {
    if (n < min_factor) return;
    current.push_back(n);
    if (best.empty() || current.back() < best.back()) best = current;
    current.pop_back();
    return;
  }
  for (std::size_t f = min_factor; f <= n; ++f) {
    // remaining parts are all >= f
    std::size_t bound = 1;
    bool overflow = false;
    for (std::size_t p = 0; p < parts; ++p) {
      bound *= f;
      if (bound > n) {
        overflow = true;
        break;
      }
    }
    if (overflow) break;
    if (n % f != 0) continue;
    if (!best.empty() && f > best.back()) break;
    current.push_back(f);
    search_factors(n / f, parts - 1, f, current, best);
    current.pop_back();
  }
}

std::vector<std::size_t> balanced_factors(std::size_t target, std::size_t parts) {
  if (parts == 1) return {target};
  const auto root = static_cast<std::size_t>(std::ceil(std::pow(static_cast<double>(target), 1.0 / parts) - 1e-9));
  const std::size_t limit = 2 * std::max<std::size_t>(root, 2);
  for (std::size_t candidate = target;; ++candidate) {
    std::vector<std::size_t> current, best;
    search_factors(candidate, parts, 2, current, best);
    if (!best.empty() && best.back() <= limit) return best;
  }
}

}  // namespace

const char* to_string(Format f) { return f == Format::TT ? "TT" : "TTM"; }

TensorShapePlan TensorShapePlan::tt(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_factors,
                                    std::vector<std::size_t> col_factors, std::vector<std::size_t> ranks) {
  TensorShapePlan p{Format::TT, std::move(row_factors), std::move(col_factors), std::move(ranks), rows, cols};
  p.validate();
  return p;
}

TensorShapePlan TensorShapePlan::ttm(std::size_t rows, std::size_t cols, std::vector<std::size_t> row_factors,
                                     std::vector<std::size_t> col_factors, std::vector<std::size_t> ranks) {
  TensorShapePlan p{Format::TTM, std::move(row_factors), std::move(col_factors), std::move(ranks), rows, cols};
  p.validate();
  return p;
}

std::vector<std::size_t> TensorShapePlan::uniform_ranks(Format format, std::size_t order, std::size_t rank) {
  const std::size_t n = format == Format::TT ? 2 * order + 1 : order + 1;
  std::vector<std::size_t> r(n, rank);
  r.front() = 1;
  r.back() = 1;
  return r;
}

std::size_t TensorShapePlan::padded_rows() const noexcept { return product(row_factors); }
std::size_t TensorShapePlan::padded_cols() const noexcept { return product(col_factors); }

std::vector<std::size_t> TensorShapePlan::core_shape(std::size_t k) const {
  const std::size_t d = order();
  if (format == Format::TT) {
    const std::size_t mode = k < d ? row_factors[k] : col_factors[k - d];
    return {ranks[k], mode, ranks[k + 1]};
  }
  return {ranks[k], row_factors[k], col_factors[k], ranks[k + 1]};
}

std::size_t TensorShapePlan::core_size(std::size_t k) const { return product(core_shape(k)); }

TensorShapePlan TensorShapePlan::transposed() const {
  if (format != Format::TT) throw StructuralError("transposed() is defined for TT plans only");
  TensorShapePlan t;
  t.format = Format::TT;
  t.rows = cols;
  t.cols = rows;
  t.row_factors.assign(col_factors.rbegin(), col_factors.rend());
  t.col_factors.assign(row_factors.rbegin(), row_factors.rend());
  t.ranks.assign(ranks.rbegin(), ranks.rend());
  return t;
}

void TensorShapePlan::validate() const {
  const std::size_t d = order();
  if (d == 0) throw StructuralError("plan order must be >= 1");
  if (col_factors.size() != d) throw StructuralError("row and column factor lists differ in length");
  const std::size_t expected = format == Format::TT ? 2 * d + 1 : d + 1;
  if (ranks.size() != expected) {
    throw StructuralError("plan has " + std::to_string(ranks.size()) + " ranks, expected " +
                          std::to_string(expected));
  }
  if (ranks.front() != 1 || ranks.back() != 1) throw StructuralError("boundary ranks must be 1");
  for (auto r : ranks)
    if (r == 0) throw StructuralError("ranks must be positive");
  for (auto f : row_factors)
    if (f == 0) throw StructuralError("factors must be positive");
  for (auto f : col_factors)
    if (f == 0) throw StructuralError("factors must be positive");
  if (rows == 0 || cols == 0) throw StructuralError("logical dims must be positive");
  if (padded_rows() < rows || padded_cols() < cols) {
    throw StructuralError("factor products " + std::to_string(padded_rows()) + "x" +
                          std::to_string(padded_cols()) + " do not cover " + std::to_string(rows) + "x" +
                          std::to_string(cols));
  }
}

std::string describe(const TensorShapePlan& plan) {
  std::ostringstream os;
  os << to_string(plan.format) << " (" << plan.rows << "," << plan.cols << ") factors (" << join(plan.row_factors)
     << ")|(" << join(plan.col_factors) << ") ranks (" << join(plan.ranks) << ")";
  if (plan.is_padded()) os << " padded " << plan.padded_rows() << "x" << plan.padded_cols();
  return os.str();
}

TensorShapePlan plan_factorization(std::size_t rows, std::size_t cols, std::size_t order, std::size_t rank,
                                   Format format) {
  if (rows == 0 || cols == 0 || order == 0 || rank == 0) {
    throw PlanningError("plan_factorization: M, N, d and rank must all be >= 1");
  }
  if (order > 1) {
    const auto max_order = static_cast<std::size_t>(std::floor(std::log2(static_cast<double>(std::min(rows, cols)))));
    if (order > max_order) {
      throw PlanningError("plan_factorization: d=" + std::to_string(order) + " exceeds log2(min(M,N))=" +
                          std::to_string(max_order));
    }
  }
  auto row_f = balanced_factors(rows, order);
  auto col_f = balanced_factors(cols, order);
  std::sort(row_f.begin(), row_f.end());
  std::sort(col_f.begin(), col_f.end(), std::greater<>());
  TensorShapePlan p{format, std::move(row_f), std::move(col_f), TensorShapePlan::uniform_ranks(format, order, rank),
                    rows, cols};
  p.validate();
  return p;
}

std::vector<std::size_t> mixed_radix_digits(std::size_t index, std::span<const std::size_t> factors) {
  std::vector<std::size_t> digits(factors.size());
  for (std::size_t k = factors.size(); k-- > 0;) {
    digits[k] = index % factors[k];
    index /= factors[k];
  }
  return digits;
}

void check_cores(std::span<const Tensor> cores, const TensorShapePlan& plan) {
  if (cores.size() != plan.num_cores()) {
    throw StructuralError("expected " + std::to_string(plan.num_cores()) + " cores, got " +
                          std::to_string(cores.size()));
  }
  for (std::size_t k = 0; k < cores.size(); ++k) {
    if (cores[k].shape != plan.core_shape(k)) {
      throw StructuralError("core " + std::to_string(k) + " has shape (" + join(cores[k].shape) +
                            "), plan requires (" + join(plan.core_shape(k)) + ")");
    }
  }
}

Tensor tt_to_dense(std::span<const Tensor> cores, const TensorShapePlan& plan) {
  if (plan.format != Format::TT) throw StructuralError("tt_to_dense needs a TT plan");
  check_cores(cores, plan);
  const std::size_t d = plan.order();
  const std::size_t rd = plan.ranks[d];

  // Left products G_1^{i_1}...G_d^{i_d} (1 x r_d) per row, right products
  // G_{d+1}^{j_1}...G_{2d}^{j_d} (r_d x 1) per column.
  auto left = [&](std::size_t row) {
    const auto digits = mixed_radix_digits(row, plan.row_factors);
    std::vector<double> v{1.0};
    for (std::size_t k = 0; k < d; ++k) {
      const auto& g = cores[k];
      const std::size_t rin = g.shape[0], mode = g.shape[1], rout = g.shape[2];
      std::vector<double> next(rout, 0.0);
      for (std::size_t a = 0; a < rin; ++a)
        for (std::size_t b = 0; b < rout; ++b) next[b] += v[a] * g.data[(a * mode + digits[k]) * rout + b];
      v = std::move(next);
    }
    return v;
  };
  auto right = [&](std::size_t col) {
    const auto digits = mixed_radix_digits(col, plan.col_factors);
    std::vector<double> v{1.0};
    for (std::size_t k = 2 * d; k-- > d;) {
      const auto& g = cores[k];
      const std::size_t rin = g.shape[0], mode = g.shape[1], rout = g.shape[2];
      std::vector<double> next(rin, 0.0);
      for (std::size_t a = 0; a < rin; ++a)
        for (std::size_t b = 0; b < rout; ++b) next[a] += g.data[(a * mode + digits[k - d]) * rout + b] * v[b];
      v = std::move(next);
    }
    return v;
  };

  std::vector<std::vector<double>> rights(plan.cols);
  for (std::size_t j = 0; j < plan.cols; ++j) rights[j] = right(j);
  Tensor w = Tensor::matrix(plan.rows, plan.cols);
  for (std::size_t i = 0; i < plan.rows; ++i) {
    const auto l = left(i);
    for (std::size_t j = 0; j < plan.cols; ++j) {
      double acc = 0.0;
      for (std::size_t a = 0; a < rd; ++a) acc += l[a] * rights[j][a];
      w(i, j) = acc;
    }
  }
  return w;
}

Tensor ttm_to_dense(std::span<const Tensor> cores, const TensorShapePlan& plan) {
  if (plan.format != Format::TTM) throw StructuralError("ttm_to_dense needs a TTM plan");
  check_cores(cores, plan);
  const std::size_t d = plan.order();
  Tensor w = Tensor::matrix(plan.rows, plan.cols);

  // Depth-first over (i_k, j_k) pairs; prefixes of the slice product are shared.
  std::function<void(std::size_t, std::size_t, std::size_t, const std::vector<double>&)> walk =
      [&](std::size_t k, std::size_t row, std::size_t col, const std::vector<double>& v) {
        if (k == d) {
          if (row < plan.rows && col < plan.cols) w(row, col) = v[0];
          return;
        }
        const auto& f = cores[k];
        const std::size_t pin = f.shape[0], m = f.shape[1], n = f.shape[2], pout = f.shape[3];
        std::vector<double> next(pout);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            std::fill(next.begin(), next.end(), 0.0);
            for (std::size_t a = 0; a < pin; ++a) {
              const double* slice = f.data.data() + ((a * m + i) * n + j) * pout;
              for (std::size_t b = 0; b < pout; ++b) next[b] += v[a] * slice[b];
            }
            walk(k + 1, row * m + i, col * n + j, next);
          }
        }
      };
  walk(0, 0, 0, std::vector<double>{1.0});
  return w;
}

std::vector<ContractionStage> contraction_stages(const TensorShapePlan& plan, std::size_t batch) {
  const std::size_t d = plan.order();
  const auto& r = plan.ranks;
  std::vector<ContractionStage> stages;
  stages.reserve(2 * d);
  for (std::size_t s = 0; s < 2 * d; ++s) {
    const std::size_t core = 2 * d - 1 - s;
    if (s < d) {
      const std::size_t k = d - 1 - s;  // 0-based column mode
      std::size_t prefix = batch;
      for (std::size_t t = 0; t < k; ++t) prefix *= plan.col_factors[t];
      stages.push_back({StageKind::Column, core, prefix, r[core], plan.col_factors[k] * r[core + 1]});
    } else {
      const std::size_t k = core;  // 0-based row mode
      std::size_t suffix = batch;
      for (std::size_t t = k + 1; t < d; ++t) suffix *= plan.row_factors[t];
      stages.push_back({StageKind::Row, core, r[core] * plan.row_factors[k], suffix, r[core + 1]});
    }
  }
  return stages;
}

std::uint64_t tt_matvec_multiplies(const TensorShapePlan& plan) {
  std::uint64_t total = 0;
  for (const auto& s : contraction_stages(plan, 1)) total += s.multiplies();
  return total;
}

std::vector<const double*> core_pointers(std::span<const Tensor> cores) {
  std::vector<const double*> ptrs;
  ptrs.reserve(cores.size());
  for (const auto& c : cores) ptrs.push_back(c.data.data());
  return ptrs;
}

TTContraction tt_contract(const TensorShapePlan& plan, std::span<const double* const> cores,
                          std::span<const double> x, std::size_t batch, ContractionCounter* counter) {
  if (plan.format != Format::TT) throw StructuralError("tt_contract needs a TT plan");
  if (cores.size() != plan.num_cores()) throw StructuralError("tt_contract: wrong number of cores");
  if (x.size() != batch * plan.cols) {
    throw InputError("tt_contract: input has " + std::to_string(x.size()) + " values, expected " +
                     std::to_string(batch) + "x" + std::to_string(plan.cols));
  }
  const std::size_t d = plan.order();
  const std::size_t n_pad = plan.padded_cols();
  TTContraction out;
  out.batch = batch;
  out.states.reserve(2 * d + 1);
  std::vector<double> input(batch * n_pad, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(x.begin() + b * plan.cols, plan.cols, input.begin() + b * n_pad);
  out.states.push_back(std::move(input));

  const auto stages = contraction_stages(plan, batch);
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    const auto& in = out.states.back();
    std::vector<double> next(st.m * st.n);
    if (st.kind == StageKind::Column) {
      gemm(false, true, st.m, st.n, st.k, 1.0, in.data(), cores[st.core], 0.0, next.data());
    } else {
      gemm(false, false, st.m, st.n, st.k, 1.0, cores[st.core], in.data(), 0.0, next.data());
    }
    if (counter) {
      counter->multiplies += st.multiplies();
      counter->adds += st.multiplies();
    }
    if (s + 1 == d) {
      // B x r_d -> r_d x B for the row sweep
      std::vector<double> t(next.size());
      transpose(next.data(), batch, plan.ranks[d], t.data());
      next = std::move(t);
    }
    out.states.push_back(std::move(next));
  }

  // Final state is M' x B.
  const auto& last = out.states.back();
  out.output.assign(batch * plan.rows, 0.0);
  for (std::size_t i = 0; i < plan.rows; ++i)
    for (std::size_t b = 0; b < batch; ++b) out.output[b * plan.rows + i] = last[i * batch + b];
  return out;
}

void tt_contract_vjp(const TensorShapePlan& plan, std::span<const double* const> cores, const TTContraction& fwd,
                     std::span<const double> y_grad, std::span<double* const> core_grads, std::span<double> x_grad) {
  const std::size_t d = plan.order();
  const std::size_t batch = fwd.batch;
  if (y_grad.size() != batch * plan.rows) throw StructuralError("tt_contract_vjp: upstream size mismatch");
  if (core_grads.size() != plan.num_cores()) throw StructuralError("tt_contract_vjp: wrong number of grads");
  if (!x_grad.empty() && x_grad.size() != batch * plan.cols)
    throw StructuralError("tt_contract_vjp: input grad size mismatch");

  const std::size_t m_pad = plan.padded_rows();
  std::vector<double> grad(m_pad * batch, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < plan.rows; ++i) grad[i * batch + b] = y_grad[b * plan.rows + i];

  const auto stages = contraction_stages(plan, batch);
  for (std::size_t s = stages.size(); s-- > 0;) {
    const auto& st = stages[s];
    const auto& in = fwd.states[s];
    const double* g = cores[st.core];
    double* dg = core_grads[st.core];
    std::vector<double> din;
    if (st.kind == StageKind::Row) {
      // out = G in
      gemm(false, true, st.m, st.k, st.n, 1.0, grad.data(), in.data(), 1.0, dg);
      if (s == 0 && x_grad.empty()) break;
      din.assign(st.k * st.n, 0.0);
      gemm(true, false, st.k, st.n, st.m, 1.0, g, grad.data(), 0.0, din.data());
      if (s == d) {
        std::vector<double> t(din.size());
        transpose(din.data(), plan.ranks[d], batch, t.data());
        din = std::move(t);
      }
    } else {
      // out = in G^T
      gemm(true, false, st.n, st.k, st.m, 1.0, grad.data(), in.data(), 1.0, dg);
      if (s == 0 && x_grad.empty()) break;
      din.assign(st.m * st.k, 0.0);
      gemm(false, false, st.m, st.k, st.n, 1.0, grad.data(), g, 0.0, din.data());
    }
    grad = std::move(din);
  }
  if (!x_grad.empty()) {
    const std::size_t n_pad = plan.padded_cols();
    for (std::size_t b = 0; b < batch; ++b)
      std::copy_n(grad.begin() + b * n_pad, plan.cols, x_grad.begin() + b * plan.cols);
  }
}

std::vector<double> tt_matvec(std::span<const Tensor> cores, const TensorShapePlan& plan, std::span<const double> x,
                              ContractionCounter* counter) {
  check_cores(cores, plan);
  if (x.size() != plan.cols) {
    throw InputError("tt_matvec: x has length " + std::to_string(x.size()) + ", expected " +
                     std::to_string(plan.cols));
  }
  const auto ptrs = core_pointers(cores);
  return tt_contract(plan, ptrs, x, 1, counter).output;
}

TTMLookup ttm_lookup(const TensorShapePlan& plan, std::span<const double* const> cores, std::size_t row) {
  if (plan.format != Format::TTM) throw StructuralError("ttm_lookup needs a TTM plan");
  if (row >= plan.rows) {
    throw InputError("row " + std::to_string(row) + " out of range for " + std::to_string(plan.rows) + " rows");
  }
  const std::size_t d = plan.order();
  TTMLookup out;
  out.digits = mixed_radix_digits(row, plan.row_factors);
  out.states.reserve(d + 1);
  out.states.push_back({1.0});
  std::size_t prefix = 1;
  std::vector<double> slice;
  for (std::size_t k = 0; k < d; ++k) {
    const std::size_t pin = plan.ranks[k], m = plan.row_factors[k], n = plan.col_factors[k], pout = plan.ranks[k + 1];
    slice.resize(pin * n * pout);
    for (std::size_t a = 0; a < pin; ++a)
      std::copy_n(cores[k] + (a * m + out.digits[k]) * n * pout, n * pout, slice.begin() + a * n * pout);
    std::vector<double> next(prefix * n * pout);
    gemm(false, false, prefix, n * pout, pin, 1.0, out.states.back().data(), slice.data(), 0.0, next.data());
    out.states.push_back(std::move(next));
    prefix *= n;
  }
  return out;
}

std::vector<double> ttm_lookup_output(const TensorShapePlan& plan, const TTMLookup& lookup) {
  const auto& last = lookup.states.back();
  return std::vector<double>(last.begin(), last.begin() + static_cast<std::ptrdiff_t>(plan.cols));
}

void ttm_lookup_vjp(const TensorShapePlan& plan, std::span<const double* const> cores, const TTMLookup& lookup,
                    std::span<const double> row_grad, std::span<double* const> core_grads) {
  const std::size_t d = plan.order();
  if (row_grad.size() != plan.cols) throw StructuralError("ttm_lookup_vjp: gradient length mismatch");
  std::vector<double> grad(plan.padded_cols(), 0.0);
  std::copy(row_grad.begin(), row_grad.end(), grad.begin());

  std::size_t prefix = plan.padded_cols();
  std::vector<double> slice, dslice;
  for (std::size_t k = d; k-- > 0;) {
    const std::size_t pin = plan.ranks[k], m = plan.row_factors[k], n = plan.col_factors[k], pout = plan.ranks[k + 1];
    prefix /= n;
    const std::size_t width = n * pout;
    const auto& in = lookup.states[k];  // prefix x pin
    dslice.assign(pin * width, 0.0);
    gemm(true, false, pin, width, prefix, 1.0, in.data(), grad.data(), 0.0, dslice.data());
    for (std::size_t a = 0; a < pin; ++a) {
      double* dst = core_grads[k] + (a * m + lookup.digits[k]) * width;
      for (std::size_t t = 0; t < width; ++t) dst[t] += dslice[a * width + t];
    }
    if (k == 0) break;
    slice.resize(pin * width);
    for (std::size_t a = 0; a < pin; ++a)
      std::copy_n(cores[k] + (a * m + lookup.digits[k]) * width, width, slice.begin() + a * width);
    std::vector<double> din(prefix * pin, 0.0);
    gemm(false, true, prefix, pin, width, 1.0, grad.data(), slice.data(), 0.0, din.data());
    grad = std::move(din);
  }
}

std::vector<double> ttm_row_lookup(std::span<const Tensor> cores, const TensorShapePlan& plan, std::size_t row) {
  check_cores(cores, plan);
  const auto ptrs = core_pointers(cores);
  return ttm_lookup_output(plan, ttm_lookup(plan, ptrs, row));
}

namespace {

std::size_t pick_pivot(std::span<const std::size_t> modes) {
  std::size_t best = 0;
  std::size_t best_cost = std::numeric_limits<std::size_t>::max();
  for (std::size_t c = 0; c < modes.size(); ++c) {
    const std::size_t left = product(modes.subspan(0, c));
    const std::size_t right = product(modes.subspan(c + 1));
    const std::size_t cost = std::max(left, right);
    if (cost < best_cost) {
      best_cost = cost;
      best = c;
    }
  }
  return best;
}

Tensor pad_dense(const Tensor& dense, std::size_t rows, std::size_t cols) {
  Tensor out = Tensor::matrix(rows, cols);
  for (std::size_t i = 0; i < dense.rows(); ++i)
    for (std::size_t j = 0; j < dense.cols(); ++j) out(i, j) = dense(i, j);
  return out;
}

}  // namespace

ExactTT exact_tt_from_dense(const Tensor& dense, std::vector<std::size_t> row_factors,
                            std::vector<std::size_t> col_factors) {
  const std::size_t d = row_factors.size();
  std::vector<std::size_t> modes = row_factors;
  modes.insert(modes.end(), col_factors.begin(), col_factors.end());
  const std::size_t pivot = pick_pivot(modes);

  std::vector<std::size_t> ranks(2 * d + 1);
  for (std::size_t t = 0; t <= 2 * d; ++t) {
    ranks[t] = t <= pivot ? product(std::span(modes).subspan(0, t)) : product(std::span(modes).subspan(t));
  }
  ExactTT out;
  out.plan = TensorShapePlan::tt(dense.rows(), dense.cols(), std::move(row_factors), std::move(col_factors),
                                 std::move(ranks));
  const Tensor padded = pad_dense(dense, out.plan.padded_rows(), out.plan.padded_cols());
  const auto& r = out.plan.ranks;
  for (std::size_t t = 0; t < 2 * d; ++t) {
    Tensor core(out.plan.core_shape(t));
    const std::size_t mode = modes[t];
    if (t < pivot) {
      for (std::size_t a = 0; a < r[t]; ++a)
        for (std::size_t i = 0; i < mode; ++i) core.data[(a * mode + i) * r[t + 1] + a * mode + i] = 1.0;
    } else if (t == pivot) {
      core.data = padded.data;
    } else {
      for (std::size_t i = 0; i < mode; ++i)
        for (std::size_t b = 0; b < r[t + 1]; ++b) core.data[((i * r[t + 1] + b) * mode + i) * r[t + 1] + b] = 1.0;
    }
    out.cores.push_back(std::move(core));
  }
  return out;
}

ExactTT exact_ttm_from_dense(const Tensor& dense, std::vector<std::size_t> row_factors,
                             std::vector<std::size_t> col_factors) {
  const std::size_t d = row_factors.size();
  if (col_factors.size() != d) throw StructuralError("exact_ttm_from_dense: factor lists differ in length");
  std::vector<std::size_t> joint(d);
  for (std::size_t k = 0; k < d; ++k) joint[k] = row_factors[k] * col_factors[k];
  const std::size_t pivot = pick_pivot(joint);

  std::vector<std::size_t> ranks(d + 1);
  for (std::size_t t = 0; t <= d; ++t) {
    ranks[t] = t <= pivot ? product(std::span(joint).subspan(0, t)) : product(std::span(joint).subspan(t));
  }
  ExactTT out;
  out.plan = TensorShapePlan::ttm(dense.rows(), dense.cols(), std::move(row_factors), std::move(col_factors),
                                  std::move(ranks));
  const auto& plan = out.plan;
  const Tensor padded = pad_dense(dense, plan.padded_rows(), plan.padded_cols());

  // Dense entries regrouped by joint digits (i_1 j_1, ..., i_d j_d).
  std::vector<double> regrouped(padded.size());
  for (std::size_t i = 0; i < plan.padded_rows(); ++i) {
    const auto di = mixed_radix_digits(i, plan.row_factors);
    for (std::size_t j = 0; j < plan.padded_cols(); ++j) {
      const auto dj = mixed_radix_digits(j, plan.col_factors);
      std::size_t idx = 0;
      for (std::size_t k = 0; k < d; ++k) idx = idx * joint[k] + di[k] * plan.col_factors[k] + dj[k];
      regrouped[idx] = padded(i, j);
    }
  }
  const auto& p = plan.ranks;
  for (std::size_t t = 0; t < d; ++t) {
    Tensor core(plan.core_shape(t));
    const std::size_t q = joint[t];
    // Layout (p_t, m, n, p_{t+1}) flattens (m, n) to the joint digit i*n + j.
    if (t < pivot) {
      for (std::size_t a = 0; a < p[t]; ++a)
        for (std::size_t u = 0; u < q; ++u) core.data[(a * q + u) * p[t + 1] + a * q + u] = 1.0;
    } else if (t == pivot) {
      core.data = regrouped;
    } else {
      for (std::size_t u = 0; u < q; ++u)
        for (std::size_t b = 0; b < p[t + 1]; ++b) core.data[((u * p[t + 1] + b) * q + u) * p[t + 1] + b] = 1.0;
    }
    out.cores.push_back(std::move(core));
  }
  return out;
}

CostReport param_count(const TensorShapePlan& plan) {
  CostReport report;
  for (std::size_t k = 0; k < plan.num_cores(); ++k) report.param_count_compressed += plan.core_size(k);
  report.param_count_dense = static_cast<std::uint64_t>(plan.rows) * plan.cols;
  report.compression_ratio =
      static_cast<double>(report.param_count_dense) / static_cast<double>(report.param_count_compressed);
  return report;
}

double op_weight(int weight_bits, int activation_bits) {
  for (int b : {weight_bits, activation_bits}) {
    if (b != 2 && b != 4 && b != 8 && b != 32) throw ParameterError("unsupported bit width " + std::to_string(b));
  }
  if (weight_bits == 32 && activation_bits == 32) return 1.0;
  return static_cast<double>(weight_bits) * static_cast<double>(activation_bits) / 64.0;
}

CostReport flops_estimate(const TensorShapePlan& plan, int weight_bits, int activation_bits, std::size_t seq_len,
                          bool dense) {
  CostReport report = param_count(plan);
  const double weight = op_weight(weight_bits, activation_bits);
  std::uint64_t multiplies = 0;
  if (dense) {
    multiplies = static_cast<std::uint64_t>(plan.rows) * plan.cols;
  } else {
    if (plan.format != Format::TT) throw ParameterError("flops_estimate: factorized count is defined for TT plans");
    multiplies = tt_matvec_multiplies(plan);
  }
  // one add per multiply (multiply-accumulate)
  report.flops = 2.0 * static_cast<double>(multiplies) * static_cast<double>(seq_len) * weight;
  report.dense_flops = 2.0 * static_cast<double>(plan.rows) * static_cast<double>(plan.cols) *
                       static_cast<double>(seq_len);
  report.fixed_point = weight_bits < 32 || activation_bits < 32;
  report.convention = kFlopsConvention;
  return report;
}

}  // namespace ttq::tt
