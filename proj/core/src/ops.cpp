#include "ttq/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>

#include "ttq/errors.hpp"
#include "ttq/quant.hpp"

namespace ttq::ad {

namespace {

void require(bool cond, const char* what) {
  if (!cond) throw StructuralError(what);
}

Tensor like(const Tensor& t) { return Tensor(t.shape, 0.0); }

std::vector<double> row_softmax(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> p(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = a.data.data() + r * cols;
    double* out = p.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (out[c] = std::exp(in[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) out[c] /= z;
  }
  return p;
}

std::vector<double> row_log_softmax(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(a.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = a.data.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(in[c] - mx);
    const double lz = mx + std::log(z);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = in[c] - lz;
  }
  return out;
}

}  // namespace

Var add(Var a, Var b) {
  require(a.value().shape == b.value().shape, "add: shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return a.tape()->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    t.accumulate(a, g.data);
    t.accumulate(b, g.data);
  });
}

Var add_bias(Var x, Var bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  require(bv.size() == xv.cols(), "add_bias: bias length differs from feature dim");
  Tensor out = xv;
  const std::size_t cols = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[r * cols + c] += bv.data[c];
  return x.tape()->record(std::move(out), {x, bias}, [x, bias, cols](Tape& t, const Tensor& g) {
    t.accumulate(x, g.data);
    if (t.needs_grad(bias)) {
      std::vector<double> gb(cols, 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i % cols] += g.data[i];
      t.accumulate(bias, gb);
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return a.tape()->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    std::vector<double> ga(g.data);
    for (double& v : ga) v *= s;
    t.accumulate(a, ga);
  });
}

Var matmul(Var a, Var b, bool trans_b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const std::size_t m = av.rows(), k = av.cols();
  const std::size_t n = trans_b ? bv.rows() : bv.cols();
  require((trans_b ? bv.cols() : bv.rows()) == k, "matmul: inner dimensions differ");
  Tensor out = Tensor::matrix(m, n);
  gemm(false, trans_b, m, n, k, 1.0, av.data.data(), bv.data.data(), 0.0, out.data.data());
  return a.tape()->record(std::move(out), {a, b}, [a, b, m, n, k, trans_b](Tape& t, const Tensor& g) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (t.needs_grad(a)) {
      // dA = G * op(B)^T
      std::vector<double> ga(m * k, 0.0);
      gemm(false, !trans_b, m, k, n, 1.0, g.data.data(), bv.data.data(), 0.0, ga.data());
      t.accumulate(a, ga);
    }
    if (t.needs_grad(b)) {
      std::vector<double> gb(k * n, 0.0);
      if (trans_b) {
        // B is n x k: dB = G^T A
        gemm(true, false, n, k, m, 1.0, g.data.data(), av.data.data(), 0.0, gb.data());
      } else {
        gemm(true, false, k, n, m, 1.0, av.data.data(), g.data.data(), 0.0, gb.data());
      }
      t.accumulate(b, gb);
    }
  });
}

Var gelu(Var a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  Tensor out = like(a.value());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a.value().data[i];
    out.data[i] = 0.5 * x * (1.0 + std::tanh(kC * (x + kA * x * x * x)));
  }
  return a.tape()->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const auto& xs = a.value().data;
    std::vector<double> ga(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const double x = xs[i];
      const double u = kC * (x + kA * x * x * x);
      const double th = std::tanh(u);
      const double du = kC * (1.0 + 3.0 * kA * x * x);
      ga[i] = g.data[i] * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du);
    }
    t.accumulate(a, ga);
  });
}

Var softmax_rows(Var a) {
  auto probs = std::make_shared<std::vector<double>>(row_softmax(a.value()));
  Tensor out(a.value().shape, *probs);
  const std::size_t cols = a.value().cols();
  return a.tape()->record(std::move(out), {a}, [a, cols, probs](Tape& t, const Tensor& g) {
    const auto& p = *probs;
    std::vector<double> ga(p.size());
    for (std::size_t r = 0; r < p.size() / cols; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += g.data[r * cols + c] * p[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] = p[r * cols + c] * (g.data[r * cols + c] - dot);
    }
    t.accumulate(a, ga);
  });
}

Var log_softmax_rows(Var a) {
  Tensor out(a.value().shape, row_log_softmax(a.value()));
  const std::size_t cols = a.value().cols();
  return a.tape()->record(std::move(out), {a}, [a, cols](Tape& t, const Tensor& g) {
    const auto p = row_softmax(a.value());
    std::vector<double> ga(p.size());
    const std::size_t rows = p.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < cols; ++c) s += g.data[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] = g.data[r * cols + c] - p[r * cols + c] * s;
    }
    t.accumulate(a, ga);
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  require(gamma.value().size() == cols && beta.value().size() == cols, "layer_norm: parameter size mismatch");
  auto normalized = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out = like(xv);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += in[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (in[c] - mean) * (in[c] - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (in[c] - mean) * is;
      (*normalized)[r * cols + c] = h;
      out.data[r * cols + c] = gamma.value().data[c] * h + beta.value().data[c];
    }
  }
  return x.tape()->record(std::move(out), {x, gamma, beta},
                          [x, gamma, beta, rows, cols, normalized, inv_std](Tape& t, const Tensor& g) {
                            const auto& h = *normalized;
                            if (t.needs_grad(gamma) || t.needs_grad(beta)) {
                              std::vector<double> gg(cols, 0.0), gb(cols, 0.0);
                              for (std::size_t i = 0; i < g.size(); ++i) {
                                gg[i % cols] += g.data[i] * h[i];
                                gb[i % cols] += g.data[i];
                              }
                              t.accumulate(gamma, gg);
                              t.accumulate(beta, gb);
                            }
                            if (!t.needs_grad(x)) return;
                            const auto& gam = gamma.value().data;
                            std::vector<double> gx(g.size());
                            const double inv_n = 1.0 / static_cast<double>(cols);
                            for (std::size_t r = 0; r < rows; ++r) {
                              double mean_dh = 0.0, mean_dh_h = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) {
                                const double dh = g.data[r * cols + c] * gam[c];
                                mean_dh += dh;
                                mean_dh_h += dh * h[r * cols + c];
                              }
                              mean_dh *= inv_n;
                              mean_dh_h *= inv_n;
                              for (std::size_t c = 0; c < cols; ++c) {
                                const double dh = g.data[r * cols + c] * gam[c];
                                gx[r * cols + c] = (*inv_std)[r] * (dh - mean_dh - h[r * cols + c] * mean_dh_h);
                              }
                            }
                            t.accumulate(x, gx);
                          });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  require(begin + count <= cols, "slice_cols: range out of bounds");
  Tensor out = Tensor::matrix(rows, count);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(av.data.begin() + r * cols + begin, count, out.data.begin() + r * count);
  return a.tape()->record(std::move(out), {a}, [a, rows, cols, begin, count](Tape& t, const Tensor& g) {
    std::vector<double> ga(rows * cols, 0.0);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(g.data.begin() + r * count, count, ga.begin() + r * cols + begin);
    t.accumulate(a, ga);
  });
}

Var concat_cols(std::span<const Var> parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  for (const auto& p : parts) {
    require(p.value().rows() == rows, "concat_cols: row counts differ");
    total += p.value().cols();
  }
  Tensor out = Tensor::matrix(rows, total);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t c = p.value().cols();
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(p.value().data.begin() + r * c, c, out.data.begin() + r * total + offset);
    offset += c;
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return parts.front().tape()->record(std::move(out), parts, [inputs, rows, total](Tape& t, const Tensor& g) {
    std::size_t offset = 0;
    for (const auto& p : inputs) {
      const std::size_t c = p.value().cols();
      if (t.needs_grad(p)) {
        std::vector<double> gp(rows * c);
        for (std::size_t r = 0; r < rows; ++r)
          std::copy_n(g.data.begin() + r * total + offset, c, gp.begin() + r * c);
        t.accumulate(p, gp);
      }
      offset += c;
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t count) {
  const Tensor& av = a.value();
  const std::size_t cols = av.cols();
  require(begin + count <= av.rows(), "slice_rows: range out of bounds");
  Tensor out = Tensor::matrix(count, cols);
  std::copy_n(av.data.begin() + begin * cols, count * cols, out.data.begin());
  const std::size_t total = av.size();
  return a.tape()->record(std::move(out), {a}, [a, begin, cols, total](Tape& t, const Tensor& g) {
    std::vector<double> ga(total, 0.0);
    std::copy(g.data.begin(), g.data.end(), ga.begin() + begin * cols);
    t.accumulate(a, ga);
  });
}

Var gather_rows(Var table, std::span<const std::size_t> ids) {
  const Tensor& tv = table.value();
  const std::size_t cols = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] >= tv.rows()) throw InputError("gather_rows: id " + std::to_string(ids[r]) + " out of range");
    std::copy_n(tv.data.begin() + ids[r] * cols, cols, out.data.begin() + r * cols);
  }
  std::vector<std::size_t> idv(ids.begin(), ids.end());
  const std::size_t total = tv.size();
  return table.tape()->record(std::move(out), {table}, [table, idv, cols, total](Tape& t, const Tensor& g) {
    std::vector<double> gt(total, 0.0);
    for (std::size_t r = 0; r < idv.size(); ++r)
      for (std::size_t c = 0; c < cols; ++c) gt[idv[r] * cols + c] += g.data[r * cols + c];
    t.accumulate(table, gt);
  });
}

Var mean_rows(Var a) {
  const Tensor& av = a.value();
  const std::size_t rows = av.rows(), cols = av.cols();
  Tensor out = Tensor::matrix(1, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.data[c] += av.data[r * cols + c];
  for (double& v : out.data) v /= static_cast<double>(rows);
  return a.tape()->record(std::move(out), {a}, [a, rows, cols](Tape& t, const Tensor& g) {
    std::vector<double> ga(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cols; ++c) ga[r * cols + c] = g.data[c] / static_cast<double>(rows);
    t.accumulate(a, ga);
  });
}

Var fake_quant(Var x, Var scale_var, int bits) {
  quant::check_bits(bits);
  if (!quant::is_quantized(bits)) return x;
  require(scale_var.value().size() == 1, "fake_quant: scale must be a scalar");
  const double delta = scale_var.value().data[0];
  Tensor out(x.value().shape, quant::fake_quant_forward(x.value().data, delta, bits));
  return x.tape()->record(std::move(out), {x, scale_var}, [x, scale_var, bits](Tape& t, const Tensor& g) {
    const double delta = scale_var.value().data[0];
    const auto& xs = x.value().data;
    if (t.needs_grad(x)) {
      auto gi = quant::ste_grad_input(xs, delta, bits);
      for (std::size_t i = 0; i < gi.size(); ++i) gi[i] *= g.data[i];
      t.accumulate(x, gi);
    }
    if (t.needs_grad(scale_var)) {
      const auto gs = quant::ste_grad_scale(xs, delta, bits);
      double total = 0.0;
      for (std::size_t i = 0; i < gs.size(); ++i) total += gs[i] * g.data[i];
      const double arr[1] = {total};
      t.accumulate(scale_var, arr);
    }
  });
}

Var tt_linear(Var x, std::span<const Var> cores, const tt::TensorShapePlan& plan) {
  require(cores.size() == plan.num_cores(), "tt_linear: wrong number of cores");
  const Tensor& xv = x.value();
  require(xv.cols() == plan.cols, "tt_linear: input feature dim differs from plan columns");
  std::vector<const double*> ptrs;
  for (const auto& c : cores) {
    ptrs.push_back(c.value().data.data());
  }
  for (std::size_t k = 0; k < cores.size(); ++k) {
    require(cores[k].value().shape == plan.core_shape(k), "tt_linear: core shape does not match plan");
  }
  const std::size_t batch = xv.rows();
  auto fwd = std::make_shared<tt::TTContraction>(tt::tt_contract(plan, ptrs, xv.data, batch));
  Tensor out(std::vector<std::size_t>{batch, plan.rows}, fwd->output);
  std::vector<Var> inputs(cores.begin(), cores.end());
  inputs.push_back(x);
  return x.tape()->record(std::move(out), inputs, [x, inputs, plan, fwd](Tape& t, const Tensor& g) {
    const std::size_t ncores = inputs.size() - 1;
    std::vector<const double*> ptrs(ncores);
    std::vector<std::vector<double>> grads(ncores);
    std::vector<double*> gptrs(ncores);
    for (std::size_t k = 0; k < ncores; ++k) {
      ptrs[k] = inputs[k].value().data.data();
      grads[k].assign(inputs[k].value().size(), 0.0);
      gptrs[k] = grads[k].data();
    }
    std::vector<double> gx;
    if (t.needs_grad(x)) gx.assign(x.value().size(), 0.0);
    tt::tt_contract_vjp(plan, ptrs, *fwd, g.data, gptrs, gx);
    for (std::size_t k = 0; k < ncores; ++k) t.accumulate(inputs[k], grads[k]);
    if (!gx.empty()) t.accumulate(x, gx);
  });
}

Var ttm_embedding(std::span<const std::size_t> ids, std::span<const Var> cores, const tt::TensorShapePlan& plan) {
  require(!cores.empty() && cores.size() == plan.num_cores(), "ttm_embedding: wrong number of cores");
  std::vector<const double*> ptrs;
  for (std::size_t k = 0; k < cores.size(); ++k) {
    require(cores[k].value().shape == plan.core_shape(k), "ttm_embedding: core shape does not match plan");
    ptrs.push_back(cores[k].value().data.data());
  }
  auto lookups = std::make_shared<std::vector<tt::TTMLookup>>();
  Tensor out = Tensor::matrix(ids.size(), plan.cols);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    lookups->push_back(tt::ttm_lookup(plan, ptrs, ids[r]));
    const auto row = tt::ttm_lookup_output(plan, lookups->back());
    std::copy(row.begin(), row.end(), out.data.begin() + r * plan.cols);
  }
  std::vector<Var> inputs(cores.begin(), cores.end());
  return cores.front().tape()->record(std::move(out), inputs, [inputs, plan, lookups](Tape& t, const Tensor& g) {
    const std::size_t ncores = inputs.size();
    std::vector<const double*> ptrs(ncores);
    std::vector<std::vector<double>> grads(ncores);
    std::vector<double*> gptrs(ncores);
    for (std::size_t k = 0; k < ncores; ++k) {
      ptrs[k] = inputs[k].value().data.data();
      grads[k].assign(inputs[k].value().size(), 0.0);
      gptrs[k] = grads[k].data();
    }
    for (std::size_t r = 0; r < lookups->size(); ++r) {
      tt::ttm_lookup_vjp(plan, ptrs, (*lookups)[r],
                         std::span<const double>(g.data).subspan(r * plan.cols, plan.cols), gptrs);
    }
    for (std::size_t k = 0; k < ncores; ++k) t.accumulate(inputs[k], grads[k]);
  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
  const Tensor& lv = logits.value();
  const std::size_t rows = lv.rows(), cols = lv.cols();
  require(targets.size() == rows, "cross_entropy: one target per row required");
  const auto ls = row_log_softmax(lv);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= cols) throw InputError("cross_entropy: target out of range");
    loss -= ls[r * cols + targets[r]];
  }
  loss /= static_cast<double>(rows);
  std::vector<std::size_t> tv(targets.begin(), targets.end());
  return logits.tape()->record(Tensor::scalar(loss), {logits}, [logits, tv, rows, cols](Tape& t, const Tensor& g) {
    auto p = row_softmax(logits.value());
    for (std::size_t r = 0; r < rows; ++r) p[r * cols + tv[r]] -= 1.0;
    const double s = g.data[0] / static_cast<double>(rows);
    for (double& v : p) v *= s;
    t.accumulate(logits, p);
  });
}

Var mse(Var a, Var b) {
  require(a.value().size() == b.value().size(), "mse: size mismatch");
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  const double n = static_cast<double>(av.size());
  double loss = 0.0;
  for (std::size_t i = 0; i < av.size(); ++i) loss += (av[i] - bv[i]) * (av[i] - bv[i]);
  loss /= n;
  return a.tape()->record(Tensor::scalar(loss), {a, b}, [a, b, n](Tape& t, const Tensor& g) {
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    std::vector<double> ga(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) ga[i] = 2.0 * (av[i] - bv[i]) / n * g.data[0];
    t.accumulate(a, ga);
    for (double& v : ga) v = -v;
    t.accumulate(b, ga);
  });
}

Var cosine_distance(Var a, Var b) {
  require(a.value().shape == b.value().shape, "cosine_distance: shape mismatch");
  const std::size_t rows = a.value().rows(), cols = a.value().cols();
  constexpr double kTiny = 1e-12;
  const auto& av = a.value().data;
  const auto& bv = b.value().data;
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      dot += av[r * cols + c] * bv[r * cols + c];
      na += av[r * cols + c] * av[r * cols + c];
      nb += bv[r * cols + c] * bv[r * cols + c];
    }
    total += dot / std::max(std::sqrt(na) * std::sqrt(nb), kTiny);
  }
  const double loss = 1.0 - total / static_cast<double>(rows);
  return a.tape()->record(Tensor::scalar(loss), {a, b}, [a, b, rows, cols](Tape& t, const Tensor& g) {
    const auto& av = a.value().data;
    const auto& bv = b.value().data;
    std::vector<double> ga(av.size(), 0.0), gb(bv.size(), 0.0);
    const double s = -g.data[0] / static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (std::size_t c = 0; c < cols; ++c) {
        dot += av[r * cols + c] * bv[r * cols + c];
        na += av[r * cols + c] * av[r * cols + c];
        nb += bv[r * cols + c] * bv[r * cols + c];
      }
      const double la = std::sqrt(na), lb = std::sqrt(nb);
      if (la * lb < kTiny) continue;
      const double cos = dot / (la * lb);
      for (std::size_t c = 0; c < cols; ++c) {
        const std::size_t i = r * cols + c;
        ga[i] = s * (bv[i] / (la * lb) - cos * av[i] / na);
        gb[i] = s * (av[i] / (la * lb) - cos * bv[i] / nb);
      }
    }
    t.accumulate(a, ga);
    t.accumulate(b, gb);
  });
}

Var soft_cross_entropy(Var target_logits, Var logits, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("temperature must be positive");
  const Tensor& tv = target_logits.value();
  const Tensor& sv = logits.value();
  require(tv.shape == sv.shape, "soft_cross_entropy: shape mismatch");
  Tensor ts = tv, ss = sv;
  for (double& v : ts.data) v /= temperature;
  for (double& v : ss.data) v /= temperature;
  auto q = std::make_shared<std::vector<double>>(row_softmax(ts));
  const auto ls = row_log_softmax(ss);
  const std::size_t rows = sv.rows(), cols = sv.cols();
  double loss = 0.0;
  for (std::size_t i = 0; i < ls.size(); ++i) loss -= (*q)[i] * ls[i];
  loss /= static_cast<double>(rows);
  return logits.tape()->record(Tensor::scalar(loss), {logits},
                               [logits, q, temperature, rows, cols](Tape& t, const Tensor& g) {
                                 Tensor ss = logits.value();
                                 for (double& v : ss.data) v /= temperature;
                                 auto p = row_softmax(ss);
                                 const double s = g.data[0] / (temperature * static_cast<double>(rows));
                                 for (std::size_t i = 0; i < p.size(); ++i) p[i] = (p[i] - (*q)[i]) * s;
                                 (void)cols;
                                 t.accumulate(logits, p);
                               });
}

Var distribution_cross_entropy(Var target_probs, Var scores) {
  const Tensor& pv = target_probs.value();
  const Tensor& sv = scores.value();
  require(pv.shape == sv.shape, "distribution_cross_entropy: shape mismatch");
  const auto ls = row_log_softmax(sv);
  const std::size_t rows = sv.rows(), cols = sv.cols();
  double loss = 0.0;
  for (std::size_t i = 0; i < ls.size(); ++i) {
    if (pv.data[i] != 0.0) loss -= pv.data[i] * ls[i];
  }
  loss /= static_cast<double>(rows);
  return scores.tape()->record(Tensor::scalar(loss), {scores},
                               [target_probs, scores, rows, cols](Tape& t, const Tensor& g) {
                                 const auto& pv = target_probs.value().data;
                                 auto p = row_softmax(scores.value());
                                 const double s = g.data[0] / static_cast<double>(rows);
                                 for (std::size_t r = 0; r < rows; ++r) {
                                   double mass = 0.0;
                                   for (std::size_t c = 0; c < cols; ++c) mass += pv[r * cols + c];
                                   for (std::size_t c = 0; c < cols; ++c) {
                                     const std::size_t i = r * cols + c;
                                     p[i] = (p[i] * mass - pv[i]) * s;
                                   }
                                 }
                                 t.accumulate(scores, p);
                               });
}

Var sum(std::span<const Var> scalars) {
  require(!scalars.empty(), "sum: no terms");
  double total = 0.0;
  for (const auto& s : scalars) {
    require(s.value().size() == 1, "sum: terms must be scalars");
    total += s.value().data[0];
  }
  std::vector<Var> inputs(scalars.begin(), scalars.end());
  return scalars.front().tape()->record(Tensor::scalar(total), scalars, [inputs](Tape& t, const Tensor& g) {
    for (const auto& s : inputs) t.accumulate(s, g.data);
  });
}

}  // namespace ttq::ad
