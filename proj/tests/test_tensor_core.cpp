#include <doctest.h>

#include <random>

#include "oracles.hpp"
#include "ttq/errors.hpp"
#include "ttq/tensor_core.hpp"

using namespace ttq;
using tt::Format;
using tt::TensorShapePlan;

TEST_CASE("plan: explicit attention factors for 768x768") {
  auto p = TensorShapePlan::tt(768, 768, {24, 32}, {32, 24}, TensorShapePlan::uniform_ranks(Format::TT, 2, 10));
  CHECK(p.padded_rows() == 768);
  CHECK(p.padded_cols() == 768);
  CHECK_FALSE(p.is_padded());
  CHECK(p.ranks == std::vector<std::size_t>{1, 10, 10, 10, 1});
}

TEST_CASE("plan: 1x1 identity case") {
  auto p = tt::plan_factorization(1, 1, 1, 1, Format::TT);
  CHECK(p.row_factors == std::vector<std::size_t>{1});
  CHECK(p.col_factors == std::vector<std::size_t>{1});
  CHECK_FALSE(p.is_padded());
}

TEST_CASE("plan: padded BERT embedding from joint shape (64,80,80,60)") {
  // 64*80*80*60 split as (8x8, 20x4, 20x4, 10x6).
  auto p = TensorShapePlan::ttm(30522, 768, {8, 20, 20, 10}, {8, 4, 4, 6},
                                TensorShapePlan::uniform_ranks(Format::TTM, 4, 30));
  std::uint64_t joint = 1;
  for (std::size_t k = 0; k < 4; ++k) joint *= p.row_factors[k] * p.col_factors[k];
  CHECK(joint == 64ull * 80 * 80 * 60);
  CHECK(joint == 24576000ull);
  CHECK(p.padded_rows() * p.padded_cols() >= 30522ull * 768);
  CHECK(p.is_padded());
}

TEST_CASE("plan: automatic factors are balanced and cover the matrix") {
  for (auto [m, n, d] : {std::tuple{768, 3072, 2}, {100, 37, 3}, {64, 64, 3}, {7, 5, 2}}) {
    auto p = tt::plan_factorization(m, n, d, 3, Format::TT);
    CHECK(p.padded_rows() >= std::size_t(m));
    CHECK(p.padded_cols() >= std::size_t(n));
    CHECK(p.order() == std::size_t(d));
    CHECK_NOTHROW(p.validate());
  }
}

TEST_CASE("plan: errors") {
  CHECK_THROWS_AS(tt::plan_factorization(8, 8, 4, 2, Format::TT), PlanningError);  // log2(8) = 3
  CHECK_THROWS_AS(tt::plan_factorization(0, 8, 1, 2, Format::TT), PlanningError);
  CHECK_THROWS_AS(TensorShapePlan::tt(6, 6, {2, 3}, {3, 2}, {1, 2, 1}), StructuralError);
  CHECK_THROWS_AS(TensorShapePlan::tt(6, 6, {2, 3}, {3, 2}, {2, 2, 2, 2, 1}), StructuralError);
  CHECK_THROWS_AS(TensorShapePlan::tt(7, 6, {2, 3}, {3, 2}, {1, 2, 2, 2, 1}), StructuralError);
}

TEST_CASE("tt_to_dense: rank-1 outer product") {
  auto p = TensorShapePlan::tt(2, 2, {2}, {2}, {1, 1, 1});
  std::vector<Tensor> cores{Tensor({1, 2, 1}, {1, 2}), Tensor({1, 2, 1}, {3, 4})};
  auto w = tt::tt_to_dense(cores, p);
  CHECK(w.data == std::vector<double>{3, 4, 6, 8});
}

TEST_CASE("tt_to_dense: all-ones cores give an all-ones matrix") {
  auto p = TensorShapePlan::tt(6, 10, {2, 3}, {5, 2}, {1, 1, 1, 1, 1});
  std::vector<Tensor> cores;
  for (std::size_t k = 0; k < 4; ++k) cores.emplace_back(p.core_shape(k), 1.0);
  auto w = tt::tt_to_dense(cores, p);
  for (double v : w.data) CHECK(v == 1.0);
}

TEST_CASE("tt_to_dense: random 6x6 rank 2 against the slice-product oracle") {
  std::mt19937_64 rng(11);
  auto p = TensorShapePlan::tt(6, 6, {2, 3}, {3, 2}, {1, 2, 2, 2, 1});
  auto cores = oracle::random_cores(p, rng);
  auto got = tt::tt_to_dense(cores, p);
  auto want = oracle::tt_dense(cores, p);
  CHECK(oracle::rel_err(got.data, want.data) < 1e-12);
}

TEST_CASE("tt_to_dense: padding is cropped") {
  std::mt19937_64 rng(3);
  auto p = TensorShapePlan::tt(5, 7, {2, 3}, {2, 4}, {1, 2, 3, 2, 1});
  auto cores = oracle::random_cores(p, rng);
  auto got = tt::tt_to_dense(cores, p);
  CHECK(got.shape == std::vector<std::size_t>{5, 7});
  CHECK(oracle::rel_err(got.data, oracle::tt_dense(cores, p).data) < 1e-12);
}

TEST_CASE("tt_to_dense: mismatched core shape is a structural error") {
  auto p = TensorShapePlan::tt(6, 6, {2, 3}, {3, 2}, {1, 2, 2, 2, 1});
  std::vector<Tensor> cores;
  for (std::size_t k = 0; k < 4; ++k) cores.emplace_back(p.core_shape(k), 1.0);
  cores[1] = Tensor({3, 3, 2}, 1.0);
  CHECK_THROWS_AS(tt::tt_to_dense(cores, p), StructuralError);
  cores.pop_back();
  CHECK_THROWS_AS(tt::tt_to_dense(cores, p), StructuralError);
}

TEST_CASE("ttm_to_dense: single core is the reshaped core") {
  std::mt19937_64 rng(5);
  auto p = TensorShapePlan::ttm(3, 4, {3}, {4}, {1, 1});
  auto cores = oracle::random_cores(p, rng);
  auto w = tt::ttm_to_dense(cores, p);
  CHECK(w.data == cores[0].data);
}

TEST_CASE("ttm_to_dense: rank-1 Kronecker structure") {
  auto p = TensorShapePlan::ttm(4, 6, {2, 2}, {2, 3}, {1, 1, 1});
  std::vector<Tensor> cores{Tensor({1, 2, 2, 1}, {1, 2, 3, 4}), Tensor({1, 2, 3, 1}, {1, -1, 2, 0.5, 3, -2})};
  auto w = tt::ttm_to_dense(cores, p);
  // Kronecker product A (x) B, written out directly.
  const double a[2][2] = {{1, 2}, {3, 4}};
  const double b[2][3] = {{1, -1, 2}, {0.5, 3, -2}};
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(w(i, j) == a[i / 2][j / 3] * b[i % 2][j % 3]);
  CHECK(oracle::rel_err(w.data, oracle::tt_dense(cores, p).data) < 1e-15);
}

TEST_CASE("ttm_to_dense: zero cores give zero") {
  auto p = TensorShapePlan::ttm(8, 6, {2, 4}, {2, 3}, {1, 2, 1});
  std::vector<Tensor> cores{Tensor(p.core_shape(0)), Tensor(p.core_shape(1))};
  for (double v : tt::ttm_to_dense(cores, p).data) CHECK(v == 0.0);
}

TEST_CASE("tt_matvec: all-ones rank-1 cores sum the input") {
  auto p = TensorShapePlan::tt(6, 10, {2, 3}, {5, 2}, {1, 1, 1, 1, 1});
  std::vector<Tensor> cores;
  for (std::size_t k = 0; k < 4; ++k) cores.emplace_back(p.core_shape(k), 1.0);
  std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  auto y = tt::tt_matvec(cores, p, x);
  REQUIRE(y.size() == 6);
  for (double v : y) CHECK(v == 55.0);
}

TEST_CASE("tt_matvec: 768x768 rank 10 against the dense reconstruction") {
  std::mt19937_64 rng(21);
  auto p = TensorShapePlan::tt(768, 768, {24, 32}, {32, 24}, TensorShapePlan::uniform_ranks(Format::TT, 2, 10));
  auto cores = oracle::random_cores(p, rng);
  auto x = oracle::random_vector(768, rng);
  auto y = tt::tt_matvec(cores, p, x);
  auto want = oracle::matvec(tt::tt_to_dense(cores, p), x);
  CHECK(oracle::rel_err(y, want) < 1e-6);
}

TEST_CASE("tt_matvec: zero input and length errors") {
  std::mt19937_64 rng(2);
  auto p = TensorShapePlan::tt(6, 6, {2, 3}, {3, 2}, {1, 2, 2, 2, 1});
  auto cores = oracle::random_cores(p, rng);
  for (double v : tt::tt_matvec(cores, p, std::vector<double>(6, 0.0))) CHECK(v == 0.0);
  CHECK_THROWS_AS(tt::tt_matvec(cores, p, std::vector<double>(5, 1.0)), InputError);
}

TEST_CASE("tt_matvec: counter matches the stage geometry") {
  std::mt19937_64 rng(8);
  auto p = TensorShapePlan::tt(12, 20, {3, 4}, {4, 5}, {1, 2, 3, 2, 1});
  auto cores = oracle::random_cores(p, rng);
  tt::ContractionCounter counter;
  tt::tt_matvec(cores, p, oracle::random_vector(20, rng), &counter);
  std::uint64_t expect = 0;
  for (const auto& s : tt::contraction_stages(p, 1)) expect += s.multiplies();
  CHECK(counter.multiplies == expect);
  CHECK(tt::tt_matvec_multiplies(p) == expect);
}

TEST_CASE("tt_contract: batched rows equal independent matvecs") {
  std::mt19937_64 rng(4);
  auto p = TensorShapePlan::tt(9, 8, {3, 3}, {2, 4}, {1, 3, 2, 3, 1});
  auto cores = oracle::random_cores(p, rng);
  auto w = oracle::tt_dense(cores, p);
  const std::size_t batch = 5;
  auto x = oracle::random_vector(batch * 8, rng);
  auto ptrs = tt::core_pointers(cores);
  auto res = tt::tt_contract(p, ptrs, x, batch);
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> xb(x.begin() + b * 8, x.begin() + (b + 1) * 8);
    std::vector<double> yb(res.output.begin() + b * 9, res.output.begin() + (b + 1) * 9);
    CHECK(oracle::rel_err(yb, oracle::matvec(w, xb)) < 1e-12);
  }
}

TEST_CASE("ttm_row_lookup: single core returns the slice") {
  std::mt19937_64 rng(6);
  auto p = TensorShapePlan::ttm(5, 3, {5}, {3}, {1, 1});
  auto cores = oracle::random_cores(p, rng);
  auto row = tt::ttm_row_lookup(cores, p, 2);
  CHECK(row == std::vector<double>(cores[0].data.begin() + 6, cores[0].data.begin() + 9));
}

TEST_CASE("ttm_row_lookup: random 8x6 rank 2, row 5") {
  std::mt19937_64 rng(9);
  auto p = TensorShapePlan::ttm(8, 6, {2, 4}, {2, 3}, {1, 2, 1});
  auto cores = oracle::random_cores(p, rng);
  auto w = oracle::tt_dense(cores, p);
  auto row = tt::ttm_row_lookup(cores, p, 5);
  std::vector<double> want(w.data.begin() + 30, w.data.begin() + 36);
  CHECK(oracle::rel_err(row, want) < 1e-12);
}

TEST_CASE("ttm_row_lookup: zero cores and range errors") {
  auto p = TensorShapePlan::ttm(8, 6, {2, 4}, {2, 3}, {1, 2, 1});
  std::vector<Tensor> cores{Tensor(p.core_shape(0)), Tensor(p.core_shape(1))};
  for (double v : tt::ttm_row_lookup(cores, p, 0)) CHECK(v == 0.0);
  CHECK_THROWS_AS(tt::ttm_row_lookup(cores, p, 8), InputError);
}

TEST_CASE("param_count: attention and FFN shapes") {
  auto att = TensorShapePlan::tt(768, 768, {24, 32}, {32, 24}, TensorShapePlan::uniform_ranks(Format::TT, 2, 10));
  auto r = tt::param_count(att);
  CHECK(r.param_count_compressed == 240 + 3200 + 3200 + 240);
  CHECK(r.param_count_compressed == 6880);
  CHECK(r.param_count_dense == 589824);
  CHECK(r.compression_ratio == doctest::Approx(589824.0 / 6880.0));
  auto ffn = TensorShapePlan::tt(768, 3072, {32, 24}, {48, 64}, TensorShapePlan::uniform_ranks(Format::TT, 2, 10));
  auto f = tt::param_count(ffn);
  CHECK(f.param_count_compressed == 320 + 2400 + 4800 + 640);
  CHECK(f.param_count_compressed == 8160);
  CHECK(f.param_count_dense == 2359296);
}

TEST_CASE("param_count: single-core TTM is not compressed") {
  auto p = TensorShapePlan::ttm(12, 7, {12}, {7}, {1, 1});
  CHECK(tt::param_count(p).param_count_compressed == 84);
  CHECK(tt::param_count(p).compression_ratio == 1.0);
}

TEST_CASE("flops_estimate: dense matvec counts and bit weighting") {
  auto p = TensorShapePlan::tt(768, 768, {24, 32}, {32, 24}, TensorShapePlan::uniform_ranks(Format::TT, 2, 10));
  auto fp = tt::flops_estimate(p, 32, 32, 1, true);
  CHECK(fp.flops == 1179648.0);
  CHECK_FALSE(fp.fixed_point);
  auto i8 = tt::flops_estimate(p, 8, 8, 1, true);
  CHECK(i8.flops == 1179648.0);
  CHECK(i8.fixed_point);
  auto i4 = tt::flops_estimate(p, 4, 8, 1, true);
  CHECK(i4.flops == 0.5 * fp.flops);
  CHECK(tt::flops_estimate(p, 8, 8, 128, false).flops == 128.0 * tt::flops_estimate(p, 8, 8, 1, false).flops);
  CHECK(tt::op_weight(2, 8) == 0.25);
  CHECK_THROWS_AS(tt::flops_estimate(p, 3, 8, 1, false), ParameterError);
}

TEST_CASE("flops_estimate: factorized count is 2 x stage multiplies") {
  auto p = TensorShapePlan::tt(768, 3072, {32, 24}, {48, 64}, TensorShapePlan::uniform_ranks(Format::TT, 2, 10));
  // Column stages: 48*64*10 then 48*10*10; row stages: 24*10*10 then 32*24*10.
  const double mults = 48.0 * 64 * 10 + 48.0 * 10 * 10 + 24.0 * 10 * 10 + 32.0 * 24 * 10;
  CHECK(tt::tt_matvec_multiplies(p) == static_cast<std::uint64_t>(mults));
  CHECK(tt::flops_estimate(p, 32, 32, 1, false).flops == 2.0 * mults);
}

TEST_CASE("transposed plan mirrors the core chain") {
  std::mt19937_64 rng(13);
  auto p = TensorShapePlan::tt(6, 8, {2, 3}, {2, 4}, {1, 2, 3, 2, 1});
  auto t = p.transposed();
  CHECK(t.rows == 8);
  CHECK(t.cols == 6);
  CHECK(tt::param_count(t).param_count_compressed == tt::param_count(p).param_count_compressed);
  auto cores = oracle::random_cores(p, rng);
  std::vector<Tensor> rev;
  for (std::size_t k = cores.size(); k-- > 0;) {
    const auto& c = cores[k];
    CHECK(t.core_shape(cores.size() - 1 - k) == std::vector<std::size_t>{c.shape[2], c.shape[1], c.shape[0]});
    Tensor r({c.shape[2], c.shape[1], c.shape[0]});
    for (std::size_t a = 0; a < c.shape[0]; ++a)
      for (std::size_t m = 0; m < c.shape[1]; ++m)
        for (std::size_t b = 0; b < c.shape[2]; ++b)
          r.data[(b * c.shape[1] + m) * c.shape[0] + a] = c.data[(a * c.shape[1] + m) * c.shape[2] + b];
    rev.push_back(std::move(r));
  }
  // Reversed cores give W^T with digit-reversed indices.
  auto reverse_digits = [](std::size_t idx, const std::vector<std::size_t>& radix) {
    auto dg = oracle::digits(idx, radix);
    std::size_t out = 0;
    for (std::size_t k = radix.size(); k-- > 0;) out = out * radix[k] + dg[k];
    return out;
  };
  auto w = oracle::tt_dense(cores, p);
  auto wt = oracle::tt_dense(rev, t);
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(wt(reverse_digits(j, p.col_factors), reverse_digits(i, p.row_factors)) ==
            doctest::Approx(w(i, j)).epsilon(1e-12));
}

TEST_CASE("exact TT and TTM copies reproduce dense matrices") {
  std::mt19937_64 rng(17);
  Tensor d = Tensor::matrix(6, 10);
  for (double& v : d.data) v = oracle::random_vector(1, rng)[0];
  auto e = tt::exact_tt_from_dense(d, {2, 3}, {5, 2});
  CHECK(oracle::rel_err(oracle::tt_dense(e.cores, e.plan).data, d.data) < 1e-15);
  auto m = tt::exact_ttm_from_dense(d, {2, 3}, {5, 2});
  CHECK(oracle::rel_err(oracle::tt_dense(m.cores, m.plan).data, d.data) < 1e-15);
  Tensor odd = Tensor::matrix(5, 7);
  for (double& v : odd.data) v = oracle::random_vector(1, rng)[0];
  auto p = tt::exact_tt_from_dense(odd, {2, 3}, {2, 4});
  CHECK(oracle::rel_err(tt::tt_to_dense(p.cores, p.plan).data, odd.data) < 1e-15);
}
