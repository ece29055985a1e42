// Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any fails.
// Pass a criterion number (1-9) to run just that one.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "oracles.hpp"
#include "ttq/checkpoint.hpp"
#include "ttq/dataset.hpp"
#include "ttq/distill.hpp"
#include "ttq/model.hpp"
#include "ttq/quant.hpp"
#include "ttq/tensor_core.hpp"
#include "ttq/train.hpp"

using namespace ttq;
using tt::Format;
using tt::TensorShapePlan;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

template <class... A>
std::string fmt(const char* f, A... a) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, a...);
  return buf;
}

model::ModelConfig toy(int bits) {
  model::ModelConfig c;
  c.weight_bits = bits;
  c.embedding.rank = 4;
  c.attention.rank = 4;
  c.feed_forward.rank = 4;
  c.head.rank = 4;
  return c;
}

data::Dataset corpus() {
  data::SyntheticSpec s;
  s.num_examples = 2000;
  return data::generate_synthetic(s);
}

/// Random factor list of length d with product <= 64.
std::vector<std::size_t> random_factors(std::size_t d, std::mt19937_64& rng) {
  const std::size_t cap = d == 1 ? 64 : d == 2 ? 8 : 4;
  std::uniform_int_distribution<std::size_t> f(1, cap);
  std::vector<std::size_t> out(d);
  for (auto& x : out) x = f(rng);
  return out;
}

std::size_t product(const std::vector<std::size_t>& v) {
  std::size_t p = 1;
  for (auto x : v) p *= x;
  return p;
}

std::vector<std::size_t> random_ranks(std::size_t bonds, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> r(1, 8);
  std::vector<std::size_t> out(bonds + 1, 1);
  for (std::size_t i = 1; i < bonds; ++i) out[i] = r(rng);
  return out;
}

Outcome criterion1() {
  double worst = 0.0;
  std::size_t plans = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t d = 1; d <= 3; ++d) {
      auto rf = random_factors(d, rng), cf = random_factors(d, rng);
      // Logical sizes sometimes below the padded product.
      std::uniform_int_distribution<std::size_t> crop(0, 1);
      const std::size_t rows = std::max<std::size_t>(1, product(rf) - crop(rng) * (product(rf) / 3));
      const std::size_t cols = std::max<std::size_t>(1, product(cf) - crop(rng) * (product(cf) / 3));

      auto tt_plan = TensorShapePlan::tt(rows, cols, rf, cf, random_ranks(2 * d, rng));
      auto cores = oracle::random_cores(tt_plan, rng);
      const auto dense = oracle::tt_dense(cores, tt_plan);
      const auto x = oracle::random_vector(cols, rng);
      worst = std::max(worst, oracle::rel_err(tt::tt_matvec(cores, tt_plan, x), oracle::matvec(dense, x)));

      auto ttm_plan = TensorShapePlan::ttm(rows, cols, rf, cf, random_ranks(d, rng));
      auto tcores = oracle::random_cores(ttm_plan, rng);
      const auto table = oracle::tt_dense(tcores, ttm_plan);
      for (std::size_t row = 0; row < rows; ++row) {
        std::vector<double> want(table.data.begin() + static_cast<std::ptrdiff_t>(row * cols),
                                 table.data.begin() + static_cast<std::ptrdiff_t>((row + 1) * cols));
        worst = std::max(worst, oracle::rel_err(tt::ttm_row_lookup(tcores, ttm_plan, row), want));
      }
      plans += 2;
    }
  }
  return {worst < 1e-12, fmt("%zu plans, max rel err %.3g (< 1e-12)", plans, worst)};
}

Outcome criterion2() {
  const auto ranks = TensorShapePlan::uniform_ranks(Format::TT, 2, 10);
  const auto att = tt::param_count(TensorShapePlan::tt(768, 768, {24, 32}, {32, 24}, ranks));
  const auto ffn = tt::param_count(TensorShapePlan::tt(768, 3072, {32, 24}, {48, 64}, ranks));
  // Hand sums of r_{k-1} * n_k * r_k over the four cores.
  const std::uint64_t att_hand = 1 * 24 * 10 + 10 * 32 * 10 + 10 * 32 * 10 + 10 * 24 * 1;
  const std::uint64_t ffn_hand = 1 * 32 * 10 + 10 * 24 * 10 + 10 * 48 * 10 + 10 * 64 * 1;
  const bool ok = att.param_count_compressed == 6880 && att_hand == 6880 && att.param_count_dense == 589824 &&
                  ffn.param_count_compressed == 8160 && ffn_hand == 8160 && ffn.param_count_dense == 2359296;
  return {ok, fmt("attention %llu / %llu, ffn %llu / %llu", (unsigned long long)att.param_count_compressed,
                  (unsigned long long)att.param_count_dense, (unsigned long long)ffn.param_count_compressed,
                  (unsigned long long)ffn.param_count_dense)};
}

Outcome criterion3() {
  auto one = [](double x) { return std::vector<double>{x}; };
  const double in_range = quant::ste_grad_scale(one(0.4), 1.0, 8)[0];
  const double hi = quant::ste_grad_scale(one(10.0), 0.1, 4)[0];
  const double lo = quant::ste_grad_scale(one(-10.0), 0.1, 4)[0];
  const double ind_in = quant::ste_grad_input(one(0.4), 1.0, 8)[0];
  const double ind_out = quant::ste_grad_input(one(10.0), 0.1, 4)[0];
  const bool ok = in_range == -0.4 && hi == 7.0 && lo == -8.0 && ind_in == 1.0 && ind_out == 0.0;
  return {ok, fmt("scale grads %g, %g, %g; input indicator %g, %g", in_range, hi, lo, ind_in, ind_out)};
}

Outcome criterion4() {
  model::TransformerModel m(toy(32));
  const data::Example ex{2, {5, 17, 33, 2, 60, 9}, {0, 1, 0, 0, 2, 0}};
  auto loss_value = [&] {
    ad::Tape t(false);
    return train::example_loss(m.forward(t, ex.tokens, model::Mode::Train), ex).value()[0];
  };
  ad::Tape tape;
  const auto loss = train::example_loss(m.forward(tape, ex.tokens, model::Mode::Train), ex);
  const auto grads = tape.backward(loss);
  double worst = 0.0;
  std::size_t entries = 0;
  std::string where;
  for (auto* p : m.params()) {
    const Tensor* g = grads.find(*p);
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double fd = oracle::central_difference(loss_value, &p->value.data[i], 1e-5);
      const double an = g ? g->data[i] : 0.0;
      // Relative error with an absolute floor for entries whose gradient is numerically zero.
      const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
      if (err > worst) {
        worst = err;
        where = p->name;
      }
      ++entries;
    }
  }
  return {worst < 1e-4, fmt("%zu entries, max rel err %.3g at %s (< 1e-4)", entries, worst, where.c_str())};
}

Outcome criterion5() {
  const auto ds = corpus();
  train::TrainConfig tc;
  tc.epochs = 20;
  tc.lr = 3e-3;
  auto run = [&](const model::ModelConfig& c) {
    model::TransformerModel m(c);
    train::train_end_to_end(m, ds, tc);
    return train::evaluate(model::snapshot(m), ds.test).intent_accuracy * 100.0;
  };
  const double dense = run(model::dense_variant(toy(32)));
  const double int8 = run(toy(8));
  const double int2 = run(toy(2));
  const bool ok = dense - int8 <= 3.0 && dense - int2 <= 5.0 && int8 >= 90.0 && int2 >= 90.0;
  return {ok, fmt("test intent accuracy: dense %.1f, INT8 %.1f, INT2 %.1f (%zu examples)", dense, int8, int2,
                  ds.train.size() + ds.dev.size() + ds.test.size())};
}

/// Mean row entropy of the teacher's attention, per layer.
double attention_entropy(const std::vector<Tensor>& heads) {
  double total = 0.0;
  for (const auto& p : heads) {
    double layer = 0.0;
    for (std::size_t r = 0; r < p.rows(); ++r)
      for (std::size_t c = 0; c < p.cols(); ++c)
        if (p(r, c) > 0) layer -= p(r, c) * std::log(p(r, c));
    total += layer / static_cast<double>(p.rows());
  }
  return total / static_cast<double>(heads.size());
}

double softmax_entropy(const Tensor& logits) {
  const double mx = *std::max_element(logits.data.begin(), logits.data.end());
  double z = 0.0, h = 0.0;
  for (double v : logits.data) z += std::exp(v - mx);
  for (double v : logits.data) {
    const double p = std::exp(v - mx) / z;
    h -= p * std::log(p);
  }
  return h;
}

Outcome criterion6() {
  // A rank cap of 64 exceeds every unfolding rank of the toy shapes, so the copy is exact.
  model::TransformerModel teacher(model::dense_variant(toy(32)));
  auto layout = toy(32);
  layout.embedding.rank = 64;
  layout.attention.rank = 64;
  layout.feed_forward.rank = 64;
  layout.head.rank = 64;
  const auto student = model::exact_tt_copy(teacher, layout);
  const auto ds = corpus();
  double mse_cos = 0.0, ce_gap = 0.0;
  for (std::size_t i = 0; i < 50; ++i) {
    const auto& ids = ds.train[i].tokens;
    ad::Tape a(false), b(false);
    const auto tv = distill::TraceValues::from(teacher.forward(a, ids, model::Mode::InferFp));
    const auto sv = distill::TraceValues::from(student.forward(b, ids, model::Mode::Train));
    const auto t = distill::loss_terms(tv, sv, 1.0);
    mse_cos = std::max({mse_cos, t.mse_emb, std::abs(t.cos_emb)});
    for (std::size_t l = 0; l < t.layers(); ++l) {
      mse_cos = std::max({mse_cos, t.mse[l], std::abs(t.cos[l])});
      ce_gap = std::max(ce_gap, std::abs(t.ce_attn[l] - attention_entropy(tv.attn[l])));
    }
    ce_gap = std::max(ce_gap, std::abs(t.ce_soft - softmax_entropy(tv.intent_logits)));
  }
  return {mse_cos < 1e-8 && ce_gap < 1e-6,
          fmt("50 sequences: max mse/cos term %.3g (< 1e-8), max CE gap to entropy %.3g (< 1e-6)", mse_cos, ce_gap)};
}

Outcome criterion7() {
  const auto ds = corpus();
  model::TransformerModel teacher(model::dense_variant(toy(32)));
  train::TrainConfig tc;
  tc.epochs = 10;
  tc.lr = 3e-3;
  train::train_end_to_end(teacher, ds, tc);
  const double t_acc = train::evaluate(teacher, ds.test).intent_accuracy * 100.0;
  auto sc = toy(8);
  sc.seed = 5;
  model::TransformerModel student(sc);
  distill::DistillConfig dc;
  dc.stage_epochs = 2;
  dc.final_epochs = 100;
  dc.stage_lr = 1e-3;
  dc.final_lr = 5e-5;
  const auto r = distill::run_distillation(teacher, student, ds, dc);
  const double s_acc = r.final_test.intent_accuracy * 100.0;
  return {t_acc - s_acc <= 3.0, fmt("test intent accuracy: teacher %.1f, INT8 TT student %.1f", t_acc, s_acc)};
}

Outcome criterion8() {
  const double int2 = static_cast<double>(model::model_size_bytes(model::atis_config(2)).bytes);
  const double int4 = static_cast<double>(model::model_size_bytes(model::atis_config(4)).bytes);
  const double gap = std::abs(int4 - int2) / int4;
  const double f50 = model::model_flops(model::bert_config(50, 8), 128).flops;
  const double f30 = model::model_flops(model::bert_config(30, 8), 128).flops;
  const double ratio = f50 / f30;
  const double target = 3.8 / 1.8;
  const double ratio_dev = std::abs(ratio - target) / target;
  const double i4 = model::model_flops(model::atis_config(4), 128).flops;
  const double i8 = model::model_flops(model::atis_config(8), 128).flops;
  const bool ok = gap < 0.15 && ratio_dev < 0.15 && i4 == 0.5 * i8;
  return {ok, fmt("(a) INT2 %.0f B vs INT4 %.0f B, gap %.1f%%; (b) rank50/rank30 flops %.3f vs %.3f (%.1f%% off); "
                  "(c) INT4/INT8 flops %.6f",
                  int2, int4, 100 * gap, ratio, target, 100 * ratio_dev, i4 / i8)};
}

Outcome criterion9() {
  bool ok = true;
  std::ostringstream detail;
  const auto ds = corpus();
  const auto seqs = data::token_sequences(ds.train, 32);
  for (int bits : {32, 8, 4, 2}) {
    model::TransformerModel m(toy(bits));
    if (m.has_quantized_layers()) {
      model::init_activation_scales(m, seqs);
      model::calibrate_int_stages(m, seqs);
    }
    io::CheckpointLayout layout;
    const auto bytes = io::serialize(m, &layout);
    const auto back = io::deserialize(bytes);
    const bool same = io::serialize(back) == bytes &&
                      train::save_params(back) == train::save_params(model::snapshot(m));
    const auto expected = model::model_size_bytes(m).bytes;
    const bool sized = layout.payload_bytes == expected && bytes.size() == expected + layout.metadata_bytes;
    ok = ok && same && sized;
    detail << (bits == 32 ? "" : "; ") << "w" << bits << ": " << bytes.size() << " B = " << expected << " + "
           << layout.metadata_bytes << " header" << (same ? "" : " (round trip differs)");
  }
  return {ok, detail.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"TT/TTM oracle equivalence", criterion1},     {"parameter counts", criterion2},
      {"STE branches", criterion3},                  {"full-model gradient check", criterion4},
      {"end-to-end INT8/INT2 training", criterion5}, {"distillation floor", criterion6},
      {"layer-by-layer distillation", criterion7},   {"size and FLOPs accounting", criterion8},
      {"checkpoint round trip", criterion9}};
  const int only = argc > 1 ? std::atoi(argv[1]) : 0;
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only && static_cast<int>(i) + 1 != only) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("criterion %zu [%s]: %s (%.1fs) %s\n", i + 1, criteria[i].first, o.pass ? "PASS" : "FAIL", secs,
                o.detail.c_str());
    std::fflush(stdout);
    failed += o.pass ? 0 : 1;
  }
  return failed == 0 ? 0 : 1;
}
