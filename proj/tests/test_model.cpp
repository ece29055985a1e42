#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "ttq/errors.hpp"
#include "ttq/model.hpp"
#include "ttq/ops.hpp"
#include "ttq/quant.hpp"

using namespace ttq;
using model::Mode;

namespace {

model::ModelConfig toy(int bits = 32) {
  model::ModelConfig c;
  c.weight_bits = bits;
  c.embedding.rank = 4;
  c.attention.rank = 4;
  c.feed_forward.rank = 4;
  c.head.rank = 4;
  return c;
}

Tensor random_matrix(std::size_t r, std::size_t c, std::mt19937_64& rng, double s = 1.0) {
  Tensor t = Tensor::matrix(r, c);
  std::normal_distribution<double> n(0.0, s);
  for (double& v : t.data) v = n(rng);
  return t;
}

Tensor run(const model::LinearLayer& l, const Tensor& x, Mode mode) {
  ad::Tape tape(false);
  return l.forward(tape, tape.constant(x), mode).value();
}

// ---- Test-side dense encoder, written from the textbook definition. ----

Tensor linear(const Tensor& x, const model::LinearLayer& l) {
  Tensor w = l.dense_weight();
  Tensor y = Tensor::matrix(x.rows(), w.rows());
  for (std::size_t r = 0; r < x.rows(); ++r)
    for (std::size_t o = 0; o < w.rows(); ++o) {
      double s = l.bias.value.data[o];
      for (std::size_t i = 0; i < w.cols(); ++i) s += x(r, i) * w(o, i);
      y(r, o) = s;
    }
  return y;
}

Tensor layer_norm(const Tensor& x, const model::LayerNorm& ln) {
  Tensor y = x;
  for (std::size_t r = 0; r < x.rows(); ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < x.cols(); ++c) mean += x(r, c);
    mean /= x.cols();
    for (std::size_t c = 0; c < x.cols(); ++c) var += (x(r, c) - mean) * (x(r, c) - mean);
    var /= x.cols();
    for (std::size_t c = 0; c < x.cols(); ++c)
      y(r, c) = (x(r, c) - mean) / std::sqrt(var + 1e-5) * ln.gamma.value.data[c] + ln.beta.value.data[c];
  }
  return y;
}

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x)));
}

Tensor reference_encoder(const model::EncoderBlock& b, const Tensor& x) {
  const std::size_t n = x.rows(), hidden = x.cols(), dh = hidden / b.heads;
  Tensor q = linear(x, b.query), k = linear(x, b.key), v = linear(x, b.value);
  Tensor ctx = Tensor::matrix(n, hidden);
  for (std::size_t h = 0; h < b.heads; ++h)
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dh; ++c) dot += q(i, h * dh + c) * k(j, h * dh + c);
        s[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (double& e : s) z += (e = std::exp(e - mx));
      for (std::size_t j = 0; j < n; ++j)
        for (std::size_t c = 0; c < dh; ++c) ctx(i, h * dh + c) += s[j] / z * v(j, h * dh + c);
    }
  Tensor a = linear(ctx, b.output);
  for (std::size_t i = 0; i < a.size(); ++i) a.data[i] += x.data[i];
  Tensor h1 = layer_norm(a, b.ln1);
  Tensor up = linear(h1, b.ffn_up);
  for (double& e : up.data) e = gelu(e);
  Tensor down = linear(up, b.ffn_down);
  for (std::size_t i = 0; i < down.size(); ++i) down.data[i] += h1.data[i];
  return layer_norm(down, b.ln2);
}

}  // namespace

TEST_CASE("tt linear: all-ones rank-1 full precision sums the input") {
  model::Rng rng(1);
  auto plan = tt::TensorShapePlan::tt(6, 10, {2, 3}, {5, 2}, {1, 1, 1, 1, 1});
  auto l = model::LinearLayer::tt("l", plan, 32, 32, rng);
  for (auto& c : l.cores) std::fill(c.value.data.begin(), c.value.data.end(), 1.0);
  std::fill(l.bias.value.data.begin(), l.bias.value.data.end(), 0.0);
  auto x = random_matrix(3, 10, rng);
  auto y = run(l, x, Mode::Train);
  for (std::size_t r = 0; r < 3; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 10; ++c) s += x(r, c);
    for (std::size_t o = 0; o < 6; ++o) CHECK(y(r, o) == doctest::Approx(s).epsilon(1e-14));
  }
}

TEST_CASE("tt linear: zero cores and bias give zero in every mode") {
  model::Rng rng(2);
  auto plan = tt::TensorShapePlan::tt(6, 8, {2, 3}, {2, 4}, {1, 2, 2, 2, 1});
  auto l = model::LinearLayer::tt("l", plan, 8, 8, rng);
  for (auto& c : l.cores) std::fill(c.value.data.begin(), c.value.data.end(), 0.0);
  std::fill(l.bias.value.data.begin(), l.bias.value.data.end(), 0.0);
  l.stage_scales.assign(plan.num_cores() - 1, 1.0);
  auto x = random_matrix(2, 8, rng);
  for (Mode m : {Mode::Train, Mode::InferFp, Mode::InferInt})
    for (double v : run(l, x, m).data) CHECK(v == 0.0);
}

namespace {

struct IntPathError {
  double measured = 0.0;
  /// Uniform rounding noise delta_s / sqrt(12) per requantized stage, relative to the stage's
  /// RMS, combined in quadrature.
  double predicted = 0.0;
};

IntPathError int_path_error(const tt::TensorShapePlan& plan, std::uint64_t seed, const Tensor* fresh_scale = nullptr) {
  model::Rng rng(seed);
  auto l = model::LinearLayer::tt("l", plan, 8, 8, rng);
  for (double& b : l.bias.value.data) b = 0.1;
  auto x = random_matrix(16, plan.cols, rng);
  l.activation_scale.value.data[0] = max_abs(x.data) / 127.0;
  CHECK_THROWS_AS(l.forward_int(x), UsageError);  // uncalibrated
  const auto maxima = l.stage_maxima(x);
  REQUIRE(maxima.size() == plan.num_cores() - 1);
  for (std::size_t s = 0; s < maxima.size(); ++s) l.stage_scales[s] = maxima[s] / 127.0;
  if (fresh_scale) x = random_matrix(16, plan.cols, rng, fresh_scale->data[0]);

  const auto cores = l.surrogate_cores();
  const auto xq = quant::fake_quant_forward(x.data, l.activation_scale.value.data[0], 8);
  const auto fwd = tt::tt_contract(plan, tt::core_pointers(cores), xq, x.rows());
  double var = 0.0;
  for (std::size_t s = 0; s < maxima.size(); ++s) {
    const auto& st = fwd.states[s + 1];
    const double rms = norm2(st) / std::sqrt(static_cast<double>(st.size()));
    const double e = l.stage_scales[s] / std::sqrt(12.0) / rms;
    var += e * e;
  }
  return {oracle::rel_err(l.forward_int(x).data, run(l, x, Mode::Train).data), std::sqrt(var)};
}

}  // namespace

TEST_CASE("tt linear: frozen INT8 integer path tracks the surrogate") {
  SUBCASE("one requantized stage stays under 1e-2") {
    auto e = int_path_error(tt::TensorShapePlan::tt(24, 32, {24}, {32}, {1, 4, 1}), 3);
    CHECK(e.measured < 1e-2);
  }
  SUBCASE("deeper chains follow the per-stage rounding-noise model") {
    const Tensor shrink = Tensor::scalar(0.8);
    for (auto [plan, seed] : {std::pair{tt::TensorShapePlan::tt(24, 32, {4, 6}, {8, 4}, {1, 4, 4, 4, 1}), 3},
                              {tt::TensorShapePlan::tt(64, 64, {8, 8}, {8, 8}, {1, 8, 8, 8, 1}), 5},
                              {tt::TensorShapePlan::tt(64, 64, {4, 4, 4}, {4, 4, 4}, {1, 4, 4, 4, 4, 4, 1}), 7}}) {
      auto e = int_path_error(plan, seed);
      CHECK(e.measured < 1.5 * e.predicted);
      CHECK(e.measured < 3e-2);
      // Fresh inputs under the same static scales.
      auto f = int_path_error(plan, seed, &shrink);
      CHECK(f.measured < 1.5 * f.predicted);
    }
  }
}

TEST_CASE("tt linear: integer path needs a quantized layer") {
  model::Rng rng(4);
  auto plan = tt::TensorShapePlan::tt(6, 8, {2, 3}, {2, 4}, {1, 2, 2, 2, 1});
  auto l = model::LinearLayer::tt("l", plan, 32, 32, rng);
  CHECK_THROWS_AS(l.forward_int(random_matrix(1, 8, rng)), UsageError);
  CHECK_THROWS_AS(model::LinearLayer::tt("bad", plan, 8, 32, rng), ParameterError);
}

TEST_CASE("tt linear: train mode fake-quantizes cores with one shared scale") {
  model::Rng rng(5);
  auto plan = tt::TensorShapePlan::tt(6, 8, {2, 3}, {2, 4}, {1, 2, 2, 2, 1});
  auto l = model::LinearLayer::tt("l", plan, 4, 8, rng);
  std::vector<double> all;
  for (const auto& c : l.cores) all.insert(all.end(), c.value.data.begin(), c.value.data.end());
  CHECK(l.weight_scale.value.data[0] == quant::init_scale(all, 4));
  auto sur = l.surrogate_cores();
  for (std::size_t k = 0; k < sur.size(); ++k)
    CHECK(sur[k].data == quant::fake_quant_forward(l.cores[k].value.data, l.weight_scale.value.data[0], 4));
}

TEST_CASE("encoder: TT copy of a dense encoder matches the reference implementation") {
  auto dense = model::TransformerModel(model::dense_variant(toy()));
  auto copy = model::exact_tt_copy(dense, toy());
  CHECK(copy.encoders[0].query.compressed);
  const std::vector<std::size_t> ids{3, 17, 5, 60, 2, 9};
  ad::Tape tape(false);
  auto trace = copy.forward(tape, ids, Mode::InferFp);
  Tensor x = trace.y_emb.value();
  for (std::size_t l = 0; l < 2; ++l) {
    Tensor want = reference_encoder(dense.encoders[l], x);
    const Tensor& got = trace.y[l].value();
    double worst = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got.data[i] - want.data[i]));
    CHECK(worst < 1e-5);
    x = want;
  }
}

TEST_CASE("encoder: attention probabilities") {
  model::TransformerModel m(toy());
  SUBCASE("single token attends to itself with probability exactly 1") {
    ad::Tape tape(false);
    const std::vector<std::size_t> ids{7};
    auto t = m.forward(tape, ids, Mode::Train);
    for (const auto& layer : t.attn)
      for (const auto& p : layer) CHECK(p.value().data == std::vector<double>{1.0});
  }
  SUBCASE("rows sum to one") {
    ad::Tape tape(false);
    const std::vector<std::size_t> ids{1, 2, 3, 4, 5, 6, 7, 8, 9};
    auto t = m.forward(tape, ids, Mode::Train);
    for (const auto& layer : t.attn)
      for (const auto& p : layer)
        for (std::size_t r = 0; r < p.value().rows(); ++r) {
          double s = 0.0;
          for (std::size_t c = 0; c < p.value().cols(); ++c) s += p.value()(r, c);
          CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
        }
  }
}

TEST_CASE("model: trace shape, determinism and input errors") {
  model::TransformerModel m(toy(8));
  const std::vector<std::size_t> ids{4, 8, 15, 16, 23, 42};
  ad::Tape a(false), b(false);
  auto ta = m.forward(a, ids, Mode::Train);
  auto tb = m.forward(b, ids, Mode::Train);
  CHECK(ta.y.size() == 2);
  CHECK(ta.attn.size() == 2);
  CHECK(ta.attn[0].size() == 2);
  CHECK(ta.intent_logits.value().shape == std::vector<std::size_t>{1, 4});
  CHECK(ta.slot_logits.value().shape == std::vector<std::size_t>{6, 4});
  CHECK(ta.intent_logits.value() == tb.intent_logits.value());
  CHECK(ta.slot_logits.value() == tb.slot_logits.value());

  ad::Tape c(false);
  const std::vector<std::size_t> oov{1, 64};
  CHECK_THROWS_AS(m.forward(c, oov, Mode::Train), InputError);
  const std::vector<std::size_t> empty;
  CHECK_THROWS_AS(m.forward(c, empty, Mode::Train), InputError);
  const std::vector<std::size_t> too_long(17, 1);
  CHECK_THROWS_AS(m.forward(c, too_long, Mode::Train), InputError);
}

TEST_CASE("model: zero encoders feed the embedding straight to the heads") {
  auto cfg = toy();
  cfg.layers = 0;
  model::TransformerModel m(cfg);
  const std::vector<std::size_t> ids{5, 6, 7};
  ad::Tape tape(false);
  auto t = m.forward(tape, ids, Mode::InferFp);
  CHECK(t.y.empty());
  ad::Tape ref(false);
  auto y = ref.constant(t.y_emb.value());
  auto intent = m.intent_head.forward(ref, ad::mean_rows(y), Mode::InferFp, nullptr);
  auto slots = m.slot_head.forward(ref, y, Mode::InferFp, nullptr);
  CHECK(intent.value() == t.intent_logits.value());
  CHECK(slots.value() == t.slot_logits.value());
  CHECK(model::model_flops(cfg, 16).flops == 0.0);
}

TEST_CASE("model: full-precision TT model equals its dense reconstruction") {
  model::TransformerModel m(toy());
  auto d = model::to_dense(m);
  CHECK_FALSE(d.encoders[0].query.compressed);
  const std::vector<std::size_t> ids{9, 3, 33, 12, 0, 63, 7};
  ad::Tape a(false), b(false);
  auto ta = m.forward(a, ids, Mode::InferFp);
  auto tb = d.forward(b, ids, Mode::InferFp);
  CHECK(oracle::rel_err(ta.intent_logits.value().data, tb.intent_logits.value().data) < 1e-5);
  double worst = 0.0;
  for (std::size_t i = 0; i < ta.slot_logits.value().size(); ++i)
    worst = std::max(worst, std::abs(ta.slot_logits.value().data[i] - tb.slot_logits.value().data[i]));
  CHECK(worst < 1e-5);
}

TEST_CASE("model: calibrated INT8 integer inference tracks train mode") {
  model::TransformerModel m(toy(8));
  std::vector<std::vector<std::size_t>> seqs;
  std::mt19937_64 rng(9);
  std::uniform_int_distribution<std::size_t> tok(0, 63);
  for (int i = 0; i < 16; ++i) {
    std::vector<std::size_t> s(8);
    for (auto& t : s) t = tok(rng);
    seqs.push_back(s);
  }
  model::init_activation_scales(m, seqs);
  model::calibrate_int_stages(m, seqs);
  for (const auto* l : m.linears())
    if (l->quantized()) CHECK(l->int_ready());
  ad::Tape a(false), b(false);
  auto ta = m.forward(a, seqs[0], Mode::Train);
  auto tb = m.forward(b, seqs[0], Mode::InferInt);
  CHECK(oracle::rel_err(tb.slot_logits.value().data, ta.slot_logits.value().data) < 5e-2);
}

TEST_CASE("snapshot: quantized cores become fp32 scale times code") {
  model::TransformerModel m(toy(4));
  auto s = model::snapshot(m);
  const auto& l = s.encoders[0].query;
  const double delta = l.weight_scale.value.data[0];
  CHECK(delta == static_cast<double>(static_cast<float>(delta)));
  for (const auto& c : l.cores)
    for (double v : c.value.data) {
      const double code = v / delta;
      CHECK(code == std::round(code));
      CHECK(std::abs(code) <= 8);
    }
  for (double v : s.position.value.data) CHECK(v == static_cast<double>(static_cast<float>(v)));
  // Snapshots are fixed points.
  auto again = model::snapshot(s);
  CHECK(again.encoders[1].ffn_up.cores[0].value == s.encoders[1].ffn_up.cores[0].value);
}

TEST_CASE("size accounting") {
  SUBCASE("one INT4 FFN layer: packed cores and scale bytes") {
    auto c = model::atis_config(4);
    auto r = model::size_breakdown(c);
    const model::SizeItem* ffn = nullptr;
    for (const auto& it : r.items)
      if (it.name == "encoder0.ffn_down") ffn = &it;
    REQUIRE(ffn);
    CHECK(ffn->params == 8160 + 768);  // cores + bias
    CHECK(ffn->weight_bytes == 8160 / 2);
    CHECK(ffn->bias_bytes == 4 * 768);
    // delta_w (the 4 bytes of the 4084 figure) plus delta_x and 3 stage scales.
    CHECK(ffn->scale_bytes == 4 + 4 + 4 * 3);
  }
  SUBCASE("full precision everywhere is 4 bytes per value") {
    auto c = model::dense_variant(toy());
    auto r = model::size_breakdown(c);
    std::uint64_t values = 0;
    for (const auto& it : r.items) {
      CHECK(it.scale_bytes == 0);
      values += (it.weight_bytes + it.bias_bytes + it.other_bytes) / 4;
    }
    CHECK(r.total_bytes == 4 * values);
    model::TransformerModel m(c);
    std::uint64_t live = 0;
    for (const auto* p : m.params()) live += p->value.size();
    CHECK(r.total_bytes == 4 * live);
    CHECK(model::model_size_bytes(m).bytes == r.total_bytes);
  }
  SUBCASE("config and live-model accounting agree") {
    model::TransformerModel m(toy(2));
    CHECK(model::model_size_bytes(m).bytes == model::model_size_bytes(toy(2)).bytes);
  }
}

TEST_CASE("flops accounting") {
  auto i8 = model::model_flops(model::atis_config(8), 50);
  auto i4 = model::model_flops(model::atis_config(4), 50);
  CHECK(i4.flops == 0.5 * i8.flops);
  CHECK(i8.fixed_point);
  CHECK(i8.dense_flops == 2.0 * 50 * 2 * (4 * 768.0 * 768 + 2 * 768.0 * 3072));
}

TEST_CASE("config validation") {
  auto c = toy();
  c.heads = 5;
  CHECK_THROWS(c.validate());
  c = toy();
  c.weight_bits = 3;
  CHECK_THROWS(c.validate());
  CHECK_NOTHROW(model::atis_config(2).validate());
  CHECK_NOTHROW(model::bert_config(50, 8).validate());
}
