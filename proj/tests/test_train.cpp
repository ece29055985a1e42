#include <doctest.h>

#include <cmath>
#include <limits>

#include "ttq/dataset.hpp"
#include "ttq/errors.hpp"
#include "ttq/model.hpp"
#include "ttq/quant.hpp"
#include "ttq/train.hpp"

using namespace ttq;

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

data::Dataset small_corpus(std::size_t n) {
  data::SyntheticSpec s;
  s.num_examples = n;
  return data::generate_synthetic(s);
}

}  // namespace

TEST_CASE("adam: first step by hand") {
  ad::Param w{"w", Tensor::vector({1.0, -2.0, 0.5})};
  ad::GradientSet g;
  g.at(w).data = {0.2, -3.0, 0.0};
  train::Adam adam(0.01, 0.9, 0.98, 1e-8);
  ad::Param* ps[1] = {&w};
  adam.step(ps, g);
  // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
  CHECK(w.value.data[0] == doctest::Approx(1.0 - 0.01 * 0.2 / (0.2 + 1e-8)).epsilon(1e-14));
  CHECK(w.value.data[1] == doctest::Approx(-2.0 + 0.01 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
  CHECK(w.value.data[2] == 0.5);
  const auto* m = adam.moments(w);
  REQUIRE(m);
  CHECK(m->m.data[0] == doctest::Approx(0.1 * 0.2));
  CHECK(m->v.data[1] == doctest::Approx(0.02 * 9.0));
}

TEST_CASE("adam: scales step multiplicatively and stay positive") {
  ad::Param s{"s", Tensor::scalar(0.004), ad::ParamKind::Scale};
  ad::GradientSet g;
  g.at(s).data = {5.0};
  train::Adam adam(0.01, 0.9, 0.98, 1e-8);
  ad::Param* ps[1] = {&s};
  adam.step(ps, g);
  // Gradient w.r.t. log(s) is s * g; the first step has magnitude lr in log space.
  const double gl = 0.004 * 5.0;
  CHECK(s.value.data[0] == doctest::Approx(0.004 * std::exp(-0.01 * gl / (gl + 1e-8))).epsilon(1e-14));
  g.at(s).data = {-1e12};
  for (int i = 0; i < 2000; ++i) adam.step(ps, g);
  CHECK(s.value.data[0] > 0.0);
  ad::Param t{"t", Tensor::scalar(2e-8), ad::ParamKind::Scale};
  ad::GradientSet gt;
  gt.at(t).data = {1e6};
  ad::Param* pt[1] = {&t};
  train::Adam a2(10.0, 0.9, 0.98, 1e-8);
  a2.step(pt, gt);
  CHECK(t.value.data[0] == quant::kMinScale);
}

TEST_CASE("adam: zero gradients leave parameters and decay moments") {
  ad::Param w{"w", Tensor::vector({1.0, 2.0})};
  train::Adam adam(0.1, 0.9, 0.98, 1e-8);
  ad::Param* ps[1] = {&w};
  ad::GradientSet g;
  g.at(w).data = {1.0, 1.0};
  adam.step(ps, g);
  const auto before = w.value;
  const double m0 = adam.moments(w)->m.data[0];
  g.at(w).data = {0.0, 0.0};
  adam.step(ps, g);
  CHECK(adam.moments(w)->m.data[0] == doctest::Approx(0.9 * m0));
  // The step direction is m_hat / sqrt(v_hat), still nonzero from the first gradient; with a fresh
  // optimizer zero gradients are an exact no-op.
  train::Adam fresh(0.1, 0.9, 0.98, 1e-8);
  ad::Param w2{"w2", Tensor::vector({1.0, 2.0})};
  ad::Param* p2[1] = {&w2};
  ad::GradientSet z;
  z.at(w2).data = {0.0, 0.0};
  fresh.step(p2, z);
  CHECK(w2.value.data == std::vector<double>{1.0, 2.0});
  CHECK(before.data != w.value.data);
}

TEST_CASE("adam: non-finite gradients are rejected") {
  ad::Param w{"w", Tensor::vector({1.0})};
  ad::GradientSet g;
  g.at(w).data = {std::numeric_limits<double>::quiet_NaN()};
  train::Adam adam(0.1, 0.9, 0.98, 1e-8);
  ad::Param* ps[1] = {&w};
  CHECK_THROWS_AS(adam.step(ps, g), NumericError);
  CHECK(w.value.data[0] == 1.0);
}

TEST_CASE("train: zero learning rate leaves parameters unchanged") {
  auto ds = small_corpus(40);
  ds.train.resize(4);
  model::TransformerModel m(toy());
  const auto before = train::save_params(m);
  train::TrainConfig c;
  c.lr = 0.0;
  c.epochs = 1;
  c.batch_size = 2;
  auto r = train::train_end_to_end(m, ds, c);
  CHECK(train::save_params(m) == before);
  REQUIRE(r.step_losses.size() == 2);
  // Same parameters, so re-evaluating the training examples gives the epoch loss back.
  CHECK(r.epochs[0].train_loss == doctest::Approx(train::evaluate(m, ds.train).loss).epsilon(1e-12));
}

TEST_CASE("train: seeded runs are bit-identical") {
  auto ds = small_corpus(120);
  train::TrainConfig c;
  c.epochs = 2;
  c.batch_size = 8;
  model::TransformerModel a(toy(4)), b(toy(4));
  auto ra = train::train_end_to_end(a, ds, c);
  auto rb = train::train_end_to_end(b, ds, c);
  CHECK(ra.step_losses == rb.step_losses);
  CHECK(train::save_params(a) == train::save_params(b));
  CHECK(ra.final_dev.intent_accuracy == rb.final_dev.intent_accuracy);
}

TEST_CASE("train: divergence restores the epoch-start parameters") {
  auto ds = small_corpus(80);
  model::TransformerModel m(toy());
  m.encoders[0].ln1.gamma.value.data[0] = std::numeric_limits<double>::infinity();
  const auto before = train::save_params(m);
  train::TrainConfig c;
  c.epochs = 1;
  CHECK_THROWS_AS(train::train_end_to_end(m, ds, c), NumericError);
  const auto after = train::save_params(m);
  REQUIRE(after.size() == before.size());
  for (std::size_t i = 0; i < after.size(); ++i)
    for (std::size_t j = 0; j < after[i].size(); ++j)
      CHECK(std::isinf(before[i].data[j]) == std::isinf(after[i].data[j]));
  CHECK(after[3].data == before[3].data);
}

TEST_CASE("train: configuration and dataset checks") {
  train::TrainConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.lr = -1;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  c = {};
  c.beta1 = 1.0;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  auto ds = small_corpus(40);
  ds.num_intents = 7;
  model::TransformerModel m(toy());
  CHECK_THROWS_AS(train::check_compatible(m, ds), ConfigError);
}

TEST_CASE("metrics: single-intent corpus is classified perfectly") {
  data::SyntheticSpec s;
  s.num_examples = 60;
  s.num_intents = 1;
  auto ds = data::generate_synthetic(s);
  model::ModelConfig c = toy();
  c.num_intents = 1;
  model::TransformerModel m(c);
  CHECK(train::evaluate(m, ds.test).intent_accuracy == 1.0);
}

TEST_CASE("train: full-precision TT model keeps up with the dense baseline") {
  auto ds = small_corpus(1000);
  train::TrainConfig c;
  c.epochs = 15;
  c.lr = 3e-3;
  model::TransformerModel dense(model::dense_variant(toy()));
  model::TransformerModel tt(toy());
  train::train_end_to_end(dense, ds, c);
  train::train_end_to_end(tt, ds, c);
  const double d = train::evaluate(dense, ds.test).intent_accuracy;
  const double t = train::evaluate(tt, ds.test).intent_accuracy;
  MESSAGE("dense " << d << ", tt " << t);
  CHECK(t >= 0.95 * d);
}
