#include "ttq/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include "ttq/errors.hpp"
#include "ttq/ops.hpp"
#include "ttq/quant.hpp"

namespace ttq::model {

namespace {

Tensor gaussian(std::vector<std::size_t> shape, double std, Rng& rng) {
  Tensor t(std::move(shape), 0.0);
  std::normal_distribution<double> dist(0.0, std);
  for (double& v : t.data) v = dist(rng);
  return t;
}

ad::Param scalar_param(std::string name, double v) {
  return ad::Param{std::move(name), Tensor::scalar(v), ad::ParamKind::Scale};
}

double internal_rank_product(const tt::TensorShapePlan& plan) {
  double p = 1.0;
  for (std::size_t k = 1; k + 1 < plan.ranks.size(); ++k) p *= static_cast<double>(plan.ranks[k]);
  return p;
}

std::vector<double> concat_values(const std::vector<ad::Param>& params) {
  std::vector<double> all;
  for (const auto& p : params) all.insert(all.end(), p.value.data.begin(), p.value.data.end());
  return all;
}

std::vector<Tensor> values(const std::vector<ad::Param>& params) {
  std::vector<Tensor> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.value);
  return out;
}

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void round_f32(Tensor& t) {
  for (double& v : t.data) v = to_f32(v);
}

ad::Var run_linear(const LinearLayer& layer, ad::Tape& tape, ad::Var x, Mode mode, const LinearObserver* observer) {
  if (observer && *observer) (*observer)(layer, x.value());
  if (mode == Mode::InferInt && !layer.quantized()) mode = Mode::InferFp;
  return layer.forward(tape, x, mode);
}

}  // namespace

const char* to_string(Mode m) {
  switch (m) {
    case Mode::Train: return "train";
    case Mode::InferInt: return "infer_int";
    case Mode::InferFp: return "infer_fp";
  }
  return "?";
}

// ---------------------------------------------------------------------------------------------
// LinearLayer

LinearLayer LinearLayer::dense(std::string name, std::size_t out_features, std::size_t in_features, Rng& rng) {
  if (out_features == 0 || in_features == 0) throw StructuralError("linear layer needs positive dims");
  LinearLayer l;
  l.name = std::move(name);
  l.weight = {l.name + ".weight", gaussian({out_features, in_features}, 1.0 / std::sqrt(double(in_features)), rng)};
  l.bias = {l.name + ".bias", Tensor({out_features}, 0.0)};
  return l;
}

LinearLayer LinearLayer::tt(std::string name, tt::TensorShapePlan plan, int weight_bits, int activation_bits,
                            Rng& rng) {
  plan.validate();
  if (plan.format != tt::Format::TT) throw StructuralError("linear layer " + name + " needs a TT plan");
  quant::check_bits(weight_bits);
  LinearLayer l;
  l.name = std::move(name);
  l.compressed = true;
  // Entries of W are sums of (internal rank product) terms, each a product of 2d core entries.
  const double target = 1.0 / std::sqrt(static_cast<double>(plan.cols));
  const double sigma = std::pow(target * target / internal_rank_product(plan), 1.0 / (2.0 * plan.num_cores()));
  for (std::size_t k = 0; k < plan.num_cores(); ++k)
    l.cores.push_back({l.name + ".core" + std::to_string(k), gaussian(plan.core_shape(k), sigma, rng)});
  l.bias = {l.name + ".bias", Tensor({plan.rows}, 0.0)};
  l.weight_bits = weight_bits;
  if (quant::is_quantized(weight_bits)) {
    quant::check_bits(activation_bits);
    if (!quant::is_quantized(activation_bits))
      throw ParameterError("quantized layer " + l.name + " needs quantized activations");
    l.activation_bits = activation_bits;
    l.weight_scale = scalar_param(l.name + ".weight_scale", quant::init_scale(concat_values(l.cores), weight_bits));
    l.activation_scale = scalar_param(l.name + ".activation_scale", 1.0);
    l.stage_scales.assign(plan.num_cores() - 1, 0.0);
  }
  l.plan = std::move(plan);
  return l;
}

std::size_t LinearLayer::out_features() const { return compressed ? plan.rows : weight.value.rows(); }
std::size_t LinearLayer::in_features() const { return compressed ? plan.cols : weight.value.cols(); }

bool LinearLayer::int_ready() const {
  if (!quantized() || activation_scale.value.size() != 1 || !(activation_scale.value[0] > 0.0)) return false;
  return std::all_of(stage_scales.begin(), stage_scales.end(), [](double s) { return s > 0.0; });
}

ad::Var LinearLayer::forward(ad::Tape& tape, ad::Var x, Mode mode) const {
  if (x.value().cols() != in_features()) {
    throw StructuralError(name + ": input has " + std::to_string(x.value().cols()) + " features, expected " +
                          std::to_string(in_features()));
  }
  if (mode == Mode::InferInt) {
    if (!quantized()) throw UsageError(name + ": integer inference requested for an unquantized layer");
    return tape.constant(forward_int(x.value()));
  }
  ad::Var bias_var = tape.param(bias);
  if (!compressed) return ad::add_bias(ad::matmul(x, tape.param(weight), true), bias_var);

  std::vector<ad::Var> core_vars;
  core_vars.reserve(cores.size());
  const bool fake = quantized() && mode == Mode::Train;
  ad::Var delta_w = fake ? tape.param(weight_scale) : ad::Var{};
  for (const auto& c : cores) {
    ad::Var v = tape.param(c);
    core_vars.push_back(fake ? ad::fake_quant(v, delta_w, weight_bits) : v);
  }
  if (fake) x = ad::fake_quant(x, tape.param(activation_scale), activation_bits);
  return ad::add_bias(ad::tt_linear(x, core_vars, plan), bias_var);
}

std::vector<Tensor> LinearLayer::surrogate_cores() const {
  std::vector<Tensor> out = values(cores);
  if (quantized()) {
    for (auto& c : out) c.data = quant::fake_quant_forward(c.data, weight_scale.value[0], weight_bits);
  }
  return out;
}

Tensor LinearLayer::dense_weight() const {
  if (!compressed) return weight.value;
  return tt::tt_to_dense(values(cores), plan);
}

std::vector<double> LinearLayer::stage_maxima(const Tensor& x) const {
  if (!compressed) throw UsageError(name + ": stage maxima need a TT layer");
  const auto qcores = surrogate_cores();
  const auto ptrs = tt::core_pointers(qcores);
  std::vector<double> xq = x.data;
  if (quantized()) xq = quant::fake_quant_forward(x.data, activation_scale.value[0], activation_bits);
  const auto fwd = tt::tt_contract(plan, ptrs, xq, x.rows());
  std::vector<double> maxima;
  for (std::size_t s = 0; s + 1 < plan.num_cores(); ++s) maxima.push_back(max_abs(fwd.states[s + 1]));
  return maxima;
}

Tensor LinearLayer::forward_int(const Tensor& x) const {
  if (!quantized()) throw UsageError(name + ": integer inference requested for an unquantized layer");
  if (!int_ready()) throw UsageError(name + ": integer inference needs calibrated activation and stage scales");
  if (x.cols() != plan.cols) throw StructuralError(name + ": input feature dim mismatch");
  const std::size_t batch = x.rows();
  const std::size_t d = plan.order();
  const std::size_t n_pad = plan.padded_cols();
  const double delta_w = weight_scale.value[0];

  std::vector<double> padded(batch * n_pad, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    std::copy_n(x.data.begin() + b * plan.cols, plan.cols, padded.begin() + b * n_pad);
  std::vector<std::int8_t> state = quant::quantize(padded, activation_scale.value[0], activation_bits).codes;
  double state_scale = activation_scale.value[0];

  std::vector<std::vector<std::int8_t>> core_codes;
  for (const auto& c : cores) core_codes.push_back(quant::quantize(c.value.data, delta_w, weight_bits).codes);

  const auto stages = tt::contraction_stages(plan, batch);
  std::vector<std::int32_t> acc;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    const auto& st = stages[s];
    acc.assign(st.m * st.n, 0);
    if (st.kind == tt::StageKind::Column) {
      quant::int_gemm(st.m, st.n, st.k, state.data(), core_codes[st.core].data(), true, acc.data());
    } else {
      quant::int_gemm_left(st.m, st.n, st.k, core_codes[st.core].data(), state.data(), acc.data());
    }
    if (s + 1 == d) {
      std::vector<std::int32_t> t(acc.size());
      const std::size_t r = plan.ranks[d];
      for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t j = 0; j < r; ++j) t[j * batch + b] = acc[b * r + j];
      acc = std::move(t);
    }
    const double acc_scale = state_scale * delta_w;
    if (s + 1 == stages.size()) {
      Tensor y = Tensor::matrix(batch, plan.rows);
      for (std::size_t i = 0; i < plan.rows; ++i)
        for (std::size_t b = 0; b < batch; ++b)
          y.data[b * plan.rows + i] = static_cast<double>(acc[i * batch + b]) * acc_scale + bias.value[i];
      return y;
    }
    state = quant::requantize(acc, acc_scale, stage_scales[s]);
    state_scale = stage_scales[s];
  }
  throw StructuralError(name + ": empty contraction");
}

void LinearLayer::collect(std::vector<ad::Param*>& out) {
  if (compressed) {
    for (auto& c : cores) out.push_back(&c);
  } else {
    out.push_back(&weight);
  }
  out.push_back(&bias);
  if (quantized()) {
    out.push_back(&weight_scale);
    out.push_back(&activation_scale);
  }
}

void LinearLayer::collect(std::vector<const ad::Param*>& out) const {
  std::vector<ad::Param*> tmp;
  const_cast<LinearLayer*>(this)->collect(tmp);
  out.insert(out.end(), tmp.begin(), tmp.end());
}

// ---------------------------------------------------------------------------------------------
// Embedding

Embedding Embedding::dense(std::string name, std::size_t vocab, std::size_t hidden, double std, Rng& rng) {
  Embedding e;
  e.name = std::move(name);
  e.table = {e.name + ".table", gaussian({vocab, hidden}, std, rng)};
  return e;
}

Embedding Embedding::ttm(std::string name, tt::TensorShapePlan plan, int weight_bits, double std, Rng& rng) {
  plan.validate();
  if (plan.format != tt::Format::TTM) throw StructuralError("embedding " + name + " needs a TTM plan");
  quant::check_bits(weight_bits);
  Embedding e;
  e.name = std::move(name);
  e.compressed = true;
  const double sigma = std::pow(std * std / internal_rank_product(plan), 1.0 / (2.0 * plan.num_cores()));
  for (std::size_t k = 0; k < plan.num_cores(); ++k)
    e.cores.push_back({e.name + ".core" + std::to_string(k), gaussian(plan.core_shape(k), sigma, rng)});
  e.weight_bits = weight_bits;
  if (quant::is_quantized(weight_bits))
    e.weight_scale = scalar_param(e.name + ".weight_scale", quant::init_scale(concat_values(e.cores), weight_bits));
  e.plan = std::move(plan);
  return e;
}

std::size_t Embedding::vocab_size() const { return compressed ? plan.rows : table.value.rows(); }
std::size_t Embedding::hidden() const { return compressed ? plan.cols : table.value.cols(); }

ad::Var Embedding::forward(ad::Tape& tape, std::span<const std::size_t> ids, Mode mode) const {
  for (std::size_t id : ids) {
    if (id >= vocab_size())
      throw InputError("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(vocab_size()));
  }
  if (!compressed) return ad::gather_rows(tape.param(table), ids);
  // Integer inference reads the same quantized table the surrogate uses.
  const bool fake = quantized() && mode != Mode::InferFp;
  ad::Var delta = fake ? tape.param(weight_scale) : ad::Var{};
  std::vector<ad::Var> core_vars;
  for (const auto& c : cores) {
    ad::Var v = tape.param(c);
    core_vars.push_back(fake ? ad::fake_quant(v, delta, weight_bits) : v);
  }
  return ad::ttm_embedding(ids, core_vars, plan);
}

Tensor Embedding::dense_table() const {
  if (!compressed) return table.value;
  return tt::ttm_to_dense(values(cores), plan);
}

std::vector<Tensor> Embedding::surrogate_cores() const {
  std::vector<Tensor> out = values(cores);
  if (quantized()) {
    for (auto& c : out) c.data = quant::fake_quant_forward(c.data, weight_scale.value[0], weight_bits);
  }
  return out;
}

void Embedding::collect(std::vector<ad::Param*>& out) {
  if (compressed) {
    for (auto& c : cores) out.push_back(&c);
  } else {
    out.push_back(&table);
  }
  if (quantized()) out.push_back(&weight_scale);
}

void Embedding::collect(std::vector<const ad::Param*>& out) const {
  std::vector<ad::Param*> tmp;
  const_cast<Embedding*>(this)->collect(tmp);
  out.insert(out.end(), tmp.begin(), tmp.end());
}

// ---------------------------------------------------------------------------------------------
// Blocks

LayerNorm LayerNorm::make(std::string name, std::size_t dim) {
  LayerNorm ln;
  ln.name = std::move(name);
  ln.gamma = {ln.name + ".gamma", Tensor({dim}, 1.0)};
  ln.beta = {ln.name + ".beta", Tensor({dim}, 0.0)};
  return ln;
}

ad::Var LayerNorm::forward(ad::Tape& tape, ad::Var x) const {
  return ad::layer_norm(x, tape.param(gamma), tape.param(beta));
}

ad::Var EncoderBlock::forward(ad::Tape& tape, ad::Var x, Mode mode, std::vector<ad::Var>& probs,
                              std::vector<ad::Var>& scores, const LinearObserver* observer) const {
  const std::size_t hidden = x.value().cols();
  if (heads == 0 || hidden % heads != 0) throw StructuralError("hidden dim is not divisible by the head count");
  const std::size_t dh = hidden / heads;
  ad::Var q = run_linear(query, tape, x, mode, observer);
  ad::Var k = run_linear(key, tape, x, mode, observer);
  ad::Var v = run_linear(value, tape, x, mode, observer);
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<ad::Var> contexts;
  for (std::size_t h = 0; h < heads; ++h) {
    ad::Var qh = heads == 1 ? q : ad::slice_cols(q, h * dh, dh);
    ad::Var kh = heads == 1 ? k : ad::slice_cols(k, h * dh, dh);
    ad::Var vh = heads == 1 ? v : ad::slice_cols(v, h * dh, dh);
    ad::Var s = ad::scale(ad::matmul(qh, kh, true), inv);
    ad::Var p = ad::softmax_rows(s);
    scores.push_back(s);
    probs.push_back(p);
    contexts.push_back(ad::matmul(p, vh));
  }
  ad::Var ctx = heads == 1 ? contexts.front() : ad::concat_cols(contexts);
  ad::Var attn = run_linear(output, tape, ctx, mode, observer);
  ad::Var h1 = ln1.forward(tape, ad::add(x, attn));
  ad::Var up = ad::gelu(run_linear(ffn_up, tape, h1, mode, observer));
  ad::Var down = run_linear(ffn_down, tape, up, mode, observer);
  return ln2.forward(tape, ad::add(h1, down));
}

std::vector<LinearLayer*> EncoderBlock::linears() {
  return {&query, &key, &value, &output, &ffn_up, &ffn_down};
}

std::vector<const LinearLayer*> EncoderBlock::linears() const {
  return {&query, &key, &value, &output, &ffn_up, &ffn_down};
}

ad::Var Head::forward(ad::Tape& tape, ad::Var x, Mode mode, const LinearObserver* observer) const {
  ad::Var h = ad::gelu(run_linear(fc1, tape, x, mode, observer));
  return run_linear(fc2, tape, h, mode, observer);
}

// ---------------------------------------------------------------------------------------------
// Configuration

namespace {

tt::TensorShapePlan group_plan(const LayerGroup& g, std::size_t rows, std::size_t cols, tt::Format format) {
  if (g.row_factors.empty() && g.col_factors.empty()) {
    auto plan = tt::plan_factorization(rows, cols, g.order, g.rank, format);
    if (!g.ranks.empty()) {
      plan.ranks = g.ranks;
      plan.validate();
    }
    return plan;
  }
  const std::size_t d = g.row_factors.size();
  auto ranks = g.ranks.empty() ? tt::TensorShapePlan::uniform_ranks(format, d, g.rank) : g.ranks;
  return format == tt::Format::TT ? tt::TensorShapePlan::tt(rows, cols, g.row_factors, g.col_factors, ranks)
                                  : tt::TensorShapePlan::ttm(rows, cols, g.row_factors, g.col_factors, ranks);
}

}  // namespace

tt::TensorShapePlan ModelConfig::embedding_plan() const {
  return group_plan(embedding, vocab_size, hidden, tt::Format::TTM);
}
tt::TensorShapePlan ModelConfig::attention_plan() const {
  return group_plan(attention, hidden, hidden, tt::Format::TT);
}
tt::TensorShapePlan ModelConfig::ffn_down_plan() const {
  return group_plan(feed_forward, hidden, ffn, tt::Format::TT);
}
tt::TensorShapePlan ModelConfig::ffn_up_plan() const { return ffn_down_plan().transposed(); }
tt::TensorShapePlan ModelConfig::head_plan() const { return group_plan(head, hidden, hidden, tt::Format::TT); }

void ModelConfig::validate() const {
  if (vocab_size == 0 || hidden == 0 || heads == 0 || ffn == 0 || max_seq_len == 0)
    throw ConfigError("model dimensions must be positive");
  if (num_intents == 0 || num_slots == 0) throw ConfigError("label counts must be positive");
  if (hidden % heads != 0) throw ConfigError("hidden dim must be divisible by the head count");
  try {
    quant::check_bits(weight_bits);
    if (quant::is_quantized(weight_bits)) {
      quant::check_bits(activation_bits);
      if (!quant::is_quantized(activation_bits)) throw ParameterError("activation_bits must be 2, 4 or 8");
    }
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (embedding.compressed) embedding_plan();
  if (attention.compressed) attention_plan();
  if (feed_forward.compressed) ffn_down_plan();
  if (head.compressed) head_plan();
}

ModelConfig dense_variant(ModelConfig config) {
  for (LayerGroup* g : {&config.embedding, &config.attention, &config.feed_forward, &config.head}) g->compressed = false;
  config.weight_bits = 32;
  return config;
}

namespace {

LayerGroup explicit_group(std::vector<std::size_t> rows, std::vector<std::size_t> cols, std::size_t rank) {
  LayerGroup g;
  g.row_factors = std::move(rows);
  g.col_factors = std::move(cols);
  g.rank = rank;
  g.order = g.row_factors.size();
  return g;
}

}  // namespace

ModelConfig atis_config(int weight_bits) {
  ModelConfig c;
  c.vocab_size = 800;
  c.hidden = 768;
  c.layers = 2;
  c.heads = 12;
  c.ffn = 3072;
  c.max_seq_len = 50;
  c.num_intents = 22;
  c.num_slots = 122;
  c.embedding = explicit_group({5, 5, 4, 4, 2}, {3, 4, 4, 4, 4}, 30);
  c.attention = explicit_group({24, 32}, {32, 24}, 10);
  c.feed_forward = explicit_group({32, 24}, {48, 64}, 10);
  c.head = explicit_group({24, 32}, {32, 24}, 10);
  c.weight_bits = weight_bits;
  c.activation_bits = 8;
  return c;
}

ModelConfig bert_config(std::size_t rank, int weight_bits) {
  ModelConfig c;
  c.vocab_size = 30522;
  c.hidden = 768;
  c.layers = 12;
  c.heads = 12;
  c.ffn = 3072;
  c.max_seq_len = 512;
  c.num_intents = 2;
  c.num_slots = 2;
  c.embedding = explicit_group({8, 20, 20, 10}, {8, 4, 4, 6}, rank);
  c.attention = explicit_group({24, 32}, {32, 24}, rank);
  c.feed_forward = explicit_group({32, 24}, {48, 64}, rank);
  c.head = explicit_group({24, 32}, {32, 24}, rank);
  c.weight_bits = weight_bits;
  c.activation_bits = 8;
  return c;
}

// ---------------------------------------------------------------------------------------------
// TransformerModel

TransformerModel::TransformerModel(const ModelConfig& config) : config_(config) {
  config.validate();
  Rng rng(config.seed);
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(config.hidden));
  const int wb = config.weight_bits;
  const int ab = config.activation_bits;

  embedding = config.embedding.compressed
                  ? Embedding::ttm("embedding", config.embedding_plan(), wb, emb_std, rng)
                  : Embedding::dense("embedding", config.vocab_size, config.hidden, emb_std, rng);
  position = {"position", gaussian({config.max_seq_len, config.hidden}, emb_std, rng)};

  auto make = [&](const std::string& name, bool compressed, const tt::TensorShapePlan* plan, std::size_t out,
                  std::size_t in, int bits) {
    return compressed ? LinearLayer::tt(name, *plan, bits, ab, rng) : LinearLayer::dense(name, out, in, rng);
  };
  const bool ca = config.attention.compressed;
  const bool cf = config.feed_forward.compressed;
  const auto attn_plan = ca ? config.attention_plan() : tt::TensorShapePlan{};
  const auto up_plan = cf ? config.ffn_up_plan() : tt::TensorShapePlan{};
  const auto down_plan = cf ? config.ffn_down_plan() : tt::TensorShapePlan{};
  const std::size_t h = config.hidden;
  for (std::size_t i = 0; i < config.layers; ++i) {
    const std::string p = "encoder" + std::to_string(i) + ".";
    EncoderBlock b;
    b.heads = config.heads;
    b.query = make(p + "query", ca, &attn_plan, h, h, wb);
    b.key = make(p + "key", ca, &attn_plan, h, h, wb);
    b.value = make(p + "value", ca, &attn_plan, h, h, wb);
    b.output = make(p + "output", ca, &attn_plan, h, h, wb);
    b.ffn_up = make(p + "ffn_up", cf, &up_plan, config.ffn, h, wb);
    b.ffn_down = make(p + "ffn_down", cf, &down_plan, h, config.ffn, wb);
    b.ln1 = LayerNorm::make(p + "ln1", h);
    b.ln2 = LayerNorm::make(p + "ln2", h);
    encoders.push_back(std::move(b));
  }
  const bool ch = config.head.compressed;
  const auto head_plan = ch ? config.head_plan() : tt::TensorShapePlan{};
  intent_head.fc1 = make("intent_head.fc1", ch, &head_plan, h, h, 32);
  intent_head.fc2 = LinearLayer::dense("intent_head.fc2", config.num_intents, h, rng);
  slot_head.fc1 = make("slot_head.fc1", ch, &head_plan, h, h, 32);
  slot_head.fc2 = LinearLayer::dense("slot_head.fc2", config.num_slots, h, rng);
}

ForwardTrace TransformerModel::forward(ad::Tape& tape, std::span<const std::size_t> ids, Mode mode,
                                       const LinearObserver* observer) const {
  if (ids.empty()) throw InputError("empty token sequence");
  if (ids.size() > config_.max_seq_len) {
    throw InputError("sequence of " + std::to_string(ids.size()) + " tokens exceeds max_seq_len " +
                     std::to_string(config_.max_seq_len));
  }
  ForwardTrace trace;
  ad::Var e = embedding.forward(tape, ids, mode);
  ad::Var x = ad::add(e, ad::slice_rows(tape.param(position), 0, ids.size()));
  trace.y_emb = x;
  for (const auto& block : encoders) {
    trace.attn.emplace_back();
    trace.attn_scores.emplace_back();
    x = block.forward(tape, x, mode, trace.attn.back(), trace.attn_scores.back(), observer);
    trace.y.push_back(x);
  }
  trace.intent_logits = intent_head.forward(tape, ad::mean_rows(x), mode, observer);
  trace.slot_logits = slot_head.forward(tape, x, mode, observer);
  return trace;
}

std::vector<ad::Param*> TransformerModel::params() {
  std::vector<ad::Param*> out;
  embedding.collect(out);
  out.push_back(&position);
  for (auto& b : encoders) {
    for (auto* l : b.linears()) l->collect(out);
    for (auto* ln : {&b.ln1, &b.ln2}) {
      out.push_back(&ln->gamma);
      out.push_back(&ln->beta);
    }
  }
  for (auto* head : {&intent_head, &slot_head}) {
    head->fc1.collect(out);
    head->fc2.collect(out);
  }
  return out;
}

std::vector<const ad::Param*> TransformerModel::params() const {
  auto mutable_params = const_cast<TransformerModel*>(this)->params();
  return {mutable_params.begin(), mutable_params.end()};
}

std::vector<LinearLayer*> TransformerModel::linears() {
  std::vector<LinearLayer*> out;
  for (auto& b : encoders)
    for (auto* l : b.linears()) out.push_back(l);
  for (auto* head : {&intent_head, &slot_head}) {
    out.push_back(&head->fc1);
    out.push_back(&head->fc2);
  }
  return out;
}

std::vector<const LinearLayer*> TransformerModel::linears() const {
  auto m = const_cast<TransformerModel*>(this)->linears();
  return {m.begin(), m.end()};
}

bool TransformerModel::has_quantized_layers() const {
  if (embedding.quantized()) return true;
  const auto ls = linears();
  return std::any_of(ls.begin(), ls.end(), [](const LinearLayer* l) { return l->quantized(); });
}

namespace {

std::size_t argmax_row(const Tensor& t, std::size_t r) {
  const std::size_t c = t.cols();
  const auto begin = t.data.begin() + r * c;
  return static_cast<std::size_t>(std::max_element(begin, begin + c) - begin);
}

}  // namespace

Prediction predict(const TransformerModel& model, std::span<const std::size_t> ids, Mode mode) {
  ad::Tape tape(false);
  const auto trace = model.forward(tape, ids, mode);
  Prediction p;
  p.intent = argmax_row(trace.intent_logits.value(), 0);
  const Tensor& slots = trace.slot_logits.value();
  for (std::size_t r = 0; r < slots.rows(); ++r) p.slots.push_back(argmax_row(slots, r));
  return p;
}

void init_activation_scales(TransformerModel& model, std::span<const std::vector<std::size_t>> sequences) {
  std::map<const LinearLayer*, double> maxima;
  LinearObserver obs = [&](const LinearLayer& l, const Tensor& x) {
    if (!l.quantized()) return;
    double& m = maxima[&l];
    m = std::max(m, max_abs(x.data));
  };
  for (const auto& seq : sequences) {
    ad::Tape tape(false);
    model.forward(tape, seq, Mode::InferFp, &obs);
  }
  for (LinearLayer* l : model.linears()) {
    if (!l->quantized()) continue;
    const double m = maxima.count(l) ? maxima[l] : 0.0;
    l->activation_scale.value[0] = quant::init_scale(std::span<const double>(&m, 1), l->activation_bits);
  }
}

void calibrate_int_stages(TransformerModel& model, std::span<const std::vector<std::size_t>> sequences) {
  std::map<const LinearLayer*, std::vector<double>> maxima;
  LinearObserver obs = [&](const LinearLayer& l, const Tensor& x) {
    if (!l.quantized()) return;
    const auto m = l.stage_maxima(x);
    auto& acc = maxima[&l];
    if (acc.empty()) acc.assign(m.size(), 0.0);
    for (std::size_t s = 0; s < m.size(); ++s) acc[s] = std::max(acc[s], m[s]);
  };
  for (const auto& seq : sequences) {
    ad::Tape tape(false);
    model.forward(tape, seq, Mode::Train, &obs);
  }
  const double cmax = quant::code_max(8);
  for (LinearLayer* l : model.linears()) {
    if (!l->quantized()) continue;
    const auto it = maxima.find(l);
    for (std::size_t s = 0; s < l->stage_scales.size(); ++s) {
      const double m = it == maxima.end() ? 0.0 : it->second[s];
      l->stage_scales[s] = m > 0.0 ? m / cmax : 1.0;
    }
  }
}

namespace {

void copy_shared(const TransformerModel& src, TransformerModel& dst) {
  dst.position.value = src.position.value;
  for (std::size_t i = 0; i < src.encoders.size(); ++i) {
    dst.encoders[i].ln1.gamma.value = src.encoders[i].ln1.gamma.value;
    dst.encoders[i].ln1.beta.value = src.encoders[i].ln1.beta.value;
    dst.encoders[i].ln2.gamma.value = src.encoders[i].ln2.gamma.value;
    dst.encoders[i].ln2.beta.value = src.encoders[i].ln2.beta.value;
  }
}

void set_linear_from_dense(LinearLayer& dst, const LinearLayer& src, bool exact_tt) {
  const Tensor w = src.dense_weight();
  if (exact_tt) {
    auto ex = tt::exact_tt_from_dense(w, dst.plan.row_factors, dst.plan.col_factors);
    dst.plan = ex.plan;
    dst.cores.clear();
    for (std::size_t k = 0; k < ex.cores.size(); ++k)
      dst.cores.push_back({dst.name + ".core" + std::to_string(k), std::move(ex.cores[k])});
  } else {
    dst.weight.value = w;
  }
  dst.bias.value = src.bias.value;
}

}  // namespace

TransformerModel to_dense(const TransformerModel& model) {
  TransformerModel out(dense_variant(model.config()));
  out.embedding.table.value = model.embedding.dense_table();
  copy_shared(model, out);
  const auto src = model.linears();
  const auto dst = out.linears();
  for (std::size_t i = 0; i < src.size(); ++i) set_linear_from_dense(*dst[i], *src[i], false);
  return out;
}

TransformerModel exact_tt_copy(const TransformerModel& dense, const ModelConfig& layout) {
  ModelConfig cfg = layout;
  cfg.weight_bits = 32;
  TransformerModel out(cfg);
  if (out.encoders.size() != dense.encoders.size() || out.embedding.hidden() != dense.embedding.hidden())
    throw StructuralError("exact_tt_copy: architectures differ");
  if (out.embedding.compressed) {
    auto ex = tt::exact_ttm_from_dense(dense.embedding.dense_table(), out.embedding.plan.row_factors,
                                       out.embedding.plan.col_factors);
    out.embedding.plan = ex.plan;
    out.embedding.cores.clear();
    for (std::size_t k = 0; k < ex.cores.size(); ++k)
      out.embedding.cores.push_back({"embedding.core" + std::to_string(k), std::move(ex.cores[k])});
  } else {
    out.embedding.table.value = dense.embedding.dense_table();
  }
  copy_shared(dense, out);
  const auto src = dense.linears();
  const auto dst = out.linears();
  for (std::size_t i = 0; i < src.size(); ++i) set_linear_from_dense(*dst[i], *src[i], dst[i]->compressed);
  return out;
}

void snapshot_in_place(TransformerModel& model) {
  auto freeze_cores = [](std::vector<ad::Param>& cores, ad::Param& scale, int bits) {
    scale.value[0] = to_f32(scale.value[0]);
    const double delta = scale.value[0];
    for (auto& c : cores) {
      const auto codes = quant::quantize(c.value.data, delta, bits).codes;
      for (std::size_t i = 0; i < codes.size(); ++i) c.value.data[i] = delta * static_cast<double>(codes[i]);
    }
  };
  if (model.embedding.quantized()) {
    freeze_cores(model.embedding.cores, model.embedding.weight_scale, model.embedding.weight_bits);
  } else {
    for (auto& c : model.embedding.cores) round_f32(c.value);
    round_f32(model.embedding.table.value);
  }
  round_f32(model.position.value);
  for (auto& b : model.encoders) {
    for (auto* ln : {&b.ln1, &b.ln2}) {
      round_f32(ln->gamma.value);
      round_f32(ln->beta.value);
    }
  }
  for (LinearLayer* l : model.linears()) {
    if (l->quantized()) {
      freeze_cores(l->cores, l->weight_scale, l->weight_bits);
      l->activation_scale.value[0] = to_f32(l->activation_scale.value[0]);
      for (double& s : l->stage_scales) s = to_f32(s);
    } else {
      for (auto& c : l->cores) round_f32(c.value);
      round_f32(l->weight.value);
    }
    round_f32(l->bias.value);
  }
}

TransformerModel snapshot(const TransformerModel& model) {
  TransformerModel copy = model;
  snapshot_in_place(copy);
  return copy;
}

// ---------------------------------------------------------------------------------------------
// Accounting

namespace {

struct LinearShape {
  std::string name;
  bool compressed = false;
  tt::TensorShapePlan plan;
  std::size_t rows = 0, cols = 0;
  int weight_bits = 32;
  int activation_bits = 32;
};

SizeItem linear_item(const LinearShape& s) {
  SizeItem item;
  item.name = s.name;
  if (s.compressed) {
    for (std::size_t k = 0; k < s.plan.num_cores(); ++k) item.params += s.plan.core_size(k);
    if (quant::is_quantized(s.weight_bits)) {
      item.weight_bytes = quant::packed_size(item.params, s.weight_bits);
      // weight scale, activation scale, requantization scales
      item.scale_bytes = 4 * (2 + (s.plan.num_cores() - 1));
    } else {
      item.weight_bytes = 4 * item.params;
    }
  } else {
    item.params = static_cast<std::uint64_t>(s.rows) * s.cols;
    item.weight_bytes = 4 * item.params;
  }
  item.params += s.rows;
  item.bias_bytes = 4 * s.rows;
  return item;
}

SizeItem embedding_item(bool compressed, const tt::TensorShapePlan& plan, std::size_t vocab, std::size_t hidden,
                        int bits) {
  SizeItem item;
  item.name = "embedding";
  if (compressed) {
    for (std::size_t k = 0; k < plan.num_cores(); ++k) item.params += plan.core_size(k);
    if (quant::is_quantized(bits)) {
      item.weight_bytes = quant::packed_size(item.params, bits);
      item.scale_bytes = 4;
    } else {
      item.weight_bytes = 4 * item.params;
    }
  } else {
    item.params = static_cast<std::uint64_t>(vocab) * hidden;
    item.weight_bytes = 4 * item.params;
  }
  return item;
}

SizeItem plain_item(std::string name, std::uint64_t params) {
  SizeItem item;
  item.name = std::move(name);
  item.params = params;
  item.other_bytes = 4 * params;
  return item;
}

SizeReport finish(std::vector<SizeItem> items) {
  SizeReport r;
  r.items = std::move(items);
  for (const auto& i : r.items) {
    r.total_bytes += i.total();
    r.total_params += i.params;
  }
  return r;
}

std::vector<LinearShape> config_linears(const ModelConfig& c) {
  std::vector<LinearShape> out;
  const std::size_t h = c.hidden;
  auto add = [&](std::string name, bool compressed, const tt::TensorShapePlan& plan, std::size_t rows,
                 std::size_t cols, int bits) {
    LinearShape s;
    s.name = std::move(name);
    s.compressed = compressed;
    s.plan = compressed ? plan : tt::TensorShapePlan{};
    s.rows = rows;
    s.cols = cols;
    s.weight_bits = compressed ? bits : 32;
    s.activation_bits = quant::is_quantized(s.weight_bits) ? c.activation_bits : 32;
    out.push_back(std::move(s));
  };
  const auto attn = c.attention.compressed ? c.attention_plan() : tt::TensorShapePlan{};
  const auto up = c.feed_forward.compressed ? c.ffn_up_plan() : tt::TensorShapePlan{};
  const auto down = c.feed_forward.compressed ? c.ffn_down_plan() : tt::TensorShapePlan{};
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "encoder" + std::to_string(i) + ".";
    for (const char* n : {"query", "key", "value", "output"})
      add(p + n, c.attention.compressed, attn, h, h, c.weight_bits);
    add(p + "ffn_up", c.feed_forward.compressed, up, c.ffn, h, c.weight_bits);
    add(p + "ffn_down", c.feed_forward.compressed, down, h, c.ffn, c.weight_bits);
  }
  const auto head = c.head.compressed ? c.head_plan() : tt::TensorShapePlan{};
  add("intent_head.fc1", c.head.compressed, head, h, h, 32);
  add("intent_head.fc2", false, head, c.num_intents, h, 32);
  add("slot_head.fc1", c.head.compressed, head, h, h, 32);
  add("slot_head.fc2", false, head, c.num_slots, h, 32);
  return out;
}

std::vector<SizeItem> shared_items(const ModelConfig& c) {
  std::vector<SizeItem> items;
  items.push_back(plain_item("position", static_cast<std::uint64_t>(c.max_seq_len) * c.hidden));
  for (std::size_t i = 0; i < c.layers; ++i) {
    const std::string p = "encoder" + std::to_string(i) + ".";
    items.push_back(plain_item(p + "ln1", 2 * c.hidden));
    items.push_back(plain_item(p + "ln2", 2 * c.hidden));
  }
  return items;
}

SizeReport breakdown_from(const ModelConfig& c, const SizeItem& emb, const std::vector<LinearShape>& linears) {
  std::vector<SizeItem> items{emb};
  for (auto& s : shared_items(c)) items.push_back(std::move(s));
  for (const auto& l : linears) items.push_back(linear_item(l));
  return finish(std::move(items));
}

tt::CostReport to_cost(const SizeReport& r, const ModelConfig& c) {
  tt::CostReport out;
  out.bytes = r.total_bytes;
  out.param_count_compressed = r.total_params;
  out.param_count_dense = size_breakdown(dense_variant(c)).total_params;
  out.compression_ratio = static_cast<double>(out.param_count_dense) / static_cast<double>(out.param_count_compressed);
  out.fixed_point = quant::is_quantized(c.weight_bits);
  return out;
}

}  // namespace

SizeReport size_breakdown(const ModelConfig& c) {
  c.validate();
  const auto plan = c.embedding.compressed ? c.embedding_plan() : tt::TensorShapePlan{};
  return breakdown_from(c, embedding_item(c.embedding.compressed, plan, c.vocab_size, c.hidden, c.weight_bits),
                        config_linears(c));
}

tt::CostReport model_size_bytes(const ModelConfig& config) { return to_cost(size_breakdown(config), config); }

tt::CostReport model_size_bytes(const TransformerModel& model) {
  // Built from the live layers: exact copies may carry ranks the config does not describe.
  const auto& c = model.config();
  const auto& e = model.embedding;
  std::vector<LinearShape> shapes;
  for (const LinearLayer* l : model.linears()) {
    LinearShape s;
    s.name = l->name;
    s.compressed = l->compressed;
    s.plan = l->plan;
    s.rows = l->out_features();
    s.cols = l->in_features();
    s.weight_bits = l->weight_bits;
    s.activation_bits = l->activation_bits;
    shapes.push_back(std::move(s));
  }
  const auto report = breakdown_from(c, embedding_item(e.compressed, e.plan, e.vocab_size(), e.hidden(), e.weight_bits),
                                     shapes);
  return to_cost(report, c);
}

tt::CostReport model_flops(const ModelConfig& c, std::size_t seq_len) {
  c.validate();
  tt::CostReport total;
  total.convention = tt::kFlopsConvention;
  for (const auto& l : config_linears(c)) {
    if (l.name.rfind("encoder", 0) != 0) continue;
    const double dense = 2.0 * static_cast<double>(l.rows) * static_cast<double>(l.cols) * static_cast<double>(seq_len);
    total.dense_flops += dense;
    total.param_count_dense += static_cast<std::uint64_t>(l.rows) * l.cols;
    if (l.compressed) {
      const auto r = tt::flops_estimate(l.plan, l.weight_bits, l.activation_bits, seq_len, false);
      total.flops += r.flops;
      total.param_count_compressed += r.param_count_compressed;
      total.fixed_point = total.fixed_point || r.fixed_point;
    } else {
      total.flops += dense;
      total.param_count_compressed += static_cast<std::uint64_t>(l.rows) * l.cols;
    }
  }
  if (total.param_count_compressed > 0)
    total.compression_ratio =
        static_cast<double>(total.param_count_dense) / static_cast<double>(total.param_count_compressed);
  return total;
}

}  // namespace ttq::model
