#include "ttq/config.hpp"

#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ttq/errors.hpp"

namespace ttq::config {

using nlohmann::json;
using nlohmann::ordered_json;

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace {

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (const auto& [k, v] : j.items()) {
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
  }
}

template <class T>
void read(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

ordered_json group_to_json(const model::LayerGroup& g) {
  ordered_json j;
  j["compressed"] = g.compressed;
  j["row_factors"] = g.row_factors;
  j["col_factors"] = g.col_factors;
  j["rank"] = g.rank;
  j["ranks"] = g.ranks;
  j["order"] = g.order;
  return j;
}

model::LayerGroup group_from_json(const json& j, model::LayerGroup g, const std::string& where) {
  only_keys(j, {"compressed", "row_factors", "col_factors", "rank", "ranks", "order"}, where);
  read(j, "compressed", g.compressed);
  read(j, "row_factors", g.row_factors);
  read(j, "col_factors", g.col_factors);
  read(j, "rank", g.rank);
  read(j, "ranks", g.ranks);
  read(j, "order", g.order);
  if (g.row_factors.size() != g.col_factors.size())
    throw ConfigError(where + ": row_factors and col_factors need the same length");
  return g;
}

ordered_json model_to_json(const model::ModelConfig& c) {
  ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["hidden"] = c.hidden;
  j["layers"] = c.layers;
  j["heads"] = c.heads;
  j["ffn"] = c.ffn;
  j["max_seq_len"] = c.max_seq_len;
  j["num_intents"] = c.num_intents;
  j["num_slots"] = c.num_slots;
  j["embedding"] = group_to_json(c.embedding);
  j["attention"] = group_to_json(c.attention);
  j["feed_forward"] = group_to_json(c.feed_forward);
  j["head"] = group_to_json(c.head);
  j["weight_bits"] = c.weight_bits;
  j["activation_bits"] = c.activation_bits;
  j["seed"] = c.seed;
  return j;
}

model::ModelConfig model_from_json(const json& j) {
  only_keys(j,
            {"preset", "rank", "vocab_size", "hidden", "layers", "heads", "ffn", "max_seq_len", "num_intents",
             "num_slots", "embedding", "attention", "feed_forward", "head", "weight_bits", "activation_bits", "seed"},
            "model");
  model::ModelConfig c;
  const int bits = j.value("weight_bits", 32);
  if (j.contains("preset")) {
    const auto preset = j.at("preset").get<std::string>();
    if (preset == "atis") {
      c = model::atis_config(bits);
    } else if (preset == "bert") {
      c = model::bert_config(j.value<std::size_t>("rank", 30), bits);
    } else if (preset != "toy") {
      throw ConfigError("unknown model preset '" + preset + "' (expected toy, atis or bert)");
    }
  }
  read(j, "vocab_size", c.vocab_size);
  read(j, "hidden", c.hidden);
  read(j, "layers", c.layers);
  read(j, "heads", c.heads);
  read(j, "ffn", c.ffn);
  read(j, "max_seq_len", c.max_seq_len);
  read(j, "num_intents", c.num_intents);
  read(j, "num_slots", c.num_slots);
  read(j, "weight_bits", c.weight_bits);
  read(j, "activation_bits", c.activation_bits);
  read(j, "seed", c.seed);
  if (j.contains("embedding")) c.embedding = group_from_json(j["embedding"], c.embedding, "model.embedding");
  if (j.contains("attention")) c.attention = group_from_json(j["attention"], c.attention, "model.attention");
  if (j.contains("feed_forward"))
    c.feed_forward = group_from_json(j["feed_forward"], c.feed_forward, "model.feed_forward");
  if (j.contains("head")) c.head = group_from_json(j["head"], c.head, "model.head");
  return c;
}

template <class F>
auto guarded(F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

std::string model_config_to_json(const model::ModelConfig& c) { return model_to_json(c).dump(); }

model::ModelConfig model_config_from_json(std::string_view text) {
  return guarded([&] {
    auto c = model_from_json(json::parse(text));
    c.validate();
    return c;
  });
}

std::uint64_t config_digest(const model::ModelConfig& c) { return fnv1a64(model_config_to_json(c)); }

void apply_seed(RunConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.model.seed = seed;
  c.train.seed = seed;
  c.distill.seed = seed;
  c.synthetic.seed = seed;
}

RunConfig parse_run_config(std::string_view text, const std::filesystem::path& base_dir) {
  return guarded([&] {
    const json j = json::parse(text);
    only_keys(j, {"seed", "output_dir", "data", "model", "train", "distill", "bench", "flops_seq_len"}, "config");
    RunConfig c;
    auto resolve = [&](const std::string& p) {
      std::filesystem::path path(p);
      return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    };
    if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>());
    if (j.contains("model")) c.model = model_from_json(j["model"]);
    if (j.contains("data")) {
      const auto& d = j["data"];
      only_keys(d, {"dir", "generate"}, "data");
      if (d.contains("dir")) c.data_dir = resolve(d["dir"].get<std::string>());
      if (d.contains("generate")) {
        const auto& g = d["generate"];
        only_keys(g, {"vocab_size", "num_intents", "num_slots", "num_examples", "min_len", "max_len"}, "data.generate");
        c.generate = true;
        c.synthetic.vocab_size = g.value("vocab_size", c.model.vocab_size);
        c.synthetic.num_intents = g.value("num_intents", c.model.num_intents);
        c.synthetic.num_slots = g.value("num_slots", c.model.num_slots);
        read(g, "num_examples", c.synthetic.num_examples);
        read(g, "min_len", c.synthetic.min_len);
        read(g, "max_len", c.synthetic.max_len);
        c.synthetic.validate();
      }
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      only_keys(t, {"lr", "beta1", "beta2", "eps", "batch_size", "epochs", "calibration_examples", "linear_decay"}, "train");
      read(t, "lr", c.train.lr);
      read(t, "beta1", c.train.beta1);
      read(t, "beta2", c.train.beta2);
      read(t, "eps", c.train.eps);
      read(t, "batch_size", c.train.batch_size);
      read(t, "epochs", c.train.epochs);
      read(t, "calibration_examples", c.train.calibration_examples);
      read(t, "linear_decay", c.train.linear_decay);
    }
    if (j.contains("distill")) {
      const auto& d = j["distill"];
      only_keys(d,
                {"temperature", "stage_epochs", "final_epochs", "stage_lr", "final_lr", "weights", "batch_size",
                 "teacher_checkpoint"},
                "distill");
      read(d, "temperature", c.distill.temperature);
      read(d, "stage_epochs", c.distill.stage_epochs);
      read(d, "final_epochs", c.distill.final_epochs);
      read(d, "stage_lr", c.distill.stage_lr);
      read(d, "final_lr", c.distill.final_lr);
      read(d, "batch_size", c.distill.batch_size);
      if (d.contains("weights")) {
        const auto& w = d["weights"];
        only_keys(w, {"mse", "cos", "attn", "soft"}, "distill.weights");
        read(w, "mse", c.distill.weights.mse);
        read(w, "cos", c.distill.weights.cos);
        read(w, "attn", c.distill.weights.attn);
        read(w, "soft", c.distill.weights.soft);
      }
      if (d.contains("teacher_checkpoint")) c.teacher_checkpoint = resolve(d["teacher_checkpoint"].get<std::string>());
    }
    c.distill.beta1 = c.train.beta1;
    c.distill.beta2 = c.train.beta2;
    c.distill.eps = c.train.eps;
    c.distill.calibration_examples = c.train.calibration_examples;
    if (j.contains("bench")) {
      const auto& b = j["bench"];
      only_keys(b, {"shapes", "rank", "order", "repetitions", "batch"}, "bench");
      read(b, "shapes", c.bench.shapes);
      read(b, "rank", c.bench.rank);
      read(b, "order", c.bench.order);
      read(b, "repetitions", c.bench.repetitions);
      read(b, "batch", c.bench.batch);
      if (c.bench.repetitions == 0 || c.bench.batch == 0) throw ConfigError("bench repetitions and batch must be >= 1");
    }
    read(j, "flops_seq_len", c.flops_seq_len);
    apply_seed(c, j.value<std::uint64_t>("seed", 1));
    if (j.contains("model") && j["model"].contains("seed")) c.model.seed = j["model"]["seed"].get<std::uint64_t>();

    c.model.validate();
    c.train.validate();
    c.distill.validate();
    if (!c.teacher_checkpoint.empty() && !std::filesystem::exists(c.teacher_checkpoint))
      throw ConfigError("teacher checkpoint " + c.teacher_checkpoint.string() + " does not exist");
    if (j.contains("data") && !c.generate && !std::filesystem::exists(c.data_dir / "meta.json"))
      throw ConfigError("dataset directory " + c.data_dir.string() + " has no meta.json");
    return c;
  });
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  RunConfig c = parse_run_config(ss.str(), path.parent_path());
  apply_env_seed(c);
  return c;
}

void apply_env_seed(RunConfig& c) {
  const char* env = std::getenv("TTQ_SEED");
  if (!env || !*env) return;
  try {
    std::size_t used = 0;
    const auto seed = std::stoull(env, &used);
    if (used != std::string(env).size() || env[0] == '-') throw std::invalid_argument("trailing characters");
    apply_seed(c, seed);
  } catch (const std::exception&) {
    throw ConfigError(std::string("TTQ_SEED is not an unsigned integer: ") + env);
  }
}

std::string run_config_to_json(const RunConfig& c) {
  ordered_json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir.string();
  j["data"] = {{"dir", c.data_dir.string()}};
  if (c.generate) {
    j["data"]["generate"] = {{"vocab_size", c.synthetic.vocab_size},     {"num_intents", c.synthetic.num_intents},
                             {"num_slots", c.synthetic.num_slots},       {"num_examples", c.synthetic.num_examples},
                             {"min_len", c.synthetic.min_len},           {"max_len", c.synthetic.max_len}};
  }
  j["model"] = model_to_json(c.model);
  j["train"] = {{"lr", c.train.lr},
                {"beta1", c.train.beta1},
                {"beta2", c.train.beta2},
                {"eps", c.train.eps},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs},
                {"calibration_examples", c.train.calibration_examples},
                {"linear_decay", c.train.linear_decay}};
  j["distill"] = {{"temperature", c.distill.temperature},
                  {"stage_epochs", c.distill.stage_epochs},
                  {"final_epochs", c.distill.final_epochs},
                  {"stage_lr", c.distill.stage_lr},
                  {"final_lr", c.distill.final_lr},
                  {"batch_size", c.distill.batch_size},
                  {"weights",
                   {{"mse", c.distill.weights.mse},
                    {"cos", c.distill.weights.cos},
                    {"attn", c.distill.weights.attn},
                    {"soft", c.distill.weights.soft}}}};
  if (!c.teacher_checkpoint.empty()) j["distill"]["teacher_checkpoint"] = c.teacher_checkpoint.string();
  j["bench"] = {{"shapes", c.bench.shapes},
                {"rank", c.bench.rank},
                {"order", c.bench.order},
                {"repetitions", c.bench.repetitions},
                {"batch", c.bench.batch}};
  j["flops_seq_len"] = c.flops_seq_len;
  return j.dump(2);
}

void write_manifest(const std::filesystem::path& dir, const RunConfig& c, const std::string& command,
                    const std::vector<std::string>& artifacts) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  const std::string resolved = run_config_to_json(c);
  ordered_json m;
  m["command"] = command;
  m["version"] = kVersion;
  m["seed"] = c.seed;
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(config_digest(c.model)));
  m["model_config_digest"] = digest;
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(fnv1a64(resolved)));
  m["run_config_digest"] = digest;
  m["compiler"] = __VERSION__;
  m["artifacts"] = artifacts;
  m["config"] = ordered_json::parse(resolved);
  std::ofstream out(dir / "manifest.json", std::ios::binary);
  if (!out) throw IoError("cannot write " + (dir / "manifest.json").string());
  out << m.dump(2) << '\n';
}

}  // namespace ttq::config
