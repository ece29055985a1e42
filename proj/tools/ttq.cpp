// ttq: command-line driver. Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 I/O, 6 usage,
// 1 anything else.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ttq/checkpoint.hpp"
#include "ttq/config.hpp"
#include "ttq/dataset.hpp"
#include "ttq/distill.hpp"
#include "ttq/errors.hpp"
#include "ttq/model.hpp"
#include "ttq/quant.hpp"
#include "ttq/report.hpp"
#include "ttq/tensor_core.hpp"
#include "ttq/train.hpp"

namespace fs = std::filesystem;
using namespace ttq;
using nlohmann::ordered_json;

namespace {

struct Common {
  std::string config_path;
  std::string out;
  std::optional<std::uint64_t> seed;
};

config::RunConfig load(const Common& c) {
  config::RunConfig rc;
  if (c.config_path.empty()) {
    rc = config::parse_run_config("{}");
    config::apply_env_seed(rc);
  } else {
    rc = config::load_run_config(c.config_path);
  }
  if (c.seed) config::apply_seed(rc, *c.seed);
  if (!c.out.empty()) rc.output_dir = c.out;
  return rc;
}

/// Line-delimited JSON records next to the text output.
class Records {
 public:
  Records(const fs::path& dir, const std::string& name) : path_(dir / name) {
    fs::create_directories(dir);
    out_.open(path_, std::ios::trunc);
    if (!out_) throw IoError("cannot write " + path_.string());
  }
  void write(const std::string& line) {
    out_ << line << '\n';
    out_.flush();
  }
  std::string filename() const { return path_.filename().string(); }

 private:
  fs::path path_;
  std::ofstream out_;
};

data::Dataset dataset_for(const config::RunConfig& rc) {
  if (rc.generate && !fs::exists(rc.data_dir / "meta.json")) {
    auto ds = data::generate_synthetic(rc.synthetic);
    data::write_dataset(ds, rc.data_dir, &rc.synthetic);
    std::cout << "generated " << rc.synthetic.num_examples << " examples in " << rc.data_dir.string() << '\n';
    return ds;
  }
  return data::load_dataset(rc.data_dir);
}

void print_metrics(const char* label, const train::Metrics& m) {
  std::cout << label << ": loss " << m.loss << "  intent_acc " << m.intent_accuracy << "  slot_f1 " << m.slot_f1
            << "  (" << m.examples << " examples)\n";
}

std::string metrics_record(const char* split, const train::Metrics& m) {
  ordered_json j{{"type", "metrics"}, {"split", split}, {"metrics", ordered_json::parse(report::metrics_json(m))}};
  return j.dump();
}

int cmd_train(const Common& c) {
  auto rc = load(c);
  const auto ds = dataset_for(rc);
  model::TransformerModel m(rc.model);
  Records rec(rc.output_dir, "train.jsonl");
  std::vector<std::string> artifacts{rec.filename()};
  train::TrainReport r;
  try {
    r = train::train_end_to_end(m, ds, rc.train, [&](const train::EpochRecord& e) {
      report::print_epoch(std::cout, e);
      rec.write(report::epoch_json(e));
    });
  } catch (const NumericError&) {
    // Parameters are back at the start of the failing epoch.
    io::save_checkpoint(m, rc.output_dir / "last_good.ttq");
    artifacts.push_back("last_good.ttq");
    config::write_manifest(rc.output_dir, rc, "train", artifacts);
    std::cerr << "saved " << (rc.output_dir / "last_good.ttq").string() << '\n';
    throw;
  }
  const auto layout = io::save_checkpoint(m, rc.output_dir / "model.ttq");
  artifacts.push_back("model.ttq");
  print_metrics("final dev", r.final_dev);
  rec.write(metrics_record("dev", r.final_dev));
  std::cout << "checkpoint " << (rc.output_dir / "model.ttq").string() << " (" << layout.file_bytes << " bytes)\n";
  config::write_manifest(rc.output_dir, rc, "train", artifacts);
  return 0;
}

model::TransformerModel teacher_for(const config::RunConfig& rc, const data::Dataset& ds,
                                   std::vector<std::string>& artifacts) {
  if (!rc.teacher_checkpoint.empty()) return io::load_checkpoint(rc.teacher_checkpoint);
  model::TransformerModel t(model::dense_variant(rc.model));
  std::cout << "training dense teacher\n";
  auto r = train::train_end_to_end(t, ds, rc.train, [](const train::EpochRecord& e) { report::print_epoch(std::cout, e); });
  print_metrics("teacher dev", r.final_dev);
  io::save_checkpoint(t, rc.output_dir / "teacher.ttq");
  artifacts.push_back("teacher.ttq");
  return t;
}

int cmd_distill(const Common& c, bool compare) {
  auto rc = load(c);
  const auto ds = dataset_for(rc);
  fs::create_directories(rc.output_dir);
  std::vector<std::string> artifacts;
  const auto teacher = teacher_for(rc, ds, artifacts);
  Records rec(rc.output_dir, "distill.jsonl");
  artifacts.push_back(rec.filename());

  if (compare) {
    const auto cmp = distill::compare_schedules(teacher, [&] { return model::TransformerModel(rc.model); }, ds, rc.distill);
    for (const auto* sched : {&cmp.layer_by_layer, &cmp.all_at_once}) {
      const char* name = sched == &cmp.layer_by_layer ? "layer_by_layer" : "all_at_once";
      std::cout << name << ":\n";
      for (const auto& s : sched->stages) report::print_stage(std::cout, s);
      print_metrics("  final test", sched->final_test);
      ordered_json j{{"type", "schedule"},
                     {"schedule", name},
                     {"trajectory", sched->trajectory},
                     {"final_dev", ordered_json::parse(report::metrics_json(sched->final_dev))},
                     {"final_test", ordered_json::parse(report::metrics_json(sched->final_test))}};
      rec.write(j.dump());
    }
    config::write_manifest(rc.output_dir, rc, "distill --compare", artifacts);
    return 0;
  }

  model::TransformerModel student(rc.model);
  distill::DistillReport r;
  try {
    r = distill::run_distillation(teacher, student, ds, rc.distill, [&](const distill::StageRecord& s) {
      report::print_stage(std::cout, s);
      rec.write(report::stage_json(s));
    });
  } catch (const NumericError&) {
    // The student is back at the start of the failing stage.
    io::save_checkpoint(student, rc.output_dir / "last_good.ttq");
    artifacts.push_back("last_good.ttq");
    config::write_manifest(rc.output_dir, rc, "distill", artifacts);
    throw;
  }
  io::save_checkpoint(student, rc.output_dir / "student.ttq");
  artifacts.push_back("student.ttq");
  print_metrics("student dev", r.final_dev);
  print_metrics("student test", r.final_test);
  rec.write(metrics_record("dev", r.final_dev));
  rec.write(metrics_record("test", r.final_test));
  config::write_manifest(rc.output_dir, rc, "distill", artifacts);
  return 0;
}

model::Mode parse_mode(const std::string& s) {
  if (s == "train") return model::Mode::Train;
  if (s == "fp") return model::Mode::InferFp;
  if (s == "int") return model::Mode::InferInt;
  throw UsageError("unknown mode '" + s + "' (expected train, fp or int)");
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& split, const std::string& mode) {
  auto rc = load(c);
  const auto ds = dataset_for(rc);
  const auto m = io::load_checkpoint(checkpoint);
  train::check_compatible(m, ds);
  const auto* examples = split == "dev" ? &ds.dev : split == "test" ? &ds.test : split == "train" ? &ds.train : nullptr;
  if (!examples) throw UsageError("unknown split '" + split + "'");
  const auto metrics = train::evaluate(m, *examples, parse_mode(mode));
  print_metrics(split.c_str(), metrics);
  Records rec(rc.output_dir, "eval.jsonl");
  rec.write(metrics_record(split.c_str(), metrics));
  config::write_manifest(rc.output_dir, rc, "eval", {rec.filename()});
  return 0;
}

int cmd_report_size(const Common& c) {
  auto rc = load(c);
  const auto breakdown = model::size_breakdown(rc.model);
  const auto dense = model::model_size_bytes(model::dense_variant(rc.model));
  report::print_size_table(std::cout, breakdown, dense);
  Records rec(rc.output_dir, "report-size.jsonl");
  ordered_json j{{"type", "size"}, {"weight_bits", rc.model.weight_bits},
                 {"cost", ordered_json::parse(report::cost_report_to_json(model::model_size_bytes(rc.model)))},
                 {"dense", ordered_json::parse(report::cost_report_to_json(dense))}};
  rec.write(j.dump());
  config::write_manifest(rc.output_dir, rc, "report-size", {rec.filename()});
  return 0;
}

int cmd_report_flops(const Common& c) {
  auto rc = load(c);
  report::print_flops_table(std::cout, rc.model, rc.flops_seq_len);
  Records rec(rc.output_dir, "report-flops.jsonl");
  ordered_json j{{"type", "flops"}, {"seq_len", rc.flops_seq_len},
                 {"cost", ordered_json::parse(report::cost_report_to_json(model::model_flops(rc.model, rc.flops_seq_len)))}};
  rec.write(j.dump());
  config::write_manifest(rc.output_dir, rc, "report-flops", {rec.filename()});
  return 0;
}

struct Timing {
  double mean_us = 0.0;
  double stddev_us = 0.0;
};

template <class F>
Timing time_it(std::size_t reps, F&& f) {
  f();  // warm-up
  std::vector<double> us;
  for (std::size_t i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    us.push_back(std::chrono::duration<double, std::micro>(std::chrono::steady_clock::now() - t0).count());
  }
  Timing t;
  for (double u : us) t.mean_us += u / static_cast<double>(us.size());
  for (double u : us) t.stddev_us += (u - t.mean_us) * (u - t.mean_us) / static_cast<double>(us.size());
  t.stddev_us = std::sqrt(t.stddev_us);
  return t;
}

int cmd_bench(const Common& c) {
  auto rc = load(c);
  const auto& b = rc.bench;
  Records rec(rc.output_dir, "bench.jsonl");
  model::Rng rng(rc.seed);
  std::normal_distribution<double> normal;
  std::cout << "timings are informational (" << b.repetitions << " repetitions, batch " << b.batch << ")\n";
  for (const auto& [rows, cols] : b.shapes) {
    auto dense = model::LinearLayer::dense("dense", rows, cols, rng);
    const auto plan = tt::plan_factorization(rows, cols, b.order, b.rank, tt::Format::TT);
    auto fp = model::LinearLayer::tt("tt_fp32", plan, 32, 32, rng);
    auto q = model::LinearLayer::tt("tt_int8", plan, 8, 8, rng);
    Tensor x = Tensor::matrix(b.batch, cols);
    for (double& v : x.data) v = normal(rng);
    q.weight_scale.value.data[0] = quant::init_scale(q.dense_weight().data, 8);
    q.activation_scale.value.data[0] = quant::init_scale(x.data, 8);
    const auto maxima = q.stage_maxima(x);
    for (std::size_t s = 0; s < maxima.size(); ++s) q.stage_scales[s] = maxima[s] > 0 ? maxima[s] / 127.0 : 1.0;

    auto run = [&](const model::LinearLayer& layer, model::Mode mode) {
      return time_it(b.repetitions, [&] {
        ad::Tape tape(false);
        layer.forward(tape, tape.constant(x), mode);
      });
    };
    const Timing td = run(dense, model::Mode::InferFp);
    const Timing tf = run(fp, model::Mode::InferFp);
    const Timing ti = time_it(b.repetitions, [&] { q.forward_int(x); });
    std::cout << rows << "x" << cols << " (" << tt::describe(plan) << ")\n";
    for (const auto& [name, t] : {std::pair{"dense fp64", td}, std::pair{"tt fp64", tf}, std::pair{"tt int8", ti}}) {
      std::cout << "  " << name << ": " << t.mean_us << " us +- " << t.stddev_us << '\n';
      ordered_json j{{"type", "bench"}, {"rows", rows},         {"cols", cols},           {"kernel", name},
                     {"batch", b.batch}, {"mean_us", t.mean_us}, {"stddev_us", t.stddev_us}, {"repetitions", b.repetitions}};
      rec.write(j.dump());
    }
  }
  config::write_manifest(rc.output_dir, rc, "bench", {rec.filename()});
  return 0;
}

int cmd_gen_data(const Common& c, const std::string& dir) {
  auto rc = load(c);
  const fs::path target = dir.empty() ? rc.data_dir : fs::path(dir);
  const auto ds = data::generate_synthetic(rc.synthetic);
  data::write_dataset(ds, target, &rc.synthetic);
  std::cout << "wrote " << ds.train.size() << "/" << ds.dev.size() << "/" << ds.test.size()
            << " train/dev/test examples to " << target.string() << '\n';
  config::write_manifest(target, rc, "gen-data", {"train.txt", "dev.txt", "test.txt", "meta.json"});
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool config_required) {
  auto* opt = sub->add_option("-c,--config", c.config_path, "run configuration (JSON)");
  if (config_required) opt->required()->check(CLI::ExistingFile);
  sub->add_option("-o,--out", c.out, "output directory (overrides the config)");
  sub->add_option("--seed", c.seed, "seed for every random source (overrides config and TTQ_SEED)");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Tensor-train compressed, quantization-aware transformer toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", config::kVersion);
  Common common;

  auto* train_cmd = app.add_subcommand("train", "end-to-end training");
  add_common(train_cmd, common, true);
  auto* distill_cmd = app.add_subcommand("distill", "layer-by-layer distillation from a dense teacher");
  add_common(distill_cmd, common, true);
  bool compare = false;
  distill_cmd->add_flag("--compare", compare, "also run the all-at-once schedule and report both");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval_cmd, common, true);
  std::string checkpoint, split = "test", mode = "train";
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  eval_cmd->add_option("--split", split, "dev, test or train")->capture_default_str();
  eval_cmd->add_option("--mode", mode, "train (fake-quant), fp or int")->capture_default_str();
  auto* size_cmd = app.add_subcommand("report-size", "parameter and byte accounting");
  add_common(size_cmd, common, false);
  auto* flops_cmd = app.add_subcommand("report-flops", "weighted op counts");
  add_common(flops_cmd, common, false);
  auto* bench_cmd = app.add_subcommand("bench", "time dense vs TT forward passes (no assertions)");
  add_common(bench_cmd, common, false);
  auto* gen_cmd = app.add_subcommand("gen-data", "write the synthetic intent/slot corpus");
  add_common(gen_cmd, common, false);
  std::string data_dir;
  gen_cmd->add_option("--dir", data_dir, "target directory (default: the config's data dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : static_cast<int>(ErrorCategory::Usage);
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*distill_cmd) return cmd_distill(common, compare);
    if (*eval_cmd) return cmd_eval(common, checkpoint, split, mode);
    if (*size_cmd) return cmd_report_size(common);
    if (*flops_cmd) return cmd_report_flops(common);
    if (*bench_cmd) return cmd_bench(common);
    if (*gen_cmd) return cmd_gen_data(common, data_dir);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return static_cast<int>(ErrorCategory::Usage);
}
