#include "ttq/report.hpp"

#include <cstdio>
#include <iomanip>

#include <json.hpp>

#include "ttq/errors.hpp"

namespace ttq::report {

using nlohmann::ordered_json;

namespace {

ordered_json metrics_obj(const train::Metrics& m) {
  return {{"loss", m.loss}, {"intent_accuracy", m.intent_accuracy}, {"slot_f1", m.slot_f1}, {"examples", m.examples}};
}

std::string mib(std::uint64_t bytes) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", static_cast<double>(bytes) / (1024.0 * 1024.0));
  return buf;
}

}  // namespace

std::string cost_report_to_json(const tt::CostReport& r) {
  ordered_json j{{"param_count_compressed", r.param_count_compressed},
                 {"param_count_dense", r.param_count_dense},
                 {"compression_ratio", r.compression_ratio},
                 {"flops", r.flops},
                 {"dense_flops", r.dense_flops},
                 {"bytes", r.bytes},
                 {"fixed_point", r.fixed_point},
                 {"convention", r.convention}};
  return j.dump();
}

tt::CostReport cost_report_from_json(std::string_view text) {
  try {
    const auto j = ordered_json::parse(text);
    tt::CostReport r;
    r.param_count_compressed = j.at("param_count_compressed").get<std::uint64_t>();
    r.param_count_dense = j.at("param_count_dense").get<std::uint64_t>();
    r.compression_ratio = j.at("compression_ratio").get<double>();
    r.flops = j.at("flops").get<double>();
    r.dense_flops = j.at("dense_flops").get<double>();
    r.bytes = j.at("bytes").get<std::uint64_t>();
    r.fixed_point = j.at("fixed_point").get<bool>();
    r.convention = j.at("convention").get<std::string>();
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("cost report: ") + e.what());
  }
}

void print_size_table(std::ostream& os, const model::SizeReport& r, const tt::CostReport& dense) {
  os << std::left << std::setw(28) << "layer" << std::right << std::setw(12) << "params" << std::setw(12)
     << "weights" << std::setw(10) << "bias" << std::setw(10) << "scales" << std::setw(10) << "other" << '\n';
  for (const auto& it : r.items) {
    os << std::left << std::setw(28) << it.name << std::right << std::setw(12) << it.params << std::setw(12)
       << it.weight_bytes << std::setw(10) << it.bias_bytes << std::setw(10) << it.scale_bytes << std::setw(10)
       << it.other_bytes << '\n';
  }
  os << "total: " << r.total_params << " params, " << r.total_bytes << " bytes (" << mib(r.total_bytes) << " MiB)\n";
  if (dense.bytes > 0) {
    os << "dense fp32: " << dense.bytes << " bytes (" << mib(dense.bytes) << " MiB), compression "
       << std::fixed << std::setprecision(2) << static_cast<double>(dense.bytes) / static_cast<double>(r.total_bytes)
       << "x\n";
    os.unsetf(std::ios::floatfield);
  }
}

void print_flops_table(std::ostream& os, const model::ModelConfig& config, std::size_t seq_len) {
  const auto r = model::model_flops(config, seq_len);
  os << "seq_len " << seq_len << ", W" << config.weight_bits << "A"
     << (config.weight_bits < 32 ? config.activation_bits : 32) << '\n';
  os << "factorized: " << std::setprecision(6) << r.flops << " weighted ops\n";
  os << "dense fp32: " << r.dense_flops << " ops\n";
  os << "ratio:      " << (r.flops > 0 ? r.dense_flops / r.flops : 0.0) << '\n';
  os << "convention: " << r.convention << '\n';
}

std::string metrics_json(const train::Metrics& m) { return metrics_obj(m).dump(); }

std::string epoch_json(const train::EpochRecord& e) {
  ordered_json j{{"type", "epoch"}, {"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev", metrics_obj(e.dev)}};
  return j.dump();
}

std::string stage_json(const distill::StageRecord& s) {
  ordered_json j{{"type", "stage"}, {"stage", s.stage},       {"name", s.name},
                 {"epochs", s.epochs}, {"lr", s.lr},           {"epoch_losses", s.epoch_losses},
                 {"dev_loss", s.dev_loss}, {"dev", metrics_obj(s.dev)}};
  return j.dump();
}

void print_epoch(std::ostream& os, const train::EpochRecord& e) {
  os << "epoch " << e.epoch << "  train_loss " << std::setprecision(5) << e.train_loss << "  dev_loss "
     << e.dev.loss << "  intent_acc " << e.dev.intent_accuracy << "  slot_f1 " << e.dev.slot_f1 << '\n';
}

void print_stage(std::ostream& os, const distill::StageRecord& s) {
  os << s.name << "  epochs " << s.epochs << "  lr " << s.lr << "  last_loss "
     << (s.epoch_losses.empty() ? 0.0 : s.epoch_losses.back()) << "  dev_loss " << s.dev_loss << "  intent_acc "
     << s.dev.intent_accuracy << "  slot_f1 " << s.dev.slot_f1 << '\n';
}

}  // namespace ttq::report
