#pragma once

// Human-readable tables and JSON-lines records for the CLI.

#include <ostream>
#include <string>

#include "ttq/distill.hpp"
#include "ttq/model.hpp"
#include "ttq/tensor_core.hpp"
#include "ttq/train.hpp"

namespace ttq::report {

std::string cost_report_to_json(const tt::CostReport& r);
/// Inverse of cost_report_to_json; throws ConfigError on missing or mistyped fields.
tt::CostReport cost_report_from_json(std::string_view text);

void print_size_table(std::ostream& os, const model::SizeReport& r, const tt::CostReport& dense);
void print_flops_table(std::ostream& os, const model::ModelConfig& config, std::size_t seq_len);

std::string metrics_json(const train::Metrics& m);
std::string epoch_json(const train::EpochRecord& e);
std::string stage_json(const distill::StageRecord& s);

void print_epoch(std::ostream& os, const train::EpochRecord& e);
void print_stage(std::ostream& os, const distill::StageRecord& s);

}  // namespace ttq::report
