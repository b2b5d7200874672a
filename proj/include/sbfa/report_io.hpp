#pragma once

// Persistence of attack reports (report.json) and the CSV exports derived
// from them. Every CSV starts with one "# config=<json>" provenance line,
// followed by a header row.
//
//   flips.csv         iteration,tensor,layer_index,param_kind,flat_index,bit,
//                     old_value,new_value,delta,impact_score,accuracy_after
//   census.csv        rank,tensor,layer_index,param_kind,flat_index,bit,delta,
//                     impact_score,post_flip_accuracy,critical
//   distribution.csv  layer_index,param_kind,count
//   transfer.csv      task,pre_acc,post_acc
//   timings.csv       phase,description,seconds
//
// Wall-clock timings live in timings.json next to report.json so that the
// report itself stays deterministic; every CSV is a pure function of those
// two files.

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "sbfa/attack.hpp"

namespace sbfa {

nlohmann::ordered_json report_to_json(const AttackReport& report);
AttackReport report_from_json(const nlohmann::json& j);

std::string flips_csv(const AttackReport& report);
std::string census_csv(const AttackReport& report);
std::string distribution_csv(const AttackReport& report);
std::string transfer_csv(const AttackReport& report);
std::string timings_csv(const AttackReport& report);

nlohmann::ordered_json timings_to_json(const PhaseTimings& t);
PhaseTimings timings_from_json(const nlohmann::json& j);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// report.json, timings.json and every CSV.
void write_report_dir(const std::filesystem::path& dir, const AttackReport& report);
/// Rewrites every CSV from dir/report.json (and dir/timings.json).
void regenerate_csvs(const std::filesystem::path& dir);
AttackReport read_report(const std::filesystem::path& dir);

}  // namespace sbfa
