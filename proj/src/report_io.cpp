#include "sbfa/report_io.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>

namespace sbfa {

namespace {

using ojson = nlohmann::ordered_json;

// JSON has no NaN/Inf; they travel as strings.
ojson num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return "nan";
  return v > 0 ? "inf" : "-inf";
}

double num_from(const nlohmann::json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  throw std::invalid_argument("bad number '" + s + "' in report");
}

std::string fmt_num(double v) { return fmt::format("{}", v); }

ojson candidate_json(const CandidateRecord& r) {
  ojson j;
  j["tensor"] = r.tensor;
  j["tensor_id"] = r.flip.ref.tensor;
  j["layer_index"] = r.layer_index;
  j["param_kind"] = r.param_kind;
  j["flat_index"] = r.flip.ref.index;
  j["bit"] = r.flip.bit_position;
  j["old_value"] = num(r.flip.old_value);
  j["new_value"] = num(r.flip.new_value);
  j["delta"] = num(r.flip.delta);
  j["impact_score"] = num(r.flip.impact_score);
  j["finite"] = r.flip.finite;
  j["accuracy"] = r.accuracy ? ojson(*r.accuracy) : ojson(nullptr);
  j["error_tensor"] = r.error_tensor.empty() ? ojson(nullptr) : ojson(r.error_tensor);
  return j;
}

CandidateRecord candidate_from(const nlohmann::json& j) {
  CandidateRecord r;
  r.tensor = j.at("tensor").get<std::string>();
  r.flip.ref.tensor = j.at("tensor_id").get<std::size_t>();
  r.layer_index = j.at("layer_index").get<int>();
  r.param_kind = j.at("param_kind").get<std::string>();
  r.flip.ref.index = j.at("flat_index").get<std::size_t>();
  r.flip.bit_position = j.at("bit").get<int>();
  r.flip.old_value = num_from(j.at("old_value"));
  r.flip.new_value = num_from(j.at("new_value"));
  r.flip.delta = num_from(j.at("delta"));
  r.flip.impact_score = num_from(j.at("impact_score"));
  r.flip.finite = j.at("finite").get<bool>();
  if (!j.at("accuracy").is_null()) r.accuracy = j.at("accuracy").get<double>();
  if (!j.at("error_tensor").is_null()) r.error_tensor = j.at("error_tensor").get<std::string>();
  return r;
}

std::string header(const AttackReport& r, const char* columns) {
  return fmt::format("# config={}\n{}\n", r.config.dump(), columns);
}

}  // namespace

ojson report_to_json(const AttackReport& r) {
  ojson j;
  j["config"] = ojson::parse(r.config.dump());
  j["task"] = r.task;
  j["seed"] = r.seed;
  j["threshold"] = r.threshold;
  j["pre_acc"] = r.pre_acc;
  j["post_acc"] = r.post_acc;
  j["flip_count"] = r.flip_count();
  j["crit_1flip_count"] = r.crit_1flip_count;
  j["termination"] = termination_name(r.termination);
  j["error_tensor"] = r.error_tensor.empty() ? ojson(nullptr) : ojson(r.error_tensor);
  j["audit_violations"] = r.audit_violations;
  j["applied_flips"] = ojson::array();
  for (const auto& a : r.applied) j["applied_flips"].push_back(candidate_json(a));
  j["iterations"] = ojson::array();
  for (const auto& it : r.iterations) {
    ojson ij;
    ij["iteration"] = it.iteration;
    ij["loss"] = num(it.loss);
    ij["weights_considered"] = it.weights_considered;
    ij["weights_scored"] = it.weights_scored;
    ij["layers_early_broken"] = it.layers_early_broken;
    ij["chosen"] = it.chosen ? ojson(*it.chosen) : ojson(nullptr);
    ij["accuracy_after"] = it.accuracy_after;
    ij["candidates"] = ojson::array();
    for (const auto& c : it.candidates) ij["candidates"].push_back(candidate_json(c));
    j["iterations"].push_back(std::move(ij));
  }
  j["transfer"] = ojson::array();
  for (const auto& t : r.transfer) {
    j["transfer"].push_back({{"task", t.task}, {"pre_acc", num(t.pre_acc)},
                             {"post_acc", num(t.post_acc)}});
  }
  return j;
}

AttackReport report_from_json(const nlohmann::json& j) {
  AttackReport r;
  r.config = j.at("config");
  r.task = j.at("task").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.threshold = j.at("threshold").get<double>();
  r.pre_acc = j.at("pre_acc").get<double>();
  r.post_acc = j.at("post_acc").get<double>();
  r.crit_1flip_count = j.at("crit_1flip_count").get<std::size_t>();
  const auto term = parse_termination(j.at("termination").get<std::string>());
  if (!term) throw std::invalid_argument("unknown termination in report");
  r.termination = *term;
  if (!j.at("error_tensor").is_null()) r.error_tensor = j.at("error_tensor").get<std::string>();
  r.audit_violations = j.at("audit_violations").get<std::size_t>();
  for (const auto& a : j.at("applied_flips")) r.applied.push_back(candidate_from(a));
  for (const auto& ij : j.at("iterations")) {
    IterationRecord it;
    it.iteration = ij.at("iteration").get<int>();
    it.loss = num_from(ij.at("loss"));
    it.weights_considered = ij.at("weights_considered").get<std::size_t>();
    it.weights_scored = ij.at("weights_scored").get<std::size_t>();
    it.layers_early_broken = ij.at("layers_early_broken").get<std::size_t>();
    if (!ij.at("chosen").is_null()) it.chosen = ij.at("chosen").get<std::size_t>();
    it.accuracy_after = ij.at("accuracy_after").get<double>();
    for (const auto& c : ij.at("candidates")) it.candidates.push_back(candidate_from(c));
    r.iterations.push_back(std::move(it));
  }
  for (const auto& t : j.at("transfer")) {
    r.transfer.push_back({t.at("task").get<std::string>(), num_from(t.at("pre_acc")),
                          num_from(t.at("post_acc"))});
  }
  return r;
}

std::string flips_csv(const AttackReport& r) {
  std::string out = header(r,
                           "iteration,tensor,layer_index,param_kind,flat_index,bit,old_value,"
                           "new_value,delta,impact_score,accuracy_after");
  std::size_t n = 0;
  for (const auto& it : r.iterations) {
    if (!it.chosen || n >= r.applied.size()) continue;
    const auto& a = r.applied[n++];
    out += fmt::format("{},{},{},{},{},{},{},{},{},{},{}\n", it.iteration, a.tensor, a.layer_index,
                       a.param_kind, a.flip.ref.index, a.flip.bit_position,
                       fmt_num(a.flip.old_value), fmt_num(a.flip.new_value),
                       fmt_num(a.flip.delta), fmt_num(a.flip.impact_score),
                       a.error_tensor.empty() ? fmt_num(it.accuracy_after) : "error");
  }
  return out;
}

std::string census_csv(const AttackReport& r) {
  std::string out = header(r,
                           "rank,tensor,layer_index,param_kind,flat_index,bit,delta,impact_score,"
                           "post_flip_accuracy,critical");
  for (const auto& row : census_from_report(r).rows) {
    const auto& c = row.record;
    out += fmt::format("{},{},{},{},{},{},{},{},{},{}\n", row.rank, c.tensor, c.layer_index,
                       c.param_kind, c.flip.ref.index, c.flip.bit_position, fmt_num(c.flip.delta),
                       fmt_num(c.flip.impact_score),
                       c.accuracy ? fmt_num(*c.accuracy) : std::string("error"),
                       row.critical ? 1 : 0);
  }
  return out;
}

std::string distribution_csv(const AttackReport& r) {
  std::string out = header(r, "layer_index,param_kind,count");
  for (const auto& d : distribution_report(census_from_report(r))) {
    out += fmt::format("{},{},{}\n", d.layer_index, d.param_kind, d.count);
  }
  return out;
}

std::string transfer_csv(const AttackReport& r) {
  std::string out = header(r, "task,pre_acc,post_acc");
  for (const auto& t : r.transfer) {
    out += fmt::format("{},{},{}\n", t.task, fmt_num(t.pre_acc), fmt_num(t.post_acc));
  }
  return out;
}

std::string timings_csv(const AttackReport& r) {
  std::string out = header(r, "phase,description,seconds");
  out += fmt::format("1,setup,{:.6f}\n", r.timings.setup);
  out += fmt::format("2,gradient,{:.6f}\n", r.timings.gradient);
  out += fmt::format("3,rank_top_k,{:.6f}\n", r.timings.rank);
  out += fmt::format("4,evaluate_candidates,{:.6f}\n", r.timings.evaluate);
  const double total = r.timings.setup + r.timings.gradient + r.timings.rank + r.timings.evaluate;
  out += fmt::format("total,all,{:.6f}\n", total);
  return out;
}

nlohmann::ordered_json timings_to_json(const PhaseTimings& t) {
  return {{"setup", t.setup}, {"gradient", t.gradient}, {"rank", t.rank},
          {"evaluate", t.evaluate}};
}

PhaseTimings timings_from_json(const nlohmann::json& j) {
  return {j.at("setup").get<double>(), j.at("gradient").get<double>(), j.at("rank").get<double>(),
          j.at("evaluate").get<double>()};
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("failed to write " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_report_dir(const std::filesystem::path& dir, const AttackReport& report) {
  std::filesystem::create_directories(dir);
  write_text(dir / "report.json", report_to_json(report).dump(2) + "\n");
  write_text(dir / "flips.csv", flips_csv(report));
  write_text(dir / "census.csv", census_csv(report));
  write_text(dir / "distribution.csv", distribution_csv(report));
  write_text(dir / "transfer.csv", transfer_csv(report));
  write_text(dir / "timings.json", timings_to_json(report.timings).dump(2) + "\n");
  write_text(dir / "timings.csv", timings_csv(report));
}

AttackReport read_report(const std::filesystem::path& dir) {
  const auto text = read_text(dir / "report.json");
  try {
    return report_from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed report " + (dir / "report.json").string() + ": " +
                             e.what());
  }
}

void regenerate_csvs(const std::filesystem::path& dir) {
  AttackReport r = read_report(dir);
  if (std::filesystem::exists(dir / "timings.json")) {
    r.timings = timings_from_json(nlohmann::json::parse(read_text(dir / "timings.json")));
    write_text(dir / "timings.csv", timings_csv(r));
  }
  write_text(dir / "flips.csv", flips_csv(r));
  write_text(dir / "census.csv", census_csv(r));
  write_text(dir / "distribution.csv", distribution_csv(r));
  write_text(dir / "transfer.csv", transfer_csv(r));
}

}  // namespace sbfa
