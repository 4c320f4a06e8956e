#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mfdv/eval.hpp"

namespace mfdv::eval {

struct EvalReport {
  std::string model_id;
  std::string dataset_id;
  double clean_accuracy = 0.0;
  std::size_t mc_samples = kDefaultMcSamples;
  std::uint64_t seed = 0;
  std::vector<ReportRow> rows;
  std::map<std::string, Verdict> checklist;
  /// Free-form provenance, e.g. data source and the clean-miss convention.
  std::map<std::string, std::string> metadata;

  bool operator==(const EvalReport&) const = default;
};

/// Deterministic JSON text (sorted keys, shortest round-trip doubles).
std::string to_json(const EvalReport& report);
/// Throws FormatError on malformed input or out-of-range accuracies.
EvalReport from_json(const std::string& text);

std::string to_csv(const EvalReport& report);

/// Writes `path` (JSON) and the CSV companion next to it (extension ".csv").
/// Refuses to overwrite an existing file unless `overwrite` is set.
void write_report(const EvalReport& report, const std::filesystem::path& path, bool overwrite = false);
EvalReport read_report(const std::filesystem::path& path);

/// Per-row accuracy deltas (b - a) as a text table. Rows are matched by attack
/// text; a grid mismatch throws std::invalid_argument listing the missing rows.
std::string diff(const EvalReport& a, const EvalReport& b);

/// Human-readable checklist table.
std::string format_checklist(const std::map<std::string, Verdict>& checklist);

}  // namespace mfdv::eval
