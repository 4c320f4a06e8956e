#include "mfdv/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "mfdv/errors.hpp"

namespace mfdv::eval {
namespace {

using nlohmann::json;

json row_json(const ReportRow& r) {
  return json{{"attack", r.attack},
              {"epsilon", r.epsilon},
              {"accuracy", r.accuracy},
              {"mean_queries", r.mean_queries},
              {"mean_distortion", {{"l0", r.mean_distortion.l0}, {"l2", r.mean_distortion.l2}, {"linf", r.mean_distortion.linf}}},
              {"examples", r.examples},
              {"partial", r.partial}};
}

ReportRow row_from(const json& j) {
  ReportRow r;
  r.attack = j.at("attack").get<std::string>();
  r.epsilon = j.at("epsilon").get<double>();
  r.accuracy = j.at("accuracy").get<double>();
  r.mean_queries = j.at("mean_queries").get<double>();
  const json& d = j.at("mean_distortion");
  r.mean_distortion = {d.at("l0").get<double>(), d.at("l2").get<double>(), d.at("linf").get<double>()};
  r.examples = j.at("examples").get<std::size_t>();
  r.partial = j.at("partial").get<bool>();
  return r;
}

void check_fraction(double v, const std::string& what) {
  if (!(v >= 0.0 && v <= 1.0)) throw FormatError("report: " + what + " outside [0,1]");
}

std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string quote_csv(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

void write_file(const std::filesystem::path& path, const std::string& text, bool overwrite) {
  if (!overwrite && std::filesystem::exists(path)) {
    throw std::runtime_error("refusing to overwrite existing " + path.string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  out.flush();
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

std::string to_json(const EvalReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) rows.push_back(row_json(r));
  json checklist = json::object();
  for (const auto& [id, v] : report.checklist) {
    checklist[id] = {{"verdict", v.pass ? "pass" : "fail"}, {"evidence", v.evidence}};
  }
  const json j{{"model_id", report.model_id},
               {"dataset_id", report.dataset_id},
               {"clean_accuracy", report.clean_accuracy},
               {"mc_samples", report.mc_samples},
               {"seed", report.seed},
               {"rows", rows},
               {"checklist", checklist},
               {"metadata", report.metadata}};
  return j.dump(2) + "\n";
}

EvalReport from_json(const std::string& text) {
  try {
    const json j = json::parse(text);
    EvalReport r;
    r.model_id = j.at("model_id").get<std::string>();
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.clean_accuracy = j.at("clean_accuracy").get<double>();
    check_fraction(r.clean_accuracy, "clean_accuracy");
    r.mc_samples = j.at("mc_samples").get<std::size_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& row : j.at("rows")) {
      r.rows.push_back(row_from(row));
      check_fraction(r.rows.back().accuracy, "accuracy of " + r.rows.back().attack);
    }
    for (const auto& [id, v] : j.at("checklist").items()) {
      const std::string verdict = v.at("verdict").get<std::string>();
      if (verdict != "pass" && verdict != "fail") throw FormatError("report: bad verdict '" + verdict + "'");
      r.checklist[id] = {verdict == "pass", v.at("evidence").get<std::map<std::string, double>>()};
    }
    r.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
    return r;
  } catch (const json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

std::string to_csv(const EvalReport& report) {
  std::string out = "attack,epsilon,accuracy,mean_queries,linf,l2,l0\n";
  for (const auto& r : report.rows) {
    out += quote_csv(r.attack) + "," + csv_number(r.epsilon) + "," + csv_number(r.accuracy) + "," +
           csv_number(r.mean_queries) + "," + csv_number(r.mean_distortion.linf) + "," + csv_number(r.mean_distortion.l2) +
           "," + csv_number(r.mean_distortion.l0) + "\n";
  }
  return out;
}

void write_report(const EvalReport& report, const std::filesystem::path& path, bool overwrite) {
  std::filesystem::path csv = path;
  csv.replace_extension(".csv");
  if (!overwrite) {
    for (const auto& p : {path, csv}) {
      if (std::filesystem::exists(p)) throw std::runtime_error("refusing to overwrite existing " + p.string());
    }
  }
  write_file(path, to_json(report), overwrite);
  write_file(csv, to_csv(report), overwrite);
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open report " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

std::string diff(const EvalReport& a, const EvalReport& b) {
  std::map<std::string, const ReportRow*> rows_b;
  for (const auto& r : b.rows) rows_b[r.attack] = &r;
  std::set<std::string> in_a;
  std::vector<std::string> missing;
  for (const auto& r : a.rows) {
    in_a.insert(r.attack);
    if (!rows_b.count(r.attack)) missing.push_back("only in first: " + r.attack);
  }
  for (const auto& r : b.rows) {
    if (!in_a.count(r.attack)) missing.push_back("only in second: " + r.attack);
  }
  if (!missing.empty()) {
    std::string msg = "attack grids differ:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw std::invalid_argument(msg);
  }
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-8s %-10s %9s %9s %9s  %s\n", "kind", "eps*255", "first", "second", "delta", "attack");
  out << line;
  auto emit = [&](const std::string& kind, double eps, double x, double y, const std::string& attack) {
    std::snprintf(line, sizeof line, "%-8s %-10.4g %9.4f %9.4f %+9.4f  %s\n", kind.c_str(), eps * 255.0, x, y, y - x,
                  attack.c_str());
    out << line;
  };
  emit("clean", 0.0, a.clean_accuracy, b.clean_accuracy, "-");
  for (const auto& r : a.rows) {
    const ReportRow& s = *rows_b.at(r.attack);
    emit(r.attack.substr(0, r.attack.find(':')), r.epsilon, r.accuracy, s.accuracy, r.attack);
  }
  return out.str();
}

std::string format_checklist(const std::map<std::string, Verdict>& checklist) {
  std::ostringstream out;
  for (const auto& [id, v] : checklist) {
    out << id << "  " << (v.pass ? "PASS" : "FAIL") << " ";
    for (const auto& [k, x] : v.evidence) out << " " << k << "=" << x;
    out << "\n";
  }
  return out.str();
}

}  // namespace mfdv::eval
