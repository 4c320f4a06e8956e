#pragma once

// Robust-accuracy sweeps and the gradient-obfuscation checklist.
//
// Example i draws its attack randomness from derive_seed(seed, i, kAttackStream)
// and every MC vote on it (clean and adversarial) replays derive_seed(seed, i,
// kMcStream), so results do not depend on the thread count and the null attack
// reproduces clean accuracy exactly.

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "mfdv/attacks.hpp"
#include "mfdv/data.hpp"
#include "mfdv/inference.hpp"
#include "mfdv/model.hpp"

namespace mfdv::eval {

struct ExampleOutcome {
  bool clean_correct = false;
  bool robust_correct = false;
  bool attacked = false;  // false for examples already wrong on clean input
  std::size_t queries = 0;
  attacks::Distortion distortion;
};

struct RobustResult {
  double accuracy = 0.0;     // over completed examples
  std::size_t completed = 0;
  bool partial = false;      // an attack threw; `error` holds the first message
  std::string error;
  std::vector<ExampleOutcome> examples;  // one per dataset example; unset past an abort
};

RobustResult robust_accuracy(const nn::Model& model, const data::Dataset& dataset, const attacks::AttackConfig& attack,
                             const EvalOptions& options);

/// One (attack, eps) line of a report. Queries and distortion are averaged over
/// the examples the attack actually ran on and fooled.
struct ReportRow {
  std::string attack;  // attacks::describe() text
  double epsilon = 0.0;
  double accuracy = 0.0;
  double mean_queries = 0.0;
  attacks::Distortion mean_distortion;
  std::size_t examples = 0;
  bool partial = false;

  bool operator==(const ReportRow&) const = default;
};

ReportRow summarize(const attacks::AttackConfig& attack, const RobustResult& result);

struct Verdict {
  bool pass = false;
  std::map<std::string, double> evidence;

  bool operator==(const Verdict&) const = default;
};

struct ChecklistOptions {
  /// Number of leading examples evaluated. 0 is rejected.
  std::size_t budget = 500;
  double epsilon = 8.0 / 255.0;
  std::vector<double> sweep = {1.0 / 255, 2.0 / 255, 4.0 / 255, 8.0 / 255, 16.0 / 255, 32.0 / 255, 64.0 / 255, 128.0 / 255};
  std::size_t pgd_steps = 10;
  std::size_t square_budget = 1000;
  std::size_t noise_samples = 100;
  std::size_t eot_samples = 80;
  double unbounded_max_accuracy = 0.05;  // C3
  double monotone_slack = 0.01;          // C5, per adjacent pair
  double eot_slack = 0.02;
};

struct ChecklistResult {
  std::vector<ReportRow> rows;
  /// "C1".."C5" and "EOT".
  std::map<std::string, Verdict> verdicts;
};

/// C1 FGSM acc >= PGD acc; C2 Square acc >= PGD acc; C3 PGD acc at the largest
/// sweep eps <= unbounded_max_accuracy; C4 random-noise success rate <= PGD
/// success rate; C5 PGD accuracy non-increasing along the sweep within slack;
/// EOT PGD acc <= single-draw PGD acc + eot_slack. PGD runs use alpha = eps/10.
ChecklistResult obfuscation_checklist(const nn::Model& model, const data::Dataset& dataset,
                                      const ChecklistOptions& checklist, const EvalOptions& options);

}  // namespace mfdv::eval
