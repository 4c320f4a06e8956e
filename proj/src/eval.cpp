#include "mfdv/eval.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <stdexcept>

#include "mfdv/parallel.hpp"

namespace mfdv::eval {
namespace {

RobustResult run_examples(const nn::Model& model, const data::Dataset& dataset, const attacks::AttackConfig& attack,
                          const EvalOptions& options, std::size_t count) {
  if (count == 0) throw std::invalid_argument("robust_accuracy: empty dataset");
  attacks::validate(attack);
  RobustResult result;
  result.examples.resize(count);
  std::vector<char> done(count, 0);
  std::atomic<bool> abort{false};
  std::mutex error_mutex;
  std::size_t error_index = count;

  parallel_for(count, options.threads, [&](std::size_t i) {
    if (abort) return;
    try {
      const Tensor x = dataset.example(i);
      const int label = dataset.label(i);
      attacks::AttackContext ctx{.mc_samples = options.mc_samples, .mc_seed = derive_seed(options.seed, i, kMcStream), .on_query = {}};
      ExampleOutcome& out = result.examples[i];
      out.clean_correct = !attacks::fooled(model, x, label, ctx);
      if (out.clean_correct) {
        Rng rng(derive_seed(options.seed, i, kAttackStream));
        const attacks::AttackResult r = attacks::run_attack(model, x, label, attack, rng, ctx);
        out.attacked = true;
        out.robust_correct = !r.success;
        out.queries = r.queries;
        out.distortion = r.distortion;
      }
      done[i] = 1;
    } catch (const std::exception& e) {
      std::lock_guard lock(error_mutex);
      if (i < error_index) {
        error_index = i;
        result.error = "example " + std::to_string(i) + ": " + e.what();
      }
      abort = true;
    }
  });

  std::size_t correct = 0;
  for (std::size_t i = 0; i < count; ++i) {
    if (!done[i]) continue;
    ++result.completed;
    correct += result.examples[i].robust_correct ? 1 : 0;
  }
  result.partial = result.completed < count;
  result.accuracy = result.completed ? static_cast<double>(correct) / static_cast<double>(result.completed) : 0.0;
  return result;
}

attacks::Pgd pgd_at(double eps, std::size_t steps) {
  return attacks::Pgd{.epsilon = eps, .alpha = eps > 0.0 ? eps / 10.0 : 1.0 / 2550.0, .steps = steps, .random_start = false};
}

double success_rate(const RobustResult& r) {
  std::size_t attacked = 0, fooled = 0;
  for (const auto& e : r.examples) {
    if (!e.attacked) continue;
    ++attacked;
    fooled += e.robust_correct ? 0 : 1;
  }
  return attacked ? static_cast<double>(fooled) / static_cast<double>(attacked) : 0.0;
}

}  // namespace

RobustResult robust_accuracy(const nn::Model& model, const data::Dataset& dataset, const attacks::AttackConfig& attack,
                             const EvalOptions& options) {
  return run_examples(model, dataset, attack, options, dataset.size());
}

ReportRow summarize(const attacks::AttackConfig& attack, const RobustResult& result) {
  ReportRow row;
  row.attack = attacks::describe(attack);
  row.epsilon = attacks::epsilon_of(attack);
  row.accuracy = result.accuracy;
  row.examples = result.completed;
  row.partial = result.partial;
  std::size_t n = 0;
  for (const auto& e : result.examples) {
    if (!e.attacked || e.robust_correct) continue;
    ++n;
    row.mean_queries += static_cast<double>(e.queries);
    row.mean_distortion.l0 += e.distortion.l0;
    row.mean_distortion.l2 += e.distortion.l2;
    row.mean_distortion.linf += e.distortion.linf;
  }
  if (n > 0) {
    const double inv = 1.0 / static_cast<double>(n);
    row.mean_queries *= inv;
    row.mean_distortion.l0 *= inv;
    row.mean_distortion.l2 *= inv;
    row.mean_distortion.linf *= inv;
  }
  return row;
}

ChecklistResult obfuscation_checklist(const nn::Model& model, const data::Dataset& dataset,
                                      const ChecklistOptions& checklist, const EvalOptions& options) {
  if (checklist.budget == 0) throw std::invalid_argument("empty evaluation budget");
  if (checklist.sweep.empty()) throw std::invalid_argument("checklist: empty epsilon sweep");
  const std::size_t count = std::min(checklist.budget, dataset.size());
  if (count == 0) throw std::invalid_argument("empty evaluation budget");

  ChecklistResult out;
  auto run = [&](const attacks::AttackConfig& cfg) {
    RobustResult r = run_examples(model, dataset, cfg, options, count);
    if (r.partial) throw std::runtime_error("checklist: " + attacks::describe(cfg) + " aborted: " + r.error);
    out.rows.push_back(summarize(cfg, r));
    return r;
  };

  const double eps = checklist.epsilon;
  const RobustResult fgsm = run(attacks::Fgsm{eps});
  const RobustResult pgd = run(pgd_at(eps, checklist.pgd_steps));
  std::vector<double> sweep_acc;
  for (double e : checklist.sweep) {
    sweep_acc.push_back(e == eps ? pgd.accuracy : run(pgd_at(e, checklist.pgd_steps)).accuracy);
  }
  const RobustResult square = run(attacks::Square{eps, checklist.square_budget});
  const RobustResult noise = run(attacks::RandomNoise{eps, checklist.noise_samples});
  const RobustResult eot = run(attacks::Eot{pgd_at(eps, checklist.pgd_steps), checklist.eot_samples});

  out.verdicts["C1"] = {fgsm.accuracy >= pgd.accuracy, {{"fgsm_accuracy", fgsm.accuracy}, {"pgd_accuracy", pgd.accuracy}}};
  out.verdicts["C2"] = {square.accuracy >= pgd.accuracy,
                        {{"square_accuracy", square.accuracy}, {"pgd_accuracy", pgd.accuracy}}};
  const double widest = *std::max_element(checklist.sweep.begin(), checklist.sweep.end());
  const double widest_acc = sweep_acc[static_cast<std::size_t>(
      std::max_element(checklist.sweep.begin(), checklist.sweep.end()) - checklist.sweep.begin())];
  out.verdicts["C3"] = {widest_acc <= checklist.unbounded_max_accuracy,
                        {{"epsilon", widest}, {"pgd_accuracy", widest_acc}, {"threshold", checklist.unbounded_max_accuracy}}};
  out.verdicts["C4"] = {success_rate(noise) <= success_rate(pgd),
                        {{"noise_success_rate", success_rate(noise)}, {"pgd_success_rate", success_rate(pgd)}}};
  Verdict c5{true, {{"slack", checklist.monotone_slack}}};
  for (std::size_t i = 0; i < sweep_acc.size(); ++i) {
    c5.evidence["accuracy_" + std::to_string(i)] = sweep_acc[i];
    if (i > 0 && checklist.sweep[i] > checklist.sweep[i - 1] && sweep_acc[i] > sweep_acc[i - 1] + checklist.monotone_slack) {
      c5.pass = false;
    }
  }
  out.verdicts["C5"] = c5;
  out.verdicts["EOT"] = {eot.accuracy <= pgd.accuracy + checklist.eot_slack,
                         {{"eot_accuracy", eot.accuracy},
                          {"pgd_accuracy", pgd.accuracy},
                          {"samples", static_cast<double>(checklist.eot_samples)},
                          {"slack", checklist.eot_slack}}};
  return out;
}

}  // namespace mfdv::eval
