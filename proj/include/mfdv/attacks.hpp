#pragma once

// Adversarial example generators. Every attack works on one example, reads the
// model without modifying it, and takes its randomness from an explicit Rng.
//
// Success is judged by the MC-vote prediction (mean softmax over
// AttackContext::mc_samples noise draws), never by a single noisy forward.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <variant>
#include <vector>

#include "mfdv/model.hpp"
#include "mfdv/random.hpp"
#include "mfdv/tensor.hpp"

namespace mfdv::attacks {

/// Returns x unchanged; the harness uses it for the clean-accuracy row.
struct NullAttack {};

struct Fgsm {
  double epsilon = 8.0 / 255.0;
};

struct Pgd {
  double epsilon = 8.0 / 255.0;
  double alpha = 0.8 / 255.0;
  std::size_t steps = 10;
  bool random_start = false;
};

struct CwL2 {
  double c_init = 1e-3;
  double lr = 5e-4;
  std::size_t iterations = 1000;
  std::size_t binary_steps = 9;
  double confidence = 0.0;  // kappa
};

struct NPixel {
  std::size_t pixels = 1;
  std::size_t population = 400;
  std::size_t generations = 75;
};

struct Square {
  double epsilon = 8.0 / 255.0;
  std::size_t query_budget = 1000;
};

/// FGSM/PGD driven by the input gradient averaged over `samples` noise draws.
struct Eot {
  std::variant<Fgsm, Pgd> inner = Pgd{};
  std::size_t samples = 80;
};

/// Uniform random-sign corners of the eps-ball; succeeds if any draw fools the model.
struct RandomNoise {
  double epsilon = 8.0 / 255.0;
  std::size_t samples = 100;
};

using AttackConfig = std::variant<NullAttack, Fgsm, Pgd, CwL2, NPixel, Square, Eot, RandomNoise>;

/// Throws ConfigError on eps < 0, zero counts, alpha <= 0, ...
void validate(const AttackConfig& config);
/// Short kind name: "none", "fgsm", "pgd", "cw", "npixel", "square", "eot-fgsm", "eot-pgd", "noise".
std::string kind(const AttackConfig& config);
/// L-inf budget for eps-bounded attacks, 0 otherwise.
double epsilon_of(const AttackConfig& config);
/// Canonical, round-trippable text: "pgd:alpha=...,eps=...,k=10,random_start=0".
std::string describe(const AttackConfig& config);
/// Parses describe() output. Numbers accept "a/b" fractions, e.g. eps=8/255.
AttackConfig parse_attack(const std::string& text);

struct Distortion {
  double l0 = 0.0;  // number of changed input values
  double l2 = 0.0;
  double linf = 0.0;
  bool operator==(const Distortion&) const = default;
};

Distortion distortion(const Tensor& x, const Tensor& x_adv);
/// Number of spatial locations that differ in any channel (inputs [C,H,W]).
std::size_t changed_pixels(const Tensor& x, const Tensor& x_adv);

struct AttackResult {
  Tensor x_adv;
  bool success = false;
  std::size_t queries = 0;
  Distortion distortion;
  /// Square attack: margin loss of each accepted candidate, in order.
  std::vector<double> loss_trace;
};

struct AttackContext {
  std::size_t mc_samples = 15;
  /// Seeds the (fresh, per-check) rng of every MC-vote success check.
  std::uint64_t mc_seed = 0;
  /// Called with every candidate the attack submits to the model, if set.
  std::function<void(const Tensor&)> on_query;
};

/// MC-vote misclassification check at x.
bool fooled(const nn::Model& model, const Tensor& x, int label, const AttackContext& context);

AttackResult fgsm(const nn::Model& model, const Tensor& x, int label, const Fgsm& config, Rng& rng,
                  const AttackContext& context = {});
AttackResult pgd(const nn::Model& model, const Tensor& x, int label, const Pgd& config, Rng& rng,
                 const AttackContext& context = {});
AttackResult cw_l2(const nn::Model& model, const Tensor& x, int label, const CwL2& config, Rng& rng,
                   const AttackContext& context = {});
AttackResult n_pixel(const nn::Model& model, const Tensor& x, int label, const NPixel& config, Rng& rng,
                     const AttackContext& context = {});
AttackResult square_attack(const nn::Model& model, const Tensor& x, int label, const Square& config, Rng& rng,
                           const AttackContext& context = {});
AttackResult eot_attack(const nn::Model& model, const Tensor& x, int label, const Eot& config, Rng& rng,
                        const AttackContext& context = {});
AttackResult random_noise(const nn::Model& model, const Tensor& x, int label, const RandomNoise& config, Rng& rng,
                          const AttackContext& context = {});

/// Mean cross-entropy input gradient over `samples` independent noise draws.
Tensor eot_gradient(const nn::Model& model, const Tensor& x, int label, std::size_t samples, Rng& rng);

/// Projection onto {|v - x|_inf <= eps} ∩ [0,1]^n.
Tensor project_linf(const Tensor& v, const Tensor& x, double epsilon);

/// PGD over ascending budgets. Each budget warm-starts from the previous solution
/// and keeps the highest-loss iterate seen (start included), so the per-example
/// loss is non-decreasing in eps. Returns one x_adv per eps.
std::vector<Tensor> pgd_sweep(const nn::Model& model, const Tensor& x, int label, const std::vector<double>& epsilons,
                              const Pgd& base, Rng& rng);

/// Dispatches on the config and checks the universal invariants (box, norm bound,
/// pixel count) of the result; a violation throws std::logic_error.
AttackResult run_attack(const nn::Model& model, const Tensor& x, int label, const AttackConfig& config, Rng& rng,
                        const AttackContext& context = {});

void check_invariants(const Tensor& x, const AttackResult& result, const AttackConfig& config);

}  // namespace mfdv::attacks
