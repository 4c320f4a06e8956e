#pragma once

#include <cstddef>
#include <cstdint>

#include "mfdv/data.hpp"
#include "mfdv/model.hpp"
#include "mfdv/random.hpp"
#include "mfdv/tensor.hpp"

namespace mfdv::eval {

inline constexpr std::size_t kDefaultMcSamples = 15;

/// Stream tags for derive_seed(); one per consumer of per-example randomness.
inline constexpr std::uint64_t kMcStream = 1;
inline constexpr std::uint64_t kAttackStream = 2;

/// Mean of softmax(logits) over n stochastic forwards of one example.
/// For a deterministic model this is a single softmax.
Tensor mc_predict(const nn::Model& model, const Tensor& x, std::size_t n_samples, Rng& rng);

std::size_t argmax(const Tensor& v);

/// argmax of mc_predict.
int mc_label(const nn::Model& model, const Tensor& x, std::size_t n_samples, Rng& rng);

struct EvalOptions {
  std::size_t mc_samples = kDefaultMcSamples;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
};

/// Rng for the MC prediction of example `index`.
inline Rng mc_rng(const EvalOptions& options, std::size_t index) {
  return Rng(derive_seed(options.seed, index, kMcStream));
}

/// Fraction of examples whose MC prediction is correct.
double clean_accuracy(const nn::Model& model, const data::Dataset& dataset, const EvalOptions& options);

}  // namespace mfdv::eval
