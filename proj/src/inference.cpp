#include "mfdv/inference.hpp"

#include <algorithm>
#include <stdexcept>
#include <vector>

#include "mfdv/parallel.hpp"

namespace mfdv::eval {

Tensor mc_predict(const nn::Model& model, const Tensor& x, std::size_t n_samples, Rng& rng) {
  if (n_samples == 0) throw std::invalid_argument("mc_predict: n_samples must be >= 1");
  const std::size_t samples = model.is_stochastic() ? n_samples : 1;
  Graph graph;
  const nn::ForwardTrace t = model.trace(graph, x, rng, {.noise_samples = samples});
  const Tensor probs = softmax(graph.value(t.logits));
  const std::size_t k = model.num_classes();
  Tensor mean({k});
  for (std::size_t s = 0; s < samples; ++s) {
    for (std::size_t j = 0; j < k; ++j) mean[j] += probs[s * k + j];
  }
  for (double& v : mean.data()) v /= static_cast<double>(samples);
  return mean;
}

std::size_t argmax(const Tensor& v) {
  const auto d = v.data();
  return static_cast<std::size_t>(std::max_element(d.begin(), d.end()) - d.begin());
}

int mc_label(const nn::Model& model, const Tensor& x, std::size_t n_samples, Rng& rng) {
  return static_cast<int>(argmax(mc_predict(model, x, n_samples, rng)));
}

double clean_accuracy(const nn::Model& model, const data::Dataset& dataset, const EvalOptions& options) {
  if (dataset.size() == 0) throw std::invalid_argument("clean_accuracy: empty dataset");
  std::vector<char> correct(dataset.size());
  parallel_for(dataset.size(), options.threads, [&](std::size_t i) {
    Rng rng = mc_rng(options, i);
    correct[i] = mc_label(model, dataset.example(i), options.mc_samples, rng) == dataset.label(i);
  });
  return static_cast<double>(std::count(correct.begin(), correct.end(), 1)) / static_cast<double>(dataset.size());
}

}  // namespace mfdv::eval
