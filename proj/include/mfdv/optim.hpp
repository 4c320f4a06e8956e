#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "mfdv/model.hpp"
#include "mfdv/tensor.hpp"

namespace mfdv::nn {

using GradMap = std::map<std::string, Tensor>;

struct OptimState {
  double lr = 0.01;
  double momentum = 0.9;
  std::map<std::string, Tensor> velocity;
};

/// v <- momentum * v - lr * g;  p <- p + v. grads must be keyed exactly like
/// model.parameter_names(). Re-applies the sigma floor afterwards.
void sgd_step(Model& model, const GradMap& grads, OptimState& opt);

/// Weight file: "MFDV1", then per tensor: u32 name length, name bytes, u32 rank,
/// u64 dims, little-endian float64 payload. Parameters in registry order, then
/// "stochastic.delta" when present.
void save_weights(const Model& model, const std::filesystem::path& path);

/// Loads into `model` (whose architecture defines the expected names/shapes).
/// On any error the model is left untouched.
void load_weights(Model& model, const std::filesystem::path& path);

}  // namespace mfdv::nn
