#pragma once

// Closed-form and brute-force references for the attack checks.

#include <cstdint>

#include "mfdv/model.hpp"
#include "mfdv/random.hpp"
#include "mfdv/tensor.hpp"

namespace mfdv::testing {

/// 15-sample MC vote with a fixed rng.
int mc_vote(const nn::Model& model, const Tensor& x);

/// 2-d, 2-class linear model whose class-0 logit is w.x + b and class-1 logit is 0.
/// x is classified as 0 and sits `distance` from the decision line; the foot of the
/// perpendicular lies inside [0.05, 0.95]^2 so the box does not bind.
struct LinearInstance {
  nn::Model model;
  Tensor x;
  int label = 0;
  double distance = 0.0;
};
LinearInstance linear_instance(Rng& rng, double weight_scale);

/// Flatten -> Linear(48, 8) -> ReLU -> Linear(8, 2) on 3x4x4 inputs.
nn::Model tiny_image_model(std::uint64_t seed);

/// True if changing one pixel of a [3,4,4] image to some color on the grid
/// {0, 0.5, 1}^3 flips the MC vote away from `label`.
bool one_pixel_exhaustive(const nn::Model& model, const Tensor& x, int label);

}  // namespace mfdv::testing
