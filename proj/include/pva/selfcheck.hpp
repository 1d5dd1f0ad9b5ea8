#pragma once

#include "pva/nn.hpp"

#include <cstdint>

namespace pva {

/// Finite-difference verification of every backbone parameter group of a
/// small float64 model plus the prototype kernel. `flip_layer` >= 0 injects a
/// sign error into that layer's weight gradient.
nn::GradCheckReport run_grad_checks(std::uint64_t seed, int flip_layer = -1);

}  // namespace pva
