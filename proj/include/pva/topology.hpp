#pragma once

#include "pva/volume.hpp"

#include <array>
#include <vector>

namespace pva {

/// Offsets of the 26-neighbourhood, ordered by (dh, dw, dd) lexicographically.
const std::vector<std::array<int, 3>>& neighbourhood26();

struct Components {
  std::vector<int> labels;  // -1 for background, else component id
  int count = 0;
  std::vector<std::size_t> sizes;
};

/// Connected components of the foreground with 6, 18 or 26 connectivity.
Components connected_components(const Mask& mask, int connectivity = 26);

}  // namespace pva
