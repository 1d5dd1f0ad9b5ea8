#include "pva/topology.hpp"

#include <cstdlib>
#include <stdexcept>

namespace pva {

const std::vector<std::array<int, 3>>& neighbourhood26() {
  static const std::vector<std::array<int, 3>> offsets = [] {
    std::vector<std::array<int, 3>> o;
    for (int dh = -1; dh <= 1; ++dh)
      for (int dw = -1; dw <= 1; ++dw)
        for (int dd = -1; dd <= 1; ++dd)
          if (dh != 0 || dw != 0 || dd != 0) o.push_back({dh, dw, dd});
    return o;
  }();
  return offsets;
}

Components connected_components(const Mask& mask, int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ValidationError("connectivity must be 6, 18 or 26");
  std::vector<std::array<int, 3>> offsets;
  for (const auto& o : neighbourhood26()) {
    const int manhattan = std::abs(o[0]) + std::abs(o[1]) + std::abs(o[2]);
    if (connectivity == 26 || (connectivity == 18 && manhattan <= 2) ||
        (connectivity == 6 && manhattan == 1))
      offsets.push_back(o);
  }

  const Dims dims = mask.dims();
  Components out;
  out.labels.assign(dims.voxels(), -1);
  std::vector<std::array<int, 3>> stack;
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        const std::size_t i = dims.index(h, w, d);
        if (mask[i] == 0 || out.labels[i] >= 0) continue;
        const int id = out.count++;
        std::size_t size = 0;
        out.labels[i] = id;
        stack.push_back({h, w, d});
        while (!stack.empty()) {
          const auto p = stack.back();
          stack.pop_back();
          ++size;
          for (const auto& o : offsets) {
            const int nh = p[0] + o[0], nw = p[1] + o[1], nd = p[2] + o[2];
            if (!dims.contains(nh, nw, nd)) continue;
            const std::size_t j = dims.index(nh, nw, nd);
            if (mask[j] == 0 || out.labels[j] >= 0) continue;
            out.labels[j] = id;
            stack.push_back({nh, nw, nd});
          }
        }
        out.sizes.push_back(size);
      }
  return out;
}

}  // namespace pva
