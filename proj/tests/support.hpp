#pragma once

#include "pva/phantom.hpp"
#include "pva/volume.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <string>

namespace testing {

using namespace pva;

/// Seeded generator for property tests.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  std::mt19937_64& rng() { return rng_; }

  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  double real(double lo = 0.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return real() < p; }

  Dims dims(int max_side = 8) { return {integer(1, max_side), integer(1, max_side), integer(1, max_side)}; }

  Spacing spacing() { return Spacing(real(0.2, 2.0), real(0.2, 2.0), real(0.2, 2.0)); }

  VolumeF unit_volume(const Dims& d, Role role = Role::logit) {
    VolumeF v(d, Spacing::Ones(), role);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>(real());
    return v;
  }

  Mask mask(const Dims& d, double p) {
    Mask m(d, Spacing::Ones(), Role::mask);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = coin(p) ? 1 : 0;
    return m;
  }

  /// Mask with at least one foreground voxel.
  Mask nonempty_mask(const Dims& d, double p) {
    Mask m = mask(d, p);
    m[static_cast<std::size_t>(integer(0, static_cast<int>(d.voxels()) - 1))] = 1;
    return m;
  }

  /// Union of a few random solid balls.
  Mask blobs(const Dims& d, int count, double r_lo, double r_hi) {
    Mask m(d, Spacing::Ones(), Role::mask);
    for (int k = 0; k < count; ++k) {
      const double ch = real(0, d.h - 1), cw = real(0, d.w - 1), cd = real(0, d.d - 1);
      const double r = real(r_lo, r_hi);
      for (int h = 0; h < d.h; ++h)
        for (int w = 0; w < d.w; ++w)
          for (int z = 0; z < d.d; ++z) {
            const double dh = h - ch, dw = w - cw, dz = z - cd;
            if (dh * dh + dw * dw + dz * dz <= r * r) m(h, w, z) = 1;
          }
    }
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

/// Straight tree along h at (w0, d0) from h=h0 to h=h1 with `nodes` nodes.
inline CenterlineTree straight_tree(double h0, double h1, double w0, double d0, double r, int nodes,
                                    const std::string& name = "LAD") {
  CenterlineTree t;
  for (int i = 0; i < nodes; ++i) {
    const double h = h0 + (h1 - h0) * i / (nodes - 1);
    t.nodes.push_back({Eigen::Vector3d(h, w0, d0), r});
    if (i > 0) t.edges.emplace_back(i - 1, i);
  }
  std::vector<int> ids(static_cast<std::size_t>(nodes));
  for (int i = 0; i < nodes; ++i) ids[static_cast<std::size_t>(i)] = i;
  t.branches[name] = ids;
  t.root = 0;
  return t;
}

/// Voxels within `r` of the segment from (h0,w0,d0) to (h1,w0,d0).
inline Mask tube_mask(const Dims& dims, double h0, double h1, double w0, double d0, double r) {
  Mask m(dims, Spacing::Ones(), Role::mask);
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        const double t = std::clamp((h - h0) / (h1 - h0), 0.0, 1.0);
        const double dh = h - (h0 + t * (h1 - h0)), dw = w - w0, dd = d - d0;
        if (dh * dh + dw * dw + dd * dd <= r * r) m(h, w, d) = 1;
      }
  return m;
}

/// 26-connected component count by flood fill over `member(i)`.
template <typename Pred>
int count_components26(const Dims& dims, Pred member) {
  std::vector<char> seen(dims.voxels(), 0);
  int count = 0;
  std::vector<std::array<int, 3>> stack;
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        const std::size_t i = dims.index(h, w, d);
        if (seen[i] || !member(i)) continue;
        ++count;
        seen[i] = 1;
        stack.push_back({h, w, d});
        while (!stack.empty()) {
          const auto [ch, cw, cd] = stack.back();
          stack.pop_back();
          for (int a = -1; a <= 1; ++a)
            for (int b = -1; b <= 1; ++b)
              for (int c = -1; c <= 1; ++c) {
                const int nh = ch + a, nw = cw + b, nd = cd + c;
                if (!dims.contains(nh, nw, nd)) continue;
                const std::size_t j = dims.index(nh, nw, nd);
                if (seen[j] || !member(j)) continue;
                seen[j] = 1;
                stack.push_back({nh, nw, nd});
              }
        }
      }
  return count;
}

inline int count_components26(const Mask& m) {
  return count_components26(m.dims(), [&](std::size_t i) { return m[i] != 0; });
}

/// Brute-force distance (mm) from voxel (h,w,d) to the nearest foreground voxel.
inline double brute_distance(const Mask& m, int h, int w, int d) {
  double best = std::numeric_limits<double>::infinity();
  const Spacing& s = m.spacing();
  for (int a = 0; a < m.dims().h; ++a)
    for (int b = 0; b < m.dims().w; ++b)
      for (int c = 0; c < m.dims().d; ++c)
        if (m(a, b, c)) {
          const double dh = (a - h) * s[0], dw = (b - w) * s[1], dd = (c - d) * s[2];
          best = std::min(best, std::sqrt(dh * dh + dw * dw + dd * dd));
        }
  return best;
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("pva_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing
