#include "doctest.h"
#include "support.hpp"

#include "pva/phantom.hpp"
#include "pva/topology.hpp"

#include <cmath>

using namespace pva;
using testing::Gen;

namespace {

PhantomSpec straight_spec(double r_mm) {
  PhantomSpec s;
  s.dims = {40, 24, 24};
  s.spacing = Spacing::Ones();
  s.n_main_branches = 1;
  s.bifurcation_depth = 0;
  s.tortuosity = 0.0;
  s.r_min_mm = s.r_max_mm = r_mm;
  s.rng_seed = 5;
  return s;
}

}  // namespace

TEST_SUITE("phantom") {

TEST_CASE("straight tube matches the analytic cylinder") {
  const PhantomSpec s = straight_spec(2.0);
  const Phantom p = generate_phantom(s);
  // The trunk runs along h from the root at (2, cw, cd) in 2-voxel steps.
  const double cw = 0.5 * (s.dims.w - 1), cd = 0.5 * (s.dims.d - 1);
  const double len = 0.9 * (s.dims.h - 1 - 4);
  const double h1 = 2.0 + 2.0 * std::ceil(len / 2.0);
  std::size_t mismatches = 0;
  for (int h = 0; h < s.dims.h; ++h)
    for (int w = 0; w < s.dims.w; ++w)
      for (int d = 0; d < s.dims.d; ++d) {
        const double t = std::clamp((h - 2.0) / (h1 - 2.0), 0.0, 1.0);
        const double dist = std::sqrt(std::pow(h - (2.0 + t * (h1 - 2.0)), 2) + std::pow(w - cw, 2) + std::pow(d - cd, 2));
        mismatches += (dist < 2.0) != (p.gt_mask(h, w, d) == 1);
      }
  CHECK(mismatches == 0);
  REQUIRE(p.tree.branches.size() == 1);
  CHECK(p.tree.branches.begin()->first == "LAD");
}

TEST_CASE("same spec and seed give the same phantom") {
  PhantomSpec s;
  s.rng_seed = 42;
  const Phantom a = generate_phantom(s), b = generate_phantom(s);
  CHECK(a.image == b.image);
  CHECK(a.gt_mask == b.gt_mask);
  CHECK(to_json(a.tree).dump() == to_json(b.tree).dump());
  s.rng_seed = 43;
  CHECK_FALSE(generate_phantom(s).image == a.image);
}

TEST_CASE("zero contrast leaves vessel and background statistics equal") {
  PhantomSpec s;
  s.rng_seed = 8;
  s.foreground_mean = s.background_mean = 0.4;
  s.noise_std = 0.1;
  const Phantom p = generate_phantom(s);
  double sum[2] = {0, 0}, sq[2] = {0, 0}, n[2] = {0, 0};
  for (std::size_t i = 0; i < p.image.size(); ++i) {
    const int k = p.gt_mask[i];
    sum[k] += p.image[i];
    sq[k] += p.image[i] * p.image[i];
    ++n[k];
  }
  const double m0 = sum[0] / n[0], m1 = sum[1] / n[1];
  const double v0 = sq[0] / n[0] - m0 * m0, v1 = sq[1] / n[1] - m1 * m1;
  const double se = std::sqrt(v0 / n[0] + v1 / n[1]);
  CHECK(std::abs(m1 - m0) < 4.0 * se);
  CHECK(std::abs(m0 - 0.4) < 0.01);
}

TEST_CASE("generated trees are valid, in bounds and sparse") {
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    PhantomSpec s;
    s.rng_seed = seed;
    const Phantom p = generate_phantom(s);
    CHECK_NOTHROW(p.tree.validate(s.dims));
    for (const auto& n : p.tree.nodes) {
      CHECK(n.r >= s.r_min_vox() - 1e-9);
      CHECK(n.r <= s.r_max_vox() + 1e-9);
    }
    const double fg = static_cast<double>(count_foreground(p.gt_mask)) / static_cast<double>(p.gt_mask.size());
    CHECK(fg > 0.0);
    CHECK(fg < 0.2);
    CHECK(p.tree.branches.size() == 3);
    CHECK(testing::count_components26(p.gt_mask) == 1);
  }
}

TEST_CASE("tree validation rejects broken graphs") {
  const Dims d{16, 16, 16};
  auto t = testing::straight_tree(2, 12, 8, 8, 1.0, 4);
  CHECK_NOTHROW(t.validate(d));
  auto cyc = t;
  cyc.edges.back() = {3, 1};
  CHECK_THROWS_AS(cyc.validate(d), ValidationError);
  auto out = t;
  out.nodes[2].p[0] = 20;
  CHECK_THROWS_AS(out.validate(d), ValidationError);
  auto neg = t;
  neg.nodes[1].r = 0;
  CHECK_THROWS_AS(neg.validate(d), ValidationError);
}

TEST_CASE("tree JSON round-trip") {
  PhantomSpec s;
  s.rng_seed = 3;
  const Phantom p = generate_phantom(s);
  const auto dir = testing::scratch_dir("tree_json");
  write_tree(p.tree, dir / "tree.json");
  const auto back = read_tree(dir / "tree.json");
  CHECK(to_json(back).dump() == to_json(p.tree).dump());
}

TEST_CASE("phantom spec validation") {
  PhantomSpec s;
  s.n_main_branches = 0;
  CHECK_THROWS_AS(generate_phantom(s), ValidationError);
  s = PhantomSpec{};
  s.noise_std = -1;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  s = PhantomSpec{};
  s.r_min_mm = 3;
  s.r_max_mm = 2;
  CHECK_THROWS_AS(s.validate(), ValidationError);
  CHECK(phantom_spec_from_json(to_json(PhantomSpec{})).noise_std == PhantomSpec{}.noise_std);
}

TEST_CASE("full annotation equals the ground truth") {
  PhantomSpec s;
  s.rng_seed = 4;
  const Phantom p = generate_phantom(s);
  const PvaLabel pva = synthesize_pva(p.gt_mask, p.tree, 1.0, 1);
  CHECK(pva.mask == p.gt_mask);
  CHECK(pva.labeled_fraction == 1.0);
}

TEST_CASE("default phantom hits the 24.29% target") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    PhantomSpec s;
    s.rng_seed = seed;
    const Phantom p = generate_phantom(s);
    const PvaLabel pva = synthesize_pva(p.gt_mask, p.tree, 0.2429, seed);
    CHECK(pva.labeled_fraction >= 0.2229);
    CHECK(pva.labeled_fraction <= 0.2629);
    const double measured = static_cast<double>(count_foreground(pva.mask)) / static_cast<double>(count_foreground(p.gt_mask));
    CHECK(measured == doctest::Approx(pva.labeled_fraction));
    CHECK_FALSE(pva.warning);
    for (std::size_t i = 0; i < pva.mask.size(); ++i) CHECK(pva.mask[i] <= p.gt_mask[i]);
  }
}

TEST_CASE("half of a straight tube is one component holding the root end") {
  const PhantomSpec s = straight_spec(2.0);
  const Phantom p = generate_phantom(s);
  const PvaLabel pva = synthesize_pva(p.gt_mask, p.tree, 0.5, 0);
  CHECK(testing::count_components26(pva.mask) == 1);
  const auto& root = p.tree.nodes[static_cast<std::size_t>(p.tree.root)].p;
  CHECK(pva.mask(static_cast<int>(std::lround(root[0])), static_cast<int>(std::lround(root[1])),
                 static_cast<int>(std::lround(root[2]))) == 1);
  // Labels form a proximal prefix: every labeled voxel is nearer the root
  // end than every unlabeled vessel voxel, up to the tube's cross-section.
  int max_labeled_h = -1, min_unlabeled_h = 1000;
  for (int h = 0; h < s.dims.h; ++h)
    for (int w = 0; w < s.dims.w; ++w)
      for (int d = 0; d < s.dims.d; ++d) {
        if (!p.gt_mask(h, w, d)) continue;
        if (pva.mask(h, w, d))
          max_labeled_h = std::max(max_labeled_h, h);
        else
          min_unlabeled_h = std::min(min_unlabeled_h, h);
      }
  CHECK(max_labeled_h <= min_unlabeled_h + 3);
}

TEST_CASE("invalid target fractions are rejected") {
  const Phantom p = generate_phantom(straight_spec(2.0));
  CHECK_THROWS_AS(synthesize_pva(p.gt_mask, p.tree, 0.0, 0), ValidationError);
  CHECK_THROWS_AS(synthesize_pva(p.gt_mask, p.tree, 1.5, 0), ValidationError);
}

TEST_CASE("derived seeds are distinct and stable") {
  CHECK(derive_seed(7, 0) == derive_seed(7, 0));
  CHECK(derive_seed(7, 0) != derive_seed(7, 1));
  CHECK(derive_seed(7, 0) != derive_seed(8, 0));
}

TEST_CASE("connected components agree with flood fill") {
  Gen g(9);
  for (int trial = 0; trial < 30; ++trial) {
    const Mask m = g.mask(g.dims(8), 0.3);
    CHECK(connected_components(m, 26).count == testing::count_components26(m));
    CHECK(connected_components(m, 6).count >= connected_components(m, 18).count);
    CHECK(connected_components(m, 18).count >= connected_components(m, 26).count);
  }
}

}  // TEST_SUITE
