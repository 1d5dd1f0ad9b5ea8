#pragma once

#include "pva/volume.hpp"

#include "json.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace pva {

struct GenerationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct CenterlineNode {
  Eigen::Vector3d p = Eigen::Vector3d::Zero();  // voxel coordinates (h, w, d)
  double r = 1.0;                               // voxels
};

/// Rooted vessel tree. `branches` names the main trunks; each entry lists
/// node indices from the root to the trunk's leaf.
struct CenterlineTree {
  std::vector<CenterlineNode> nodes;
  std::vector<std::pair<int, int>> edges;  // (parent, child)
  std::map<std::string, std::vector<int>> branches;
  int root = 0;

  /// Throws ValidationError unless the edges form a single tree rooted at
  /// `root`, all nodes lie inside `dims`, and every radius is positive.
  void validate(const Dims& dims) const;

  std::vector<int> parents() const;
  std::vector<std::vector<int>> children() const;
};

nlohmann::json to_json(const CenterlineTree& tree);
CenterlineTree tree_from_json(const nlohmann::json& j);
void write_tree(const CenterlineTree& tree, const std::filesystem::path& path);
CenterlineTree read_tree(const std::filesystem::path& path);

struct PathSample {
  Eigen::Vector3d p;
  double r;
};

/// Points along the polyline through `node_ids`, spaced at most `step`
/// voxels apart; every node is included.
std::vector<PathSample> resample_path(const CenterlineTree& tree, const std::vector<int>& node_ids,
                                      double step = 1.0);

/// Distance from `q` to segment [a, b] and the clamped projection parameter.
std::pair<double, double> segment_distance(const Eigen::Vector3d& q, const Eigen::Vector3d& a,
                                           const Eigen::Vector3d& b);

struct PhantomSpec {
  Dims dims{64, 64, 64};
  Spacing spacing = Spacing::Constant(0.5);
  int n_main_branches = 3;
  int bifurcation_depth = 2;
  double tortuosity = 0.25;
  // Vessel diameters of 2 mm to 5 mm.
  double r_min_mm = 1.0;
  double r_max_mm = 2.5;
  double background_mean = 0.2;
  double foreground_mean = 0.8;
  double noise_std = 0.7;
  double blur_sigma = 1.2;  // voxels
  std::uint64_t rng_seed = 0;

  void validate() const;
  double r_min_vox() const { return r_min_mm / spacing.mean(); }
  double r_max_vox() const { return r_max_mm / spacing.mean(); }
};

nlohmann::json to_json(const PhantomSpec& spec);
PhantomSpec phantom_spec_from_json(const nlohmann::json& j, PhantomSpec base = {});

struct Phantom {
  VolumeF image;
  Mask gt_mask;
  CenterlineTree tree;
};

Phantom generate_phantom(const PhantomSpec& spec);

/// Rasterizes the tubes of `tree`: per-voxel soft occupancy
/// clamp(r + 0.5 - dist, 0, 1), maximized over segments.
VolumeF render_occupancy(const CenterlineTree& tree, const Dims& dims, const Spacing& spacing);

/// Labels proximal prefixes of the main trunks, advancing all trunks by
/// equal arc length (larger radius first on ties), until the labeled share of
/// `gt_mask` reaches `target_fraction`. Side branches are consumed only after
/// every trunk is fully labeled.
PvaLabel synthesize_pva(const Mask& gt_mask, const CenterlineTree& tree, double target_fraction,
                        std::uint64_t rng_seed);

/// Deterministic per-subject seed derivation.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index);

}  // namespace pva
