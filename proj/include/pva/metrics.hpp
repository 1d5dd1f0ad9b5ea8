#pragma once

#include "pva/phantom.hpp"
#include "pva/volume.hpp"

#include "json.hpp"

#include <map>
#include <string>
#include <vector>

namespace pva::metrics {

/// Tolerances are expressed in voxels and converted with the mean spacing.
struct MetricConfig {
  double centerline_tolerance_vox = 2.0;  // OV and OF matching
  double rdice_tolerance_vox = 3.0;
  /// Widen each centerline point's tolerance to its vessel radius when larger.
  bool radius_tolerance = false;
};

nlohmann::json to_json(const MetricConfig& c);
MetricConfig metric_config_from_json(const nlohmann::json& j, MetricConfig base = {});

/// 2|P∩G| / (|P|+|G|); 1 when both are empty.
double dice(const Mask& pred, const Mask& gt);

/// Dice after dropping predicted voxels farther than `tolerance_mm` from gt.
double rdice(const Mask& pred, const Mask& gt, double tolerance_mm);

/// Exact Euclidean distance (mm) from every voxel to the nearest foreground
/// voxel of `mask`; +inf everywhere when the mask is empty.
std::vector<double> distance_transform(const Mask& mask);

/// Topology-preserving thinning to a one-voxel-thick curve skeleton:
/// directional boundary peeling over six subiterations, removing simple
/// non-end points with a sequential recheck.
Mask skeletonize(const Mask& mask);

/// True iff deleting the centre of the 3x3x3 neighbourhood `cube`
/// (index dh*9 + dw*3 + dd, centre 13) preserves topology, using 26-adjacency
/// for the foreground and 6-adjacency for the background.
bool is_simple(const std::array<bool, 27>& cube);

struct CenterlinePoint {
  Eigen::Vector3d p;  // voxel coordinates
  double r;           // voxels
};

/// Whole-tree centerline resampled at <= `step` voxels, each node once.
std::vector<CenterlinePoint> tree_centerline(const CenterlineTree& tree, double step = 1.0);

/// Distance (mm) from a voxel-coordinate point to the nearest foreground
/// voxel of `mask`, searching only within `max_mm`; +inf if none.
double distance_to_mask(const Mask& mask, const Eigen::Vector3d& p, double max_mm);

/// Symmetric centerline overlap (TPa + TPb) / (TPa + TPb + FNa + FPb).
double ov(const Mask& pred, const CenterlineTree& gt_tree, double tolerance_mm,
          bool radius_tolerance = false);
double ov_with_skeleton(const Mask& pred_skeleton, const CenterlineTree& gt_tree,
                        double tolerance_mm, bool radius_tolerance = false);

struct MatchedCenterline {
  std::string branch;
  std::vector<CenterlinePoint> points;  // proximal to distal
  std::vector<bool> matched;
  double tolerance_mm = 0.0;
};

/// Marks each branch point matched iff `pred` has a foreground voxel within
/// the tolerance.
MatchedCenterline match_branch(const Mask& pred, const CenterlineTree& gt_tree,
                               const std::string& branch, double tolerance_mm,
                               bool radius_tolerance = false);

/// Fraction of the branch's points before the first unmatched one.
double of_per_branch(const Mask& pred, const CenterlineTree& gt_tree, const std::string& branch,
                     double tolerance_mm, bool radius_tolerance = false);

struct VolumeMetrics {
  std::string id;
  double dice = 0.0;
  double rdice = 0.0;
  double ov = 0.0;
  std::map<std::string, double> of;

  double of_mean() const;
};

struct Aggregate {
  double mean = 0.0;
  double std = 0.0;  // population
};

struct MetricReport {
  std::vector<VolumeMetrics> per_volume;
  std::map<std::string, Aggregate> aggregate;

  nlohmann::json to_json() const;
  std::string to_csv() const;
};

Aggregate aggregate(const std::vector<double>& values);

struct EvalCase {
  std::string id;
  const Mask* pred;
  const Mask* gt;
  const CenterlineTree* tree;
};

VolumeMetrics evaluate_volume(const EvalCase& c, const MetricConfig& config);
MetricReport evaluate(const std::vector<EvalCase>& cases, const MetricConfig& config);
MetricReport summarize(std::vector<VolumeMetrics> per_volume);

}  // namespace pva::metrics
