#pragma once

#include "pva/nn.hpp"
#include "pva/volume.hpp"

#include <Eigen/Core>

#include <cmath>
#include <string>
#include <vector>

namespace pva::fpa {

enum class PrototypeSource { initialized, fine_tuned };

template <typename Scalar>
struct Prototype {
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> rho;
  PrototypeSource source = PrototypeSource::initialized;

  bool fine_tuned() const { return source == PrototypeSource::fine_tuned; }
  int channels() const { return static_cast<int>(rho.size()); }
};

/// Streaming mean of the embeddings at labeled voxels over any number of
/// feature maps. Accumulates in double.
class PrototypeAccumulator {
 public:
  template <typename Scalar>
  void add(const nn::FeatureMap<Scalar>& z, const Mask& labeled) {
    if (!(z.dims == labeled.dims())) throw ValidationError("feature map and PVA dims differ");
    if (mean_.size() == 0) mean_ = Eigen::VectorXd::Zero(z.channels());
    if (mean_.size() != z.channels()) throw ValidationError("feature channel count changed");
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      if (labeled[i] != 1) continue;
      ++count_;
      mean_ += (z.embedding(i).template cast<double>() - mean_) / static_cast<double>(count_);
    }
  }

  std::size_t count() const { return count_; }

  template <typename Scalar = float>
  Prototype<Scalar> finish() const {
    if (count_ == 0) throw ValidationError("prototype needs at least one labeled voxel");
    return {mean_.cast<Scalar>(), PrototypeSource::initialized};
  }

 private:
  Eigen::VectorXd mean_;
  std::size_t count_ = 0;
};

template <typename Scalar>
Prototype<Scalar> init_prototype(const std::vector<nn::FeatureMap<Scalar>>& features,
                                 const std::vector<const Mask*>& labels) {
  if (features.size() != labels.size()) throw ValidationError("one PVA mask per feature map");
  PrototypeAccumulator acc;
  for (std::size_t k = 0; k < features.size(); ++k) acc.add(features[k], *labels[k]);
  return acc.template finish<Scalar>();
}

/// O = exp(-||Z - rho||^2) per voxel.
template <typename Scalar>
Volume<Scalar> similarity_map(const nn::FeatureMap<Scalar>& z, const Prototype<Scalar>& proto,
                              const Spacing& spacing = Spacing::Ones()) {
  if (z.channels() != proto.channels())
    throw ValidationError("feature channels (" + std::to_string(z.channels()) +
                          ") do not match prototype length (" + std::to_string(proto.channels()) + ")");
  const auto n = static_cast<Eigen::Index>(z.dims.voxels());
  typename Volume<Scalar>::Array o(n);
  for (Eigen::Index i = 0; i < n; ++i)
    o[i] = std::exp(-(z.data.col(i) - proto.rho).squaredNorm());
  return Volume<Scalar>(z.dims, spacing, Role::logit, std::move(o));
}

/// log(1e-12): floor applied to O inside the logarithm.
inline constexpr double kLogFloor = -27.631021115928547;

template <typename Scalar>
struct FpaLoss {
  Scalar value = 0;
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> grad;  // d value / d rho
  std::size_t labeled = 0;
};

/// Mean of -log(max(O, 1e-12)) over labeled voxels. Only labeled voxels
/// contribute; the gradient flows to rho alone.
template <typename Scalar>
FpaLoss<Scalar> fpa_loss(const nn::FeatureMap<Scalar>& z, const Prototype<Scalar>& proto,
                         const Mask& labeled) {
  if (!(z.dims == labeled.dims())) throw ValidationError("feature map and PVA dims differ");
  if (z.channels() != proto.channels()) throw ValidationError("feature/prototype channel mismatch");
  FpaLoss<Scalar> out;
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(proto.channels());
  double sum = 0.0;
  const Eigen::VectorXd rho = proto.rho.template cast<double>();
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (labeled[i] != 1) continue;
    ++out.labeled;
    const Eigen::VectorXd diff = z.embedding(i).template cast<double>() - rho;
    const double log_o = -diff.squaredNorm();
    if (log_o > kLogFloor) {
      sum -= log_o;
      grad -= 2.0 * diff;
    } else {
      sum -= kLogFloor;
    }
  }
  if (out.labeled == 0) throw ValidationError("fpa_loss needs at least one labeled voxel");
  out.value = static_cast<Scalar>(sum / static_cast<double>(out.labeled));
  out.grad = (grad / static_cast<double>(out.labeled)).cast<Scalar>();
  return out;
}

/// Labeled-voxel embeddings gathered from frozen feature maps (channels x n).
template <typename Scalar>
nn::Matrix<Scalar> gather_labeled(const nn::FeatureMap<Scalar>& z, const Mask& labeled) {
  if (!(z.dims == labeled.dims())) throw ValidationError("feature map and PVA dims differ");
  const auto n = static_cast<Eigen::Index>(count_foreground(labeled));
  nn::Matrix<Scalar> out(z.channels(), n);
  Eigen::Index k = 0;
  for (std::size_t i = 0; i < labeled.size(); ++i)
    if (labeled[i] == 1) out.col(k++) = z.embedding(i);
  return out;
}

/// Central-difference check of fpa_loss's gradient with respect to rho.
nn::GradCheckEntry grad_check_rho(const nn::FeatureMap<double>& z, const Prototype<double>& proto,
                                  const Mask& labeled, double eps = 1e-6);

struct FineTuneResult {
  Prototype<float> prototype;
  std::vector<double> loss_trace;  // loss before each step, then the final loss
};

/// Adam on rho alone against cached labeled embeddings (the backbone is not
/// touched, i.e. frozen).
FineTuneResult fine_tune(const Prototype<float>& init, const nn::Matrix<float>& labeled_embeddings,
                         int steps = 200, double lr = 1e-3);

enum class FusionPolicy { max, mean, conv_only, fpa_only };

FusionPolicy parse_fusion(const std::string& name);
std::string to_string(FusionPolicy policy);

VolumeF fuse_at_test(const VolumeF& conv_logit, const VolumeF& similarity, FusionPolicy policy);

}  // namespace pva::fpa
