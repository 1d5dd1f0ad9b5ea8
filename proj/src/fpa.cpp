#include "pva/fpa.hpp"

namespace pva::fpa {

namespace {

double cached_loss(const Eigen::VectorXd& rho, const Eigen::MatrixXd& z, Eigen::VectorXd* grad) {
  double sum = 0.0;
  if (grad) grad->setZero(rho.size());
  for (Eigen::Index i = 0; i < z.cols(); ++i) {
    const Eigen::VectorXd diff = z.col(i) - rho;
    const double log_o = -diff.squaredNorm();
    if (log_o > kLogFloor) {
      sum -= log_o;
      if (grad) *grad -= 2.0 * diff;
    } else {
      sum -= kLogFloor;
    }
  }
  const double n = static_cast<double>(z.cols());
  if (grad) *grad /= n;
  return sum / n;
}

}  // namespace

FineTuneResult fine_tune(const Prototype<float>& init, const nn::Matrix<float>& labeled_embeddings,
                         int steps, double lr) {
  if (labeled_embeddings.cols() == 0) throw ValidationError("fine-tuning needs labeled embeddings");
  if (labeled_embeddings.rows() != init.channels())
    throw ValidationError("embedding/prototype channel mismatch");
  const Eigen::MatrixXd z = labeled_embeddings.cast<double>();

  nn::ParamStore<float> store;
  store.add("fpa.rho", {init.channels()}, init.rho.array());
  auto& entry = store.at("fpa.rho");

  FineTuneResult out;
  Eigen::VectorXd grad;
  for (int s = 0; s < steps; ++s) {
    const Eigen::VectorXd rho = entry.value.cast<double>().matrix();
    out.loss_trace.push_back(cached_loss(rho, z, &grad));
    entry.grad = grad.cast<float>().array();
    nn::adam_step(store, lr);
  }
  out.loss_trace.push_back(cached_loss(entry.value.cast<double>().matrix(), z, nullptr));
  out.prototype.rho = entry.value.matrix();
  out.prototype.source = steps > 0 ? PrototypeSource::fine_tuned : init.source;
  return out;
}

nn::GradCheckEntry grad_check_rho(const nn::FeatureMap<double>& z, const Prototype<double>& proto,
                                  const Mask& labeled, double eps) {
  nn::GradCheckEntry entry{"fpa.rho"};
  const auto analytic = fpa_loss(z, proto, labeled).grad;
  Prototype<double> probe = proto;
  for (int c = 0; c < proto.channels(); ++c) {
    probe.rho[c] = proto.rho[c] + eps;
    const double up = fpa_loss(z, probe, labeled).value;
    probe.rho[c] = proto.rho[c] - eps;
    const double down = fpa_loss(z, probe, labeled).value;
    probe.rho[c] = proto.rho[c];
    entry.max_rel_error =
        std::max(entry.max_rel_error, nn::relative_error(analytic[c], (up - down) / (2.0 * eps)));
    ++entry.checked;
  }
  return entry;
}

FusionPolicy parse_fusion(const std::string& name) {
  if (name == "max") return FusionPolicy::max;
  if (name == "mean") return FusionPolicy::mean;
  if (name == "conv_only") return FusionPolicy::conv_only;
  if (name == "fpa_only") return FusionPolicy::fpa_only;
  throw ConfigError("unknown fusion policy '" + name + "' (expected max, mean, conv_only, fpa_only)");
}

std::string to_string(FusionPolicy policy) {
  switch (policy) {
    case FusionPolicy::max: return "max";
    case FusionPolicy::mean: return "mean";
    case FusionPolicy::conv_only: return "conv_only";
    case FusionPolicy::fpa_only: return "fpa_only";
  }
  return "max";
}

VolumeF fuse_at_test(const VolumeF& conv_logit, const VolumeF& similarity, FusionPolicy policy) {
  if (!(conv_logit.dims() == similarity.dims())) throw ValidationError("fusion inputs differ in dims");
  switch (policy) {
    case FusionPolicy::conv_only: return conv_logit.with_role(Role::logit);
    case FusionPolicy::fpa_only: return similarity.with_role(Role::logit);
    case FusionPolicy::max:
      return VolumeF(conv_logit.dims(), conv_logit.spacing(), Role::logit,
                     conv_logit.data().max(similarity.data()).eval());
    case FusionPolicy::mean:
      return VolumeF(conv_logit.dims(), conv_logit.spacing(), Role::logit,
                     (0.5f * (conv_logit.data() + similarity.data())).eval());
  }
  throw ConfigError("unknown fusion policy");
}

}  // namespace pva::fpa
