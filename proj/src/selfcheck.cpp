#include "pva/selfcheck.hpp"

#include "pva/fpa.hpp"

namespace pva {

nn::GradCheckReport run_grad_checks(std::uint64_t seed, int flip_layer) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const Dims dims{4, 4, 4};
  const Spacing spacing = Spacing::Ones();

  nn::ModelSpec spec{nn::ModelRole::sg, {3, 3}, 1, dims};
  nn::Backbone<double> model(spec);
  model.flip_gradient_layer = flip_layer;
  nn::ParamStore<double> params;
  model.init_params(params, rng);
  // Non-zero biases so every ReLU sees both signs.
  for (auto& [name, e] : params.entries())
    if (name.find("bias") != std::string::npos)
      for (Eigen::Index i = 0; i < e.size(); ++i) e.value[i] = 0.2 * (unit(rng) - 0.5);

  Volume<double> patch(dims, spacing, Role::image);
  Volume<double> target(dims, spacing, Role::logit);
  for (std::size_t i = 0; i < dims.voxels(); ++i) {
    patch[i] = unit(rng);
    target[i] = unit(rng);
  }
  auto report = nn::grad_check(model, params, patch, target);

  const auto features = model.infer(params, patch).penultimate;
  Mask labeled(dims, spacing, Role::mask);
  for (std::size_t i = 0; i < dims.voxels(); ++i) labeled[i] = unit(rng) < 0.4 ? 1 : 0;
  labeled[0] = 1;
  fpa::Prototype<double> proto;
  proto.rho = Eigen::VectorXd::NullaryExpr(features.channels(), [&] { return unit(rng); });
  report.entries.push_back(fpa::grad_check_rho(features, proto, labeled));
  return report;
}

}  // namespace pva
