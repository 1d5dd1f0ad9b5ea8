#include "doctest.h"
#include "support.hpp"

#include "pva/binary_io.hpp"
#include "pva/nn.hpp"
#include "pva/selfcheck.hpp"

#include <cmath>

using namespace pva;
using namespace pva::nn;
using testing::Gen;

namespace {

using VolumeD = Volume<double>;

VolumeD random_volume(Gen& g, const Dims& d, Role role, double lo = 0.0, double hi = 1.0) {
  VolumeD v(d, Spacing::Ones(), role);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = g.real(lo, hi);
  return v;
}

ModelSpec tiny_spec(std::vector<int> widths, Dims patch = {4, 4, 4}) {
  return {ModelRole::sg, std::move(widths), 1, patch};
}

ParamStore<double> random_params(const Backbone<double>& model, Gen& g) {
  ParamStore<double> p;
  model.init_params(p, g.rng());
  for (auto& [name, e] : p.entries())
    for (Eigen::Index i = 0; i < e.size(); ++i) e.value[i] += g.real(-0.1, 0.1);
  return p;
}

ParamStore<double> zero_params(const Backbone<double>& model) {
  ParamStore<double> p;
  std::mt19937_64 rng(0);
  model.init_params(p, rng);
  for (auto& [name, e] : p.entries()) e.value.setZero();
  return p;
}

// Direct same-padded 3x3x3 convolution followed by ReLU, one output channel.
double direct_conv_relu(const VolumeD& x, const Array<double>& w, double b, int h, int ww, int d) {
  double acc = b;
  for (int kh = 0; kh < 3; ++kh)
    for (int kw = 0; kw < 3; ++kw)
      for (int kd = 0; kd < 3; ++kd) {
        const int sh = h + kh - 1, sw = ww + kw - 1, sd = d + kd - 1;
        if (!x.dims().contains(sh, sw, sd)) continue;
        acc += w[kh * 9 + kw * 3 + kd] * x(sh, sw, sd);
      }
  return std::max(acc, 0.0);
}

}  // namespace

TEST_SUITE("nnkit") {

TEST_CASE("all-zero model outputs 0.5") {
  Backbone<double> model(tiny_spec({3, 3}));
  const auto params = zero_params(model);
  Gen g(1);
  const auto out = model.infer(params, random_volume(g, {4, 4, 4}, Role::image, -5, 5));
  CHECK((out.logit.data() == 0.5).all());
}

TEST_CASE("forward is deterministic") {
  Gen g(2);
  Backbone<double> model(tiny_spec({3, 2}));
  const auto params = random_params(model, g);
  const auto x = random_volume(g, {4, 4, 4}, Role::image);
  const auto a = model.forward(params, x);
  const auto b = model.forward(params, x);
  CHECK(a.logit == b.logit);
  CHECK(a.penultimate.data == b.penultimate.data);
}

TEST_CASE("head-only model on constant input is sigmoid(w*x+b)") {
  Backbone<double> model(tiny_spec({}));
  auto params = zero_params(model);
  params.at("head.weight").value[0] = 1.7;
  params.at("head.bias").value[0] = -0.4;
  const VolumeD x({4, 4, 4}, Spacing::Ones(), Role::image, 0.3);
  const auto out = model.infer(params, x);
  const double expected = 1.0 / (1.0 + std::exp(-(1.7 * 0.3 - 0.4)));
  for (std::size_t i = 0; i < out.logit.size(); ++i) CHECK(out.logit[i] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("hidden layer matches a direct convolution") {
  Gen g(3);
  Backbone<double> model(tiny_spec({1}, {5, 4, 3}));
  auto params = random_params(model, g);
  params.at("conv0.bias").value[0] = 0.05;
  const auto x = random_volume(g, {5, 4, 3}, Role::image, -1, 1);
  const auto out = model.infer(params, x);
  const auto& w = params.at("conv0.weight").value;
  const double hw = params.at("head.weight").value[0], hb = params.at("head.bias").value[0];
  for (int h = 0; h < 5; ++h)
    for (int ww = 0; ww < 4; ++ww)
      for (int d = 0; d < 3; ++d) {
        const double a = direct_conv_relu(x, w, 0.05, h, ww, d);
        const auto i = static_cast<Eigen::Index>(x.dims().index(h, ww, d));
        CHECK(out.penultimate.data(0, i) == doctest::Approx(a).epsilon(1e-12));
        CHECK(out.logit.data()[i] == doctest::Approx(1.0 / (1.0 + std::exp(-(hw * a + hb)))).epsilon(1e-12));
      }
}

TEST_CASE("im2col and col2im are adjoint") {
  Gen g(4);
  for (int trial = 0; trial < 10; ++trial) {
    const Dims d = g.dims(5);
    const int c = g.integer(1, 3);
    Matrix<double> x(c, static_cast<Eigen::Index>(d.voxels()));
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = g.real(-1, 1);
    Matrix<double> y(c * 27, static_cast<Eigen::Index>(d.voxels()));
    for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = g.real(-1, 1);
    Matrix<double> cols, back;
    im2col3(x, d, cols);
    col2im3(y, d, back);
    CHECK((cols.array() * y.array()).sum() == doctest::Approx((x.array() * back.array()).sum()).epsilon(1e-12));
  }
}

TEST_CASE("sigmoid stays strictly inside (0,1)") {
  CHECK(sigmoid(1000.0f) < 1.0f);
  CHECK(sigmoid(-1000.0f) > 0.0f);
  CHECK(sigmoid(1000.0) < 1.0);
  CHECK(sigmoid(-1000.0) > 0.0);
}

TEST_CASE("backward of mean(logit) on a zero model matches finite differences") {
  Gen g(5);
  Backbone<double> model(tiny_spec({2}));
  auto params = zero_params(model);
  const auto x = random_volume(g, {4, 4, 4}, Role::image);
  params.zero_grads();
  const auto out = model.forward(params, x);
  const auto n = static_cast<double>(out.logit.size());
  model.backward(params, Array<double>::Constant(out.logit.data().size(), 1.0 / n));
  CHECK(params.at("head.bias").grad[0] == doctest::Approx(0.25));

  const double eps = 1e-3;
  for (auto& [name, e] : params.entries())
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      const double saved = e.value[i];
      e.value[i] = saved + eps;
      const double up = model.infer(params, x).logit.data().mean();
      e.value[i] = saved - eps;
      const double down = model.infer(params, x).logit.data().mean();
      e.value[i] = saved;
      CHECK(relative_error(e.grad[i], (up - down) / (2 * eps)) < 1e-4);
    }
}

TEST_CASE("zero loss gradient leaves parameter gradients zero") {
  Gen g(6);
  Backbone<double> model(tiny_spec({2, 2}));
  auto params = random_params(model, g);
  params.zero_grads();
  model.forward(params, random_volume(g, {4, 4, 4}, Role::image));
  model.backward(params, Array<double>::Zero(64));
  for (const auto& [name, e] : params.entries()) CHECK((e.grad == 0.0).all());
}

TEST_CASE("two backward passes without zero_grads double the gradients") {
  Gen g(7);
  Backbone<double> model(tiny_spec({2, 2}));
  auto params = random_params(model, g);
  const auto x = random_volume(g, {4, 4, 4}, Role::image);
  Array<double> dl(64);
  for (Eigen::Index i = 0; i < 64; ++i) dl[i] = g.real(-1, 1);
  params.zero_grads();
  model.forward(params, x);
  model.backward(params, dl);
  std::map<std::string, Array<double>> once;
  for (const auto& [name, e] : params.entries()) once[name] = e.grad;
  model.backward(params, dl);
  for (const auto& [name, e] : params.entries())
    CHECK((e.grad - 2.0 * once[name]).abs().maxCoeff() <= 1e-12 * (1.0 + once[name].abs().maxCoeff()));
}

TEST_CASE("backward without forward is a state error") {
  Backbone<double> model(tiny_spec({2}));
  auto params = zero_params(model);
  CHECK_THROWS_AS(model.backward(params, Array<double>::Zero(64)), StateError);
}

TEST_CASE("forward rejects non-finite input and wrong patch size") {
  Backbone<double> model(tiny_spec({2}));
  const auto params = zero_params(model);
  VolumeD x({4, 4, 4}, Spacing::Ones(), Role::image);
  x.data()[3] = NAN;
  CHECK_THROWS_AS(model.infer(params, x), NumericalError);
  CHECK_THROWS_AS(model.forward(params, VolumeD({4, 4, 5}, Spacing::Ones(), Role::image)), ValidationError);
}

TEST_CASE("NaN weights raise a numerical error naming the layer") {
  Backbone<double> model(tiny_spec({2, 2}));
  auto params = zero_params(model);
  params.at("conv1.bias").value[0] = NAN;
  try {
    model.infer(params, VolumeD({4, 4, 4}, Spacing::Ones(), Role::image));
    FAIL("expected a numerical error");
  } catch (const NumericalError& e) {
    CHECK(std::string(e.what()).find("conv1") != std::string::npos);
  }
}

TEST_CASE("soft Dice term vanishes on perfect overlap") {
  const double p = std::nextafter(1.0, 0.0);
  const VolumeD pred({4, 4, 4}, Spacing::Ones(), Role::logit, p);
  const VolumeD target({4, 4, 4}, Spacing::Ones(), Role::logit, 1.0);
  CHECK(loss_seg(pred, target).dice < 1e-12);
}

TEST_CASE("cross-entropy of 0.5 against 0.5 is ln 2") {
  const VolumeD half({4, 4, 4}, Spacing::Ones(), Role::logit, 0.5);
  CHECK(loss_seg(half, half).bce == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("loss_seg gradient matches finite differences") {
  Gen g(8);
  for (int trial = 0; trial < 5; ++trial) {
    VolumeD pred = random_volume(g, {4, 4, 4}, Role::logit, 0.05, 0.95);
    const VolumeD target = random_volume(g, {4, 4, 4}, Role::logit);
    const VolumeD weights = random_volume(g, {4, 4, 4}, Role::image, 0.0, 2.0);
    for (const VolumeD* w : {static_cast<const VolumeD*>(nullptr), &weights}) {
      const auto loss = loss_seg(pred, target, w);
      double worst = 0.0;
      for (std::size_t i = 0; i < pred.size(); ++i) {
        const double saved = pred[i];
        pred[i] = saved + 1e-6;
        const double up = loss_seg(pred, target, w).value;
        pred[i] = saved - 1e-6;
        const double down = loss_seg(pred, target, w).value;
        pred[i] = saved;
        worst = std::max(worst, relative_error(loss.grad[static_cast<Eigen::Index>(i)], (up - down) / 2e-6));
      }
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("loss_seg rejects mismatched dims") {
  const VolumeD a({4, 4, 4}, Spacing::Ones(), Role::logit, 0.5);
  const VolumeD b({4, 4, 3}, Spacing::Ones(), Role::logit, 0.5);
  CHECK_THROWS_AS(loss_seg(a, b), ValidationError);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
  ParamStore<double> s;
  s.add("p", {3}, Array<double>::LinSpaced(3, 1.0, 3.0));
  const Array<double> before = s.at("p").value;
  for (int i = 0; i < 5; ++i) adam_step(s, 1e-2);
  CHECK((s.at("p").value == before).all());
  CHECK(s.step_count == 5);
}

TEST_CASE("adam descends against a constant gradient") {
  for (double g : {2.5, -0.3}) {
    ParamStore<double> s;
    s.add("x", {1}, Array<double>::Zero(1));
    for (int i = 0; i < 50; ++i) {
      s.at("x").grad[0] = g;
      adam_step(s, 1e-2);
    }
    CHECK(s.at("x").value[0] * g < 0.0);
  }
}

TEST_CASE("one adam step matches the hand-computed update") {
  ParamStore<double> s;
  s.add("p", {3}, (Array<double>(3) << 0.5, -1.0, 2.0).finished());
  s.at("p").grad << 0.1, -0.2, 0.3;
  adam_step(s, 0.01);
  const double g[3] = {0.1, -0.2, 0.3};
  const double v0[3] = {0.5, -1.0, 2.0};
  for (int i = 0; i < 3; ++i) {
    const double m = 0.1 * g[i], v = 0.001 * g[i] * g[i];
    const double mh = m / 0.1, vh = v / 0.001;
    CHECK(s.at("p").value[i] == doctest::Approx(v0[i] - 0.01 * mh / (std::sqrt(vh) + 1e-8)).epsilon(1e-14));
  }
}

TEST_CASE("adam skips frozen entries") {
  ParamStore<double> s;
  s.add("p", {1}, Array<double>::Ones(1)).frozen = true;
  s.at("p").grad[0] = 1.0;
  adam_step(s, 0.1);
  CHECK(s.at("p").value[0] == 1.0);
}

TEST_CASE("grad_check passes on a tiny two-layer model") {
  Gen g(9);
  Backbone<double> model(tiny_spec({3, 2}));
  auto params = random_params(model, g);
  for (auto& [name, e] : params.entries())
    if (name.find("bias") != std::string::npos) e.value.setConstant(0.05);
  const auto report = grad_check(model, params, random_volume(g, {4, 4, 4}, Role::image),
                                 random_volume(g, {4, 4, 4}, Role::logit));
  CHECK(report.passed());
  CHECK(report.entries.size() == 6);
}

TEST_CASE("frozen layers are reported as skipped") {
  Gen g(10);
  Backbone<double> model(tiny_spec({2}));
  auto params = random_params(model, g);
  params.at("conv0.weight").frozen = true;
  const auto report = grad_check(model, params, random_volume(g, {4, 4, 4}, Role::image),
                                 random_volume(g, {4, 4, 4}, Role::logit));
  for (const auto& e : report.entries) CHECK(e.skipped == (e.name == "conv0.weight"));
  CHECK(report.passed());
}

TEST_CASE("injected gradient sign error fails the check") {
  for (int layer = 0; layer < 2; ++layer) {
    const auto report = run_grad_checks(21, layer);
    CHECK_FALSE(report.passed());
  }
  CHECK(run_grad_checks(21).passed());
}

TEST_CASE("checkpoint round-trip restores values, moments, step and rng") {
  const auto dir = testing::scratch_dir("ckpt");
  Gen g(11);
  Backbone<float> model({ModelRole::sl, {3, 2}, 1, {4, 4, 4}});
  ParamStore<float> p;
  model.init_params(p, g.rng());
  for (auto& [name, e] : p.entries())
    for (Eigen::Index i = 0; i < e.size(); ++i) e.grad[i] = static_cast<float>(g.real(-1, 1));
  adam_step(p, 1e-3);
  p.at("head.bias").frozen = true;
  std::mt19937_64 rng(99);
  rng.discard(17);
  save_checkpoint((dir / "c.ckpt").string(), p, rng_to_string(rng), {{"round", 3}});
  const Checkpoint ck = load_checkpoint((dir / "c.ckpt").string());
  CHECK(ck.params == p);
  CHECK(ck.extra.at("round") == 3);
  auto restored = rng_from_string(ck.rng_state);
  CHECK(restored() == rng());

  const std::string bytes = read_file(dir / "c.ckpt");
  write_file(dir / "t.ckpt", bytes.substr(0, bytes.size() - 8));
  CHECK_THROWS_AS(load_checkpoint((dir / "t.ckpt").string()), LengthError);
  write_file(dir / "x.ckpt", "nope");
  CHECK_THROWS_AS(load_checkpoint((dir / "x.ckpt").string()), FormatError);
}

}  // TEST_SUITE
