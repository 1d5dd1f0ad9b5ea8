#pragma once

#include "pva/volume.hpp"

#include "json.hpp"

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

namespace pva::nn {

struct StateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

/// Channel-major feature map: `data` is channels x voxels.
template <typename Scalar>
struct FeatureMap {
  Dims dims;
  Matrix<Scalar> data;

  int channels() const { return static_cast<int>(data.rows()); }
  bool all_finite() const { return data.allFinite(); }
  auto embedding(std::size_t voxel) const { return data.col(static_cast<Eigen::Index>(voxel)); }

  template <typename To>
  FeatureMap<To> cast() const {
    return {dims, data.template cast<To>()};
  }
};

enum class ModelRole { sl, sg };

/// Plain 3D CNN: `widths.size()` conv3x3x3+ReLU layers, then a 1x1x1 conv
/// and a sigmoid. The last hidden activation is the penultimate feature map;
/// with no hidden layers the input itself plays that part.
struct ModelSpec {
  ModelRole role = ModelRole::sg;
  std::vector<int> widths{8, 8, 8};
  int in_channels = 1;
  Dims patch{32, 32, 32};

  int penultimate_channels() const { return widths.empty() ? in_channels : widths.back(); }
  void validate() const;
};

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& j, ModelSpec base = {});

// ---------------------------------------------------------------------------
// Parameters

template <typename Scalar>
class ParamStore {
 public:
  struct Entry {
    std::vector<int> shape;
    Array<Scalar> value, grad, m, v;
    bool frozen = false;

    Eigen::Index size() const { return value.size(); }
  };

  Entry& add(const std::string& name, std::vector<int> shape, Array<Scalar> init) {
    Eigen::Index n = 1;
    for (int s : shape) n *= s;
    if (n != init.size())
      throw ValidationError("parameter '" + name + "' shape does not match its values");
    Entry e;
    e.shape = std::move(shape);
    e.value = std::move(init);
    e.grad = Array<Scalar>::Zero(n);
    e.m = Array<Scalar>::Zero(n);
    e.v = Array<Scalar>::Zero(n);
    return entries_[name] = std::move(e);
  }

  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  Entry& at(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& at(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ValidationError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry>& entries() { return entries_; }
  const std::map<std::string, Entry>& entries() const { return entries_; }

  void zero_grads() {
    for (auto& [name, e] : entries_) e.grad.setZero();
  }
  void set_frozen(bool frozen) {
    for (auto& [name, e] : entries_) e.frozen = frozen;
  }

  template <typename To>
  ParamStore<To> cast() const {
    ParamStore<To> out;
    for (const auto& [name, e] : entries_) {
      auto& o = out.add(name, e.shape, e.value.template cast<To>());
      o.grad = e.grad.template cast<To>();
      o.m = e.m.template cast<To>();
      o.v = e.v.template cast<To>();
      o.frozen = e.frozen;
    }
    out.step_count = step_count;
    return out;
  }

  /// Bit-exact comparison of values and optimizer state (gradients excluded).
  friend bool operator==(const ParamStore& a, const ParamStore& b) {
    if (a.step_count != b.step_count || a.entries_.size() != b.entries_.size()) return false;
    for (const auto& [name, e] : a.entries_) {
      auto it = b.entries_.find(name);
      if (it == b.entries_.end()) return false;
      const Entry& f = it->second;
      if (e.shape != f.shape || e.frozen != f.frozen || e.size() != f.size()) return false;
      if (!(e.value == f.value).all() || !(e.m == f.m).all() || !(e.v == f.v).all()) return false;
    }
    return true;
  }

  std::int64_t step_count = 0;

 private:
  std::map<std::string, Entry> entries_;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update of every non-frozen entry; increments `step_count`.
template <typename Scalar>
void adam_step(ParamStore<Scalar>& store, double lr, const AdamConfig& cfg = {}) {
  ++store.step_count;
  const double t = static_cast<double>(store.step_count);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  const auto b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  for (auto& [name, e] : store.entries()) {
    if (e.frozen) continue;
    e.m = b1 * e.m + (Scalar(1) - b1) * e.grad;
    e.v = b2 * e.v + (Scalar(1) - b2) * e.grad.square();
    const Array<Scalar> m_hat = e.m / static_cast<Scalar>(c1);
    const Array<Scalar> v_hat = e.v / static_cast<Scalar>(c2);
    e.value -= static_cast<Scalar>(lr) * m_hat / (v_hat.sqrt() + static_cast<Scalar>(cfg.eps));
  }
}

// ---------------------------------------------------------------------------
// 3x3x3 same-padded convolution via im2col

/// cols has (channels * 27) rows; row c*27 + kh*9 + kw*3 + kd holds channel c
/// shifted by (kh-1, kw-1, kd-1), zero outside the volume.
template <typename Scalar>
void im2col3(const Matrix<Scalar>& x, const Dims& dims, Matrix<Scalar>& cols) {
  const int channels = static_cast<int>(x.rows());
  const int H = dims.h, W = dims.w, D = dims.d;
  cols.resize(channels * 27, static_cast<Eigen::Index>(dims.voxels()));
  for (int c = 0; c < channels; ++c) {
    const Scalar* in = x.data() + static_cast<std::size_t>(c) * dims.voxels();
    for (int kh = 0; kh < 3; ++kh)
      for (int kw = 0; kw < 3; ++kw)
        for (int kd = 0; kd < 3; ++kd) {
          Scalar* out = cols.data() + static_cast<std::size_t>(c * 27 + kh * 9 + kw * 3 + kd) *
                                          dims.voxels();
          for (int h = 0; h < H; ++h) {
            const int hs = h + kh - 1;
            for (int w = 0; w < W; ++w) {
              const int ws = w + kw - 1;
              Scalar* o = out + dims.index(h, w, 0);
              if (hs < 0 || hs >= H || ws < 0 || ws >= W) {
                std::fill(o, o + D, Scalar(0));
                continue;
              }
              const Scalar* s = in + dims.index(hs, ws, 0);
              if (kd == 1) {
                std::copy(s, s + D, o);
              } else if (kd == 0) {
                o[0] = Scalar(0);
                std::copy(s, s + D - 1, o + 1);
              } else {
                std::copy(s + 1, s + D, o);
                o[D - 1] = Scalar(0);
              }
            }
          }
        }
  }
}

/// Adjoint of im2col3: scatters column gradients back onto the input grid.
template <typename Scalar>
void col2im3(const Matrix<Scalar>& cols, const Dims& dims, Matrix<Scalar>& dx) {
  const int channels = static_cast<int>(cols.rows() / 27);
  const int H = dims.h, W = dims.w, D = dims.d;
  dx.setZero(channels, static_cast<Eigen::Index>(dims.voxels()));
  for (int c = 0; c < channels; ++c) {
    Scalar* out = dx.data() + static_cast<std::size_t>(c) * dims.voxels();
    for (int kh = 0; kh < 3; ++kh)
      for (int kw = 0; kw < 3; ++kw)
        for (int kd = 0; kd < 3; ++kd) {
          const Scalar* in = cols.data() + static_cast<std::size_t>(c * 27 + kh * 9 + kw * 3 + kd) *
                                               dims.voxels();
          for (int h = 0; h < H; ++h) {
            const int hs = h + kh - 1;
            if (hs < 0 || hs >= H) continue;
            for (int w = 0; w < W; ++w) {
              const int ws = w + kw - 1;
              if (ws < 0 || ws >= W) continue;
              const Scalar* s = in + dims.index(h, w, 0);
              Scalar* o = out + dims.index(hs, ws, 0);
              const int d0 = kd == 0 ? 1 : 0;
              const int d1 = kd == 2 ? D - 1 : D;
              for (int d = d0; d < d1; ++d) o[d + kd - 1] += s[d];
            }
          }
        }
  }
}

template <typename Scalar>
Scalar sigmoid(Scalar z) {
  constexpr Scalar eps = std::numeric_limits<Scalar>::epsilon();
  const Scalar p = Scalar(1) / (Scalar(1) + std::exp(-z));
  return std::clamp(p, eps, Scalar(1) - eps);
}

// ---------------------------------------------------------------------------
// Backbone

template <typename Scalar>
class Backbone {
 public:
  struct Output {
    Volume<Scalar> logit;
    FeatureMap<Scalar> penultimate;
  };

  explicit Backbone(ModelSpec spec) : spec_(std::move(spec)) { spec_.validate(); }

  const ModelSpec& spec() const { return spec_; }
  int hidden_layers() const { return static_cast<int>(spec_.widths.size()); }

  static std::string weight_name(int layer) { return "conv" + std::to_string(layer) + ".weight"; }
  static std::string bias_name(int layer) { return "conv" + std::to_string(layer) + ".bias"; }

  /// Parameter names in layer order.
  std::vector<std::string> parameter_names() const {
    std::vector<std::string> names;
    for (int l = 0; l < hidden_layers(); ++l) {
      names.push_back(weight_name(l));
      names.push_back(bias_name(l));
    }
    names.push_back("head.weight");
    names.push_back("head.bias");
    return names;
  }

  /// He-normal conv weights, zero biases.
  void init_params(ParamStore<Scalar>& store, std::mt19937_64& rng) const {
    int in = spec_.in_channels;
    for (int l = 0; l < hidden_layers(); ++l) {
      const int out = spec_.widths[static_cast<std::size_t>(l)];
      std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / (27.0 * in)));
      Array<Scalar> w(out * in * 27);
      for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(normal(rng));
      store.add(weight_name(l), {out, in, 3, 3, 3}, std::move(w));
      store.add(bias_name(l), {out}, Array<Scalar>::Zero(out));
      in = out;
    }
    std::normal_distribution<double> normal(0.0, std::sqrt(1.0 / in));
    Array<Scalar> w(in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = static_cast<Scalar>(normal(rng));
    store.add("head.weight", {1, in, 1, 1, 1}, std::move(w));
    store.add("head.bias", {1}, Array<Scalar>::Zero(1));
  }

  /// Forward pass that caches activations for `backward`.
  Output forward(const ParamStore<Scalar>& params, const Volume<Scalar>& patch) {
    check_patch(patch);
    cache_ = Cache{};
    Output out = run(params, patch, &cache_);
    cache_.valid = true;
    return out;
  }

  /// Forward pass without caching; the patch may have any positive dims.
  Output infer(const ParamStore<Scalar>& params, const Volume<Scalar>& patch) const {
    return run(params, patch, nullptr);
  }

  /// Accumulates d(loss)/d(params) given d(loss)/d(logit) for the cached pass.
  void backward(ParamStore<Scalar>& params, const Array<Scalar>& dlogit) {
    if (!cache_.valid) throw StateError("backward called without a cached forward pass");
    const auto n = static_cast<Eigen::Index>(cache_.dims.voxels());
    if (dlogit.size() != n) throw ValidationError("logit gradient has the wrong length");

    // Through the sigmoid and the 1x1x1 head.
    const Array<Scalar>& p = cache_.prob;
    Matrix<Scalar> dz = (dlogit * p * (Scalar(1) - p)).matrix().transpose();  // 1 x N
    const Matrix<Scalar>& feat = cache_.acts.back();                          // C x N
    auto& hw = params.at("head.weight");
    auto& hb = params.at("head.bias");
    accumulate(hw, (dz * feat.transpose()).eval());
    hb.grad[0] += dz.sum();
    if (hidden_layers() == 0) return;

    const Eigen::Map<const Matrix<Scalar>> head_w(hw.value.data(), 1, feat.rows());
    Matrix<Scalar> dact = head_w.transpose() * dz;  // C x N
    for (int l = hidden_layers() - 1; l >= 0; --l) {
      const Matrix<Scalar>& act = cache_.acts[static_cast<std::size_t>(l) + 1];
      Matrix<Scalar> dpre = (act.array() > Scalar(0)).select(dact, Matrix<Scalar>::Zero(dact.rows(), dact.cols()));
      auto& we = params.at(weight_name(l));
      auto& be = params.at(bias_name(l));
      Matrix<Scalar> dw = dpre * cache_.cols[static_cast<std::size_t>(l)].transpose();
      if (l == flip_gradient_layer) dw = -dw;
      accumulate(we, dw);
      be.grad += dpre.rowwise().sum().array();
      if (l == 0) break;
      const int out = spec_.widths[static_cast<std::size_t>(l)];
      const Eigen::Map<const Matrix<Scalar>> w(we.value.data(), out, we.size() / out);
      const Matrix<Scalar> dcols = w.transpose() * dpre;
      col2im3(dcols, cache_.dims, dact);
    }
  }

  bool has_cache() const { return cache_.valid; }
  void clear_cache() { cache_ = Cache{}; }

  /// Test fixture: when >= 0, negates that hidden layer's weight gradient.
  int flip_gradient_layer = -1;

 private:
  struct Cache {
    Dims dims;
    std::vector<Matrix<Scalar>> cols;  // im2col of each hidden layer's input
    std::vector<Matrix<Scalar>> acts;  // acts[0] = input, acts[l+1] = relu output of layer l
    Array<Scalar> prob;
    bool valid = false;
  };

  void check_patch(const Volume<Scalar>& patch) const {
    if (!(patch.dims() == spec_.patch))
      throw ValidationError("patch dims " + to_string(patch.dims()) + " do not match model patch " +
                            to_string(spec_.patch));
  }

  static void accumulate(typename ParamStore<Scalar>::Entry& e, const Matrix<Scalar>& g) {
    e.grad += Eigen::Map<const Array<Scalar>>(g.data(), g.size());
  }

  Output run(const ParamStore<Scalar>& params, const Volume<Scalar>& patch, Cache* cache) const {
    if (!patch.data().allFinite()) throw NumericalError("non-finite value in input patch");
    const Dims dims = patch.dims();
    const auto n = static_cast<Eigen::Index>(dims.voxels());
    Matrix<Scalar> act = Eigen::Map<const Matrix<Scalar>>(patch.data().data(), spec_.in_channels, n);
    if (cache) {
      cache->dims = dims;
      cache->acts.push_back(act);
    }
    Matrix<Scalar> cols;
    int in = spec_.in_channels;
    for (int l = 0; l < hidden_layers(); ++l) {
      const int out = spec_.widths[static_cast<std::size_t>(l)];
      const auto& we = params.at(weight_name(l));
      const auto& be = params.at(bias_name(l));
      const Eigen::Map<const Matrix<Scalar>> w(we.value.data(), out, in * 27);
      im2col3(act, dims, cols);
      Matrix<Scalar> pre = w * cols;
      pre.colwise() += be.value.matrix();
      act = pre.cwiseMax(Scalar(0));
      if (!act.allFinite())
        throw NumericalError("non-finite activation after layer " + weight_name(l));
      if (cache) {
        cache->cols.push_back(std::move(cols));
        cache->acts.push_back(act);
        cols = Matrix<Scalar>();
      }
      in = out;
    }
    const auto& hw = params.at("head.weight");
    const Eigen::Map<const Matrix<Scalar>> head_w(hw.value.data(), 1, in);
    Matrix<Scalar> z = head_w * act;
    const Scalar hb = params.at("head.bias").value[0];
    typename Volume<Scalar>::Array prob(n);
    for (Eigen::Index i = 0; i < n; ++i) prob[i] = sigmoid(z(0, i) + hb);
    if (!prob.allFinite()) throw NumericalError("non-finite value after head layer");
    if (cache) cache->prob = prob;
    return {Volume<Scalar>(dims, patch.spacing(), Role::logit, std::move(prob)),
            FeatureMap<Scalar>{dims, std::move(act)}};
  }

  ModelSpec spec_;
  Cache cache_;
};

// ---------------------------------------------------------------------------
// Segmentation loss: soft Dice + binary cross-entropy with soft targets

template <typename Scalar>
struct SegLoss {
  Scalar value = 0;
  Scalar dice = 0;
  Scalar bce = 0;
  Array<Scalar> grad;  // d value / d pred
};

/// Dice term 1 - (2 sum(wpt) + s) / (sum(wp) + sum(wt) + s); BCE term is the
/// w-weighted mean cross-entropy. `weights` (optional) must be non-negative.
template <typename Scalar>
SegLoss<Scalar> loss_seg(const Volume<Scalar>& pred, const Volume<Scalar>& target,
                         const Volume<Scalar>* weights = nullptr, double smooth = 1.0) {
  if (!(pred.dims() == target.dims()) || (weights && !(weights->dims() == pred.dims())))
    throw ValidationError("loss_seg dimension mismatch");
  const auto n = static_cast<Eigen::Index>(pred.size());
  const auto& p = pred.data();
  const auto& t = target.data();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (!(p[i] > Scalar(0) && p[i] < Scalar(1)))
      throw ValidationError("loss_seg prediction outside (0,1)");
    if (!(t[i] >= Scalar(0) && t[i] <= Scalar(1)))
      throw ValidationError("loss_seg target outside [0,1]");
  }
  auto weight = [&](Eigen::Index i) -> double {
    return weights ? static_cast<double>(weights->data()[i]) : 1.0;
  };

  double spt = 0.0, sp = 0.0, st = 0.0, sw = 0.0, ce = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weight(i), pi = p[i], ti = t[i];
    spt += w * pi * ti;
    sp += w * pi;
    st += w * ti;
    sw += w;
    ce += w * -(ti * std::log(pi) + (1.0 - ti) * std::log(1.0 - pi));
  }
  const double num = 2.0 * spt + smooth;
  const double den = sp + st + smooth;
  SegLoss<Scalar> out;
  out.dice = static_cast<Scalar>(1.0 - num / den);
  out.bce = static_cast<Scalar>(sw > 0.0 ? ce / sw : 0.0);
  out.value = out.dice + out.bce;
  out.grad.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = weight(i), pi = p[i], ti = t[i];
    const double g_dice = -(2.0 * w * ti * den - num * w) / (den * den);
    const double g_bce = sw > 0.0 ? w * (pi - ti) / (pi * (1.0 - pi)) / sw : 0.0;
    out.grad[i] = static_cast<Scalar>(g_dice + g_bce);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient verification

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  bool skipped = false;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 1e-3;

  bool passed() const {
    for (const auto& e : entries)
      if (!e.skipped && !(e.max_rel_error < tolerance)) return false;
    return true;
  }
  std::string format() const;
};

/// |a - n| / max(|a|, |n|, floor); the floor keeps round-off on vanishing
/// gradients from reading as a relative error.
double relative_error(double analytic, double numeric, double floor = 1e-6);

/// Compares backprop gradients of loss_seg(model(patch), target) with central
/// finite differences for every non-frozen parameter (frozen ones are
/// reported as skipped).
GradCheckReport grad_check(Backbone<double>& model, ParamStore<double>& params,
                           const Volume<double>& patch, const Volume<double>& target,
                           double eps = 1e-6, double tolerance = 1e-3);

// ---------------------------------------------------------------------------
// Checkpoints: "PCKP", u32 LE manifest length, JSON manifest, float32 LE blob.

struct Checkpoint {
  ParamStore<float> params;
  std::string rng_state;
  nlohmann::json extra;
};

void save_checkpoint(const std::string& path, const ParamStore<float>& params,
                     const std::string& rng_state, const nlohmann::json& extra = nlohmann::json::object());
Checkpoint load_checkpoint(const std::string& path);

std::string rng_to_string(const std::mt19937_64& rng);
std::mt19937_64 rng_from_string(const std::string& state);

}  // namespace pva::nn
