#pragma once

#include "pva/fpa.hpp"
#include "pva/lpu.hpp"
#include "pva/metrics.hpp"
#include "pva/nn.hpp"
#include "pva/phantom.hpp"
#include "pva/volume.hpp"

#include "json.hpp"

#include <array>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace pva::pipeline {

namespace fs = std::filesystem;

struct ExperimentConfig {
  // Data: a dataset directory of subject_* folders, or phantoms generated from
  // `phantom` with per-subject seeds derived from `rng_seed`.
  std::string dataset;
  PhantomSpec phantom;
  int n_subjects = 12;
  int n_train = 8;
  double pva_fraction = 0.2429;

  nn::ModelSpec sl{nn::ModelRole::sl, {4, 4, 4}, 1, {16, 16, 16}};
  nn::ModelSpec sg{nn::ModelRole::sg, {8, 8, 8}, 1, {32, 32, 32}};
  double lr = 1e-3;
  int sl_epochs = 50;
  int sl_patches_per_volume = 4;
  bool sl_ignore_unlabeled = false;
  int warmup_epochs = 20;
  int self_training_rounds = 5;
  int epochs_per_round = 10;
  int sg_patches_per_volume = 1;

  bool use_pli = true;
  bool use_plu = true;
  bool use_fpa = true;
  bool clamp_labeled = true;
  int fpa_steps = 200;
  double fpa_lr = 1e-3;
  fpa::FusionPolicy fusion = fpa::FusionPolicy::max;

  metrics::MetricConfig metrics;
  std::uint64_t rng_seed = 0;
  std::string out_dir;

  void validate() const;
};

nlohmann::json to_json(const ExperimentConfig& c);
/// Overlays the keys present in `j` onto `base`; unknown keys are rejected.
ExperimentConfig experiment_config_from_json(const nlohmann::json& j, ExperimentConfig base = {});

struct Subject {
  std::string id;
  VolumeF image;
  Mask gt_mask;
  CenterlineTree tree;
  PvaLabel pva;
};

struct Dataset {
  std::vector<Subject> train;
  std::vector<Subject> test;
};

/// Subject `index` of a phantom suite; deterministic in (spec, fraction, seed).
Subject make_phantom_subject(const PhantomSpec& spec, double pva_fraction, std::uint64_t seed,
                             int index);
void write_subject(const Subject& s, const fs::path& dir);
Subject read_subject(const fs::path& dir);

/// Phantoms or the configured dataset directory, split into the first
/// `n_train` subjects and the rest.
Dataset load_dataset(const ExperimentConfig& config);

struct PatchPair {
  std::array<int, 3> origin;
  VolumeF image;
  VolumeF label;
};

/// Copies the `size` box at `origin` out of `v`.
template <typename Scalar>
Volume<Scalar> crop(const Volume<Scalar>& v, const std::array<int, 3>& origin, const Dims& size,
                    Role role) {
  typename Volume<Scalar>::Array out(static_cast<Eigen::Index>(size.voxels()));
  Eigen::Index k = 0;
  for (int h = 0; h < size.h; ++h)
    for (int w = 0; w < size.w; ++w)
      for (int d = 0; d < size.d; ++d) out[k++] = v(origin[0] + h, origin[1] + w, origin[2] + d);
  return Volume<Scalar>(size, v.spacing(), role, std::move(out));
}

/// Origin of a `size` box centred on `center`, shifted to lie inside `dims`.
std::array<int, 3> centered_origin(const std::array<int, 3>& center, const Dims& size,
                                   const Dims& dims);

/// Patches centred on uniformly drawn PVA-labeled voxels; label patches mark
/// labeled voxels 1 and everything else 0.
std::vector<PatchPair> sample_labeled_patches(const VolumeF& image, const PvaLabel& pva,
                                              const Dims& patch_size, int n, std::mt19937_64& rng);

/// Window starts along one axis: stride max(1, patch/2), last start size-patch.
std::vector<int> window_starts(int size, int patch);

struct WindowOutput {
  VolumeF logit;
  nn::FeatureMap<float> penultimate;
};

/// Half-window-step tiling with arithmetic-mean overlap fusion of logits and
/// penultimate features.
WindowOutput sliding_window_infer(const nn::Backbone<float>& model,
                                  const nn::ParamStore<float>& params, const VolumeF& image);

struct TrainRecord {
  std::vector<double> epoch_loss;
  std::vector<nlohmann::json> rounds;  // {round, eta:{id:value}, accepted:{id:bool}}
  std::vector<std::string> checkpoints;
  double wall_seconds = 0.0;

  nlohmann::json to_json() const;
};

/// S_l on labeled patches. One epoch draws `sl_patches_per_volume` patches per
/// training subject and takes one Adam step per patch.
nn::ParamStore<float> train_sl(const ExperimentConfig& config, const std::vector<Subject>& train,
                               TrainRecord* record = nullptr);

struct GsrResult {
  nn::ParamStore<float> sg;
  std::vector<lpu::PseudoLabelState> states;
  std::optional<fpa::Prototype<float>> prototype;
  std::vector<double> fpa_loss_trace;
  TrainRecord record;
};

struct GsrHooks {
  /// Directory for checkpoints/, pseudo/ and eta/; empty disables persistence.
  fs::path out_dir;
  /// Resume from the latest round checkpoint found under out_dir.
  bool resume = false;
  /// Stop right after writing this round's checkpoint (simulated kill).
  int halt_after_round = -1;
};

/// Thrown when `GsrHooks::halt_after_round` stops a run.
struct Halted : std::runtime_error {
  using std::runtime_error::runtime_error;
};

GsrResult run_gsr(const ExperimentConfig& config, const std::vector<Subject>& train,
                  const nn::ParamStore<float>* sl_params, const GsrHooks& hooks = {});

struct Prediction {
  Mask mask;
  VolumeF fused;
};

Prediction predict(const nn::ParamStore<float>& sg, const fpa::Prototype<float>* proto,
                   const VolumeF& image, const nn::ModelSpec& spec, fpa::FusionPolicy fusion);

/// Channel/shape compatibility of a parameter store with a model spec.
void check_params(const nn::ParamStore<float>& params, const nn::ModelSpec& spec);

struct ExperimentResult {
  metrics::MetricReport report;
  GsrResult gsr;
};

/// Full run writing config.json, checkpoints/, pseudo/, eta/, predictions/,
/// report.json (deterministic) and train_log.json (timings). Resumes from
/// existing checkpoints when `resume` is set.
ExperimentResult run_experiment(const ExperimentConfig& config, bool resume = false,
                                int halt_after_round = -1);

/// The trained artifacts of an experiment directory.
struct TrainedModel {
  ExperimentConfig config;
  nn::ParamStore<float> sg;
  std::optional<fpa::Prototype<float>> prototype;
};

TrainedModel load_trained(const fs::path& experiment_dir);

// ---------------------------------------------------------------------------
// Ablation

struct AblationRow {
  std::string name;
  std::vector<metrics::MetricReport> per_seed;

  /// Mean over seeds of the per-seed mean of `metric`.
  double mean(const std::string& metric) const;
};

struct AblationResult {
  std::vector<std::uint64_t> seeds;
  std::vector<AblationRow> rows;  // baseline, +PLI, +PLI+PLU, +PLI+PLU+FPA

  nlohmann::json to_json() const;
  std::string table() const;
};

/// The four configurations over `seeds`: S_l alone; S_g on initialized pseudo
/// labels without updates; with updates; with updates and prototype fusion.
/// Within a seed the S_l model is shared and the last two rows share one run.
/// Per-seed results are written under out_dir as they complete.
AblationResult run_ablation(const ExperimentConfig& config, const std::vector<std::uint64_t>& seeds);

}  // namespace pva::pipeline
