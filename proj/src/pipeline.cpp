#include "pva/pipeline.hpp"

#include "pva/binary_io.hpp"
#include "pva/volume_io.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <set>

namespace pva::pipeline {

using nlohmann::json;

namespace {

// Independent RNG streams derived from the experiment seed.
constexpr std::uint64_t kSlStream = 0x534c;
constexpr std::uint64_t kGsrStream = 0x4753;
constexpr std::uint64_t kPvaStream = 0x5056;

const std::string kRhoName = "fpa.rho";

std::string subject_id(int index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "subject_%03d", index);
  return buf;
}

std::string round_name(int k) { return "round_" + std::to_string(k); }

[[noreturn]] void abort_divergence(const nn::ParamStore<float>& params, const fs::path& dir,
                                   const std::string& stage, const std::string& what) {
  std::string where;
  if (!dir.empty()) {
    fs::create_directories(dir / "checkpoints");
    const fs::path path = dir / "checkpoints" / "last_finite.ckpt";
    nn::save_checkpoint(path.string(), params, "", json{{"stage", stage}});
    where = "; last finite state saved to " + path.string();
  }
  throw nn::NumericalError(what + " during " + stage + where);
}

/// One Adam step on a single patch; returns the loss.
double train_step(nn::Backbone<float>& model, nn::ParamStore<float>& params, const VolumeF& image,
                  const VolumeF& target, const VolumeF* weights, double lr, const fs::path& dir,
                  const std::string& stage) {
  params.zero_grads();
  nn::SegLoss<float> loss;
  try {
    const auto out = model.forward(params, image);
    loss = nn::loss_seg(out.logit, target, weights);
  } catch (const nn::NumericalError& e) {
    abort_divergence(params, dir, stage, e.what());
  }
  model.backward(params, loss.grad);
  bool finite = std::isfinite(loss.value);
  for (const auto& [name, e] : params.entries()) finite = finite && e.grad.allFinite();
  if (!finite) abort_divergence(params, dir, stage, "non-finite loss or gradient");
  const nn::ParamStore<float> before = params;
  nn::adam_step(params, lr);
  for (const auto& [name, e] : params.entries())
    if (!e.value.allFinite()) abort_divergence(before, dir, stage, "non-finite parameter " + name);
  return loss.value;
}

json states_to_json(const std::vector<lpu::PseudoLabelState>& states) {
  json out = json::object();
  for (const auto& s : states) {
    json hist = json::array();
    for (const auto& r : s.eta_history) hist.push_back({r.iteration, r.eta, r.accepted});
    out[s.volume_id] = hist;
  }
  return out;
}

std::vector<lpu::EtaRecord> history_from_json(const json& j) {
  std::vector<lpu::EtaRecord> out;
  for (const auto& r : j) out.push_back({r.at(0).get<int>(), r.at(1).get<double>(), r.at(2).get<bool>()});
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ExperimentConfig::validate() const {
  phantom.validate();
  sl.validate();
  sg.validate();
  if (n_subjects < 1 || n_train < 1 || n_train > n_subjects)
    throw ConfigError("need 1 <= n_train <= n_subjects");
  if (!(pva_fraction > 0.0 && pva_fraction <= 1.0)) throw ConfigError("pva_fraction must lie in (0, 1]");
  if (!(lr > 0.0) || !(fpa_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (sl_epochs < 0 || warmup_epochs < 0 || self_training_rounds < 0 || epochs_per_round < 0 ||
      fpa_steps < 0)
    throw ConfigError("epoch and round counts must be non-negative");
  if (sl_patches_per_volume < 1 || sg_patches_per_volume < 1)
    throw ConfigError("patches per volume must be positive");
  if (sl.in_channels != 1 || sg.in_channels != 1) throw ConfigError("volumes have a single channel");
  if (dataset.empty()) {
    const Dims d = phantom.dims;
    for (const auto* m : {&sl, &sg})
      if (m->patch.h > d.h || m->patch.w > d.w || m->patch.d > d.d)
        throw ConfigError("patch " + to_string(m->patch) + " exceeds volume dims " + to_string(d));
  }
}

json to_json(const ExperimentConfig& c) {
  return json{{"dataset", c.dataset},
              {"phantom", to_json(c.phantom)},
              {"n_subjects", c.n_subjects},
              {"n_train", c.n_train},
              {"pva_fraction", c.pva_fraction},
              {"sl", nn::to_json(c.sl)},
              {"sg", nn::to_json(c.sg)},
              {"lr", c.lr},
              {"sl_epochs", c.sl_epochs},
              {"sl_patches_per_volume", c.sl_patches_per_volume},
              {"sl_ignore_unlabeled", c.sl_ignore_unlabeled},
              {"warmup_epochs", c.warmup_epochs},
              {"self_training_rounds", c.self_training_rounds},
              {"epochs_per_round", c.epochs_per_round},
              {"sg_patches_per_volume", c.sg_patches_per_volume},
              {"use_pli", c.use_pli},
              {"use_plu", c.use_plu},
              {"use_fpa", c.use_fpa},
              {"clamp_labeled", c.clamp_labeled},
              {"fpa_steps", c.fpa_steps},
              {"fpa_lr", c.fpa_lr},
              {"fusion", fpa::to_string(c.fusion)},
              {"metrics", metrics::to_json(c.metrics)},
              {"rng_seed", c.rng_seed},
              {"out_dir", c.out_dir}};
}

ExperimentConfig experiment_config_from_json(const json& j, ExperimentConfig c) {
  if (!j.is_object()) throw ConfigError("experiment config must be a JSON object");
  static const std::set<std::string> known = {
      "dataset", "phantom", "n_subjects", "n_train", "pva_fraction", "sl", "sg", "lr", "sl_epochs",
      "sl_patches_per_volume", "sl_ignore_unlabeled", "warmup_epochs", "self_training_rounds",
      "epochs_per_round", "sg_patches_per_volume", "use_pli", "use_plu", "use_fpa",
      "clamp_labeled", "fpa_steps", "fpa_lr", "fusion", "metrics", "rng_seed", "out_dir"};
  for (const auto& [key, value] : j.items())
    if (!known.count(key)) throw ConfigError("unknown config key '" + key + "'");
  try {
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("phantom")) c.phantom = phantom_spec_from_json(j.at("phantom"), c.phantom);
    c.n_subjects = j.value("n_subjects", c.n_subjects);
    c.n_train = j.value("n_train", c.n_train);
    c.pva_fraction = j.value("pva_fraction", c.pva_fraction);
    if (j.contains("sl")) c.sl = nn::model_spec_from_json(j.at("sl"), c.sl);
    if (j.contains("sg")) c.sg = nn::model_spec_from_json(j.at("sg"), c.sg);
    c.lr = j.value("lr", c.lr);
    c.sl_epochs = j.value("sl_epochs", c.sl_epochs);
    c.sl_patches_per_volume = j.value("sl_patches_per_volume", c.sl_patches_per_volume);
    c.sl_ignore_unlabeled = j.value("sl_ignore_unlabeled", c.sl_ignore_unlabeled);
    c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
    c.self_training_rounds = j.value("self_training_rounds", c.self_training_rounds);
    c.epochs_per_round = j.value("epochs_per_round", c.epochs_per_round);
    c.sg_patches_per_volume = j.value("sg_patches_per_volume", c.sg_patches_per_volume);
    c.use_pli = j.value("use_pli", c.use_pli);
    c.use_plu = j.value("use_plu", c.use_plu);
    c.use_fpa = j.value("use_fpa", c.use_fpa);
    c.clamp_labeled = j.value("clamp_labeled", c.clamp_labeled);
    c.fpa_steps = j.value("fpa_steps", c.fpa_steps);
    c.fpa_lr = j.value("fpa_lr", c.fpa_lr);
    if (j.contains("fusion")) c.fusion = fpa::parse_fusion(j.at("fusion").get<std::string>());
    if (j.contains("metrics")) c.metrics = metrics::metric_config_from_json(j.at("metrics"), c.metrics);
    c.rng_seed = j.value("rng_seed", c.rng_seed);
    c.out_dir = j.value("out_dir", c.out_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed experiment config: ") + e.what());
  } catch (const ValidationError& e) {
    throw ConfigError(e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// Data

Subject make_phantom_subject(const PhantomSpec& spec, double pva_fraction, std::uint64_t seed,
                             int index) {
  PhantomSpec s = spec;
  s.rng_seed = derive_seed(seed, static_cast<std::uint64_t>(index));
  Phantom ph = generate_phantom(s);
  PvaLabel pva = synthesize_pva(ph.gt_mask, ph.tree, pva_fraction, derive_seed(s.rng_seed, kPvaStream));
  return {subject_id(index), std::move(ph.image), std::move(ph.gt_mask), std::move(ph.tree),
          std::move(pva)};
}

void write_subject(const Subject& s, const fs::path& dir) {
  fs::create_directories(dir);
  write_volume(s.image, dir / "image.vvol");
  write_volume(s.gt_mask, dir / "gt.vvol");
  write_tree(s.tree, dir / "tree.json");
  write_volume(s.pva.mask, dir / "pva.vvol");
}

Subject read_subject(const fs::path& dir) {
  Subject s;
  s.id = dir.filename().string();
  s.image = read_volume_f32(dir / "image.vvol");
  s.gt_mask = read_mask(dir / "gt.vvol");
  s.tree = read_tree(dir / "tree.json");
  Mask pva = read_mask(dir / "pva.vvol");
  if (!(pva.dims() == s.image.dims()) || !(s.gt_mask.dims() == s.image.dims()))
    throw ValidationError("subject " + s.id + " has volumes of differing dims");
  const auto gt_count = count_foreground(s.gt_mask);
  const double fraction =
      gt_count ? static_cast<double>(count_foreground(pva)) / static_cast<double>(gt_count) : 0.0;
  s.pva = PvaLabel(std::move(pva), fraction);
  return s;
}

Dataset load_dataset(const ExperimentConfig& config) {
  std::vector<Subject> all;
  if (config.dataset.empty()) {
    for (int i = 0; i < config.n_subjects; ++i)
      all.push_back(make_phantom_subject(config.phantom, config.pva_fraction, config.rng_seed, i));
  } else {
    std::vector<fs::path> dirs;
    for (const auto& entry : fs::directory_iterator(config.dataset))
      if (entry.is_directory() && fs::exists(entry.path() / "image.vvol")) dirs.push_back(entry.path());
    std::sort(dirs.begin(), dirs.end());
    if (static_cast<int>(dirs.size()) < config.n_subjects)
      throw ConfigError("dataset " + config.dataset + " holds " + std::to_string(dirs.size()) +
                        " subjects, config asks for " + std::to_string(config.n_subjects));
    for (int i = 0; i < config.n_subjects; ++i) all.push_back(read_subject(dirs[static_cast<std::size_t>(i)]));
    for (const auto& s : all)
      for (const auto* m : {&config.sl, &config.sg}) {
        const Dims d = s.image.dims();
        if (m->patch.h > d.h || m->patch.w > d.w || m->patch.d > d.d)
          throw ConfigError("patch " + to_string(m->patch) + " exceeds dims of " + s.id);
      }
  }
  Dataset ds;
  for (int i = 0; i < static_cast<int>(all.size()); ++i)
    (i < config.n_train ? ds.train : ds.test).push_back(std::move(all[static_cast<std::size_t>(i)]));
  return ds;
}

// ---------------------------------------------------------------------------
// Patches and windows

std::array<int, 3> centered_origin(const std::array<int, 3>& center, const Dims& size, const Dims& dims) {
  const int s[3] = {size.h, size.w, size.d};
  const int e[3] = {dims.h, dims.w, dims.d};
  std::array<int, 3> o{};
  for (int k = 0; k < 3; ++k) o[static_cast<std::size_t>(k)] = std::clamp(center[static_cast<std::size_t>(k)] - s[k] / 2, 0, e[k] - s[k]);
  return o;
}

std::vector<PatchPair> sample_labeled_patches(const VolumeF& image, const PvaLabel& pva,
                                              const Dims& patch_size, int n, std::mt19937_64& rng) {
  const Dims dims = image.dims();
  if (!(pva.mask.dims() == dims)) throw ValidationError("PVA label dims differ from image dims");
  if (patch_size.h > dims.h || patch_size.w > dims.w || patch_size.d > dims.d)
    throw ConfigError("patch " + to_string(patch_size) + " larger than volume " + to_string(dims));
  std::vector<std::size_t> labeled;
  for (std::size_t i = 0; i < pva.mask.size(); ++i)
    if (pva.mask[i]) labeled.push_back(i);
  if (labeled.empty()) throw ValidationError("PVA label has no labeled voxels");

  std::uniform_int_distribution<std::size_t> pick(0, labeled.size() - 1);
  std::vector<PatchPair> out;
  for (int k = 0; k < n; ++k) {
    const std::size_t idx = labeled[pick(rng)];
    const int h = static_cast<int>(idx / (static_cast<std::size_t>(dims.w) * dims.d));
    const int w = static_cast<int>((idx / static_cast<std::size_t>(dims.d)) % static_cast<std::size_t>(dims.w));
    const int d = static_cast<int>(idx % static_cast<std::size_t>(dims.d));
    const auto origin = centered_origin({h, w, d}, patch_size, dims);
    VolumeF label = crop(pva.mask, origin, patch_size, Role::mask).cast<float>(Role::logit);
    out.push_back({origin, crop(image, origin, patch_size, Role::image), std::move(label)});
  }
  return out;
}

std::vector<int> window_starts(int size, int patch) {
  if (patch < 1 || patch > size) throw ConfigError("window larger than volume axis");
  const int stride = std::max(1, patch / 2);
  std::vector<int> starts;
  for (int s = 0; s + patch <= size; s += stride) starts.push_back(s);
  if (starts.back() != size - patch) starts.push_back(size - patch);
  return starts;
}

WindowOutput sliding_window_infer(const nn::Backbone<float>& model, const nn::ParamStore<float>& params,
                                  const VolumeF& image) {
  const Dims dims = image.dims();
  const Dims p = model.spec().patch;
  const auto hs = window_starts(dims.h, p.h), ws = window_starts(dims.w, p.w),
             ds = window_starts(dims.d, p.d);
  const auto n = static_cast<Eigen::Index>(dims.voxels());
  Eigen::ArrayXd logit_sum = Eigen::ArrayXd::Zero(n);
  Eigen::ArrayXd count = Eigen::ArrayXd::Zero(n);
  Eigen::MatrixXd feat_sum;
  for (int h0 : hs)
    for (int w0 : ws)
      for (int d0 : ds) {
        const auto out = model.infer(params, crop(image, {h0, w0, d0}, p, Role::image));
        if (feat_sum.size() == 0) feat_sum = Eigen::MatrixXd::Zero(out.penultimate.channels(), n);
        Eigen::Index k = 0;
        for (int h = 0; h < p.h; ++h)
          for (int w = 0; w < p.w; ++w)
            for (int d = 0; d < p.d; ++d, ++k) {
              const auto g = static_cast<Eigen::Index>(dims.index(h0 + h, w0 + w, d0 + d));
              logit_sum[g] += out.logit[static_cast<std::size_t>(k)];
              count[g] += 1.0;
              feat_sum.col(g) += out.penultimate.data.col(k).cast<double>();
            }
      }
  VolumeF::Array logit = (logit_sum / count).cast<float>();
  nn::Matrix<float> feat = (feat_sum.array().rowwise() / count.transpose()).matrix().cast<float>();
  return {VolumeF(dims, image.spacing(), Role::logit, std::move(logit)), {dims, std::move(feat)}};
}

// ---------------------------------------------------------------------------
// Training

json TrainRecord::to_json() const {
  return json{{"epoch_loss", epoch_loss},
              {"rounds", rounds},
              {"checkpoints", checkpoints},
              {"wall_seconds", wall_seconds}};
}

nn::ParamStore<float> train_sl(const ExperimentConfig& config, const std::vector<Subject>& train,
                               TrainRecord* record) {
  std::mt19937_64 rng(derive_seed(config.rng_seed, kSlStream));
  nn::Backbone<float> model(config.sl);
  nn::ParamStore<float> params;
  model.init_params(params, rng);
  const fs::path dir = config.out_dir;
  for (int epoch = 0; epoch < config.sl_epochs; ++epoch) {
    double total = 0.0;
    int steps = 0;
    for (const auto& s : train) {
      for (const auto& patch :
           sample_labeled_patches(s.image, s.pva, config.sl.patch, config.sl_patches_per_volume, rng)) {
        const VolumeF* weights = config.sl_ignore_unlabeled ? &patch.label : nullptr;
        total += train_step(model, params, patch.image, patch.label, weights, config.lr, dir, "S_l training");
        ++steps;
      }
    }
    if (record) record->epoch_loss.push_back(steps ? total / steps : 0.0);
  }
  return params;
}

namespace {

struct GsrState {
  nn::ParamStore<float> sg;
  std::vector<lpu::PseudoLabelState> states;
  std::mt19937_64 rng;
  TrainRecord record;
  int next_round = 0;  // 0: warm-up pending
};

double train_sg_epoch(const ExperimentConfig& config, nn::Backbone<float>& model, GsrState& st,
                      const std::vector<Subject>& train, const fs::path& dir) {
  const Dims p = config.sg.patch;
  double total = 0.0;
  int steps = 0;
  for (std::size_t v = 0; v < train.size(); ++v) {
    const Dims dims = train[v].image.dims();
    std::uniform_int_distribution<int> uh(0, dims.h - p.h), uw(0, dims.w - p.w), ud(0, dims.d - p.d);
    for (int k = 0; k < config.sg_patches_per_volume; ++k) {
      const int h = uh(st.rng), w = uw(st.rng), d = ud(st.rng);
      const VolumeF image = crop(train[v].image, {h, w, d}, p, Role::image);
      const VolumeF target = crop(st.states[v].y_pl, {h, w, d}, p, Role::pseudo_label);
      total += train_step(model, st.sg, image, target, nullptr, config.lr, dir, "S_g training");
      ++steps;
    }
  }
  return steps ? total / steps : 0.0;
}

void save_round(const GsrState& st, int round, const fs::path& dir) {
  fs::create_directories(dir / "checkpoints");
  fs::create_directories(dir / "pseudo");
  fs::create_directories(dir / "eta");
  for (const auto& s : st.states) {
    write_volume(s.y_pl, dir / "pseudo" / (s.volume_id + "_" + round_name(round) + ".vvol"));
    lpu::write_eta_csv(s, dir / "eta" / (s.volume_id + ".csv"));
  }
  const json extra{{"round", round},
                   {"eta", states_to_json(st.states)},
                   {"epoch_loss", st.record.epoch_loss},
                   {"rounds", st.record.rounds}};
  nn::save_checkpoint((dir / "checkpoints" / (round_name(round) + ".ckpt")).string(), st.sg,
                      nn::rng_to_string(st.rng), extra);
}

std::optional<GsrState> load_latest_round(const fs::path& dir, const std::vector<Subject>& train,
                                          int max_round) {
  for (int k = max_round; k >= 0; --k) {
    const fs::path path = dir / "checkpoints" / (round_name(k) + ".ckpt");
    if (!fs::exists(path)) continue;
    nn::Checkpoint ck = nn::load_checkpoint(path.string());
    GsrState st;
    st.sg = std::move(ck.params);
    st.rng = nn::rng_from_string(ck.rng_state);
    st.next_round = k + 1;
    try {
      st.record.epoch_loss = ck.extra.at("epoch_loss").get<std::vector<double>>();
      st.record.rounds = ck.extra.at("rounds").get<std::vector<json>>();
      for (const auto& s : train) {
        lpu::PseudoLabelState ps;
        ps.volume_id = s.id;
        ps.y_pl = read_volume_f32(dir / "pseudo" / (s.id + "_" + round_name(k) + ".vvol"));
        ps.eta_history = history_from_json(ck.extra.at("eta").at(s.id));
        st.states.push_back(std::move(ps));
      }
    } catch (const json::exception& e) {
      throw FormatError("checkpoint " + path.string() + " lacks resume state: " + e.what());
    }
    return st;
  }
  return std::nullopt;
}

}  // namespace

GsrResult run_gsr(const ExperimentConfig& config, const std::vector<Subject>& train,
                  const nn::ParamStore<float>* sl_params, const GsrHooks& hooks) {
  const auto t0 = std::chrono::steady_clock::now();
  nn::Backbone<float> model(config.sg);
  const fs::path& dir = hooks.out_dir;

  std::optional<GsrState> resumed;
  if (hooks.resume && !dir.empty()) resumed = load_latest_round(dir, train, config.self_training_rounds);
  GsrState st;
  if (resumed) {
    st = std::move(*resumed);
    check_params(st.sg, config.sg);
  } else {
    if (!sl_params) throw nn::StateError("GSR needs S_l parameters to initialize pseudo labels");
    check_params(*sl_params, config.sl);
    const nn::Backbone<float> sl_model(config.sl);
    for (const auto& s : train) {
      const VolumeF logit1 = sliding_window_infer(sl_model, *sl_params, s.image).logit;
      if (config.use_pli) {
        st.states.push_back(lpu::init_pseudo(logit1, s.pva, s.id));
      } else {
        st.states.push_back({s.id, logit1.with_role(Role::pseudo_label), {}});
      }
    }
    st.rng.seed(derive_seed(config.rng_seed, kGsrStream));
    model.init_params(st.sg, st.rng);
    for (int e = 0; e < config.warmup_epochs; ++e)
      st.record.epoch_loss.push_back(train_sg_epoch(config, model, st, train, dir));
    if (!dir.empty()) save_round(st, 0, dir);
    if (hooks.halt_after_round == 0) throw Halted("halted after round 0");
    st.next_round = 1;
  }

  for (int round = st.next_round; round <= config.self_training_rounds; ++round) {
    for (int e = 0; e < config.epochs_per_round; ++e)
      st.record.epoch_loss.push_back(train_sg_epoch(config, model, st, train, dir));
    json summary{{"round", round}, {"eta", json::object()}, {"accepted", json::object()}};
    if (config.use_plu) {
      for (std::size_t v = 0; v < train.size(); ++v) {
        const VolumeF logit2 = sliding_window_infer(model, st.sg, train[v].image).logit;
        auto outcome = lpu::try_update(std::move(st.states[v]), logit2, train[v].pva, round,
                                       config.clamp_labeled);
        summary["eta"][train[v].id] = outcome.eta;
        summary["accepted"][train[v].id] = outcome.accepted;
        st.states[v] = std::move(outcome.state);
      }
    }
    st.record.rounds.push_back(summary);
    if (!dir.empty()) save_round(st, round, dir);
    if (hooks.halt_after_round == round) throw Halted("halted after round " + std::to_string(round));
  }

  GsrResult result;
  if (config.use_fpa) {
    fpa::PrototypeAccumulator acc;
    std::vector<nn::Matrix<float>> blocks;
    Eigen::Index total = 0;
    for (const auto& s : train) {
      const auto z = sliding_window_infer(model, st.sg, s.image).penultimate;
      acc.add(z, s.pva.mask);
      blocks.push_back(fpa::gather_labeled(z, s.pva.mask));
      total += blocks.back().cols();
    }
    nn::Matrix<float> labeled(config.sg.penultimate_channels(), total);
    Eigen::Index col = 0;
    for (const auto& b : blocks) {
      labeled.middleCols(col, b.cols()) = b;
      col += b.cols();
    }
    auto tuned = fpa::fine_tune(acc.finish<float>(), labeled, config.fpa_steps, config.fpa_lr);
    result.prototype = std::move(tuned.prototype);
    result.fpa_loss_trace = std::move(tuned.loss_trace);
  }
  result.sg = std::move(st.sg);
  result.states = std::move(st.states);
  result.record = std::move(st.record);
  result.record.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return result;
}

// ---------------------------------------------------------------------------
// Inference

void check_params(const nn::ParamStore<float>& params, const nn::ModelSpec& spec) {
  nn::Backbone<float> model(spec);
  int in = spec.in_channels;
  for (int l = 0; l < model.hidden_layers(); ++l) {
    const int out = spec.widths[static_cast<std::size_t>(l)];
    const auto name = nn::Backbone<float>::weight_name(l);
    if (!params.contains(name) || params.at(name).shape != std::vector<int>{out, in, 3, 3, 3})
      throw ValidationError("checkpoint does not match model spec at " + name);
    if (!params.contains(nn::Backbone<float>::bias_name(l)) ||
        params.at(nn::Backbone<float>::bias_name(l)).size() != out)
      throw ValidationError("checkpoint does not match model spec at " + nn::Backbone<float>::bias_name(l));
    in = out;
  }
  if (!params.contains("head.weight") || params.at("head.weight").size() != in || !params.contains("head.bias"))
    throw ValidationError("checkpoint head does not match model spec");
}

Prediction predict(const nn::ParamStore<float>& sg, const fpa::Prototype<float>* proto,
                   const VolumeF& image, const nn::ModelSpec& spec, fpa::FusionPolicy fusion) {
  check_params(sg, spec);
  if (proto && proto->channels() != spec.penultimate_channels())
    throw ValidationError("prototype has " + std::to_string(proto->channels()) +
                          " channels, model has " + std::to_string(spec.penultimate_channels()));
  const nn::Backbone<float> model(spec);
  auto out = sliding_window_infer(model, sg, image);
  VolumeF fused;
  if (proto) {
    fused = fpa::fuse_at_test(out.logit, fpa::similarity_map(out.penultimate, *proto, image.spacing()), fusion);
  } else if (fusion == fpa::FusionPolicy::conv_only || fusion == fpa::FusionPolicy::max) {
    fused = std::move(out.logit);
  } else {
    throw ConfigError("fusion policy " + fpa::to_string(fusion) + " needs a prototype");
  }
  Mask mask = binarize(fused, 0.5f);
  return {std::move(mask), std::move(fused)};
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

void write_text(const fs::path& path, const std::string& text) { write_file(path.string(), text); }

metrics::MetricReport evaluate_masks(const std::vector<Subject>& test, const std::vector<Mask>& masks,
                                     const metrics::MetricConfig& config) {
  std::vector<metrics::EvalCase> cases;
  for (std::size_t i = 0; i < test.size(); ++i)
    cases.push_back({test[i].id, &masks[i], &test[i].gt_mask, &test[i].tree});
  return metrics::evaluate(cases, config);
}

nn::ParamStore<float> obtain_sl(const ExperimentConfig& config, const std::vector<Subject>& train,
                                const fs::path& dir, bool resume, TrainRecord* record) {
  const fs::path path = dir / "checkpoints" / "sl.ckpt";
  if (resume && fs::exists(path)) {
    auto params = nn::load_checkpoint(path.string()).params;
    check_params(params, config.sl);
    return params;
  }
  auto params = train_sl(config, train, record);
  fs::create_directories(dir / "checkpoints");
  nn::save_checkpoint(path.string(), params, "", json{{"stage", "S_l"}});
  return params;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config, bool resume, int halt_after_round) {
  config.validate();
  if (config.out_dir.empty()) throw ConfigError("experiment needs an output directory");
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = config.out_dir;
  fs::create_directories(dir);
  write_text(dir / "config.json", to_json(config).dump(2) + "\n");

  const Dataset ds = load_dataset(config);
  TrainRecord sl_record;
  const auto sl = obtain_sl(config, ds.train, dir, resume, &sl_record);

  ExperimentResult result;
  result.gsr = run_gsr(config, ds.train, &sl, {dir, resume, halt_after_round});

  nn::ParamStore<float> final_store = result.gsr.sg;
  json extra{{"stage", "final"}};
  if (const auto& proto = result.gsr.prototype) {
    auto& e = final_store.add(kRhoName, {proto->channels()}, proto->rho.array());
    e.frozen = true;
    extra["prototype_fine_tuned"] = proto->fine_tuned();
  }
  nn::save_checkpoint((dir / "checkpoints" / "final.ckpt").string(), final_store, "", extra);

  fs::create_directories(dir / "predictions");
  std::vector<Mask> masks;
  const fpa::Prototype<float>* proto = result.gsr.prototype ? &*result.gsr.prototype : nullptr;
  const fpa::FusionPolicy fusion = proto ? config.fusion : fpa::FusionPolicy::conv_only;
  for (const auto& s : ds.test) {
    masks.push_back(predict(result.gsr.sg, proto, s.image, config.sg, fusion).mask);
    write_volume(masks.back(), dir / "predictions" / (s.id + ".vvol"));
  }
  result.report = evaluate_masks(ds.test, masks, config.metrics);

  json lpu_summary = json::object();
  for (const auto& s : result.gsr.states) {
    int accepted = 0;
    for (const auto& r : s.eta_history) accepted += r.accepted;
    lpu_summary[s.volume_id] = {{"accepted", accepted}, {"best_eta", s.best_eta()}};
  }
  json report = result.report.to_json();
  report["lpu"] = lpu_summary;
  report["fusion"] = fpa::to_string(fusion);
  write_text(dir / "report.json", report.dump(2) + "\n");
  write_text(dir / "report.csv", result.report.to_csv());

  json log{{"sl", sl_record.to_json()}, {"gsr", result.gsr.record.to_json()},
           {"fpa_loss_trace", result.gsr.fpa_loss_trace},
           {"wall_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  write_text(dir / "train_log.json", log.dump(2) + "\n");
  return result;
}

TrainedModel load_trained(const fs::path& dir) {
  TrainedModel m;
  try {
    m.config = experiment_config_from_json(json::parse(read_file((dir / "config.json").string())));
  } catch (const json::exception& e) {
    throw ConfigError("unreadable config.json in " + dir.string() + ": " + e.what());
  }
  nn::Checkpoint ck = nn::load_checkpoint((dir / "checkpoints" / "final.ckpt").string());
  check_params(ck.params, m.config.sg);
  if (ck.params.contains(kRhoName)) {
    fpa::Prototype<float> p;
    p.rho = ck.params.at(kRhoName).value.matrix();
    p.source = ck.extra.value("prototype_fine_tuned", false) ? fpa::PrototypeSource::fine_tuned
                                                            : fpa::PrototypeSource::initialized;
    m.prototype = std::move(p);
    ck.params.entries().erase(kRhoName);
  }
  m.sg = std::move(ck.params);
  return m;
}

// ---------------------------------------------------------------------------
// Ablation

double AblationRow::mean(const std::string& metric) const {
  if (per_seed.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : per_seed) s += r.aggregate.at(metric).mean;
  return s / static_cast<double>(per_seed.size());
}

json AblationResult::to_json() const {
  json rows_json = json::array();
  for (const auto& row : rows) {
    json seeds_json = json::array();
    for (const auto& r : row.per_seed) seeds_json.push_back(r.to_json());
    json means = json::object();
    for (const char* m : {"dice", "rdice", "ov", "of_mean"}) {
      std::vector<double> v;
      for (const auto& r : row.per_seed) v.push_back(r.aggregate.at(m).mean);
      const auto a = metrics::aggregate(v);
      means[m] = {{"mean", a.mean}, {"std", a.std}};
    }
    rows_json.push_back({{"name", row.name}, {"summary", means}, {"per_seed", seeds_json}});
  }
  return json{{"seeds", seeds}, {"rows", rows_json}};
}

std::string AblationResult::table() const {
  static const char* flags[4][3] = {{"", "", ""}, {"x", "", ""}, {"x", "x", ""}, {"x", "x", "x"}};
  std::string out = "| Method | PLI | PLU | FPA | Dice | RDice | OV | OF |\n|---|---|---|---|---|---|---|---|\n";
  char buf[256];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const auto* f = flags[std::min<std::size_t>(i, 3)];
    std::snprintf(buf, sizeof buf, "| %s | %s | %s | %s | %.4f | %.4f | %.4f | %.4f |\n", row.name.c_str(),
                  f[0], f[1], f[2], row.mean("dice"), row.mean("rdice"), row.mean("ov"),
                  row.mean("of_mean"));
    out += buf;
  }
  return out;
}

AblationResult run_ablation(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds) {
  base.validate();
  AblationResult result;
  result.seeds = seeds;
  for (const char* name : {"baseline", "+PLI", "+PLI+PLU", "+PLI+PLU+FPA"}) result.rows.push_back({name, {}});
  const fs::path root = base.out_dir;
  if (!root.empty()) {
    fs::create_directories(root);
    write_text(root / "config.json", to_json(base).dump(2) + "\n");
  }

  for (const std::uint64_t seed : seeds) {
    ExperimentConfig cfg = base;
    cfg.rng_seed = seed;
    cfg.out_dir.clear();
    const Dataset ds = load_dataset(cfg);
    const auto sl = train_sl(cfg, ds.train);
    const nn::Backbone<float> sl_model(cfg.sl);

    std::vector<Mask> base_masks, pli_masks, plu_masks, fpa_masks;
    for (const auto& s : ds.test)
      base_masks.push_back(binarize(sliding_window_infer(sl_model, sl, s.image).logit, 0.5f));

    ExperimentConfig pli = cfg;
    pli.use_pli = true;
    pli.use_plu = false;
    pli.use_fpa = false;
    const auto gsr_pli = run_gsr(pli, ds.train, &sl);
    for (const auto& s : ds.test)
      pli_masks.push_back(predict(gsr_pli.sg, nullptr, s.image, cfg.sg, fpa::FusionPolicy::conv_only).mask);

    ExperimentConfig full = cfg;
    full.use_pli = full.use_plu = full.use_fpa = true;
    const auto gsr_full = run_gsr(full, ds.train, &sl);
    for (const auto& s : ds.test) {
      plu_masks.push_back(predict(gsr_full.sg, nullptr, s.image, cfg.sg, fpa::FusionPolicy::conv_only).mask);
      fpa_masks.push_back(predict(gsr_full.sg, &*gsr_full.prototype, s.image, cfg.sg, cfg.fusion).mask);
    }

    const std::vector<Mask>* per_row[4] = {&base_masks, &pli_masks, &plu_masks, &fpa_masks};
    json seed_json = json::object();
    for (std::size_t r = 0; r < 4; ++r) {
      result.rows[r].per_seed.push_back(evaluate_masks(ds.test, *per_row[r], cfg.metrics));
      seed_json[result.rows[r].name] = result.rows[r].per_seed.back().to_json();
    }
    if (!root.empty()) {
      write_text(root / ("seed_" + std::to_string(seed) + ".json"), seed_json.dump(2) + "\n");
      write_text(root / "ablation.json", result.to_json().dump(2) + "\n");
      write_text(root / "ablation.md", result.table());
    }
  }
  return result;
}

}  // namespace pva::pipeline
