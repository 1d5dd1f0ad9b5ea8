// Command-line driver: phantom generation, training, prediction, evaluation,
// ablation and gradient verification.

#include "pva/binary_io.hpp"
#include "pva/pipeline.hpp"
#include "pva/selfcheck.hpp"
#include "pva/volume_io.hpp"

#include "CLI11.hpp"
#include "json.hpp"

#include <cstdio>
#include <iostream>
#include <optional>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pva;
using pipeline::ExperimentConfig;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kUsage = 2;

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
  std::optional<double> fraction;
  std::optional<int> n;
  std::optional<std::string> fusion;
  bool no_pli = false, no_plu = false, no_fpa = false;
  std::optional<int> rounds;
  std::optional<int> epochs;
  std::string data;
  std::string model;
  std::string pred;
  int halt_after_round = -1;
  int inject_fault = -1;
};

json read_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw ConfigError("cannot parse " + path + ": " + e.what());
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  }
}

/// Defaults, then the config file, then explicit flags.
ExperimentConfig resolve(const Flags& f, bool experiment = true) {
  ExperimentConfig c;
  if (!f.config.empty()) c = pipeline::experiment_config_from_json(read_json(f.config), c);
  if (f.seed) c.rng_seed = *f.seed;
  if (!f.out.empty()) c.out_dir = f.out;
  if (f.fraction) c.pva_fraction = *f.fraction;
  if (f.n) c.n_subjects = *f.n;
  if (f.fusion) c.fusion = fpa::parse_fusion(*f.fusion);
  if (f.no_pli) c.use_pli = false;
  if (f.no_plu) c.use_plu = false;
  if (f.no_fpa) c.use_fpa = false;
  if (f.rounds) c.self_training_rounds = *f.rounds;
  if (f.epochs) c.epochs_per_round = *f.epochs;
  if (!f.data.empty()) c.dataset = f.data;
  if (experiment) {
    c.validate();
  } else {
    c.phantom.validate();
    if (c.n_subjects < 1) throw ConfigError("--n must be at least 1");
    if (!(c.pva_fraction > 0.0 && c.pva_fraction <= 1.0)) throw ConfigError("--fraction must lie in (0, 1]");
  }
  return c;
}

bool dir_has_entries(const fs::path& dir) {
  return fs::exists(dir) && fs::is_directory(dir) && !fs::is_empty(dir);
}

/// Prepares `dir` for a run whose resolved config is `config_text`.
/// Returns true when a previous run with the identical config may be resumed.
bool claim_output(const fs::path& dir, const std::string& config_name, const std::string& config_text,
                  bool force) {
  if (!dir_has_entries(dir)) return false;
  if (force) {
    fs::remove_all(dir);
    return false;
  }
  const fs::path previous = dir / config_name;
  if (fs::exists(previous) && read_file(previous.string()) == config_text) return true;
  throw ConfigError(dir.string() + " already holds different outputs; pass --force to overwrite");
}

int cmd_gen_phantom(const Flags& f) {
  ExperimentConfig c = resolve(f, false);
  if (c.out_dir.empty()) throw ConfigError("--out is required");
  json resolved{{"phantom", to_json(c.phantom)},
                {"n_subjects", c.n_subjects},
                {"pva_fraction", c.pva_fraction},
                {"rng_seed", c.rng_seed}};
  const std::string text = resolved.dump(2) + "\n";
  const fs::path out = c.out_dir;
  claim_output(out, "phantom_config.json", text, f.force);
  fs::create_directories(out);
  write_file((out / "phantom_config.json").string(), text);
  for (int i = 0; i < c.n_subjects; ++i) {
    const auto s = pipeline::make_phantom_subject(c.phantom, c.pva_fraction, c.rng_seed, i);
    pipeline::write_subject(s, out / s.id);
    std::printf("%s labeled_fraction=%.4f%s\n", s.id.c_str(), s.pva.labeled_fraction,
                s.pva.warning ? " (warning: target not met)" : "");
  }
  return kOk;
}

void print_report(const metrics::MetricReport& r) {
  for (const auto& [name, a] : r.aggregate) std::printf("%-10s %.4f +- %.4f\n", name.c_str(), a.mean, a.std);
}

int cmd_train(const Flags& f) {
  ExperimentConfig c = resolve(f);
  if (c.out_dir.empty()) throw ConfigError("--out is required");
  const std::string text = to_json(c).dump(2) + "\n";
  const bool resume = claim_output(c.out_dir, "config.json", text, f.force);
  if (resume) std::printf("resuming from checkpoints in %s\n", c.out_dir.c_str());
  try {
    const auto result = pipeline::run_experiment(c, resume, f.halt_after_round);
    print_report(result.report);
  } catch (const pipeline::Halted& h) {
    std::printf("%s\n", h.what());
  }
  return kOk;
}

int cmd_predict(const Flags& f) {
  if (f.model.empty() || f.data.empty() || f.out.empty())
    throw ConfigError("predict needs --model, --data and --out");
  const auto trained = pipeline::load_trained(f.model);
  const fpa::FusionPolicy fusion = f.fusion ? fpa::parse_fusion(*f.fusion) : trained.config.fusion;
  json resolved{{"model", f.model}, {"data", f.data}, {"fusion", fpa::to_string(fusion)}};
  const std::string text = resolved.dump(2) + "\n";
  claim_output(f.out, "predict_config.json", text, f.force);
  fs::create_directories(f.out);
  write_file((fs::path(f.out) / "predict_config.json").string(), text);

  std::vector<fs::path> dirs;
  for (const auto& e : fs::directory_iterator(f.data))
    if (e.is_directory() && fs::exists(e.path() / "image.vvol")) dirs.push_back(e.path());
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw ConfigError("no subject directories under " + f.data);
  const fpa::Prototype<float>* proto = trained.prototype ? &*trained.prototype : nullptr;
  for (const auto& d : dirs) {
    const VolumeF image = read_volume_f32(d / "image.vvol");
    const auto p = pipeline::predict(trained.sg, proto, image, trained.config.sg,
                                     proto ? fusion : fpa::FusionPolicy::conv_only);
    write_volume(p.mask, fs::path(f.out) / (d.filename().string() + ".vvol"));
    std::printf("%s foreground=%zu\n", d.filename().string().c_str(), count_foreground(p.mask));
  }
  return kOk;
}

int cmd_evaluate(const Flags& f) {
  if (f.data.empty() || f.pred.empty() || f.out.empty())
    throw ConfigError("evaluate needs --data, --pred and --out");
  metrics::MetricConfig mc;
  if (!f.config.empty()) {
    const json j = read_json(f.config);
    mc = metrics::metric_config_from_json(j.contains("metrics") ? j.at("metrics") : j);
  }
  const std::string text = metrics::to_json(mc).dump(2) + "\n";
  claim_output(f.out, "metrics_config.json", text, f.force);

  std::vector<pipeline::Subject> subjects;
  std::vector<Mask> preds;
  for (const auto& e : fs::directory_iterator(f.pred)) {
    if (e.path().extension() != ".vvol") continue;
    const fs::path subject_dir = fs::path(f.data) / e.path().stem();
    if (!fs::exists(subject_dir)) throw ConfigError("no subject " + e.path().stem().string() + " in " + f.data);
    subjects.push_back(pipeline::read_subject(subject_dir));
    preds.push_back(read_mask(e.path()));
  }
  if (subjects.empty()) throw ConfigError("no predictions under " + f.pred);
  std::vector<std::size_t> order(subjects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return subjects[a].id < subjects[b].id; });
  std::vector<metrics::EvalCase> cases;
  for (auto i : order) cases.push_back({subjects[i].id, &preds[i], &subjects[i].gt_mask, &subjects[i].tree});
  const auto report = metrics::evaluate(cases, mc);

  fs::create_directories(f.out);
  write_file((fs::path(f.out) / "metrics_config.json").string(), text);
  write_file((fs::path(f.out) / "metrics.json").string(), report.to_json().dump(2) + "\n");
  write_file((fs::path(f.out) / "metrics.csv").string(), report.to_csv());
  print_report(report);
  return kOk;
}

int cmd_ablate(const Flags& f) {
  Flags g = f;
  g.n.reset();  // --n counts seeds here
  ExperimentConfig c = resolve(g);
  if (c.out_dir.empty()) throw ConfigError("--out is required");
  const int n_seeds = f.n.value_or(5);
  if (n_seeds < 1) throw ConfigError("--n must be at least 1");
  std::vector<std::uint64_t> seeds;
  for (int i = 0; i < n_seeds; ++i) seeds.push_back(c.rng_seed + static_cast<std::uint64_t>(i));
  const std::string text = to_json(c).dump(2) + "\n";
  claim_output(c.out_dir, "config.json", text, f.force);
  const auto result = pipeline::run_ablation(c, seeds);
  std::cout << result.table();
  return kOk;
}

int cmd_grad_check(const Flags& f) {
  const auto report = run_grad_checks(f.seed.value_or(0), f.inject_fault);
  std::cout << report.format();
  const bool ok = report.passed();
  std::printf("%s (tolerance %.0e)\n", ok ? "all gradients verified" : "gradient check FAILED",
              report.tolerance);
  return ok ? kOk : kFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Partial-annotation coronary segmentation experiments"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", f.config, "JSON config file")->check(CLI::ExistingFile);
    sub->add_option("--seed", f.seed, "Base RNG seed");
    sub->add_option("--out", f.out, "Output directory");
    sub->add_flag("--force", f.force, "Overwrite existing outputs");
  };

  auto* gen = app.add_subcommand("gen-phantom", "Generate phantom subjects with PVA labels");
  common(gen);
  gen->add_option("--fraction", f.fraction, "Target labeled voxel fraction");
  gen->add_option("--n", f.n, "Number of subjects");

  auto* train = app.add_subcommand("train", "Run the two-stage pipeline and evaluate on held-out subjects");
  common(train);
  train->add_option("--fraction", f.fraction, "Target labeled voxel fraction for generated phantoms");
  train->add_option("--n", f.n, "Number of subjects");
  train->add_option("--data", f.data, "Dataset directory (default: generate phantoms)");
  train->add_option("--fusion", f.fusion, "max | mean | conv_only | fpa_only");
  train->add_flag("--no-pli", f.no_pli, "Train on raw S_l outputs instead of initialized pseudo labels");
  train->add_flag("--no-plu", f.no_plu, "Disable pseudo-label updates");
  train->add_flag("--no-fpa", f.no_fpa, "Disable the prototype block");
  train->add_option("--rounds", f.rounds, "Self-training rounds");
  train->add_option("--epochs", f.epochs, "Epochs per self-training round");
  train->add_option("--halt-after-round", f.halt_after_round)->group("");

  auto* predict = app.add_subcommand("predict", "Segment subjects with a trained experiment");
  predict->add_option("--model", f.model, "Experiment directory from train")->required();
  predict->add_option("--data", f.data, "Dataset directory")->required();
  predict->add_option("--out", f.out, "Output directory for masks")->required();
  predict->add_option("--fusion", f.fusion, "max | mean | conv_only | fpa_only");
  predict->add_flag("--force", f.force, "Overwrite existing outputs");

  auto* evaluate = app.add_subcommand("evaluate", "Score predicted masks against ground truth");
  evaluate->add_option("--data", f.data, "Dataset directory")->required();
  evaluate->add_option("--pred", f.pred, "Directory of predicted <subject>.vvol masks")->required();
  evaluate->add_option("--out", f.out, "Report directory")->required();
  evaluate->add_option("--config", f.config, "Metric config JSON")->check(CLI::ExistingFile);
  evaluate->add_flag("--force", f.force, "Overwrite existing outputs");

  auto* ablate = app.add_subcommand("ablate", "Four-row ablation over consecutive seeds");
  common(ablate);
  ablate->add_option("--n", f.n, "Number of seeds (default 5)");
  ablate->add_option("--fraction", f.fraction, "Target labeled voxel fraction");
  ablate->add_option("--fusion", f.fusion, "Fusion for the last row");
  ablate->add_option("--rounds", f.rounds, "Self-training rounds");
  ablate->add_option("--epochs", f.epochs, "Epochs per self-training round");

  auto* grad = app.add_subcommand("grad-check", "Finite-difference verification of all gradients");
  grad->add_option("--seed", f.seed, "RNG seed");
  grad->add_option("--inject-fault", f.inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_phantom(f);
    if (train->parsed()) return cmd_train(f);
    if (predict->parsed()) return cmd_predict(f);
    if (evaluate->parsed()) return cmd_evaluate(f);
    if (ablate->parsed()) return cmd_ablate(f);
    if (grad->parsed()) return cmd_grad_check(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}
