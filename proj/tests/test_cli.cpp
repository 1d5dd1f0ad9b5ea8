#include "doctest.h"
#include "support.hpp"

#include "pva/binary_io.hpp"
#include "pva/pipeline.hpp"
#include "pva/volume_io.hpp"

#include <cstdio>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pva;

namespace {

struct Run {
  int code;
  std::string out;
};

Run pva_cli(const std::string& args) {
  const std::string cmd = std::string(PVA_CLI_PATH) + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::string out;
  char buf[4096];
  while (const std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, n);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::vector<std::string> lines(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

json tiny_config_json() {
  pipeline::ExperimentConfig c;
  c.phantom.dims = {24, 24, 24};
  c.phantom.r_min_mm = 0.5;
  c.phantom.r_max_mm = 1.0;
  c.n_subjects = 3;
  c.n_train = 2;
  c.sl = {nn::ModelRole::sl, {2}, 1, {8, 8, 8}};
  c.sg = {nn::ModelRole::sg, {3, 3}, 1, {16, 16, 16}};
  c.sl_epochs = 3;
  c.warmup_epochs = 2;
  c.self_training_rounds = 2;
  c.epochs_per_round = 1;
  c.fpa_steps = 10;
  return pipeline::to_json(c);
}

std::string write_config(const fs::path& dir, const json& j) {
  const auto path = dir / "config_in.json";
  write_file(path.string(), j.dump(2));
  return path.string();
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("gen-phantom meets the fraction target and is reproducible") {
  const auto dir = testing::scratch_dir("cli_gen");
  const auto out = dir / "data";
  const auto a = pva_cli("gen-phantom --n 12 --fraction 0.2429 --seed 7 --out " + out.string());
  REQUIRE(a.code == 0);
  CHECK(lines(a.out).size() == 12);
  std::vector<std::string> first;
  for (int i = 0; i < 12; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "subject_%03d", i);
    const auto s = pipeline::read_subject(out / id);
    CHECK(s.pva.labeled_fraction >= 0.2229);
    CHECK(s.pva.labeled_fraction <= 0.2629);
    first.push_back(read_file((out / id / "pva.vvol").string()) + read_file((out / id / "image.vvol").string()));
  }
  const auto again = pva_cli("gen-phantom --n 12 --fraction 0.2429 --seed 7 --out " + out.string());
  CHECK(again.code == 0);
  CHECK(again.out == a.out);
  const auto fresh = dir / "data2";
  REQUIRE(pva_cli("gen-phantom --n 12 --fraction 0.2429 --seed 7 --out " + fresh.string()).code == 0);
  for (int i = 0; i < 12; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "subject_%03d", i);
    CHECK(read_file((fresh / id / "pva.vvol").string()) + read_file((fresh / id / "image.vvol").string()) ==
          first[static_cast<std::size_t>(i)]);
  }
}

TEST_CASE("usage errors exit with 2") {
  const auto dir = testing::scratch_dir("cli_usage");
  CHECK(pva_cli("").code == 2);
  CHECK(pva_cli("frobnicate").code == 2);
  CHECK(pva_cli("gen-phantom --n 1 --fraction 1.5 --out " + (dir / "x").string()).code == 2);
  CHECK(pva_cli("gen-phantom --n 1 --fraction 0 --out " + (dir / "x").string()).code == 2);
  CHECK(pva_cli("gen-phantom --n 1").code == 2);
  CHECK(pva_cli("train --fusion median --out " + (dir / "y").string()).code == 2);
  CHECK(pva_cli("predict --data " + dir.string()).code == 2);
}

TEST_CASE("a different config in an existing output directory needs --force") {
  const auto dir = testing::scratch_dir("cli_force");
  const auto out = (dir / "data").string();
  REQUIRE(pva_cli("gen-phantom --n 1 --seed 1 --out " + out).code == 0);
  const auto clash = pva_cli("gen-phantom --n 1 --seed 2 --out " + out);
  CHECK(clash.code == 2);
  CHECK(clash.out.find("--force") != std::string::npos);
  CHECK(pva_cli("gen-phantom --n 1 --seed 2 --force --out " + out).code == 0);
  const auto cfg = json::parse(read_file((dir / "data" / "phantom_config.json").string()));
  CHECK(cfg.at("rng_seed") == 2);
}

TEST_CASE("grad-check verifies every parameter group and detects an injected fault") {
  const auto ok = pva_cli("grad-check");
  CHECK(ok.code == 0);
  const auto ls = lines(ok.out);
  REQUIRE(ls.size() >= 2);
  CHECK(ls.back().find("all gradients verified") != std::string::npos);
  for (const char* group : {"conv0.weight", "conv0.bias", "head.weight", "head.bias"})
    CHECK_MESSAGE(ok.out.find(group) != std::string::npos, group);
  const auto bad = pva_cli("grad-check --inject-fault 0");
  CHECK(bad.code == 1);
  CHECK(bad.out.find("FAILED") != std::string::npos);
}

TEST_CASE("train, predict and evaluate round trip with flag precedence") {
  const auto dir = testing::scratch_dir("cli_flow");
  const std::string cfg = write_config(dir, tiny_config_json());
  const auto data = (dir / "data").string(), exp = (dir / "exp").string();
  REQUIRE(pva_cli("gen-phantom --config " + cfg + " --out " + data).code == 0);

  const auto train = pva_cli("train --config " + cfg + " --data " + data + " --rounds 1 --seed 4 --out " + exp);
  INFO(train.out);
  REQUIRE(train.code == 0);
  const auto resolved = json::parse(read_file((dir / "exp" / "config.json").string()));
  CHECK(resolved.at("self_training_rounds") == 1);
  CHECK(resolved.at("rng_seed") == 4);
  CHECK(resolved.at("epochs_per_round") == 1);
  CHECK(resolved.at("dataset") == data);
  CHECK(resolved.at("sg").at("widths") == json::array({3, 3}));
  CHECK(fs::exists(dir / "exp" / "report.json"));
  const std::string report = read_file((dir / "exp" / "report.json").string());

  // Same resolved config again: the finished run is picked up, not recomputed differently.
  const auto rerun = pva_cli("train --config " + cfg + " --data " + data + " --rounds 1 --seed 4 --out " + exp);
  CHECK(rerun.code == 0);
  CHECK(read_file((dir / "exp" / "report.json").string()) == report);
  CHECK(pva_cli("train --config " + cfg + " --data " + data + " --rounds 2 --seed 4 --out " + exp).code == 2);

  const auto pred = (dir / "pred").string();
  const auto p = pva_cli("predict --model " + exp + " --data " + data + " --out " + pred);
  INFO(p.out);
  REQUIRE(p.code == 0);
  CHECK(lines(p.out).size() == 3);
  for (const char* id : {"subject_000", "subject_001", "subject_002"}) {
    const Mask m = read_mask(dir / "pred" / (std::string(id) + ".vvol"));
    CHECK(m.dims() == Dims{24, 24, 24});
  }
  // Held-out subject prediction matches the one written during training.
  CHECK(read_file((dir / "pred" / "subject_002.vvol").string()) ==
        read_file((dir / "exp" / "predictions" / "subject_002.vvol").string()));

  const auto eval = pva_cli("evaluate --data " + data + " --pred " + pred + " --out " + (dir / "eval").string());
  INFO(eval.out);
  REQUIRE(eval.code == 0);
  const auto metrics = json::parse(read_file((dir / "eval" / "metrics.json").string()));
  CHECK(metrics.at("per_volume").size() == 3);
  for (const char* m : {"dice", "rdice", "ov", "of_mean"}) CHECK(metrics.at("aggregate").contains(m));
}

}  // TEST_SUITE
