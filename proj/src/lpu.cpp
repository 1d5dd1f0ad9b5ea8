#include "pva/lpu.hpp"

#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace pva::lpu {

namespace {

void check_inputs(const VolumeF& logit, const PvaLabel& pva) {
  if (!(logit.dims() == pva.mask.dims()))
    throw ValidationError("logit dims " + to_string(logit.dims()) + " do not match PVA dims " +
                          to_string(pva.mask.dims()));
  if (logit.role() != Role::logit && logit.role() != Role::pseudo_label)
    throw ValidationError("expected a logit volume");
}

}  // namespace

double PseudoLabelState::best_eta() const {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& r : eta_history) best = std::max(best, r.eta);
  return best;
}

PseudoLabelState init_pseudo(const VolumeF& logit1, const PvaLabel& pva, std::string volume_id) {
  check_inputs(logit1, pva);
  VolumeF::Array y = logit1.data();
  for (Eigen::Index i = 0; i < y.size(); ++i)
    if (pva.mask.data()[i] == 1) y[i] = 1.0f;
  return {std::move(volume_id), VolumeF(logit1.dims(), logit1.spacing(), Role::pseudo_label, std::move(y)),
          {}};
}

double confidence(const VolumeF& logit2, const PvaLabel& pva) {
  check_inputs(logit2, pva);
  double num = 0.0;
  std::size_t den = 0;
  for (Eigen::Index i = 0; i < logit2.data().size(); ++i)
    if (pva.mask.data()[i] == 1) {
      num += static_cast<double>(logit2.data()[i]);
      ++den;
    }
  if (den == 0) throw ValidationError("confidence needs at least one labeled voxel");
  return num / static_cast<double>(den);
}

UpdateOutcome try_update(PseudoLabelState state, const VolumeF& logit2, const PvaLabel& pva, int t,
                         bool clamp_labeled) {
  check_inputs(logit2, pva);
  if (!(state.y_pl.dims() == logit2.dims()))
    throw ValidationError("pseudo-label dims do not match logit dims");
  const double eta = confidence(logit2, pva);
  const bool accepted = eta > state.best_eta();
  if (accepted) {
    VolumeF::Array y = state.y_pl.data();
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      if (clamp_labeled && pva.mask.data()[i] == 1) {
        y[i] = 1.0f;
        continue;
      }
      y[i] = static_cast<float>(eta * static_cast<double>(logit2.data()[i]) +
                                (1.0 - eta) * static_cast<double>(y[i]));
    }
    state.y_pl = VolumeF(state.y_pl.dims(), state.y_pl.spacing(), Role::pseudo_label, std::move(y));
  }
  state.eta_history.push_back({t, eta, accepted});
  return {std::move(state), eta, accepted};
}

void write_eta_csv(const PseudoLabelState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "iteration,eta,accepted\n";
  char buf[64];
  for (const auto& r : state.eta_history) {
    std::snprintf(buf, sizeof buf, "%.17g", r.eta);
    out << r.iteration << ',' << buf << ',' << (r.accepted ? 1 : 0) << '\n';
  }
}

std::vector<EtaRecord> read_eta_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != "iteration,eta,accepted") throw FormatError("unexpected eta CSV header in " + path.string());
  std::vector<EtaRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream row(line);
    EtaRecord r;
    char c1 = 0, c2 = 0;
    int acc = 0;
    if (!(row >> r.iteration >> c1 >> r.eta >> c2 >> acc) || c1 != ',' || c2 != ',')
      throw FormatError("malformed eta CSV row: " + line);
    r.accepted = acc != 0;
    out.push_back(r);
  }
  return out;
}

}  // namespace pva::lpu
