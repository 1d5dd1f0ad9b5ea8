#pragma once

#include "pva/volume.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace pva::lpu {

struct EtaRecord {
  int iteration = 0;
  double eta = 0.0;
  bool accepted = false;
};

/// Soft pseudo-label of one training volume plus its confidence history.
struct PseudoLabelState {
  std::string volume_id;
  VolumeF y_pl;
  std::vector<EtaRecord> eta_history;

  /// Largest confidence seen so far, -inf on an empty history.
  double best_eta() const;
};

/// 1 on labeled voxels, the propagated logit elsewhere.
PseudoLabelState init_pseudo(const VolumeF& logit1, const PvaLabel& pva, std::string volume_id = {});

/// Mean logit over the labeled voxels.
double confidence(const VolumeF& logit2, const PvaLabel& pva);

struct UpdateOutcome {
  PseudoLabelState state;
  double eta = 0.0;
  bool accepted = false;
};

/// Quality-gated update: accepted iff the new confidence exceeds every
/// previous one for this volume, in which case
///   y_pl <- eta * logit2 + (1 - eta) * y_pl
/// followed (when `clamp_labeled`) by resetting labeled voxels to 1.
/// Rejected updates leave y_pl untouched. The record is appended either way.
UpdateOutcome try_update(PseudoLabelState state, const VolumeF& logit2, const PvaLabel& pva, int t,
                         bool clamp_labeled = true);

/// "iteration,eta,accepted" with one row per history entry.
void write_eta_csv(const PseudoLabelState& state, const std::filesystem::path& path);
std::vector<EtaRecord> read_eta_csv(const std::filesystem::path& path);

}  // namespace pva::lpu
