#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "volseg/voxgrid.hpp"

namespace volseg::promptsim {

using Rng = std::mt19937_64;

enum class Strategy {
  uniform_error,         // uniform over the whole error region
  largest_error_center,  // voxel nearest the centroid of the largest error component
};

struct Config {
  Strategy strategy = Strategy::uniform_error;
  bool deduplicate = true;
};

struct ClickSession {
  BinaryMask gt;
  std::vector<PointPrompt> clicks;
  std::optional<BinaryMask> current_pred;
  std::uint64_t rng_seed = 0;
};

/// Uniform over the foreground, labelled positive. Throws Errc::empty_target on an empty mask.
PointPrompt first_click(const BinaryMask& gt, Rng& rng);

/// Sampled from gt xor pred: positive on a false negative, negative on a false positive.
/// Voxels in `previous` are excluded when cfg.deduplicate is set (unless nothing else remains).
/// Throws Errc::converged when pred == gt.
PointPrompt next_click(const BinaryMask& gt, const BinaryMask& pred, Rng& rng,
                       std::span<const PointPrompt> previous = {}, const Config& cfg = {});

/// Produces a binary prediction from the volume and the accumulated clicks.
using ModelForward = std::function<BinaryMask(const Volume&, std::span<const PointPrompt>)>;

struct Step {
  int click_index = 0;  // number of clicks fed to this prediction
  double dice = 0.0;

  bool operator==(const Step&) const = default;
};

struct SessionResult {
  std::vector<Step> steps;
  std::vector<PointPrompt> clicks;
  bool converged = false;
};

/// predict -> next_click for up to `budget` rounds, re-feeding all clicks each round.
SessionResult run_session(const ModelForward& model, const Volume& volume, const BinaryMask& gt, int budget,
                          Rng& rng, const Config& cfg = {});

}  // namespace volseg::promptsim
