#include "volseg/promptsim.hpp"

#include <algorithm>
#include <limits>
#include <unordered_set>

namespace volseg::promptsim {
namespace {

std::size_t pick(std::size_t n, Rng& rng) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Voxel of the largest error component nearest its centroid, ties to the smaller index.
std::size_t component_center(const BinaryMask& err) {
  const auto comps = connected_components(err, Connectivity::twenty_six);
  const auto& c = comps.front();
  Vec3d mean{0, 0, 0};
  for (auto idx : c.voxels) {
    const auto p = unravel(err.dims, idx);
    for (int a = 0; a < 3; ++a) mean[a] += p[a];
  }
  for (auto& m : mean) m /= static_cast<double>(c.size());
  std::size_t best = c.voxels.front();
  double best_d = std::numeric_limits<double>::infinity();
  for (auto idx : c.voxels) {
    const auto p = unravel(err.dims, idx);
    double d = 0.0;
    for (int a = 0; a < 3; ++a) d += (p[a] - mean[a]) * (p[a] - mean[a]);
    if (d < best_d) {
      best_d = d;
      best = idx;
    }
  }
  return best;
}

}  // namespace

PointPrompt first_click(const BinaryMask& gt, Rng& rng) {
  std::vector<std::size_t> fg;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if (gt.data[i]) fg.push_back(i);
  }
  if (fg.empty()) throw Error(Errc::empty_target, "first_click: ground truth is empty");
  return {unravel(gt.dims, fg[pick(fg.size(), rng)]), PromptLabel::positive};
}

PointPrompt next_click(const BinaryMask& gt, const BinaryMask& pred, Rng& rng,
                       std::span<const PointPrompt> previous, const Config& cfg) {
  if (gt.dims != pred.dims) throw Error(Errc::shape, "next_click: gt and prediction dims differ");
  std::unordered_set<std::size_t> seen;
  if (cfg.deduplicate) {
    for (const auto& c : previous) {
      if (in_bounds(gt.dims, c.coord)) seen.insert(linear_index(gt.dims, c.coord[0], c.coord[1], c.coord[2]));
    }
  }
  std::vector<std::size_t> fresh;
  std::vector<std::size_t> all;
  for (std::size_t i = 0; i < gt.data.size(); ++i) {
    if ((gt.data[i] != 0) == (pred.data[i] != 0)) continue;
    all.push_back(i);
    if (!seen.contains(i)) fresh.push_back(i);
  }
  if (all.empty()) throw Error(Errc::converged, "next_click: prediction equals ground truth");
  const auto& pool = fresh.empty() ? all : fresh;

  std::size_t idx = 0;
  if (cfg.strategy == Strategy::largest_error_center) {
    BinaryMask err(gt.dims);
    for (auto i : pool) err.data[i] = 1;
    idx = component_center(err);
  } else {
    idx = pool[pick(pool.size(), rng)];
  }
  return {unravel(gt.dims, idx), gt.data[idx] ? PromptLabel::positive : PromptLabel::negative};
}

SessionResult run_session(const ModelForward& model, const Volume& volume, const BinaryMask& gt, int budget,
                          Rng& rng, const Config& cfg) {
  if (budget < 1) throw Error(Errc::config, "run_session: budget must be at least 1");
  if (gt.dims != volume.dims) throw Error(Errc::shape, "run_session: gt and volume dims differ");
  SessionResult res;
  res.clicks.push_back(first_click(gt, rng));
  for (int round = 1; round <= budget; ++round) {
    const BinaryMask pred = model(volume, res.clicks);
    if (pred.dims != gt.dims) throw Error(Errc::shape, "run_session: model returned wrong dims");
    res.steps.push_back({round, dice(pred, gt)});
    if (pred.data == gt.data) {
      res.converged = true;
      break;
    }
    if (round == budget) break;
    res.clicks.push_back(next_click(gt, pred, rng, res.clicks, cfg));
  }
  return res;
}

}  // namespace volseg::promptsim
