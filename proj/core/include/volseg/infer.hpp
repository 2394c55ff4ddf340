#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "volseg/intensity.hpp"
#include "volseg/net3d.hpp"
#include "volseg/voxgrid.hpp"

namespace volseg::infer {

struct Crop {
  Volume patch;
  Vec3i origin;  // volume coordinate of patch voxel (0,0,0); negative on padded axes
};

/// Window of `size`^3 centred on p and clamped to the volume. Axes shorter than
/// `size` are zero-padded symmetrically, giving a negative origin.
Vec3i crop_origin(const Vec3i& dims, const Vec3i& p, int size);
Volume extract(const Volume& v, const Vec3i& origin, int size);
Crop crop_patch(const Volume& v, const PointPrompt& p, int size = 128);

struct Direction {
  int axis = 0;  // 0 = x, 1 = y, 2 = z
  int sign = 1;  // +1 or -1

  bool operator==(const Direction&) const = default;
};

/// Directions whose face has a foreground voxel within `margin` voxels. Order: -x,+x,-y,+y,-z,+z.
std::vector<Direction> faces_with_foreground(const BinaryMask& pred, int margin = 1);

struct WindowProb {
  Vec3i origin;
  Grid<double> prob;
};

/// Per-voxel mean over covering windows, then prob > threshold. Uncovered voxels are background.
BinaryMask fuse(std::span<const WindowProb> windows, const Vec3i& dims, double threshold = 0.5);

/// Probability grid for one normalised patch; clicks are patch-local.
using PatchModel = std::function<Grid<double>(const Volume& patch, std::span<const PointPrompt> local_clicks)>;

struct Options {
  int patch_size = 128;
  double threshold = 0.5;
  int face_margin = 1;
  /// Applied to the whole volume before cropping; nullopt feeds intensities unchanged.
  std::optional<intensity::Policy> normalization = intensity::Policy{};
};

struct Result {
  BinaryMask mask;
  std::vector<Vec3i> windows;  // processed origins, initial window first
};

Result segment_volume(const Volume& v, std::span<const PointPrompt> clicks, const PatchModel& model,
                      const Options& opt = {});
/// Uses the state's patch size.
Result segment_volume(const Volume& v, std::span<const PointPrompt> clicks, const net::ModelState& state,
                      double threshold = 0.5);

PatchModel network_model(const net::ModelState& state);

}  // namespace volseg::infer
