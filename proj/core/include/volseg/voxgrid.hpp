#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "volseg/error.hpp"

namespace volseg {

using Vec3i = std::array<int, 3>;
using Vec3d = std::array<double, 3>;

inline std::size_t voxel_count(const Vec3i& dims) {
  return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
}

/// Linear index with x fastest, z slowest.
inline std::size_t linear_index(const Vec3i& dims, int i, int j, int k) {
  return static_cast<std::size_t>(i) +
         static_cast<std::size_t>(dims[0]) * (static_cast<std::size_t>(j) +
                                              static_cast<std::size_t>(dims[1]) * k);
}

inline Vec3i unravel(const Vec3i& dims, std::size_t idx) {
  const std::size_t plane = static_cast<std::size_t>(dims[0]) * dims[1];
  const int k = static_cast<int>(idx / plane);
  const std::size_t rem = idx % plane;
  return {static_cast<int>(rem % dims[0]), static_cast<int>(rem / dims[0]), k};
}

inline bool in_bounds(const Vec3i& dims, const Vec3i& p) {
  return p[0] >= 0 && p[1] >= 0 && p[2] >= 0 && p[0] < dims[0] && p[1] < dims[1] &&
         p[2] < dims[2];
}

/// Dense 3D grid stored x-fastest.
template <class T>
struct Grid {
  Vec3i dims{1, 1, 1};
  std::vector<T> data;

  Grid() : data(1) {}
  explicit Grid(const Vec3i& d, T fill = T{}) : dims(d), data(voxel_count(d), fill) {}

  std::size_t size() const { return data.size(); }
  T& at(int i, int j, int k) { return data[linear_index(dims, i, j, k)]; }
  const T& at(int i, int j, int k) const { return data[linear_index(dims, i, j, k)]; }
  T& at(const Vec3i& p) { return at(p[0], p[1], p[2]); }
  const T& at(const Vec3i& p) const { return at(p[0], p[1], p[2]); }

  bool operator==(const Grid&) const = default;
};

/// Scalar intensity image with per-axis physical spacing in mm.
struct Volume : Grid<float> {
  Vec3d spacing{1.0, 1.0, 1.0};
  std::string orientation = "RAS";

  Volume() = default;
  Volume(const Vec3i& d, const Vec3d& s, float fill = 0.0F) : Grid<float>(d, fill), spacing(s) {}

  void validate() const;
};

struct BinaryMask : Grid<std::uint8_t> {
  BinaryMask() = default;
  explicit BinaryMask(const Vec3i& d, bool fill = false) : Grid<std::uint8_t>(d, fill ? 1 : 0) {}

  bool get(const Vec3i& p) const { return at(p) != 0; }
  void set(const Vec3i& p, bool v) { at(p) = v ? 1 : 0; }
  std::size_t count() const;
  bool empty() const { return count() == 0; }
};

struct LabelVolume : Grid<std::int32_t> {
  std::map<std::int32_t, std::string> class_map;
  Vec3d spacing{1.0, 1.0, 1.0};

  LabelVolume() = default;
  LabelVolume(const Vec3i& d, const Vec3d& s) : Grid<std::int32_t>(d, 0), spacing(s) {}

  /// Throws config error when a nonzero label is missing from class_map.
  void validate() const;
  BinaryMask one_hot(std::int32_t class_id) const;
};

enum class PromptLabel : std::uint8_t { negative = 0, positive = 1 };

struct PointPrompt {
  Vec3i coord{0, 0, 0};
  PromptLabel label = PromptLabel::positive;

  bool positive() const { return label == PromptLabel::positive; }
  bool operator==(const PointPrompt&) const = default;
};

/// Inclusive voxel bounds.
struct BoundingBox {
  Vec3i min_corner{0, 0, 0};
  Vec3i max_corner{0, 0, 0};

  bool operator==(const BoundingBox&) const = default;
};

enum class Connectivity { six = 6, twenty_six = 26 };

/// Connected component as sorted linear voxel indices.
struct Component {
  std::vector<std::size_t> voxels;

  std::size_t size() const { return voxels.size(); }
  BinaryMask to_mask(const Vec3i& dims) const;
};

double dice(const BinaryMask& a, const BinaryMask& b);
double physical_volume(const BinaryMask& m, const Vec3d& spacing);
BoundingBox bounding_box(const BinaryMask& m);
Vec3d bounding_extent(const BinaryMask& m, const Vec3d& spacing);

Vec3i resampled_dims(const Vec3i& dims, const Vec3d& spacing, const Vec3d& target_spacing);
Volume resample(const Volume& v, const Vec3d& target_spacing);
BinaryMask resample(const BinaryMask& m, const Vec3d& spacing, const Vec3d& target_spacing);
LabelVolume resample(const LabelVolume& lv, const Vec3d& target_spacing);

/// Components sorted by size descending; equal sizes ordered by smallest linear index.
std::vector<Component> connected_components(const BinaryMask& m,
                                             Connectivity connectivity = Connectivity::twenty_six);

}  // namespace volseg
