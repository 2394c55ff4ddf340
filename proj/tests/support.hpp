// Test-side oracles and fixtures. Written independently of the library code they check.
#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

#include "volseg/voxgrid.hpp"

namespace testsupport {

using volseg::BinaryMask;
using volseg::Vec3i;

inline BinaryMask random_mask(const Vec3i& dims, double density, std::mt19937_64& rng) {
  BinaryMask m(dims);
  std::bernoulli_distribution b(density);
  for (auto& v : m.data) v = b(rng) ? 1 : 0;
  return m;
}

inline void paint_box(BinaryMask& m, const Vec3i& lo, const Vec3i& hi) {
  for (int k = lo[2]; k <= hi[2]; ++k)
    for (int j = lo[1]; j <= hi[1]; ++j)
      for (int i = lo[0]; i <= hi[0]; ++i) m.at(i, j, k) = 1;
}

// Recursive flood fill labelling; returns per-voxel component label (0 = background) and sizes.
class FloodFill {
 public:
  FloodFill(const BinaryMask& m, int connectivity) : m_(m), conn_(connectivity), label_(m.data.size(), 0) {
    int next = 0;
    for (int k = 0; k < m.dims[2]; ++k)
      for (int j = 0; j < m.dims[1]; ++j)
        for (int i = 0; i < m.dims[0]; ++i) {
          if (m.at(i, j, k) && label_[idx(i, j, k)] == 0) {
            sizes_.push_back(0);
            fill(i, j, k, ++next);
          }
        }
  }

  const std::vector<int>& labels() const { return label_; }
  const std::vector<std::size_t>& sizes() const { return sizes_; }

  // Component voxel sets sorted by size descending, ties by first voxel in scan order.
  std::vector<std::vector<std::size_t>> components() const {
    std::vector<std::vector<std::size_t>> out(sizes_.size());
    for (std::size_t v = 0; v < label_.size(); ++v)
      if (label_[v] > 0) out[label_[v] - 1].push_back(v);
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.size() > b.size(); });
    return out;
  }

 private:
  std::size_t idx(int i, int j, int k) const {
    return static_cast<std::size_t>(i) + static_cast<std::size_t>(m_.dims[0]) * (j + static_cast<std::size_t>(m_.dims[1]) * k);
  }

  void fill(int i, int j, int k, int lab) {
    if (i < 0 || j < 0 || k < 0 || i >= m_.dims[0] || j >= m_.dims[1] || k >= m_.dims[2]) return;
    const auto id = idx(i, j, k);
    if (!m_.data[id] || label_[id] != 0) return;
    label_[id] = lab;
    ++sizes_[lab - 1];
    for (int dz = -1; dz <= 1; ++dz)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int nz = (dx != 0) + (dy != 0) + (dz != 0);
          if (nz == 0) continue;
          if (conn_ == 6 && nz != 1) continue;
          fill(i + dx, j + dy, k + dz, lab);
        }
  }

  const BinaryMask& m_;
  int conn_;
  std::vector<int> label_;
  std::vector<std::size_t> sizes_;
};

inline std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("volseg_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace testsupport
