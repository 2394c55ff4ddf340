#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "volseg/voxgrid.hpp"

namespace volseg::nifti {

/// NIfTI-1 image reduced to an axis-aligned grid in canonical (RAS) axis order.
struct Image {
  Vec3i dims{1, 1, 1};
  Vec3d spacing{1.0, 1.0, 1.0};
  std::vector<double> values;  // x fastest
};

enum class DataType : std::int16_t {
  uint8 = 2,
  int16 = 4,
  int32 = 8,
  float32 = 16,
  float64 = 64,
  int8 = 256,
  uint16 = 512,
  uint32 = 768,
};

/// Accepts raw or gzip-compressed bytes. Throws Errc::parse on malformed input.
Image decode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode(const Image& img, DataType type, bool gzip);

Image read(const std::filesystem::path& path);
void write(const std::filesystem::path& path, const Image& img, DataType type);

Volume to_volume(const Image& img);
LabelVolume to_labels(const Image& img);
Image from_volume(const Volume& v);
Image from_mask(const BinaryMask& m, const Vec3d& spacing);
Image from_labels(const LabelVolume& lv);

Volume read_volume(const std::filesystem::path& path);
LabelVolume read_labels(const std::filesystem::path& path);
void write_volume(const std::filesystem::path& path, const Volume& v);
void write_mask(const std::filesystem::path& path, const BinaryMask& m, const Vec3d& spacing);
void write_labels(const std::filesystem::path& path, const LabelVolume& lv);

}  // namespace volseg::nifti
