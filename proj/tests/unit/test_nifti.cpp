#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "support.hpp"
#include "volseg/nifti.hpp"

using namespace volseg;

namespace {

nifti::Image ramp(const Vec3i& dims, const Vec3d& spacing) {
  nifti::Image img;
  img.dims = dims;
  img.spacing = spacing;
  img.values.resize(voxel_count(dims));
  for (std::size_t i = 0; i < img.values.size(); ++i) img.values[i] = static_cast<double>(i % 1000) - 17.0;
  return img;
}

template <class T>
void poke(std::vector<std::uint8_t>& b, std::size_t off, T v) {
  std::memcpy(b.data() + off, &v, sizeof(T));
}

}  // namespace

TEST(Nifti, RoundTripRawAndGzip) {
  const auto img = ramp({5, 6, 7}, {0.5, 1.25, 3.0});
  for (bool gz : {false, true}) {
    for (auto type : {nifti::DataType::float32, nifti::DataType::int16, nifti::DataType::int32,
                      nifti::DataType::float64}) {
      const auto bytes = nifti::encode(img, type, gz);
      const auto back = nifti::decode(bytes);
      EXPECT_EQ(back.dims, img.dims);
      for (int a = 0; a < 3; ++a) EXPECT_FLOAT_EQ(back.spacing[a], img.spacing[a]);
      EXPECT_EQ(back.values, img.values);
    }
  }
}

TEST(Nifti, TruncatedInputIsParseError) {
  const auto bytes = nifti::encode(ramp({4, 4, 4}, {1, 1, 1}), nifti::DataType::float32, false);
  for (std::size_t keep : {std::size_t{0}, std::size_t{100}, std::size_t{348}, bytes.size() - 1}) {
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(keep));
    try {
      nifti::decode(cut);
      FAIL() << "accepted " << keep << " bytes";
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::parse);
    }
  }
  auto gz = nifti::encode(ramp({4, 4, 4}, {1, 1, 1}), nifti::DataType::float32, true);
  gz.resize(gz.size() / 2);
  EXPECT_THROW(nifti::decode(gz), Error);
}

TEST(Nifti, NegativeSformAxisIsFlippedToCanonical) {
  auto img = ramp({3, 2, 2}, {2, 1, 1});
  auto bytes = nifti::encode(img, nifti::DataType::float64, false);
  poke<float>(bytes, 280, -2.0F);  // srow_x[0]
  const auto back = nifti::decode(bytes);
  ASSERT_EQ(back.dims, img.dims);
  EXPECT_DOUBLE_EQ(back.spacing[0], 2.0);
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 2; ++j)
      for (int i = 0; i < 3; ++i)
        EXPECT_EQ(back.values[linear_index(back.dims, i, j, k)], img.values[linear_index(img.dims, 2 - i, j, k)]);
}

TEST(Nifti, PermutedSformAxesAreReordered) {
  // Stored axis 0 points along world z, stored axis 2 along world x.
  auto img = ramp({4, 3, 2}, {1, 1, 1});
  auto bytes = nifti::encode(img, nifti::DataType::float64, false);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) poke<float>(bytes, 280 + 16 * r + 4 * c, 0.0F);
  poke<float>(bytes, 280 + 16 * 2 + 0, 1.5F);  // z <- axis 0
  poke<float>(bytes, 280 + 16 * 1 + 4, 1.0F);  // y <- axis 1
  poke<float>(bytes, 280 + 16 * 0 + 8, 3.0F);  // x <- axis 2
  const auto back = nifti::decode(bytes);
  EXPECT_EQ(back.dims, (Vec3i{2, 3, 4}));
  EXPECT_DOUBLE_EQ(back.spacing[0], 3.0);
  EXPECT_DOUBLE_EQ(back.spacing[2], 1.5);
  for (int k = 0; k < 2; ++k)
    for (int j = 0; j < 3; ++j)
      for (int i = 0; i < 4; ++i)
        EXPECT_EQ(back.values[linear_index(back.dims, k, j, i)], img.values[linear_index(img.dims, i, j, k)]);
}

TEST(Nifti, PixdimFallbackAndScaling) {
  auto img = ramp({2, 2, 2}, {1.5, 1.5, 1.5});
  auto bytes = nifti::encode(img, nifti::DataType::int16, false);
  poke<std::int16_t>(bytes, 254, 0);  // no sform
  poke<float>(bytes, 112, 2.0F);      // scl_slope
  poke<float>(bytes, 116, 1.0F);      // scl_inter
  const auto back = nifti::decode(bytes);
  EXPECT_DOUBLE_EQ(back.spacing[1], 1.5);
  for (std::size_t i = 0; i < img.values.size(); ++i) EXPECT_EQ(back.values[i], 2.0 * img.values[i] + 1.0);
}

TEST(Nifti, FileHelpers) {
  const auto dir = testsupport::temp_dir("nifti");
  Volume v({4, 5, 6}, {1.0, 2.0, 0.5}, 0.0F);
  for (std::size_t i = 0; i < v.data.size(); ++i) v.data[i] = 0.25F * static_cast<float>(i);
  nifti::write_volume(dir / "v.nii.gz", v);
  const auto rv = nifti::read_volume(dir / "v.nii.gz");
  EXPECT_EQ(rv.data, v.data);
  EXPECT_EQ(rv.spacing, v.spacing);

  LabelVolume lv({4, 5, 6}, {1.0, 2.0, 0.5});
  lv.data[7] = 3;
  lv.data[8] = 70000;
  nifti::write_labels(dir / "l.nii", lv);
  EXPECT_EQ(nifti::read_labels(dir / "l.nii").data, lv.data);
  EXPECT_THROW(nifti::read_volume(dir / "missing.nii"), Error);
  std::filesystem::remove_all(dir);
}
