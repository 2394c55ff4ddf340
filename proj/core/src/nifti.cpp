#include "volseg/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

namespace volseg::nifti {
namespace {

constexpr std::size_t kHeaderSize = 348;
constexpr std::size_t kVoxOffset = 352;

template <class T>
T load(std::span<const std::uint8_t> b, std::size_t off) {
  T v;
  std::memcpy(&v, b.data() + off, sizeof(T));
  return v;
}

template <class T>
void store(std::vector<std::uint8_t>& b, std::size_t off, T v) {
  std::memcpy(b.data() + off, &v, sizeof(T));
}

bool is_gzip(std::span<const std::uint8_t> bytes) {
  return bytes.size() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b;
}

std::vector<std::uint8_t> gunzip(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (inflateInit2(&zs, 16 + MAX_WBITS) != Z_OK) throw Error(Errc::parse, "inflateInit2 failed");
  std::vector<std::uint8_t> out;
  std::array<std::uint8_t, 1 << 16> chunk{};
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = chunk.data();
    zs.avail_out = static_cast<uInt>(chunk.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw Error(Errc::parse, "corrupt gzip stream");
    }
    out.insert(out.end(), chunk.data(), chunk.data() + (chunk.size() - zs.avail_out));
    if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
      inflateEnd(&zs);
      throw Error(Errc::parse, "truncated gzip stream");
    }
  }
  inflateEnd(&zs);
  return out;
}

std::vector<std::uint8_t> gzip(std::span<const std::uint8_t> in) {
  z_stream zs{};
  if (deflateInit2(&zs, Z_DEFAULT_COMPRESSION, Z_DEFLATED, 16 + MAX_WBITS, 8, Z_DEFAULT_STRATEGY) != Z_OK) {
    throw Error(Errc::io, "deflateInit2 failed");
  }
  std::vector<std::uint8_t> out(deflateBound(&zs, static_cast<uLong>(in.size())) + 32);
  zs.next_in = const_cast<Bytef*>(in.data());
  zs.avail_in = static_cast<uInt>(in.size());
  zs.next_out = out.data();
  zs.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&zs, Z_FINISH);
  deflateEnd(&zs);
  if (rc != Z_STREAM_END) throw Error(Errc::io, "deflate failed");
  out.resize(zs.total_out);
  return out;
}

std::size_t type_size(std::int16_t dt) {
  switch (static_cast<DataType>(dt)) {
    case DataType::uint8:
    case DataType::int8: return 1;
    case DataType::int16:
    case DataType::uint16: return 2;
    case DataType::int32:
    case DataType::uint32:
    case DataType::float32: return 4;
    case DataType::float64: return 8;
  }
  throw Error(Errc::parse, "unsupported NIfTI datatype " + std::to_string(dt));
}

double read_value(const std::uint8_t* p, std::int16_t dt) {
  switch (static_cast<DataType>(dt)) {
    case DataType::uint8: return *p;
    case DataType::int8: return static_cast<std::int8_t>(*p);
    case DataType::int16: { std::int16_t v; std::memcpy(&v, p, 2); return v; }
    case DataType::uint16: { std::uint16_t v; std::memcpy(&v, p, 2); return v; }
    case DataType::int32: { std::int32_t v; std::memcpy(&v, p, 4); return v; }
    case DataType::uint32: { std::uint32_t v; std::memcpy(&v, p, 4); return v; }
    case DataType::float32: { float v; std::memcpy(&v, p, 4); return v; }
    case DataType::float64: { double v; std::memcpy(&v, p, 8); return v; }
  }
  return 0.0;
}

void write_value(std::uint8_t* p, DataType dt, double v) {
  switch (dt) {
    case DataType::uint8: *p = static_cast<std::uint8_t>(std::lround(v)); break;
    case DataType::int8: *p = static_cast<std::uint8_t>(static_cast<std::int8_t>(std::lround(v))); break;
    case DataType::int16: { auto x = static_cast<std::int16_t>(std::lround(v)); std::memcpy(p, &x, 2); break; }
    case DataType::uint16: { auto x = static_cast<std::uint16_t>(std::lround(v)); std::memcpy(p, &x, 2); break; }
    case DataType::int32: { auto x = static_cast<std::int32_t>(std::lround(v)); std::memcpy(p, &x, 4); break; }
    case DataType::uint32: { auto x = static_cast<std::uint32_t>(std::llround(v)); std::memcpy(p, &x, 4); break; }
    case DataType::float32: { auto x = static_cast<float>(v); std::memcpy(p, &x, 4); break; }
    case DataType::float64: std::memcpy(p, &v, 8); break;
  }
}

using Mat3 = std::array<std::array<double, 3>, 3>;

// Voxel-to-world linear part; columns are voxel axes.
Mat3 header_affine(std::span<const std::uint8_t> h, const Vec3d& pixdim) {
  Mat3 m{};
  const auto qform_code = load<std::int16_t>(h, 252);
  const auto sform_code = load<std::int16_t>(h, 254);
  if (sform_code > 0) {
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) m[r][c] = load<float>(h, 280 + 16 * r + 4 * c);
    }
    return m;
  }
  if (qform_code > 0) {
    const double b = load<float>(h, 256);
    const double c = load<float>(h, 260);
    const double d = load<float>(h, 264);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    double qfac = load<float>(h, 76);
    if (qfac == 0.0) qfac = 1.0;
    const Mat3 r{{{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                  {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                  {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}}};
    for (int row = 0; row < 3; ++row) {
      m[row][0] = r[row][0] * pixdim[0];
      m[row][1] = r[row][1] * pixdim[1];
      m[row][2] = r[row][2] * pixdim[2] * qfac;
    }
    return m;
  }
  for (int i = 0; i < 3; ++i) m[i][i] = pixdim[i];
  return m;
}

}  // namespace

Image decode(std::span<const std::uint8_t> raw) {
  std::vector<std::uint8_t> inflated;
  std::span<const std::uint8_t> bytes = raw;
  if (is_gzip(raw)) {
    inflated = gunzip(raw);
    bytes = inflated;
  }
  if (bytes.size() < kHeaderSize) throw Error(Errc::parse, "file shorter than NIfTI header");
  if (load<std::int32_t>(bytes, 0) != static_cast<std::int32_t>(kHeaderSize)) {
    throw Error(Errc::parse, "bad sizeof_hdr (only little-endian NIfTI-1 is supported)");
  }
  const char* magic = reinterpret_cast<const char*>(bytes.data() + 344);
  if (std::strncmp(magic, "n+1", 3) != 0 && std::strncmp(magic, "ni1", 3) != 0) {
    throw Error(Errc::parse, "bad NIfTI magic");
  }
  const auto ndim = load<std::int16_t>(bytes, 40);
  if (ndim < 1 || ndim > 7) throw Error(Errc::parse, "bad dim[0]");
  Vec3i in_dims{1, 1, 1};
  for (int a = 0; a < 3 && a < ndim; ++a) {
    in_dims[a] = load<std::int16_t>(bytes, 42 + 2 * a);
    if (in_dims[a] < 1) throw Error(Errc::parse, "non-positive dimension");
  }
  for (int a = 3; a < ndim; ++a) {
    if (load<std::int16_t>(bytes, 42 + 2 * a) > 1) throw Error(Errc::parse, "only 3D images are supported");
  }
  const auto dt = load<std::int16_t>(bytes, 70);
  const std::size_t tsize = type_size(dt);
  Vec3d pixdim{};
  for (int a = 0; a < 3; ++a) {
    pixdim[a] = std::abs(load<float>(bytes, 80 + 4 * a));
    if (!(pixdim[a] > 0.0)) pixdim[a] = 1.0;
  }
  const auto vox_offset = static_cast<std::size_t>(std::max(0.0F, load<float>(bytes, 108)));
  double slope = load<float>(bytes, 112);
  double inter = load<float>(bytes, 116);
  if (slope == 0.0 || !std::isfinite(slope)) {
    slope = 1.0;
    inter = 0.0;
  }
  const std::size_t n = voxel_count(in_dims);
  if (bytes.size() < vox_offset + n * tsize) throw Error(Errc::parse, "truncated voxel data");

  const Mat3 m = header_affine(bytes, pixdim);
  // For each voxel axis: which world axis dominates and with which sign.
  std::array<int, 3> world_of{};
  std::array<bool, 3> flip{};
  Vec3d col_norm{};
  std::array<bool, 3> taken{};
  for (int a = 0; a < 3; ++a) {
    int best = -1;
    double best_abs = -1.0;
    for (int w = 0; w < 3; ++w) {
      if (taken[w]) continue;
      if (std::abs(m[w][a]) > best_abs) {
        best_abs = std::abs(m[w][a]);
        best = w;
      }
    }
    taken[best] = true;
    world_of[a] = best;
    flip[a] = m[best][a] < 0.0;
    col_norm[a] = std::sqrt(m[0][a] * m[0][a] + m[1][a] * m[1][a] + m[2][a] * m[2][a]);
    if (!(col_norm[a] > 0.0)) col_norm[a] = pixdim[a];
  }

  Image img;
  for (int a = 0; a < 3; ++a) {
    img.dims[world_of[a]] = in_dims[a];
    img.spacing[world_of[a]] = col_norm[a];
  }
  img.values.resize(n);
  const std::uint8_t* base = bytes.data() + vox_offset;
  for (int k = 0; k < in_dims[2]; ++k) {
    for (int j = 0; j < in_dims[1]; ++j) {
      for (int i = 0; i < in_dims[0]; ++i) {
        const Vec3i src{i, j, k};
        Vec3i dst{};
        for (int a = 0; a < 3; ++a) dst[world_of[a]] = flip[a] ? in_dims[a] - 1 - src[a] : src[a];
        const double v = read_value(base + linear_index(in_dims, i, j, k) * tsize, dt);
        img.values[linear_index(img.dims, dst[0], dst[1], dst[2])] = v * slope + inter;
      }
    }
  }
  return img;
}

std::vector<std::uint8_t> encode(const Image& img, DataType type, bool compress) {
  const std::size_t tsize = type_size(static_cast<std::int16_t>(type));
  const std::size_t n = voxel_count(img.dims);
  if (img.values.size() != n) throw Error(Errc::shape, "image value count mismatch");
  std::vector<std::uint8_t> out(kVoxOffset + n * tsize, 0);
  store<std::int32_t>(out, 0, static_cast<std::int32_t>(kHeaderSize));
  store<std::int16_t>(out, 40, 3);
  for (int a = 0; a < 3; ++a) store<std::int16_t>(out, 42 + 2 * a, static_cast<std::int16_t>(img.dims[a]));
  for (int a = 3; a < 7; ++a) store<std::int16_t>(out, 42 + 2 * a, 1);
  store<std::int16_t>(out, 70, static_cast<std::int16_t>(type));
  store<std::int16_t>(out, 72, static_cast<std::int16_t>(8 * tsize));
  store<float>(out, 76, 1.0F);
  for (int a = 0; a < 3; ++a) store<float>(out, 80 + 4 * a, static_cast<float>(img.spacing[a]));
  store<float>(out, 108, static_cast<float>(kVoxOffset));
  store<float>(out, 112, 1.0F);
  store<float>(out, 116, 0.0F);
  out[123] = 10;  // xyzt_units: mm, s
  store<std::int16_t>(out, 252, 0);
  store<std::int16_t>(out, 254, 1);
  for (int r = 0; r < 3; ++r) store<float>(out, 280 + 16 * r + 4 * r, static_cast<float>(img.spacing[r]));
  std::memcpy(out.data() + 344, "n+1\0", 4);
  for (std::size_t i = 0; i < n; ++i) write_value(out.data() + kVoxOffset + i * tsize, type, img.values[i]);
  return compress ? gzip(out) : out;
}

Image read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(Errc::io, "cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

void write(const std::filesystem::path& path, const Image& img, DataType type) {
  const bool gz = path.extension() == ".gz";
  const auto bytes = encode(img, type, gz);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(Errc::io, "short write to " + path.string());
}

Volume to_volume(const Image& img) {
  Volume v(img.dims, img.spacing);
  for (std::size_t i = 0; i < img.values.size(); ++i) v.data[i] = static_cast<float>(img.values[i]);
  return v;
}

LabelVolume to_labels(const Image& img) {
  LabelVolume lv(img.dims, img.spacing);
  for (std::size_t i = 0; i < img.values.size(); ++i) {
    lv.data[i] = static_cast<std::int32_t>(std::lround(img.values[i]));
  }
  return lv;
}

Image from_volume(const Volume& v) {
  Image img{v.dims, v.spacing, {}};
  img.values.assign(v.data.begin(), v.data.end());
  return img;
}

Image from_mask(const BinaryMask& m, const Vec3d& spacing) {
  Image img{m.dims, spacing, {}};
  img.values.assign(m.data.begin(), m.data.end());
  return img;
}

Image from_labels(const LabelVolume& lv) {
  Image img{lv.dims, lv.spacing, {}};
  img.values.assign(lv.data.begin(), lv.data.end());
  return img;
}

Volume read_volume(const std::filesystem::path& path) { return to_volume(read(path)); }
LabelVolume read_labels(const std::filesystem::path& path) { return to_labels(read(path)); }

void write_volume(const std::filesystem::path& path, const Volume& v) {
  write(path, from_volume(v), DataType::float32);
}

void write_mask(const std::filesystem::path& path, const BinaryMask& m, const Vec3d& spacing) {
  write(path, from_mask(m, spacing), DataType::uint8);
}

void write_labels(const std::filesystem::path& path, const LabelVolume& lv) {
  std::int32_t max_label = 0;
  for (auto v : lv.data) max_label = std::max(max_label, v);
  write(path, from_labels(lv), max_label <= 32767 ? DataType::int16 : DataType::int32);
}

}  // namespace volseg::nifti
