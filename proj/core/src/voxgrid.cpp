#include "volseg/voxgrid.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

namespace volseg {

std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::shape: return "shape error";
    case Errc::empty_mask: return "empty mask";
    case Errc::empty_target: return "empty target";
    case Errc::converged: return "converged";
    case Errc::out_of_bounds: return "out of bounds";
    case Errc::out_of_patch: return "out of patch";
    case Errc::version: return "version error";
    case Errc::io: return "i/o error";
    case Errc::parse: return "parse error";
    case Errc::config: return "config error";
    case Errc::unsupported_budget: return "unsupported budget";
    case Errc::protocol: return "protocol error";
    case Errc::not_ready: return "not ready";
    case Errc::busy: return "busy";
    case Errc::nothing_to_undo: return "nothing to undo";
    case Errc::non_finite: return "non-finite value";
    case Errc::payload_too_large: return "payload too large";
    case Errc::not_found: return "not found";
  }
  return "error";
}

void Volume::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] < 1) throw Error(Errc::shape, "volume dims must be >= 1");
    if (!(spacing[a] > 0.0)) throw Error(Errc::shape, "volume spacing must be > 0");
  }
  if (data.size() != voxel_count(dims)) throw Error(Errc::shape, "intensity buffer length mismatch");
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

void LabelVolume::validate() const {
  for (auto v : data) {
    if (v < 0) throw Error(Errc::config, "negative label");
    if (v != 0 && !class_map.contains(v)) {
      throw Error(Errc::config, "label " + std::to_string(v) + " missing from class map");
    }
  }
}

BinaryMask LabelVolume::one_hot(std::int32_t class_id) const {
  BinaryMask m(dims);
  for (std::size_t i = 0; i < data.size(); ++i) m.data[i] = data[i] == class_id ? 1 : 0;
  return m;
}

BinaryMask Component::to_mask(const Vec3i& dims) const {
  BinaryMask m(dims);
  for (auto v : voxels) m.data[v] = 1;
  return m;
}

double dice(const BinaryMask& a, const BinaryMask& b) {
  if (a.dims != b.dims) throw Error(Errc::shape, "dice: mask dims differ");
  std::size_t na = 0;
  std::size_t nb = 0;
  std::size_t both = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool x = a.data[i] != 0;
    const bool y = b.data[i] != 0;
    na += x;
    nb += y;
    both += x && y;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

double physical_volume(const BinaryMask& m, const Vec3d& spacing) {
  return static_cast<double>(m.count()) * spacing[0] * spacing[1] * spacing[2];
}

BoundingBox bounding_box(const BinaryMask& m) {
  BoundingBox box{{m.dims[0], m.dims[1], m.dims[2]}, {-1, -1, -1}};
  bool any = false;
  for (int k = 0; k < m.dims[2]; ++k) {
    for (int j = 0; j < m.dims[1]; ++j) {
      for (int i = 0; i < m.dims[0]; ++i) {
        if (m.at(i, j, k) == 0) continue;
        any = true;
        const Vec3i p{i, j, k};
        for (int a = 0; a < 3; ++a) {
          box.min_corner[a] = std::min(box.min_corner[a], p[a]);
          box.max_corner[a] = std::max(box.max_corner[a], p[a]);
        }
      }
    }
  }
  if (!any) throw Error(Errc::empty_mask, "bounding box of empty mask");
  return box;
}

Vec3d bounding_extent(const BinaryMask& m, const Vec3d& spacing) {
  const auto box = bounding_box(m);
  Vec3d ext{};
  for (int a = 0; a < 3; ++a) ext[a] = (box.max_corner[a] - box.min_corner[a] + 1) * spacing[a];
  return ext;
}

Vec3i resampled_dims(const Vec3i& dims, const Vec3d& spacing, const Vec3d& target_spacing) {
  Vec3i out{};
  for (int a = 0; a < 3; ++a) {
    if (!(target_spacing[a] > 0.0)) throw Error(Errc::shape, "target spacing must be > 0");
    out[a] = std::max(1, static_cast<int>(std::lround(dims[a] * spacing[a] / target_spacing[a])));
  }
  return out;
}

namespace {

// Position of output voxel centre in input index coordinates, per axis.
std::vector<double> source_coords(int n_out, double s_in, double s_out) {
  std::vector<double> c(n_out);
  const double ratio = s_out / s_in;
  for (int i = 0; i < n_out; ++i) c[i] = (i + 0.5) * ratio - 0.5;
  return c;
}

struct LinearTap {
  int lo;
  int hi;
  double w;  // weight of hi
};

std::vector<LinearTap> linear_taps(int n_out, int n_in, double s_in, double s_out) {
  std::vector<LinearTap> taps(n_out);
  const auto c = source_coords(n_out, s_in, s_out);
  for (int i = 0; i < n_out; ++i) {
    const double x = std::clamp(c[i], 0.0, static_cast<double>(n_in - 1));
    const int lo = static_cast<int>(std::floor(x));
    const int hi = std::min(lo + 1, n_in - 1);
    taps[i] = {lo, hi, x - lo};
  }
  return taps;
}

std::vector<int> nearest_taps(int n_out, int n_in, double s_in, double s_out) {
  std::vector<int> taps(n_out);
  const auto c = source_coords(n_out, s_in, s_out);
  for (int i = 0; i < n_out; ++i) {
    taps[i] = std::clamp(static_cast<int>(std::floor(c[i] + 0.5)), 0, n_in - 1);
  }
  return taps;
}

template <class T>
Grid<T> resample_nearest(const Grid<T>& g, const Vec3d& spacing, const Vec3d& target) {
  const Vec3i out_dims = resampled_dims(g.dims, spacing, target);
  Grid<T> out(out_dims);
  std::array<std::vector<int>, 3> taps;
  for (int a = 0; a < 3; ++a) taps[a] = nearest_taps(out_dims[a], g.dims[a], spacing[a], target[a]);
  for (int k = 0; k < out_dims[2]; ++k) {
    for (int j = 0; j < out_dims[1]; ++j) {
      for (int i = 0; i < out_dims[0]; ++i) {
        out.at(i, j, k) = g.at(taps[0][i], taps[1][j], taps[2][k]);
      }
    }
  }
  return out;
}

}  // namespace

Volume resample(const Volume& v, const Vec3d& target_spacing) {
  const Vec3i out_dims = resampled_dims(v.dims, v.spacing, target_spacing);
  if (target_spacing == v.spacing) return v;
  Volume out(out_dims, target_spacing);
  out.orientation = v.orientation;
  std::array<std::vector<LinearTap>, 3> t;
  for (int a = 0; a < 3; ++a) t[a] = linear_taps(out_dims[a], v.dims[a], v.spacing[a], target_spacing[a]);
  for (int k = 0; k < out_dims[2]; ++k) {
    const auto& tz = t[2][k];
    for (int j = 0; j < out_dims[1]; ++j) {
      const auto& ty = t[1][j];
      for (int i = 0; i < out_dims[0]; ++i) {
        const auto& tx = t[0][i];
        auto lerp_x = [&](int jj, int kk) {
          const double a = v.at(tx.lo, jj, kk);
          const double b = v.at(tx.hi, jj, kk);
          return a + tx.w * (b - a);
        };
        auto lerp_y = [&](int kk) {
          const double a = lerp_x(ty.lo, kk);
          const double b = lerp_x(ty.hi, kk);
          return a + ty.w * (b - a);
        };
        const double a = lerp_y(tz.lo);
        const double b = lerp_y(tz.hi);
        out.at(i, j, k) = static_cast<float>(a + tz.w * (b - a));
      }
    }
  }
  return out;
}

BinaryMask resample(const BinaryMask& m, const Vec3d& spacing, const Vec3d& target_spacing) {
  if (target_spacing == spacing) {
    resampled_dims(m.dims, spacing, target_spacing);
    return m;
  }
  BinaryMask out;
  static_cast<Grid<std::uint8_t>&>(out) = resample_nearest<std::uint8_t>(m, spacing, target_spacing);
  return out;
}

LabelVolume resample(const LabelVolume& lv, const Vec3d& target_spacing) {
  if (target_spacing == lv.spacing) {
    resampled_dims(lv.dims, lv.spacing, target_spacing);
    return lv;
  }
  LabelVolume out;
  static_cast<Grid<std::int32_t>&>(out) = resample_nearest<std::int32_t>(lv, lv.spacing, target_spacing);
  out.class_map = lv.class_map;
  out.spacing = target_spacing;
  return out;
}

std::vector<Component> connected_components(const BinaryMask& m, Connectivity connectivity) {
  const Vec3i d = m.dims;
  std::vector<Vec3i> offsets;
  for (int dz = -1; dz <= 1; ++dz) {
    for (int dy = -1; dy <= 1; ++dy) {
      for (int dx = -1; dx <= 1; ++dx) {
        const int manhattan = std::abs(dx) + std::abs(dy) + std::abs(dz);
        if (manhattan == 0) continue;
        if (connectivity == Connectivity::six && manhattan != 1) continue;
        offsets.push_back({dx, dy, dz});
      }
    }
  }

  std::vector<std::uint8_t> seen(m.data.size(), 0);
  std::vector<Component> out;
  std::deque<std::size_t> queue;
  for (std::size_t seed = 0; seed < m.data.size(); ++seed) {
    if (m.data[seed] == 0 || seen[seed] != 0) continue;
    Component c;
    seen[seed] = 1;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::size_t cur = queue.front();
      queue.pop_front();
      c.voxels.push_back(cur);
      const Vec3i p = unravel(d, cur);
      for (const auto& o : offsets) {
        const Vec3i q{p[0] + o[0], p[1] + o[1], p[2] + o[2]};
        if (!in_bounds(d, q)) continue;
        const std::size_t qi = linear_index(d, q[0], q[1], q[2]);
        if (m.data[qi] == 0 || seen[qi] != 0) continue;
        seen[qi] = 1;
        queue.push_back(qi);
      }
    }
    std::sort(c.voxels.begin(), c.voxels.end());
    out.push_back(std::move(c));
  }
  // Discovery order is by smallest linear index, so a stable sort keeps the tie rule.
  std::stable_sort(out.begin(), out.end(),
                   [](const Component& a, const Component& b) { return a.size() > b.size(); });
  return out;
}

}  // namespace volseg
