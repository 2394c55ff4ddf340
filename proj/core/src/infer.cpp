#include "volseg/infer.hpp"

#include <algorithm>
#include <set>
#include <tuple>

namespace volseg::infer {

Vec3i crop_origin(const Vec3i& dims, const Vec3i& p, int size) {
  Vec3i o{};
  for (int a = 0; a < 3; ++a) {
    o[a] = dims[a] < size ? -((size - dims[a]) / 2) : std::clamp(p[a] - size / 2, 0, dims[a] - size);
  }
  return o;
}

Volume extract(const Volume& v, const Vec3i& origin, int size) {
  Volume out({size, size, size}, v.spacing, 0.0F);
  out.orientation = v.orientation;
  for (int k = 0; k < size; ++k) {
    const int z = origin[2] + k;
    if (z < 0 || z >= v.dims[2]) continue;
    for (int j = 0; j < size; ++j) {
      const int y = origin[1] + j;
      if (y < 0 || y >= v.dims[1]) continue;
      for (int i = 0; i < size; ++i) {
        const int x = origin[0] + i;
        if (x < 0 || x >= v.dims[0]) continue;
        out.at(i, j, k) = v.at(x, y, z);
      }
    }
  }
  return out;
}

Crop crop_patch(const Volume& v, const PointPrompt& p, int size) {
  if (!in_bounds(v.dims, p.coord)) throw Error(Errc::out_of_bounds, "crop_patch: point outside volume");
  const Vec3i o = crop_origin(v.dims, p.coord, size);
  return {extract(v, o, size), o};
}

std::vector<Direction> faces_with_foreground(const BinaryMask& pred, int margin) {
  bool hit[3][2] = {};
  const int m = std::max(margin, 1);
  for (int k = 0; k < pred.dims[2]; ++k) {
    for (int j = 0; j < pred.dims[1]; ++j) {
      for (int i = 0; i < pred.dims[0]; ++i) {
        if (!pred.at(i, j, k)) continue;
        const int p[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          if (p[a] < m) hit[a][0] = true;
          if (p[a] >= pred.dims[a] - m) hit[a][1] = true;
        }
      }
    }
  }
  std::vector<Direction> out;
  for (int a = 0; a < 3; ++a) {
    if (hit[a][0]) out.push_back({a, -1});
    if (hit[a][1]) out.push_back({a, +1});
  }
  return out;
}

BinaryMask fuse(std::span<const WindowProb> windows, const Vec3i& dims, double threshold) {
  // Accumulate in a fixed window order so the floating-point sums do not depend on input order.
  std::vector<const WindowProb*> order;
  for (const auto& w : windows) order.push_back(&w);
  std::stable_sort(order.begin(), order.end(), [](const WindowProb* a, const WindowProb* b) {
    return std::tie(a->origin[2], a->origin[1], a->origin[0]) < std::tie(b->origin[2], b->origin[1], b->origin[0]);
  });
  Grid<double> sum(dims, 0.0);
  Grid<int> visits(dims, 0);
  for (const auto* w : order) {
    const auto& g = w->prob;
    for (int k = 0; k < g.dims[2]; ++k) {
      const int z = w->origin[2] + k;
      if (z < 0 || z >= dims[2]) continue;
      for (int j = 0; j < g.dims[1]; ++j) {
        const int y = w->origin[1] + j;
        if (y < 0 || y >= dims[1]) continue;
        for (int i = 0; i < g.dims[0]; ++i) {
          const int x = w->origin[0] + i;
          if (x < 0 || x >= dims[0]) continue;
          sum.at(x, y, z) += g.at(i, j, k);
          visits.at(x, y, z) += 1;
        }
      }
    }
  }
  BinaryMask out(dims);
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (visits.data[i] > 0 && sum.data[i] / visits.data[i] > threshold) out.data[i] = 1;
  }
  return out;
}

namespace {

std::vector<PointPrompt> localize(std::span<const PointPrompt> clicks, const Vec3i& origin, int size) {
  std::vector<PointPrompt> local;
  for (const auto& c : clicks) {
    const Vec3i q{c.coord[0] - origin[0], c.coord[1] - origin[1], c.coord[2] - origin[2]};
    if (in_bounds({size, size, size}, q)) local.push_back({q, c.label});
  }
  return local;
}

// Shift by half a window, kept inside the volume and keeping the initial click inside the window.
std::optional<Vec3i> shifted(const Vec3i& dims, const Vec3i& origin, const Vec3i& click, Direction d, int size) {
  if (dims[d.axis] <= size) return std::nullopt;
  Vec3i o = origin;
  int v = origin[d.axis] + d.sign * (size / 2);
  v = std::clamp(v, 0, dims[d.axis] - size);
  v = std::clamp(v, click[d.axis] - size + 1, click[d.axis]);
  if (v == origin[d.axis]) return std::nullopt;
  o[d.axis] = v;
  return o;
}

}  // namespace

Result segment_volume(const Volume& v, std::span<const PointPrompt> clicks, const PatchModel& model,
                      const Options& opt) {
  if (clicks.empty()) throw Error(Errc::protocol, "segment_volume: no clicks");
  if (!clicks.front().positive()) throw Error(Errc::protocol, "segment_volume: first click must be positive");
  if (!in_bounds(v.dims, clicks.front().coord)) throw Error(Errc::out_of_bounds, "segment_volume: click outside volume");
  if (opt.patch_size < 2) throw Error(Errc::config, "segment_volume: patch size too small");

  const Volume norm = opt.normalization ? intensity::normalize(v, *opt.normalization) : v;
  const int size = opt.patch_size;
  const Vec3i click = clicks.front().coord;
  const Vec3i o0 = crop_origin(v.dims, click, size);

  auto run = [&](const Vec3i& origin) {
    const auto local = localize(clicks, origin, size);
    Grid<double> prob = model(extract(norm, origin, size), local);
    if (prob.dims != Vec3i{size, size, size}) throw Error(Errc::shape, "segment_volume: model returned wrong dims");
    return WindowProb{origin, std::move(prob)};
  };

  std::vector<WindowProb> windows;
  windows.push_back(run(o0));

  BinaryMask first(windows[0].prob.dims);
  for (std::size_t i = 0; i < first.data.size(); ++i) {
    const Vec3i p = unravel(first.dims, i);
    const Vec3i g{p[0] + o0[0], p[1] + o0[1], p[2] + o0[2]};
    // Padded voxels never count as foreground.
    if (in_bounds(v.dims, g) && windows[0].prob.data[i] > opt.threshold) first.data[i] = 1;
  }

  std::set<Vec3i> visited{o0};
  for (const auto d : faces_with_foreground(first, opt.face_margin)) {
    const auto o = shifted(v.dims, o0, click, d, size);
    if (!o || !visited.insert(*o).second) continue;
    windows.push_back(run(*o));
  }

  Result res;
  res.mask = fuse(windows, v.dims, opt.threshold);
  for (const auto& w : windows) res.windows.push_back(w.origin);
  return res;
}

PatchModel network_model(const net::ModelState& state) {
  return [&state](const Volume& patch, std::span<const PointPrompt> local) { return net::forward(patch, local, state); };
}

Result segment_volume(const Volume& v, std::span<const PointPrompt> clicks, const net::ModelState& state,
                      double threshold) {
  Options opt;
  opt.patch_size = state.config().patch_input_size;
  opt.threshold = threshold;
  return segment_volume(v, clicks, network_model(state), opt);
}

}  // namespace volseg::infer
