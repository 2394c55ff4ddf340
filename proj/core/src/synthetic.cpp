#include <algorithm>
#include <cmath>

#include "volseg/nifti.hpp"
#include "volseg/train.hpp"

namespace volseg::train {

std::string_view to_string(Shape s) {
  switch (s) {
    case Shape::ellipsoid: return "ellipsoid";
    case Shape::tube: return "tube";
    case Shape::multi_blob: return "multi_blob";
  }
  return "?";
}

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Vec3d random_direction(Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    Vec3d d{n(rng), n(rng), n(rng)};
    const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
    if (len > 1e-6) return {d[0] / len, d[1] / len, d[2] / len};
  }
}

// Signed membership test in millimetres around a centre.
struct Body {
  Shape shape = Shape::ellipsoid;
  Vec3d centre{};
  Vec3d semi{};           // ellipsoid
  Vec3d axis{};           // tube direction
  double radius = 0.0;    // tube / blob radius
  double half_len = 0.0;  // tube
  std::vector<Vec3d> blobs;

  bool contains(const Vec3d& x) const {
    switch (shape) {
      case Shape::ellipsoid: {
        double s = 0.0;
        for (int a = 0; a < 3; ++a) s += std::pow((x[a] - centre[a]) / semi[a], 2);
        return s <= 1.0;
      }
      case Shape::tube: {
        Vec3d r{x[0] - centre[0], x[1] - centre[1], x[2] - centre[2]};
        const double t = r[0] * axis[0] + r[1] * axis[1] + r[2] * axis[2];
        if (std::abs(t) > half_len) return false;
        double d2 = 0.0;
        for (int a = 0; a < 3; ++a) d2 += std::pow(r[a] - t * axis[a], 2);
        return d2 <= radius * radius;
      }
      case Shape::multi_blob: {
        for (const auto& b : blobs) {
          double d2 = 0.0;
          for (int a = 0; a < 3; ++a) d2 += std::pow(x[a] - b[a], 2);
          if (d2 <= radius * radius) return true;
        }
        return false;
      }
    }
    return false;
  }

  // Half-width of an axis-aligned box containing the body, relative to centre.
  Vec3d reach() const {
    switch (shape) {
      case Shape::ellipsoid: return semi;
      case Shape::tube: {
        Vec3d r{};
        for (int a = 0; a < 3; ++a) r[a] = half_len * std::abs(axis[a]) + radius;
        return r;
      }
      case Shape::multi_blob: {
        Vec3d r{radius, radius, radius};
        for (const auto& b : blobs) {
          for (int a = 0; a < 3; ++a) r[a] = std::max(r[a], std::abs(b[a] - centre[a]) + radius);
        }
        return r;
      }
    }
    return {};
  }
};

Body random_body(const SyntheticSpec& spec, Shape family, Rng& rng) {
  Body b;
  b.shape = family;
  const double d = uniform(rng, spec.size_min_mm, spec.size_max_mm);
  switch (family) {
    case Shape::ellipsoid:
      for (int a = 0; a < 3; ++a) b.semi[a] = 0.5 * d * uniform(rng, 0.8, 1.2);
      break;
    case Shape::tube:
      b.axis = random_direction(rng);
      b.radius = 0.5 * d * 0.7;
      b.half_len = d * uniform(rng, 0.7, 1.0);
      break;
    case Shape::multi_blob: {
      b.radius = 0.5 * d * 0.7;
      Vec3d p{0, 0, 0};
      b.blobs.push_back(p);
      for (int i = 0; i < 2; ++i) {
        const auto dir = random_direction(rng);
        for (int a = 0; a < 3; ++a) p[a] += dir[a] * b.radius * uniform(rng, 0.8, 1.2);
        b.blobs.push_back(p);
      }
      break;
    }
  }
  return b;
}

// Places the body fully inside the volume with a one-voxel margin.
bool place(Body& b, const Vec3d& extent, const Vec3d& spacing, Rng& rng) {
  const Vec3d r = b.reach();
  Vec3d c{};
  for (int a = 0; a < 3; ++a) {
    const double lo = r[a] + spacing[a];
    const double hi = extent[a] - r[a] - spacing[a];
    if (lo > hi) return false;
    c[a] = uniform(rng, lo, hi);
  }
  if (b.shape == Shape::multi_blob) {
    // Blob offsets were generated around the origin; recentre their bounding box on c.
    Vec3d lo{1e300, 1e300, 1e300};
    Vec3d hi{-1e300, -1e300, -1e300};
    for (const auto& p : b.blobs) {
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    }
    for (auto& p : b.blobs) {
      for (int a = 0; a < 3; ++a) p[a] += c[a] - 0.5 * (lo[a] + hi[a]);
    }
  }
  b.centre = c;
  return true;
}

}  // namespace

SyntheticCase synthesize_case(const SyntheticSpec& spec, Shape family, bool noisy, Rng& rng) {
  if (spec.objects < 1) throw Error(Errc::config, "synthetic spec needs at least one object");
  if (spec.size_min_mm <= 0.0 || spec.size_max_mm < spec.size_min_mm) throw Error(Errc::config, "bad size range");
  SyntheticCase sc;
  sc.volume = Volume(spec.dims, spec.spacing, 0.0F);
  sc.labels = LabelVolume(spec.dims, spec.spacing);
  sc.noisy_labels = noisy;
  const Vec3d extent{spec.dims[0] * spec.spacing[0], spec.dims[1] * spec.spacing[1], spec.dims[2] * spec.spacing[2]};
  const curate::Config shape_cfg;

  for (int obj = 1; obj <= spec.objects; ++obj) {
    const std::string name = std::string(to_string(family)) + (spec.objects > 1 ? "_" + std::to_string(obj) : "");
    BinaryMask mask;
    for (int attempt = 0;; ++attempt) {
      if (attempt == 200) throw Error(Errc::config, "synthetic target does not fit the volume");
      Body b = random_body(spec, family, rng);
      if (!place(b, extent, spec.spacing, rng)) continue;
      mask = BinaryMask(spec.dims);
      bool overlaps = false;
      for (std::size_t i = 0; i < mask.size(); ++i) {
        const Vec3i p = unravel(spec.dims, i);
        const Vec3d x{(p[0] + 0.5) * spec.spacing[0], (p[1] + 0.5) * spec.spacing[1], (p[2] + 0.5) * spec.spacing[2]};
        if (!b.contains(x)) continue;
        mask.data[i] = 1;
        overlaps = overlaps || sc.labels.data[i] != 0;
      }
      if (!overlaps && curate::filter_by_shape(mask, spec.spacing, shape_cfg) &&
          connected_components(mask).size() == 1) {
        break;
      }
    }
    const auto contrast = static_cast<float>(uniform(rng, spec.contrast_min, spec.contrast_max));
    for (std::size_t i = 0; i < mask.size(); ++i) {
      if (!mask.data[i]) continue;
      sc.labels.data[i] = obj;
      sc.volume.data[i] = contrast;
    }
    sc.labels.class_map[obj] = name;
  }

  if (spec.noise > 0.0) {
    std::normal_distribution<float> n(0.0F, static_cast<float>(spec.noise));
    for (auto& x : sc.volume.data) x += n(rng);
  }

  if (noisy) {
    // Isolated label-only specks of a few voxels, invisible in the image.
    for (int s = 0; s < spec.speckles; ++s) {
      for (int attempt = 0; attempt < 100; ++attempt) {
        Vec3i c{};
        for (int a = 0; a < 3; ++a) c[a] = std::uniform_int_distribution<int>(1, spec.dims[a] - 3)(rng);
        bool clear = true;
        for (int dz = -1; dz <= 2 && clear; ++dz)
          for (int dy = -1; dy <= 2 && clear; ++dy)
            for (int dx = -1; dx <= 2 && clear; ++dx) {
              const Vec3i q{c[0] + dx, c[1] + dy, c[2] + dz};
              if (in_bounds(spec.dims, q) && sc.labels.at(q) != 0) clear = false;
            }
        if (!clear) continue;
        for (int dz = 0; dz < 2; ++dz)
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) sc.labels.at(c[0] + dx, c[1] + dy, c[2] + dz) = 1;
        break;
      }
    }
  }
  return sc;
}

DatasetManifest make_synthetic_dataset(const SyntheticSpec& spec, Rng& rng, const std::filesystem::path& out_dir) {
  if (spec.count < 0) throw Error(Errc::config, "negative case count");
  if (spec.families.empty()) throw Error(Errc::config, "no shape families");
  std::filesystem::create_directories(out_dir / "images");
  std::filesystem::create_directories(out_dir / "labels");
  const int n_val = static_cast<int>(std::lround(spec.count * spec.val_fraction));
  const int n_noisy = static_cast<int>(std::lround(spec.count * spec.label_noise_fraction));
  DatasetManifest relative;
  DatasetManifest absolute;
  for (int i = 0; i < spec.count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d", i);
    const Shape family = spec.families[static_cast<std::size_t>(i) % spec.families.size()];
    // Noisy cases are spread evenly over the index range.
    const bool noisy = n_noisy > 0 && (i * n_noisy) / spec.count != ((i + 1) * n_noisy) / spec.count;
    const auto sc = synthesize_case(spec, family, noisy, rng);
    const std::string img = std::string("images/") + name + ".nii.gz";
    const std::string lab = std::string("labels/") + name + ".nii.gz";
    nifti::write_volume(out_dir / img, sc.volume);
    nifti::write_labels(out_dir / lab, sc.labels);
    ManifestEntry e;
    e.image_path = img;
    e.label_path = lab;
    e.class_map = sc.labels.class_map;
    e.modality_tag = spec.modality_tag;
    e.anatomy_tag = spec.anatomy_tag;
    e.split_tag = i >= spec.count - n_val ? Split::val : Split::train;
    relative.entries.push_back(e);
    e.image_path = (out_dir / img).string();
    e.label_path = (out_dir / lab).string();
    absolute.entries.push_back(std::move(e));
  }
  save_manifest(out_dir / "manifest.json", relative);
  return absolute;
}

}  // namespace volseg::train
