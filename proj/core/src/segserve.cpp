#include "volseg/segserve.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <random>

#include "volseg/nifti.hpp"

namespace volseg::serve {

std::vector<std::uint64_t> rle_encode(std::span<const std::uint8_t> mask) {
  std::vector<std::uint64_t> runs;
  bool current = false;
  std::uint64_t n = 0;
  for (std::uint8_t x : mask) {
    if ((x != 0) == current) {
      ++n;
      continue;
    }
    runs.push_back(n);
    current = !current;
    n = 1;
  }
  runs.push_back(n);
  return runs;
}

std::vector<std::uint8_t> rle_decode(std::span<const std::uint64_t> runs, std::size_t total) {
  std::vector<std::uint8_t> out;
  out.reserve(total);
  std::uint8_t value = 0;
  for (auto n : runs) {
    if (n > total - out.size()) throw Error(Errc::parse, "run lengths exceed the voxel count");
    out.insert(out.end(), n, value);
    value ^= 1;
  }
  if (out.size() != total) throw Error(Errc::parse, "run lengths do not cover the voxel count");
  return out;
}

std::string_view to_string(Axis a) {
  switch (a) {
    case Axis::axial: return "axial";
    case Axis::coronal: return "coronal";
    case Axis::sagittal: return "sagittal";
  }
  return "?";
}

Axis parse_axis(std::string_view s) {
  if (s == "axial") return Axis::axial;
  if (s == "coronal") return Axis::coronal;
  if (s == "sagittal") return Axis::sagittal;
  throw Error(Errc::out_of_bounds, "unknown axis " + std::string(s));
}

namespace {

// Volume axes used for (u, v, index) in each frame.
std::array<int, 3> frame_axes(Axis a) {
  switch (a) {
    case Axis::axial: return {0, 1, 2};
    case Axis::coronal: return {0, 2, 1};
    case Axis::sagittal: return {1, 2, 0};
  }
  return {0, 1, 2};
}

}  // namespace

SliceFrame slice_frame(const Vec3i& dims, Axis axis, int index) {
  const auto ax = frame_axes(axis);
  if (index < 0 || index >= dims[ax[2]]) {
    throw Error(Errc::out_of_bounds, "slice index " + std::to_string(index) + " outside " + std::string(to_string(axis)) +
                                         " extent " + std::to_string(dims[ax[2]]));
  }
  return {axis, index, dims[ax[0]], dims[ax[1]]};
}

Vec3i pixel_to_voxel(const SliceFrame& f, int u, int v) {
  if (u < 0 || v < 0 || u >= f.width || v >= f.height) throw Error(Errc::out_of_bounds, "pixel outside slice");
  const auto ax = frame_axes(f.axis);
  Vec3i p{};
  p[ax[0]] = u;
  p[ax[1]] = v;
  p[ax[2]] = f.index;
  return p;
}

std::array<int, 2> voxel_to_pixel(const SliceFrame& f, const Vec3i& voxel) {
  const auto ax = frame_axes(f.axis);
  if (voxel[ax[2]] != f.index) throw Error(Errc::out_of_bounds, "voxel is not on this slice");
  return {voxel[ax[0]], voxel[ax[1]]};
}

nlohmann::json to_json(const SliceFrame& f) {
  static constexpr const char* kNames[] = {"x", "y", "z"};
  const auto ax = frame_axes(f.axis);
  return {{"axis", to_string(f.axis)},
          {"index", f.index},
          {"width", f.width},
          {"height", f.height},
          {"u", kNames[ax[0]]},
          {"v", kNames[ax[1]]},
          {"fixed", kNames[ax[2]]},
          {"order", "row-major, pixel (u, v) at v * width + u"}};
}

SliceImage render_slice(const Volume& vol, const BinaryMask* mask, Axis axis, int index, double window, double level) {
  SliceImage img;
  img.frame = slice_frame(vol.dims, axis, index);
  const auto& f = img.frame;
  img.pixels.resize(static_cast<std::size_t>(f.width) * f.height);
  std::vector<std::uint8_t> m;
  if (mask != nullptr) m.resize(img.pixels.size());
  const double lo = level - window / 2.0;
  for (int v = 0; v < f.height; ++v) {
    for (int u = 0; u < f.width; ++u) {
      const Vec3i p = pixel_to_voxel(f, u, v);
      const double x = vol.at(p);
      double t = 0.0;
      if (window > 0.0) {
        t = std::clamp((x - lo) / window, 0.0, 1.0);
      } else {
        t = x >= level ? 1.0 : 0.0;
      }
      const std::size_t at = static_cast<std::size_t>(v) * f.width + u;
      img.pixels[at] = static_cast<std::uint8_t>(std::lround(255.0 * t));
      if (mask != nullptr) m[at] = mask->at(p);
    }
  }
  if (mask != nullptr) img.mask_rle = rle_encode(m);
  return img;
}

nlohmann::json to_json(const MaskSummary& s) {
  nlohmann::json j{{"clicks", s.clicks}, {"mask_voxels", s.mask_voxels}, {"bbox", nullptr}};
  if (s.bbox) j["bbox"] = {{"min", s.bbox->min_corner}, {"max", s.bbox->max_corner}};
  if (s.dice) j["dice"] = *s.dice;
  return j;
}

SessionManager::SessionManager(infer::PatchModel model, infer::Options options, Limits limits)
    : model_(std::move(model)), options_(std::move(options)), limits_(limits) {
  if (limits_.max_sessions == 0) throw Error(Errc::config, "max_sessions must be positive");
  salt_ = (static_cast<std::uint64_t>(std::random_device{}()) << 32) ^ std::random_device{}();
}

namespace {

std::string make_id(std::uint64_t salt, std::uint64_t counter) {
  // splitmix64 of the salted counter: unique per manager, opaque to clients.
  std::uint64_t z = salt + counter * 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  z ^= z >> 31;
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(z));
  return buf;
}

MaskSummary summarize(const Session& s) {
  MaskSummary out;
  out.clicks = s.clicks.size();
  if (!s.mask) return out;
  out.mask_voxels = s.mask->count();
  if (out.mask_voxels > 0) out.bbox = bounding_box(*s.mask);
  if (s.gt) out.dice = dice(*s.mask, *s.gt);
  return out;
}

}  // namespace

SessionInfo SessionManager::create(std::span<const std::uint8_t> volume,
                                   std::optional<std::span<const std::uint8_t>> gt) {
  if (volume.size() > limits_.max_volume_bytes) throw Error(Errc::payload_too_large, "volume upload exceeds limit");
  const nifti::Image img = nifti::decode(volume);
  if (voxel_count(img.dims) * sizeof(float) > limits_.max_volume_bytes) {
    throw Error(Errc::payload_too_large, "decoded volume exceeds limit");
  }
  auto s = std::make_shared<Session>();
  s->volume = nifti::to_volume(img);
  s->volume.validate();
  if (gt) {
    const LabelVolume lv = nifti::to_labels(nifti::decode(*gt));
    if (lv.dims != s->volume.dims) throw Error(Errc::shape, "ground truth dims differ from the volume");
    BinaryMask m(lv.dims);
    for (std::size_t i = 0; i < m.size(); ++i) m.data[i] = lv.data[i] != 0;
    s->gt = std::move(m);
  }
  s->normalized = options_.normalization ? intensity::normalize(s->volume, *options_.normalization) : s->volume;
  s->created_at = std::chrono::system_clock::now();

  std::lock_guard lock(mu_);
  s->id = make_id(salt_, ++counter_);
  while (sessions_.size() >= limits_.max_sessions) {
    sessions_.erase(lru_.back());
    lru_.pop_back();
  }
  lru_.push_front(s->id);
  sessions_.emplace(s->id, std::make_pair(s, lru_.begin()));
  return {s->id, s->volume.dims, s->volume.spacing};
}

std::shared_ptr<Session> SessionManager::get(const std::string& id) {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw Error(Errc::not_found, "no session " + id);
  lru_.splice(lru_.begin(), lru_, it->second.second);
  return it->second.first;
}

namespace {

std::optional<BinaryMask> predict(const infer::PatchModel& model, infer::Options opt, const Session& s,
                                  const std::vector<PointPrompt>& clicks) {
  if (clicks.empty()) return std::nullopt;
  opt.normalization.reset();  // the session keeps a normalised copy
  return infer::segment_volume(s.normalized, clicks, model, opt).mask;
}

}  // namespace

MaskSummary SessionManager::add_click(const std::string& id, const PointPrompt& click) {
  auto s = get(id);
  std::unique_lock busy(s->busy, std::try_to_lock);
  if (!busy.owns_lock()) throw Error(Errc::busy, "session " + id + " is running inference");
  if (!in_bounds(s->volume.dims, click.coord)) throw Error(Errc::out_of_bounds, "click outside the volume");
  std::vector<PointPrompt> next;
  {
    std::lock_guard d(s->data);
    if (s->clicks.empty() && !click.positive()) throw Error(Errc::protocol, "the first click must be positive");
    next = s->clicks;
  }
  next.push_back(click);
  auto mask = predict(model_, options_, *s, next);
  std::lock_guard d(s->data);
  s->clicks = std::move(next);
  s->mask = std::move(mask);
  return summarize(*s);
}

MaskSummary SessionManager::undo_click(const std::string& id) {
  auto s = get(id);
  std::unique_lock busy(s->busy, std::try_to_lock);
  if (!busy.owns_lock()) throw Error(Errc::busy, "session " + id + " is running inference");
  std::vector<PointPrompt> next;
  {
    std::lock_guard d(s->data);
    if (s->clicks.empty()) throw Error(Errc::nothing_to_undo, "no clicks to undo");
    next.assign(s->clicks.begin(), s->clicks.end() - 1);
  }
  auto mask = predict(model_, options_, *s, next);
  std::lock_guard d(s->data);
  s->clicks = std::move(next);
  s->mask = std::move(mask);
  return summarize(*s);
}

SliceImage SessionManager::slice(const std::string& id, Axis axis, int index, std::optional<double> window,
                                 std::optional<double> level) {
  auto s = get(id);
  const auto [lo, hi] = std::minmax_element(s->volume.data.begin(), s->volume.data.end());
  const double w = window.value_or(*hi > *lo ? static_cast<double>(*hi) - *lo : 1.0);
  const double l = level.value_or(0.5 * (static_cast<double>(*hi) + *lo));
  std::lock_guard d(s->data);
  return render_slice(s->volume, s->mask ? &*s->mask : nullptr, axis, index, w, l);
}

BinaryMask SessionManager::mask(const std::string& id) {
  auto s = get(id);
  std::lock_guard d(s->data);
  if (!s->mask) throw Error(Errc::not_ready, "no mask yet; add a click first");
  return *s->mask;
}

std::vector<std::uint8_t> SessionManager::mask_nifti(const std::string& id) {
  auto s = get(id);
  BinaryMask m = mask(id);
  return nifti::encode(nifti::from_mask(m, s->volume.spacing), nifti::DataType::uint8, true);
}

std::vector<PointPrompt> SessionManager::clicks(const std::string& id) {
  auto s = get(id);
  std::lock_guard d(s->data);
  return s->clicks;
}

std::size_t SessionManager::size() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

ServerConfig ServerConfig::from_env() {
  ServerConfig c;
  auto number = [](const char* name, auto fallback) {
    const char* v = std::getenv(name);
    if (v == nullptr || *v == '\0') return fallback;
    char* end = nullptr;
    const long long x = std::strtoll(v, &end, 10);
    if (*end != '\0' || x <= 0) throw Error(Errc::config, std::string(name) + " must be a positive integer");
    return static_cast<decltype(fallback)>(x);
  };
  if (const char* ck = std::getenv("SEG_CHECKPOINT"); ck != nullptr && *ck != '\0') c.checkpoint = ck;
  c.max_sessions = number("SEG_MAX_SESSIONS", c.max_sessions);
  c.max_volume_mb = number("SEG_MAX_VOLUME_MB", c.max_volume_mb);
  c.port = number("SEG_PORT", c.port);
  return c;
}

int http_status(Errc code) {
  switch (code) {
    case Errc::parse: return 422;
    case Errc::payload_too_large: return 413;
    case Errc::not_found: return 404;
    case Errc::busy: return 429;
    case Errc::protocol:
    case Errc::nothing_to_undo:
    case Errc::not_ready: return 409;
    case Errc::out_of_bounds:
    case Errc::shape:
    case Errc::config: return 400;
    default: return 500;
  }
}

}  // namespace volseg::serve
