#pragma once

#include <array>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/infer.hpp"
#include "volseg/voxgrid.hpp"

namespace volseg::serve {

// Run-length masks ------------------------------------------------------------

/// Linear voxel order (x fastest), alternating background/foreground run lengths,
/// starting with a background run that may be zero.
std::vector<std::uint64_t> rle_encode(std::span<const std::uint8_t> mask);
std::vector<std::uint8_t> rle_decode(std::span<const std::uint64_t> runs, std::size_t total);

// Slice frames ----------------------------------------------------------------

enum class Axis { axial, coronal, sagittal };

std::string_view to_string(Axis a);
/// Throws Errc::out_of_bounds on an unknown name.
Axis parse_axis(std::string_view s);

/// Pixel (u, v) of a slice is stored at v * width + u.
///   axial    (index on z): u = x, v = y
///   coronal  (index on y): u = x, v = z
///   sagittal (index on x): u = y, v = z
struct SliceFrame {
  Axis axis = Axis::axial;
  int index = 0;
  int width = 0;
  int height = 0;
};

/// Throws Errc::out_of_bounds when the index is outside the axis extent.
SliceFrame slice_frame(const Vec3i& dims, Axis axis, int index);
Vec3i pixel_to_voxel(const SliceFrame& f, int u, int v);
/// Throws Errc::out_of_bounds if the voxel is not on the frame's slice.
std::array<int, 2> voxel_to_pixel(const SliceFrame& f, const Vec3i& voxel);

nlohmann::json to_json(const SliceFrame& f);

struct SliceImage {
  SliceFrame frame;
  std::vector<std::uint8_t> pixels;      // 8-bit grey, row-major
  std::vector<std::uint64_t> mask_rle;  // same pixel order; empty when no mask exists
};

/// grey = round(255 * clamp((x - (level - window / 2)) / window, 0, 1)); window <= 0 is a step at level.
SliceImage render_slice(const Volume& v, const BinaryMask* mask, Axis axis, int index, double window, double level);

// Sessions --------------------------------------------------------------------

struct MaskSummary {
  std::size_t clicks = 0;
  std::size_t mask_voxels = 0;
  std::optional<BoundingBox> bbox;
  std::optional<double> dice;
};

nlohmann::json to_json(const MaskSummary& s);

struct SessionInfo {
  std::string id;
  Vec3i dims{};
  Vec3d spacing{};
};

struct Session {
  std::string id;
  Volume volume;  // canonical orientation, raw intensities
  Volume normalized;
  std::optional<BinaryMask> gt;
  std::vector<PointPrompt> clicks;
  std::optional<BinaryMask> mask;
  std::chrono::system_clock::time_point created_at;
  std::mutex busy;  // held for the duration of any state-mutating request
  std::mutex data;  // guards clicks and mask
};

/// Thread-safe registry of sessions with least-recently-used eviction.
class SessionManager {
 public:
  struct Limits {
    std::size_t max_sessions = 8;
    std::size_t max_volume_bytes = 256u << 20;
  };

  SessionManager(infer::PatchModel model, infer::Options options, Limits limits);

  /// NIfTI bytes, raw or gzip. Throws Errc::parse, Errc::payload_too_large, Errc::shape (gt dims).
  SessionInfo create(std::span<const std::uint8_t> volume, std::optional<std::span<const std::uint8_t>> gt = {});
  /// Throws Errc::not_found, Errc::busy, Errc::out_of_bounds, Errc::protocol.
  MaskSummary add_click(const std::string& id, const PointPrompt& click);
  /// Throws Errc::not_found, Errc::busy, Errc::nothing_to_undo.
  MaskSummary undo_click(const std::string& id);
  SliceImage slice(const std::string& id, Axis axis, int index, std::optional<double> window,
                   std::optional<double> level);
  /// Throws Errc::not_ready before the first click.
  BinaryMask mask(const std::string& id);
  std::vector<std::uint8_t> mask_nifti(const std::string& id);
  std::vector<PointPrompt> clicks(const std::string& id);
  std::size_t size() const;

 private:
  std::shared_ptr<Session> get(const std::string& id);

  infer::PatchModel model_;
  infer::Options options_;
  Limits limits_;
  mutable std::mutex mu_;
  std::list<std::string> lru_;  // most recent first
  std::map<std::string, std::pair<std::shared_ptr<Session>, std::list<std::string>::iterator>> sessions_;
  std::uint64_t counter_ = 0;
  std::uint64_t salt_ = 0;
};

// HTTP --------------------------------------------------------------------------

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t max_sessions = 8;
  std::size_t max_volume_mb = 256;
  std::optional<std::filesystem::path> checkpoint;

  /// Reads SEG_CHECKPOINT, SEG_MAX_SESSIONS, SEG_MAX_VOLUME_MB and SEG_PORT over the defaults.
  static ServerConfig from_env();
};

/// HTTP status for an error code.
int http_status(Errc code);

class Server {
 public:
  explicit Server(SessionManager& sessions, std::size_t max_payload_bytes = 512u << 20);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Blocks until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace volseg::serve
