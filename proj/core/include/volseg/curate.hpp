#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/manifest.hpp"
#include "volseg/voxgrid.hpp"

namespace volseg::curate {

struct Config {
  double min_volume_mm3 = 1000.0;     // 1 cm^3
  double min_extent_mm = 15.0;        // 1.5 cm, per axis
  double max_background_percent = 99.0;
  std::size_t keep_components = 5;
  Connectivity connectivity = Connectivity::twenty_six;
  std::vector<std::string> symmetric_classes;
  int midplane_axis = 0;
};

enum class Step { none, shape, background };

std::string_view to_string(Step s);

struct Record {
  std::string case_id;
  std::string class_name;
  Step step_triggered = Step::none;
  bool kept = true;
  std::size_t components_removed = 0;
  std::optional<std::pair<std::string, std::string>> symmetric_split;
  double foreground_fraction = 0.0;

  bool operator==(const Record&) const = default;
};

struct Report {
  std::vector<Record> records;
  std::vector<std::string> skipped;  // unreadable entries, with reason

  const Record* find(const std::string& case_id, const std::string& class_name) const;
};

void to_json(nlohmann::json& j, const Record& r);
void from_json(const nlohmann::json& j, Record& r);
nlohmann::json to_json(const Report& r);
Report report_from_json(const nlohmann::json& j);

/// Keep iff volume >= min_volume_mm3 and every extent >= min_extent_mm. Empty masks are dropped.
bool filter_by_shape(const BinaryMask& m, const Vec3d& spacing, const Config& cfg = {});

/// Per-class keep decision: drop when background strictly exceeds the threshold.
std::map<std::int32_t, bool> filter_by_background(const LabelVolume& lv, const Config& cfg = {});
bool keep_by_background(std::size_t foreground, std::size_t total, const Config& cfg = {});

struct Denoised {
  BinaryMask mask;
  std::size_t components_removed = 0;
};

/// Union of the cfg.keep_components largest connected components.
Denoised denoise_components(const BinaryMask& m, const Config& cfg = {});

struct SymmetricHalves {
  BinaryMask left;   // centroid below the midplane, or on it
  BinaryMask right;  // centroid above the midplane
};

SymmetricHalves split_symmetric(const LabelVolume& lv, std::int32_t class_id, int midplane_axis,
                                Connectivity connectivity = Connectivity::twenty_six);

std::string lateral_name(const std::string& side, const std::string& class_name);

/// All four steps applied to one label volume. Output class ids are deterministic.
LabelVolume curate_labels(const LabelVolume& lv, const std::string& case_name, const Config& cfg,
                          std::vector<Record>& records);

struct Result {
  DatasetManifest manifest;
  Report report;
};

/// Writes curated label files into out_dir; unreadable entries are skipped and logged.
Result curate_dataset(const DatasetManifest& manifest, const Config& cfg,
                      const std::filesystem::path& out_dir);

}  // namespace volseg::curate
