#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace volseg {

enum class Split { train, val };

struct ManifestEntry {
  std::string image_path;
  std::string label_path;
  std::map<std::int32_t, std::string> class_map;
  std::string modality_tag;
  std::string anatomy_tag;
  Split split_tag = Split::train;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;

  DatasetManifest only(Split split) const;
  bool operator==(const DatasetManifest&) const = default;
};

void to_json(nlohmann::json& j, const ManifestEntry& e);
void from_json(const nlohmann::json& j, ManifestEntry& e);

/// Relative paths are resolved against the manifest's directory.
DatasetManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const DatasetManifest& m);

std::string case_id(const ManifestEntry& e);

}  // namespace volseg
