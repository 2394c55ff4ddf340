#include "volseg/manifest.hpp"

#include <fstream>

#include "volseg/error.hpp"

namespace volseg {

DatasetManifest DatasetManifest::only(Split split) const {
  DatasetManifest out;
  for (const auto& e : entries) {
    if (e.split_tag == split) out.entries.push_back(e);
  }
  return out;
}

void to_json(nlohmann::json& j, const ManifestEntry& e) {
  nlohmann::json classes = nlohmann::json::object();
  for (const auto& [id, name] : e.class_map) classes[std::to_string(id)] = name;
  j = nlohmann::json{{"image_path", e.image_path},
                     {"label_path", e.label_path},
                     {"class_map", classes},
                     {"modality_tag", e.modality_tag},
                     {"anatomy_tag", e.anatomy_tag},
                     {"split_tag", e.split_tag == Split::train ? "train" : "val"}};
}

void from_json(const nlohmann::json& j, ManifestEntry& e) {
  try {
    e.image_path = j.at("image_path").get<std::string>();
    e.label_path = j.at("label_path").get<std::string>();
    e.class_map.clear();
    for (const auto& [key, name] : j.at("class_map").items()) {
      e.class_map[std::stoi(key)] = name.get<std::string>();
    }
    e.modality_tag = j.value("modality_tag", "");
    e.anatomy_tag = j.value("anatomy_tag", "");
    const auto split = j.at("split_tag").get<std::string>();
    if (split == "train") {
      e.split_tag = Split::train;
    } else if (split == "val") {
      e.split_tag = Split::val;
    } else {
      throw Error(Errc::parse, "split_tag must be train or val, got " + split);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse, std::string("manifest entry: ") + ex.what());
  }
}

DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::io, "cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& ex) {
    throw Error(Errc::parse, std::string("manifest: ") + ex.what());
  }
  if (!j.is_array()) throw Error(Errc::parse, "manifest must be a JSON array");
  DatasetManifest m;
  const auto base = path.parent_path();
  for (const auto& item : j) {
    auto e = item.get<ManifestEntry>();
    for (auto* p : {&e.image_path, &e.label_path}) {
      std::filesystem::path fp(*p);
      if (fp.is_relative()) *p = (base / fp).lexically_normal().string();
    }
    m.entries.push_back(std::move(e));
  }
  return m;
}

void save_manifest(const std::filesystem::path& path, const DatasetManifest& m) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& e : m.entries) j.push_back(e);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(Errc::io, "cannot write manifest " + path.string());
  out << j.dump(2) << '\n';
}

std::string case_id(const ManifestEntry& e) {
  auto name = std::filesystem::path(e.label_path).filename().string();
  for (const char* ext : {".nii.gz", ".nii"}) {
    const std::string s(ext);
    if (name.size() > s.size() && name.ends_with(s)) return name.substr(0, name.size() - s.size());
  }
  return name;
}

}  // namespace volseg
