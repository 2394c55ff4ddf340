#include "volseg/curate.hpp"

#include <algorithm>
#include <iostream>

#include "volseg/nifti.hpp"

namespace volseg::curate {

std::string_view to_string(Step s) {
  switch (s) {
    case Step::none: return "none";
    case Step::shape: return "shape";
    case Step::background: return "background";
  }
  return "none";
}

const Record* Report::find(const std::string& case_name, const std::string& class_name) const {
  for (const auto& r : records) {
    if (r.case_id == case_name && r.class_name == class_name) return &r;
  }
  return nullptr;
}

void to_json(nlohmann::json& j, const Record& r) {
  j = nlohmann::json{{"case_id", r.case_id},
                     {"class_name", r.class_name},
                     {"step_triggered", std::string(to_string(r.step_triggered))},
                     {"kept", r.kept},
                     {"components_removed", r.components_removed},
                     {"foreground_fraction", r.foreground_fraction}};
  if (r.symmetric_split) {
    j["symmetric_split"] = {r.symmetric_split->first, r.symmetric_split->second};
  } else {
    j["symmetric_split"] = nullptr;
  }
}

void from_json(const nlohmann::json& j, Record& r) {
  r.case_id = j.at("case_id").get<std::string>();
  r.class_name = j.at("class_name").get<std::string>();
  const auto step = j.at("step_triggered").get<std::string>();
  r.step_triggered = step == "shape" ? Step::shape : step == "background" ? Step::background : Step::none;
  r.kept = j.at("kept").get<bool>();
  r.components_removed = j.at("components_removed").get<std::size_t>();
  r.foreground_fraction = j.value("foreground_fraction", 0.0);
  r.symmetric_split.reset();
  if (j.contains("symmetric_split") && j["symmetric_split"].is_array()) {
    r.symmetric_split = std::make_pair(j["symmetric_split"][0].get<std::string>(),
                                       j["symmetric_split"][1].get<std::string>());
  }
}

nlohmann::json to_json(const Report& r) {
  return {{"records", r.records}, {"skipped", r.skipped}};
}

Report report_from_json(const nlohmann::json& j) {
  Report r;
  r.records = j.at("records").get<std::vector<Record>>();
  r.skipped = j.value("skipped", std::vector<std::string>{});
  return r;
}

bool filter_by_shape(const BinaryMask& m, const Vec3d& spacing, const Config& cfg) {
  if (m.empty()) return false;
  if (physical_volume(m, spacing) < cfg.min_volume_mm3) return false;
  const auto ext = bounding_extent(m, spacing);
  return std::all_of(ext.begin(), ext.end(), [&](double e) { return e >= cfg.min_extent_mm; });
}

bool keep_by_background(std::size_t foreground, std::size_t total, const Config& cfg) {
  // Integer-valued doubles keep the 99% boundary exact.
  const double background = static_cast<double>(total - foreground);
  return !(background * 100.0 > cfg.max_background_percent * static_cast<double>(total));
}

std::map<std::int32_t, bool> filter_by_background(const LabelVolume& lv, const Config& cfg) {
  std::map<std::int32_t, std::size_t> counts;
  for (const auto& [id, name] : lv.class_map) counts[id] = 0;
  for (auto v : lv.data) {
    if (v != 0) ++counts[v];
  }
  std::map<std::int32_t, bool> keep;
  for (const auto& [id, n] : counts) keep[id] = keep_by_background(n, lv.data.size(), cfg);
  return keep;
}

Denoised denoise_components(const BinaryMask& m, const Config& cfg) {
  auto comps = connected_components(m, cfg.connectivity);
  if (comps.size() <= cfg.keep_components) return {m, 0};
  Denoised out{BinaryMask(m.dims), comps.size() - cfg.keep_components};
  for (std::size_t c = 0; c < cfg.keep_components; ++c) {
    for (auto v : comps[c].voxels) out.mask.data[v] = 1;
  }
  return out;
}

SymmetricHalves split_symmetric(const LabelVolume& lv, std::int32_t class_id, int midplane_axis,
                                Connectivity connectivity) {
  if (midplane_axis < 0 || midplane_axis > 2) throw Error(Errc::config, "midplane axis must be 0, 1 or 2");
  const auto mask = lv.one_hot(class_id);
  SymmetricHalves halves{BinaryMask(lv.dims), BinaryMask(lv.dims)};
  const long long span = lv.dims[midplane_axis] - 1;
  for (const auto& comp : connected_components(mask, connectivity)) {
    long long sum = 0;
    for (auto v : comp.voxels) sum += unravel(lv.dims, v)[midplane_axis];
    // centroid vs (n-1)/2, compared exactly: 2*sum vs span*count
    const long long lhs = 2 * sum;
    const long long rhs = span * static_cast<long long>(comp.size());
    BinaryMask& side = lhs > rhs ? halves.right : halves.left;
    for (auto v : comp.voxels) side.data[v] = 1;
  }
  return halves;
}

std::string lateral_name(const std::string& side, const std::string& class_name) {
  return side + "_" + class_name;
}

namespace {

std::size_t count_label(const LabelVolume& lv, std::int32_t id) {
  return static_cast<std::size_t>(std::count(lv.data.begin(), lv.data.end(), id));
}

// Steps 1 and 2 for a single mask; returns the triggering step or none.
Step threshold_check(const BinaryMask& m, const Vec3d& spacing, const Config& cfg) {
  if (!filter_by_shape(m, spacing, cfg)) return Step::shape;
  if (!keep_by_background(m.count(), m.size(), cfg)) return Step::background;
  return Step::none;
}

}  // namespace

LabelVolume curate_labels(const LabelVolume& lv, const std::string& case_name, const Config& cfg,
                          std::vector<Record>& records) {
  lv.validate();
  LabelVolume out(lv.dims, lv.spacing);
  const auto background_keep = filter_by_background(lv, cfg);
  std::int32_t next_id = lv.class_map.empty() ? 1 : lv.class_map.rbegin()->first + 1;

  auto emit = [&](const BinaryMask& m, std::int32_t id, const std::string& name) {
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      if (m.data[i] != 0) out.data[i] = id;
    }
    out.class_map[id] = name;
  };

  for (const auto& [id, name] : lv.class_map) {
    Record rec;
    rec.case_id = case_name;
    rec.class_name = name;
    const auto mask = lv.one_hot(id);
    rec.foreground_fraction = static_cast<double>(count_label(lv, id)) / static_cast<double>(lv.data.size());

    if (!filter_by_shape(mask, lv.spacing, cfg)) {
      rec.step_triggered = Step::shape;
      rec.kept = false;
      records.push_back(rec);
      continue;
    }
    if (!background_keep.at(id)) {
      rec.step_triggered = Step::background;
      rec.kept = false;
      records.push_back(rec);
      continue;
    }
    auto denoised = denoise_components(mask, cfg);
    rec.components_removed = denoised.components_removed;

    const bool symmetric = std::find(cfg.symmetric_classes.begin(), cfg.symmetric_classes.end(), name) !=
                           cfg.symmetric_classes.end();
    if (!symmetric) {
      // Denoising can shrink a mask below the thresholds; re-checking keeps the pipeline idempotent.
      rec.step_triggered = threshold_check(denoised.mask, lv.spacing, cfg);
      rec.kept = rec.step_triggered == Step::none;
      if (rec.kept) emit(denoised.mask, id, name);
      records.push_back(rec);
      continue;
    }

    LabelVolume single(lv.dims, lv.spacing);
    for (std::size_t i = 0; i < single.data.size(); ++i) single.data[i] = denoised.mask.data[i] != 0 ? 1 : 0;
    single.class_map[1] = name;
    auto halves = split_symmetric(single, 1, cfg.midplane_axis, cfg.connectivity);
    const auto left_name = lateral_name("left", name);
    const auto right_name = lateral_name("right", name);
    rec.symmetric_split = std::make_pair(left_name, right_name);
    records.push_back(rec);
    for (const auto& [half, half_name] : {std::pair{&halves.left, left_name}, std::pair{&halves.right, right_name}}) {
      if (half->empty()) continue;
      Record sub;
      sub.case_id = case_name;
      sub.class_name = half_name;
      sub.foreground_fraction = static_cast<double>(half->count()) / static_cast<double>(half->size());
      sub.step_triggered = threshold_check(*half, lv.spacing, cfg);
      sub.kept = sub.step_triggered == Step::none;
      if (sub.kept) emit(*half, next_id++, half_name);
      records.push_back(sub);
    }
  }
  return out;
}

Result curate_dataset(const DatasetManifest& manifest, const Config& cfg, const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  Result result;
  for (std::size_t idx = 0; idx < manifest.entries.size(); ++idx) {
    const auto& entry = manifest.entries[idx];
    const auto name = case_id(entry);
    LabelVolume lv;
    try {
      if (!std::filesystem::exists(entry.image_path)) throw Error(Errc::io, "missing image " + entry.image_path);
      lv = nifti::read_labels(entry.label_path);
      lv.class_map = entry.class_map;
      lv.validate();
    } catch (const Error& e) {
      result.report.skipped.push_back(name + ": " + e.what());
      std::cerr << "curate: skipping " << name << ": " << e.what() << '\n';
      continue;
    }
    auto curated = curate_labels(lv, name, cfg, result.report.records);
    const auto out_path = out_dir / (name + "_curated.nii.gz");
    nifti::write_labels(out_path, curated);
    ManifestEntry out_entry = entry;
    out_entry.label_path = out_path.string();
    out_entry.class_map = curated.class_map;
    result.manifest.entries.push_back(std::move(out_entry));
  }
  return result;
}

}  // namespace volseg::curate
