#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/curate.hpp"
#include "volseg/intensity.hpp"
#include "volseg/manifest.hpp"
#include "volseg/net3d.hpp"

namespace volseg::train {

enum class Stage { pretrain, finetune };

struct TrainConfig {
  Stage stage = Stage::pretrain;
  int epochs = 1;
  std::optional<int> max_steps;  // caps epochs * steps_per_epoch
  int batch = 1;
  double lr = 1e-3;
  double lr_min = 1e-5;  // cosine floor
  int warmup_steps = 0;
  double beta1 = 0.0;  // 0 keeps the update momentum-free
  double beta2 = 0.999;
  double eps = 1e-8;
  double grad_clip = 1.0;  // global L2 norm, 0 disables
  int clicks_per_sample = 3;
  double dice_w = 1.0;
  double ce_w = 1.0;
  intensity::Policy normalization;
  std::uint64_t seed = 0;
  int checkpoint_every = 0;  // steps; 0 writes only the final checkpoint

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// One (case, class) training target; the volume is already normalised.
struct Sample {
  std::string case_id;
  std::string class_name;
  Volume volume;
  BinaryMask gt;
};

/// Loads every nonempty class of every entry. Unreadable entries are skipped and reported on stderr.
std::vector<Sample> load_samples(const DatasetManifest& manifest, const intensity::Policy& policy);

/// dice_w * soft-Dice loss + ce_w * mean binary cross-entropy over the voxels.
double loss(const Grid<double>& logits, const BinaryMask& gt, double dice_w = 1.0, double ce_w = 1.0);

struct LogEntry {
  int step = 0;
  double loss = 0.0;
  double dice = 0.0;  // hard Dice of the prediction the loss was taken on

  bool operator==(const LogEntry&) const = default;
};

void to_json(nlohmann::json& j, const LogEntry& e);

struct TrainResult {
  net::ModelState state;
  std::vector<LogEntry> log;
};

int total_steps(const TrainConfig& cfg, std::size_t samples);

/// Adam-style updates with cosine decay. With out_dir set, writes metrics.jsonl,
/// optional step_N.bin checkpoints and final.bin. Throws Errc::non_finite on a
/// non-finite loss or gradient.
TrainResult train_stage(net::ModelState state, std::span<const Sample> samples, const TrainConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt);
TrainResult train_stage(net::ModelState state, const DatasetManifest& data, const TrainConfig& cfg,
                        const std::optional<std::filesystem::path>& out_dir = std::nullopt);

// Synthetic volumes ---------------------------------------------------------

enum class Shape { ellipsoid, tube, multi_blob };

std::string_view to_string(Shape s);

struct SyntheticSpec {
  int count = 8;
  std::vector<Shape> families{Shape::ellipsoid};  // case i uses families[i % size]
  Vec3i dims{64, 64, 64};
  Vec3d spacing{1.5, 1.5, 1.5};
  double size_min_mm = 30.0;  // target diameter range
  double size_max_mm = 45.0;
  double contrast_min = 1.0;
  double contrast_max = 2.0;
  double noise = 0.1;  // Gaussian sigma, in intensity units
  int objects = 1;     // labelled targets per case, classes 1..objects
  double val_fraction = 0.25;
  double label_noise_fraction = 0.0;  // share of cases whose labels carry speckle components
  int speckles = 8;
  std::string modality_tag = "synthetic";
  std::string anatomy_tag = "phantom";
};

struct SyntheticCase {
  Volume volume;
  LabelVolume labels;
  bool noisy_labels = false;
};

SyntheticCase synthesize_case(const SyntheticSpec& spec, Shape family, bool noisy, std::mt19937_64& rng);

/// Writes images/ and labels/ NIfTI files plus manifest.json into out_dir.
DatasetManifest make_synthetic_dataset(const SyntheticSpec& spec, std::mt19937_64& rng,
                                       const std::filesystem::path& out_dir);

// Stage-2 selection ---------------------------------------------------------

/// Decides on an entry given every curation record of its case.
using QualityCriteria = std::function<bool(const ManifestEntry&, std::span<const curate::Record>)>;

/// Every kept mask of the case had no components removed and a foreground fraction at least twice
/// the background-step threshold. Records of dropped classes are ignored.
QualityCriteria default_quality(const curate::Config& cfg = {});

struct Selection {
  DatasetManifest manifest;
  double retained_fraction = 0.0;
};

Selection select_high_quality(const DatasetManifest& manifest, const curate::Report& report,
                              const QualityCriteria& criteria = default_quality());

}  // namespace volseg::train
