#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "volseg/infer.hpp"
#include "volseg/manifest.hpp"
#include "volseg/net3d.hpp"

namespace volseg::eval {

// Interaction cost ----------------------------------------------------------

enum class Method { sam2d, sammed2d, sammed3d };

std::string_view to_string(Method m);
Method parse_method(std::string_view s);

/// Seconds to segment one target. Slice-wise methods pay k*N*(tau + c_k) for N target
/// slices; the volumetric method pays k*tau + b_k once. N is ignored for the latter.
/// Throws Errc::unsupported_budget for an untabulated k, Errc::config for N < 1 or tau < 0.
double interaction_time(Method m, int slices, double tau, int k);

/// The k values tabulated for a method, ascending.
std::vector<int> supported_budgets(Method m);

// Records ---------------------------------------------------------------------

struct EvalRecord {
  std::string case_id;
  std::string class_name;
  std::string anatomy_tag;
  std::string modality_tag;
  bool seen = true;
  std::map<int, double> dice_at_budget;
  std::map<int, double> wall_time;  // cumulative seconds up to each budget; not serialised with the record

  bool operator==(const EvalRecord&) const = default;
};

/// Wall times are left out so that records of repeated runs compare byte for byte.
void to_json(nlohmann::json& j, const EvalRecord& r);
void from_json(const nlohmann::json& j, EvalRecord& r);

struct SweepOptions {
  std::vector<int> budgets{1, 3, 5, 10};
  std::uint64_t seed = 7;
  /// Class names present in training; nullopt marks every class as seen.
  std::optional<std::set<std::string>> seen_classes;
  infer::Options infer;
};

/// One click session per (case, class), each with its own seed derived from (seed, case index, class id).
/// Cases that fail to load are skipped and reported on stderr.
std::vector<EvalRecord> run_prompt_sweep(const infer::PatchModel& model, const DatasetManifest& manifest,
                                         const SweepOptions& opt = {});
std::vector<EvalRecord> run_prompt_sweep(const net::ModelState& state, const DatasetManifest& manifest,
                                         SweepOptions opt = {});

// Aggregation -----------------------------------------------------------------

enum class GroupBy { anatomy, modality, organ, seen };

std::string_view to_string(GroupBy g);
/// Throws Errc::config on an unknown key.
GroupBy parse_group_by(std::string_view s);

/// "left_kidney" and "right_kidney" both map to "kidney".
std::string organ_name(const std::string& class_name);

struct GroupRow {
  std::string group;
  std::size_t records = 0;
  std::map<int, double> mean_dice;

  bool operator==(const GroupRow&) const = default;
};

struct Report {
  GroupBy group_by = GroupBy::anatomy;
  std::vector<int> budgets;
  std::vector<GroupRow> rows;  // sorted by group name

  std::string table() const;
  /// One JSON object per row.
  std::string jsonl() const;
};

Report aggregate_report(std::span<const EvalRecord> records, GroupBy group_by);

/// records.jsonl, timings.jsonl, and summary_<group>.jsonl plus report.txt for every grouping.
void write_report_dir(const std::filesystem::path& dir, std::span<const EvalRecord> records);

}  // namespace volseg::eval
