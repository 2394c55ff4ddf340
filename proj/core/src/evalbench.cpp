#include "volseg/evalbench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

#include "volseg/nifti.hpp"
#include "volseg/promptsim.hpp"

namespace volseg::eval {

std::string_view to_string(Method m) {
  switch (m) {
    case Method::sam2d: return "sam2d";
    case Method::sammed2d: return "sammed2d";
    case Method::sammed3d: return "sammed3d";
  }
  return "?";
}

Method parse_method(std::string_view s) {
  if (s == "sam2d") return Method::sam2d;
  if (s == "sammed2d") return Method::sammed2d;
  if (s == "sammed3d") return Method::sammed3d;
  throw Error(Errc::config, "unknown method " + std::string(s));
}

namespace {

// Overheads in hundredths of a second: per-slice c_k for the slice-wise methods,
// fixed b_k for the volumetric one. Integer storage keeps e.g. 100 * (1 + 0.13) exactly 113.
struct Coef {
  int k;
  int centi;
};

constexpr Coef kSam[] = {{1, 13}, {3, 19}, {5, 25}};
constexpr Coef kSamMed2d[] = {{1, 4}, {3, 7}, {5, 10}};
constexpr Coef kSamMed3d[] = {{1, 200}, {3, 300}, {5, 400}, {10, 600}};

std::span<const Coef> table(Method m) {
  switch (m) {
    case Method::sam2d: return kSam;
    case Method::sammed2d: return kSamMed2d;
    case Method::sammed3d: return kSamMed3d;
  }
  return {};
}

}  // namespace

std::vector<int> supported_budgets(Method m) {
  std::vector<int> out;
  for (const auto& c : table(m)) out.push_back(c.k);
  return out;
}

double interaction_time(Method m, int slices, double tau, int k) {
  if (slices < 1) throw Error(Errc::config, "slice count must be at least 1");
  if (!(tau >= 0.0)) throw Error(Errc::config, "interaction time must be non-negative");
  for (const auto& c : table(m)) {
    if (c.k != k) continue;
    if (m == Method::sammed3d) return (100.0 * k * tau + c.centi) / 100.0;
    return static_cast<double>(k) * slices * (100.0 * tau + c.centi) / 100.0;
  }
  throw Error(Errc::unsupported_budget,
              "budget " + std::to_string(k) + " is not tabulated for " + std::string(to_string(m)));
}

void to_json(nlohmann::json& j, const EvalRecord& r) {
  nlohmann::json dice = nlohmann::json::object();
  for (const auto& [b, d] : r.dice_at_budget) dice[std::to_string(b)] = d;
  j = nlohmann::json{{"case_id", r.case_id},           {"class_name", r.class_name},
                     {"anatomy_tag", r.anatomy_tag},   {"modality_tag", r.modality_tag},
                     {"seen", r.seen ? "seen" : "unseen"}, {"dice_at_budget", dice}};
}

void from_json(const nlohmann::json& j, EvalRecord& r) {
  r.case_id = j.at("case_id").get<std::string>();
  r.class_name = j.at("class_name").get<std::string>();
  r.anatomy_tag = j.value("anatomy_tag", "");
  r.modality_tag = j.value("modality_tag", "");
  r.seen = j.value("seen", "seen") == "seen";
  r.dice_at_budget.clear();
  for (const auto& [k, v] : j.at("dice_at_budget").items()) r.dice_at_budget[std::stoi(k)] = v.get<double>();
}

std::vector<EvalRecord> run_prompt_sweep(const infer::PatchModel& model, const DatasetManifest& manifest,
                                         const SweepOptions& opt) {
  if (opt.budgets.empty()) throw Error(Errc::config, "no budgets");
  auto budgets = opt.budgets;
  std::sort(budgets.begin(), budgets.end());
  budgets.erase(std::unique(budgets.begin(), budgets.end()), budgets.end());
  if (budgets.front() < 1) throw Error(Errc::config, "budgets must be at least 1");
  const int max_budget = budgets.back();

  std::vector<EvalRecord> out;
  for (std::size_t idx = 0; idx < manifest.entries.size(); ++idx) {
    const auto& e = manifest.entries[idx];
    const auto id = case_id(e);
    Volume volume;
    LabelVolume labels;
    try {
      volume = nifti::read_volume(e.image_path);
      labels = nifti::read_labels(e.label_path);
      if (labels.dims != volume.dims) throw Error(Errc::shape, "image and label dims differ");
    } catch (const Error& err) {
      std::cerr << "eval: skipping " << id << ": " << err.what() << '\n';
      continue;
    }
    // Normalise once per case rather than once per prediction.
    infer::Options io = opt.infer;
    if (io.normalization) {
      volume = intensity::normalize(volume, *io.normalization);
      io.normalization.reset();
    }

    for (const auto& [cls, name] : e.class_map) {
      const BinaryMask gt = labels.one_hot(cls);
      if (gt.empty()) continue;
      std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                        static_cast<std::uint32_t>(idx), static_cast<std::uint32_t>(cls)};
      promptsim::Rng rng(seq);

      std::vector<double> times;
      auto forward = [&](const Volume& v, std::span<const PointPrompt> clicks) {
        const auto t0 = std::chrono::steady_clock::now();
        auto mask = infer::segment_volume(v, clicks, model, io).mask;
        times.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        return mask;
      };
      const auto session = promptsim::run_session(forward, volume, gt, max_budget, rng);

      EvalRecord r;
      r.case_id = id;
      r.class_name = name;
      r.anatomy_tag = e.anatomy_tag;
      r.modality_tag = e.modality_tag;
      r.seen = !opt.seen_classes || opt.seen_classes->contains(name);
      double elapsed = 0.0;
      std::size_t step = 0;
      for (int b : budgets) {
        // After convergence the mask no longer changes, so later budgets inherit the last Dice.
        const std::size_t last = std::min<std::size_t>(static_cast<std::size_t>(b), session.steps.size()) - 1;
        while (step <= last) elapsed += times[step++];
        r.dice_at_budget[b] = session.steps[last].dice;
        r.wall_time[b] = elapsed;
      }
      out.push_back(std::move(r));
    }
  }
  return out;
}

std::vector<EvalRecord> run_prompt_sweep(const net::ModelState& state, const DatasetManifest& manifest,
                                         SweepOptions opt) {
  opt.infer.patch_size = state.config().patch_input_size;
  return run_prompt_sweep(infer::network_model(state), manifest, opt);
}

std::string_view to_string(GroupBy g) {
  switch (g) {
    case GroupBy::anatomy: return "anatomy";
    case GroupBy::modality: return "modality";
    case GroupBy::organ: return "organ";
    case GroupBy::seen: return "seen";
  }
  return "?";
}

GroupBy parse_group_by(std::string_view s) {
  if (s == "anatomy") return GroupBy::anatomy;
  if (s == "modality") return GroupBy::modality;
  if (s == "organ") return GroupBy::organ;
  if (s == "seen" || s == "seen/unseen") return GroupBy::seen;
  throw Error(Errc::config, "unknown group key " + std::string(s));
}

std::string organ_name(const std::string& class_name) {
  for (std::string_view prefix : {"left_", "right_"}) {
    if (class_name.starts_with(prefix) && class_name.size() > prefix.size()) return class_name.substr(prefix.size());
  }
  return class_name;
}

namespace {

std::string group_key(const EvalRecord& r, GroupBy g) {
  switch (g) {
    case GroupBy::anatomy: return r.anatomy_tag;
    case GroupBy::modality: return r.modality_tag;
    case GroupBy::organ: return organ_name(r.class_name);
    case GroupBy::seen: return r.seen ? "seen" : "unseen";
  }
  return {};
}

}  // namespace

Report aggregate_report(std::span<const EvalRecord> records, GroupBy group_by) {
  if (records.empty()) throw Error(Errc::config, "aggregate_report: no records");
  std::map<std::string, std::map<int, std::vector<double>>> values;
  std::map<std::string, std::size_t> counts;
  std::set<int> budgets;
  for (const auto& r : records) {
    const auto key = group_key(r, group_by);
    ++counts[key];
    for (const auto& [b, d] : r.dice_at_budget) {
      values[key][b].push_back(d);
      budgets.insert(b);
    }
  }
  Report rep;
  rep.group_by = group_by;
  rep.budgets.assign(budgets.begin(), budgets.end());
  for (auto& [key, per_budget] : values) {
    GroupRow row{key, counts[key], {}};
    for (auto& [b, ds] : per_budget) {
      // Sorting first makes the sum independent of record order.
      std::sort(ds.begin(), ds.end());
      double s = 0.0;
      for (double d : ds) s += d;
      row.mean_dice[b] = s / static_cast<double>(ds.size());
    }
    rep.rows.push_back(std::move(row));
  }
  for (const auto& [key, n] : counts) {
    if (!values.contains(key)) rep.rows.push_back({key, n, {}});
  }
  std::sort(rep.rows.begin(), rep.rows.end(), [](const GroupRow& a, const GroupRow& b) { return a.group < b.group; });
  return rep;
}

std::string Report::table() const {
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%-24s %6s", std::string(to_string(group_by)).c_str(), "n");
  os << buf;
  for (int b : budgets) {
    std::snprintf(buf, sizeof(buf), " %7s", (std::to_string(b) + "pt").c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& row : rows) {
    std::snprintf(buf, sizeof(buf), "%-24s %6zu", row.group.c_str(), row.records);
    os << buf;
    for (int b : budgets) {
      const auto it = row.mean_dice.find(b);
      if (it == row.mean_dice.end()) {
        std::snprintf(buf, sizeof(buf), " %7s", "-");
      } else {
        std::snprintf(buf, sizeof(buf), " %7.4f", it->second);
      }
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

std::string Report::jsonl() const {
  std::string out;
  for (const auto& row : rows) {
    nlohmann::json dice = nlohmann::json::object();
    for (const auto& [b, d] : row.mean_dice) dice[std::to_string(b)] = d;
    out += nlohmann::json{{"group_by", to_string(group_by)}, {"group", row.group}, {"records", row.records},
                          {"mean_dice", dice}}
               .dump();
    out += '\n';
  }
  return out;
}

void write_report_dir(const std::filesystem::path& dir, std::span<const EvalRecord> records) {
  std::filesystem::create_directories(dir);
  auto open = [&](const std::string& name) {
    std::ofstream f(dir / name, std::ios::trunc);
    if (!f) throw Error(Errc::io, "cannot write " + (dir / name).string());
    return f;
  };
  {
    auto f = open("records.jsonl");
    for (const auto& r : records) f << nlohmann::json(r).dump() << '\n';
  }
  {
    auto f = open("timings.jsonl");
    for (const auto& r : records) {
      nlohmann::json t = nlohmann::json::object();
      for (const auto& [b, s] : r.wall_time) t[std::to_string(b)] = s;
      f << nlohmann::json{{"case_id", r.case_id}, {"class_name", r.class_name}, {"wall_time", t}}.dump() << '\n';
    }
  }
  if (records.empty()) return;
  auto txt = open("report.txt");
  for (GroupBy g : {GroupBy::anatomy, GroupBy::modality, GroupBy::organ, GroupBy::seen}) {
    const auto rep = aggregate_report(records, g);
    open("summary_" + std::string(to_string(g)) + ".jsonl") << rep.jsonl();
    txt << rep.table() << '\n';
  }
}

}  // namespace volseg::eval
