#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"
#include "volseg/evalbench.hpp"
#include "volseg/train.hpp"

using namespace volseg;
using eval::Method;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

eval::EvalRecord rec(const std::string& cls, const std::string& anatomy, double d1, double d3, bool seen = true) {
  eval::EvalRecord r;
  r.case_id = "c_" + cls + "_" + anatomy;
  r.class_name = cls;
  r.anatomy_tag = anatomy;
  r.modality_tag = "CT";
  r.seen = seen;
  r.dice_at_budget = {{1, d1}, {3, d3}};
  return r;
}

const eval::GroupRow& row(const eval::Report& r, const std::string& g) {
  for (const auto& x : r.rows)
    if (x.group == g) return x;
  throw std::runtime_error("no group " + g);
}

struct SweepFixture {
  std::filesystem::path dir;
  DatasetManifest manifest;

  explicit SweepFixture(const std::string& name) : dir(testsupport::temp_dir(name)) {
    train::SyntheticSpec spec;
    spec.count = 4;
    spec.dims = {32, 32, 32};
    spec.size_min_mm = 18;
    spec.size_max_mm = 24;
    spec.noise = 0.0;
    spec.families = {train::Shape::ellipsoid, train::Shape::tube};
    std::mt19937_64 rng(3);
    manifest = train::make_synthetic_dataset(spec, rng, dir);
  }
  ~SweepFixture() { std::filesystem::remove_all(dir); }
};

eval::SweepOptions sweep_options() {
  eval::SweepOptions o;
  o.infer.patch_size = 32;
  return o;
}

}  // namespace

TEST(InteractionTime, TabulatedValuesExact) {
  EXPECT_EQ(eval::interaction_time(Method::sam2d, 100, 1.0, 1), 113.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed2d, 100, 1.0, 1), 104.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed3d, 100, 1.0, 1), 3.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed3d, 100, 1.0, 10), 16.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed3d, 1, 0.0, 1), 2.0);
  EXPECT_EQ(eval::interaction_time(Method::sam2d, 16, 0.0, 1), 2.08);
  EXPECT_EQ(eval::interaction_time(Method::sam2d, 100, 1.0, 3), 357.0);
  EXPECT_EQ(eval::interaction_time(Method::sam2d, 100, 1.0, 5), 625.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed2d, 100, 1.0, 3), 321.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed2d, 100, 1.0, 5), 550.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed3d, 100, 1.0, 3), 6.0);
  EXPECT_EQ(eval::interaction_time(Method::sammed3d, 100, 1.0, 5), 9.0);
}

TEST(InteractionTime, ZeroTauCrossoverAtSixteenSlices) {
  const double volumetric = eval::interaction_time(Method::sammed3d, 1, 0.0, 1);
  EXPECT_LT(eval::interaction_time(Method::sam2d, 15, 0.0, 1), volumetric);
  EXPECT_GT(eval::interaction_time(Method::sam2d, 16, 0.0, 1), volumetric);
}

TEST(InteractionTime, LinearInTau) {
  for (Method m : {Method::sam2d, Method::sammed2d, Method::sammed3d}) {
    for (int k : eval::supported_budgets(m)) {
      for (int n : {1, 7, 100}) {
        const double t0 = eval::interaction_time(m, n, 0.0, k);
        const double slope = m == Method::sammed3d ? k : static_cast<double>(k) * n;
        for (double tau : {0.25, 0.5, 1.0, 2.0, 3.75}) {
          EXPECT_NEAR(eval::interaction_time(m, n, tau, k), t0 + slope * tau, 1e-9 * (1 + t0 + slope * tau));
        }
      }
    }
  }
  EXPECT_EQ(eval::interaction_time(Method::sammed3d, 1, 0.0, 3), eval::interaction_time(Method::sammed3d, 500, 0.0, 3));
}

TEST(InteractionTime, Errors) {
  auto code = [](auto f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return Errc::io;
  };
  EXPECT_EQ(code([] { eval::interaction_time(Method::sam2d, 10, 1.0, 10); }), Errc::unsupported_budget);
  EXPECT_EQ(code([] { eval::interaction_time(Method::sammed3d, 10, 1.0, 2); }), Errc::unsupported_budget);
  EXPECT_EQ(code([] { eval::interaction_time(Method::sammed2d, 0, 1.0, 1); }), Errc::config);
  EXPECT_EQ(code([] { eval::interaction_time(Method::sammed2d, 5, -1.0, 1); }), Errc::config);
  EXPECT_EQ(eval::supported_budgets(Method::sammed3d), (std::vector<int>{1, 3, 5, 10}));
  EXPECT_EQ(eval::supported_budgets(Method::sam2d), (std::vector<int>{1, 3, 5}));
  EXPECT_EQ(eval::parse_method("sammed2d"), Method::sammed2d);
  EXPECT_THROW(eval::parse_method("medsam"), Error);
}

TEST(Aggregate, SingletonAndMean) {
  const std::vector<eval::EvalRecord> one{rec("liver", "abdomen", 0.7, 0.8)};
  const auto r1 = eval::aggregate_report(one, eval::GroupBy::anatomy);
  ASSERT_EQ(r1.rows.size(), 1u);
  EXPECT_EQ(r1.rows[0].mean_dice, one[0].dice_at_budget);
  EXPECT_EQ(r1.rows[0].records, 1u);

  const std::vector<eval::EvalRecord> two{rec("liver", "abdomen", 0.4, 0.5), rec("spleen", "abdomen", 0.6, 0.5)};
  const auto r2 = eval::aggregate_report(two, eval::GroupBy::anatomy);
  ASSERT_EQ(r2.rows.size(), 1u);
  EXPECT_DOUBLE_EQ(r2.rows[0].mean_dice.at(1), 0.5);
  EXPECT_DOUBLE_EQ(r2.rows[0].mean_dice.at(3), 0.5);
}

TEST(Aggregate, OrganMergesLateralPairs) {
  const std::vector<eval::EvalRecord> rs{rec("left_kidney", "abdomen", 0.8, 0.9), rec("right_kidney", "abdomen", 0.6, 0.7),
                                         rec("liver", "abdomen", 0.5, 0.5)};
  const auto r = eval::aggregate_report(rs, eval::GroupBy::organ);
  ASSERT_EQ(r.rows.size(), 2u);
  EXPECT_EQ(r.rows[0].group, "kidney");
  EXPECT_DOUBLE_EQ(row(r, "kidney").mean_dice.at(1), 0.7);
  EXPECT_DOUBLE_EQ(row(r, "kidney").mean_dice.at(3), 0.8);
  EXPECT_EQ(row(r, "kidney").records, 2u);
  EXPECT_EQ(eval::organ_name("left_kidney"), "kidney");
  EXPECT_EQ(eval::organ_name("liver"), "liver");
}

TEST(Aggregate, SeenModalityAndUnknownKey) {
  std::vector<eval::EvalRecord> rs{rec("a", "x", 0.9, 0.9, true), rec("b", "x", 0.3, 0.5, false)};
  rs[1].modality_tag = "MR";
  const auto s = eval::aggregate_report(rs, eval::GroupBy::seen);
  EXPECT_EQ(s.rows.size(), 2u);
  EXPECT_DOUBLE_EQ(row(s, "unseen").mean_dice.at(1), 0.3);
  EXPECT_DOUBLE_EQ(row(s, "seen").mean_dice.at(1), 0.9);
  const auto m = eval::aggregate_report(rs, eval::GroupBy::modality);
  EXPECT_DOUBLE_EQ(row(m, "MR").mean_dice.at(3), 0.5);
  EXPECT_EQ(eval::parse_group_by("organ"), eval::GroupBy::organ);
  try {
    eval::parse_group_by("colour");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::config);
  }
  EXPECT_NE(s.table().find("unseen"), std::string::npos);
  const auto lines = s.jsonl();
  EXPECT_EQ(std::count(lines.begin(), lines.end(), '\n'), 2);
}

TEST(Aggregate, PermutationInvariant) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<eval::EvalRecord> rs;
  const char* organs[] = {"left_kidney", "right_kidney", "liver", "spleen", "aorta"};
  const char* areas[] = {"abdomen", "thorax", "brain"};
  for (int i = 0; i < 60; ++i) rs.push_back(rec(organs[i % 5], areas[i % 3], u(rng), u(rng), i % 4 != 0));
  for (auto g : {eval::GroupBy::anatomy, eval::GroupBy::modality, eval::GroupBy::organ, eval::GroupBy::seen}) {
    const auto base = eval::aggregate_report(rs, g);
    for (int t = 0; t < 5; ++t) {
      auto shuffled = rs;
      std::shuffle(shuffled.begin(), shuffled.end(), rng);
      const auto r = eval::aggregate_report(shuffled, g);
      EXPECT_EQ(r.rows, base.rows);
      EXPECT_EQ(r.jsonl(), base.jsonl());
    }
  }
}

TEST(RecordJson, RoundTripWithoutTimes) {
  auto r = rec("liver", "abdomen", 0.25, 0.75, false);
  r.wall_time = {{1, 0.5}, {3, 1.5}};
  const nlohmann::json j = r;
  EXPECT_FALSE(j.contains("wall_time"));
  auto back = j.get<eval::EvalRecord>();
  r.wall_time.clear();
  EXPECT_EQ(back, r);
}

TEST(Sweep, PerfectModelScoresOne) {
  SweepFixture f("sweep_perfect");
  // noiseless targets: after normalisation the object is exactly the positive voxels
  const infer::PatchModel perfect = [](const Volume& p, std::span<const PointPrompt>) {
    Grid<double> g(p.dims);
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] = p.data[i] > 0.0F ? 1.0 : 0.0;
    return g;
  };
  auto opt = sweep_options();
  opt.seen_classes = std::set<std::string>{"ellipsoid"};
  const auto rs = eval::run_prompt_sweep(perfect, f.manifest, opt);
  ASSERT_EQ(rs.size(), 4u);
  for (const auto& r : rs) {
    EXPECT_EQ(r.dice_at_budget.size(), 4u);
    for (const auto& [b, d] : r.dice_at_budget) EXPECT_EQ(d, 1.0) << r.case_id << " @" << b;
    EXPECT_EQ(r.seen, r.class_name == "ellipsoid");
    EXPECT_EQ(r.anatomy_tag, "phantom");
    double prev = 0;
    for (const auto& [b, t] : r.wall_time) {
      EXPECT_GE(t, prev);
      prev = t;
    }
  }
}

TEST(Sweep, EmptyModelScoresZeroWithPositiveClicks) {
  SweepFixture f("sweep_empty");
  bool all_positive = true;
  std::size_t max_clicks = 0;
  const infer::PatchModel empty = [&](const Volume& p, std::span<const PointPrompt> c) {
    for (const auto& x : c) all_positive = all_positive && x.positive();
    max_clicks = std::max(max_clicks, c.size());
    return Grid<double>(p.dims, 0.0);
  };
  const auto rs = eval::run_prompt_sweep(empty, f.manifest, sweep_options());
  for (const auto& r : rs)
    for (const auto& [b, d] : r.dice_at_budget) EXPECT_EQ(d, 0.0);
  EXPECT_TRUE(all_positive);
  EXPECT_EQ(max_clicks, 10u);
}

TEST(Sweep, FixedSeedOutputsAreByteIdentical) {
  SweepFixture f("sweep_determinism");
  const auto state = net::ModelState::create(net::NetConfig::test(), 5);
  eval::SweepOptions opt;
  opt.budgets = {1, 3};
  const auto a = eval::run_prompt_sweep(state, f.manifest, opt);
  const auto b = eval::run_prompt_sweep(state, f.manifest, opt);
  eval::write_report_dir(f.dir / "ra", a);
  eval::write_report_dir(f.dir / "rb", b);
  for (const char* name : {"records.jsonl", "report.txt", "summary_anatomy.jsonl", "summary_organ.jsonl",
                           "summary_modality.jsonl", "summary_seen.jsonl"}) {
    const auto x = slurp(f.dir / "ra" / name);
    EXPECT_FALSE(x.empty()) << name;
    EXPECT_EQ(x, slurp(f.dir / "rb" / name)) << name;
  }
  EXPECT_TRUE(std::filesystem::exists(f.dir / "ra" / "timings.jsonl"));
  opt.seed = 8;
  const auto c = eval::run_prompt_sweep(state, f.manifest, opt);
  EXPECT_EQ(c.size(), a.size());
}

TEST(Sweep, UnreadableCaseSkipped) {
  SweepFixture f("sweep_skip");
  auto m = f.manifest;
  m.entries[1].image_path = (f.dir / "gone.nii.gz").string();
  const infer::PatchModel empty = [](const Volume& p, std::span<const PointPrompt>) {
    return Grid<double>(p.dims, 0.0);
  };
  EXPECT_EQ(eval::run_prompt_sweep(empty, m, sweep_options()).size(), 3u);
}
