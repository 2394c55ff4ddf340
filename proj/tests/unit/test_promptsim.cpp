#include <gtest/gtest.h>

#include <map>

#include "support.hpp"
#include "volseg/promptsim.hpp"

using namespace volseg;
using promptsim::Rng;

namespace {

bool in_error(const BinaryMask& gt, const BinaryMask& pred, const PointPrompt& p) {
  return gt.get(p.coord) != pred.get(p.coord);
}

bool label_matches(const BinaryMask& gt, const PointPrompt& p) {
  return p.positive() == gt.get(p.coord);
}

}  // namespace

TEST(FirstClick, SingleVoxel) {
  BinaryMask gt({5, 6, 7});
  gt.at(3, 1, 4) = 1;
  Rng rng(1);
  for (int t = 0; t < 20; ++t) {
    const auto p = promptsim::first_click(gt, rng);
    EXPECT_EQ(p.coord, (Vec3i{3, 1, 4}));
    EXPECT_TRUE(p.positive());
  }
}

TEST(FirstClick, EmptyTargetRejected) {
  Rng rng(1);
  try {
    promptsim::first_click(BinaryMask({4, 4, 4}), rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::empty_target);
  }
}

TEST(FirstClick, TwoVoxelFrequency) {
  BinaryMask gt({8, 8, 8});
  gt.at(1, 2, 3) = 1;
  gt.at(6, 5, 4) = 1;
  Rng rng(2);
  int first = 0;
  for (int t = 0; t < 10000; ++t) first += promptsim::first_click(gt, rng).coord == Vec3i{1, 2, 3};
  EXPECT_NEAR(first / 10000.0, 0.5, 0.02);
}

TEST(FirstClick, UniformChiSquare) {
  // 20 foreground voxels, 20000 draws, 19 degrees of freedom; 1% critical value 36.19
  std::mt19937_64 layout(3);
  const auto gt_all = testsupport::random_mask({10, 10, 10}, 0.02, layout);
  BinaryMask gt(gt_all.dims);
  int placed = 0;
  for (std::size_t i = 0; i < gt_all.data.size() && placed < 20; ++i)
    if (gt_all.data[i]) gt.data[i] = 1, ++placed;
  ASSERT_EQ(placed, 20);
  Rng rng(4);
  std::map<std::size_t, int> hits;
  const int n = 20000;
  for (int t = 0; t < n; ++t) {
    const auto p = promptsim::first_click(gt, rng);
    ASSERT_TRUE(gt.get(p.coord));
    ++hits[linear_index(gt.dims, p.coord[0], p.coord[1], p.coord[2])];
  }
  ASSERT_EQ(hits.size(), 20u);
  const double expected = n / 20.0;
  double chi2 = 0;
  for (const auto& [v, c] : hits) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 36.19);
}

TEST(NextClick, EmptyPredictionGivesPositiveInsideGt) {
  std::mt19937_64 g(5);
  Rng rng(6);
  for (int t = 0; t < 100; ++t) {
    const auto gt = testsupport::random_mask({12, 12, 12}, 0.1, g);
    const auto p = promptsim::next_click(gt, BinaryMask(gt.dims), rng);
    EXPECT_TRUE(p.positive());
    EXPECT_TRUE(gt.get(p.coord));
  }
}

TEST(NextClick, OverSegmentationGivesNegativeOutsideGt) {
  BinaryMask gt({12, 12, 12});
  testsupport::paint_box(gt, {3, 3, 3}, {6, 6, 6});
  BinaryMask pred(gt.dims);
  testsupport::paint_box(pred, {2, 2, 2}, {8, 8, 8});
  Rng rng(7);
  for (int t = 0; t < 100; ++t) {
    const auto p = promptsim::next_click(gt, pred, rng);
    EXPECT_FALSE(p.positive());
    EXPECT_FALSE(gt.get(p.coord));
    EXPECT_TRUE(pred.get(p.coord));
  }
}

TEST(NextClick, MembershipOracle) {
  std::mt19937_64 g(8);
  Rng rng(9);
  for (int t = 0; t < 1000; ++t) {
    const auto gt = testsupport::random_mask({16, 16, 16}, 0.2, g);
    const auto pred = testsupport::random_mask({16, 16, 16}, 0.2, g);
    const auto p = promptsim::next_click(gt, pred, rng);
    ASSERT_TRUE(in_bounds(gt.dims, p.coord));
    ASSERT_TRUE(in_error(gt, pred, p));
    ASSERT_TRUE(label_matches(gt, p));
  }
}

TEST(NextClick, ConvergedAndShapeErrors) {
  std::mt19937_64 g(10);
  const auto gt = testsupport::random_mask({6, 6, 6}, 0.3, g);
  Rng rng(1);
  try {
    promptsim::next_click(gt, gt, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::converged);
  }
  EXPECT_THROW(promptsim::next_click(gt, BinaryMask({6, 6, 7}), rng), Error);
}

TEST(NextClick, DeduplicationAndFallback) {
  BinaryMask gt({4, 4, 4});
  gt.at(0, 0, 0) = 1;
  gt.at(3, 3, 3) = 1;
  const BinaryMask pred(gt.dims);
  const std::vector<PointPrompt> prev{{{0, 0, 0}, PromptLabel::positive}};
  Rng rng(2);
  for (int t = 0; t < 50; ++t) EXPECT_EQ(promptsim::next_click(gt, pred, rng, prev).coord, (Vec3i{3, 3, 3}));
  const std::vector<PointPrompt> both{{{0, 0, 0}, PromptLabel::positive}, {{3, 3, 3}, PromptLabel::positive}};
  const auto p = promptsim::next_click(gt, pred, rng, both);  // nothing new left: whole region again
  EXPECT_TRUE(gt.get(p.coord));
  promptsim::Config off;
  off.deduplicate = false;
  int repeats = 0;
  for (int t = 0; t < 200; ++t) repeats += promptsim::next_click(gt, pred, rng, prev, off).coord == Vec3i{0, 0, 0};
  EXPECT_GT(repeats, 50);
}

TEST(NextClick, LargestErrorCenterStrategy) {
  BinaryMask gt({20, 20, 20});
  testsupport::paint_box(gt, {2, 2, 2}, {4, 4, 4});       // small missed region
  testsupport::paint_box(gt, {10, 10, 10}, {16, 16, 16});  // large missed region, centre (13,13,13)
  promptsim::Config cfg;
  cfg.strategy = promptsim::Strategy::largest_error_center;
  Rng rng(3);
  const auto p = promptsim::next_click(gt, BinaryMask(gt.dims), rng, {}, cfg);
  EXPECT_EQ(p.coord, (Vec3i{13, 13, 13}));
  EXPECT_TRUE(p.positive());
}

TEST(Session, BudgetOneGivesOnePrediction) {
  BinaryMask gt({8, 8, 8});
  testsupport::paint_box(gt, {2, 2, 2}, {5, 5, 5});
  int calls = 0;
  const promptsim::ModelForward empty = [&](const Volume& v, std::span<const PointPrompt>) {
    ++calls;
    return BinaryMask(v.dims);
  };
  Rng rng(1);
  const auto r = promptsim::run_session(empty, Volume(gt.dims, {1, 1, 1}), gt, 1, rng);
  EXPECT_EQ(calls, 1);
  ASSERT_EQ(r.steps.size(), 1u);
  EXPECT_EQ(r.steps[0].click_index, 1);
  EXPECT_EQ(r.steps[0].dice, 0.0);
  EXPECT_THROW(promptsim::run_session(empty, Volume(gt.dims, {1, 1, 1}), gt, 0, rng), Error);
}

TEST(Session, PerfectModelStopsEarly) {
  BinaryMask gt({8, 8, 8});
  testsupport::paint_box(gt, {2, 2, 2}, {5, 5, 5});
  const promptsim::ModelForward oracle = [&](const Volume&, std::span<const PointPrompt>) { return gt; };
  Rng rng(1);
  const auto r = promptsim::run_session(oracle, Volume(gt.dims, {1, 1, 1}), gt, 10, rng);
  ASSERT_EQ(r.steps.size(), 1u);
  EXPECT_EQ(r.steps[0].dice, 1.0);
  EXPECT_TRUE(r.converged);
  EXPECT_EQ(r.clicks.size(), 1u);
}

TEST(Session, FixedWrongMaskClicksInErrorRegion) {
  std::mt19937_64 g(11);
  const auto gt = testsupport::random_mask({10, 10, 10}, 0.3, g);
  const auto wrong = testsupport::random_mask({10, 10, 10}, 0.3, g);
  std::vector<std::size_t> fed;
  const promptsim::ModelForward fixed = [&](const Volume&, std::span<const PointPrompt> c) {
    fed.push_back(c.size());
    return wrong;
  };
  Rng rng(12);
  const auto r = promptsim::run_session(fixed, Volume(gt.dims, {1, 1, 1}), gt, 10, rng);
  ASSERT_EQ(r.steps.size(), 10u);
  ASSERT_EQ(r.clicks.size(), 10u);
  EXPECT_TRUE(gt.get(r.clicks[0].coord));
  for (std::size_t i = 1; i < r.clicks.size(); ++i) {
    EXPECT_TRUE(in_error(gt, wrong, r.clicks[i]));
    EXPECT_TRUE(label_matches(gt, r.clicks[i]));
  }
  for (std::size_t i = 0; i < fed.size(); ++i) EXPECT_EQ(fed[i], i + 1);  // full click list re-fed
  for (const auto& s : r.steps) EXPECT_DOUBLE_EQ(s.dice, dice(wrong, gt));
}

TEST(Session, ReproducibleWithSeed) {
  std::mt19937_64 g(13);
  const auto gt = testsupport::random_mask({10, 10, 10}, 0.3, g);
  // a model that grows its prediction around the clicks, so the error region shifts each round
  const promptsim::ModelForward grow = [&](const Volume& v, std::span<const PointPrompt> clicks) {
    BinaryMask m(v.dims);
    for (const auto& c : clicks)
      for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const Vec3i q{c.coord[0] + dx, c.coord[1] + dy, c.coord[2] + dz};
            if (in_bounds(v.dims, q)) m.set(q, c.positive());
          }
    return m;
  };
  Rng a(99), b(99);
  const auto ra = promptsim::run_session(grow, Volume(gt.dims, {1, 1, 1}), gt, 8, a);
  const auto rb = promptsim::run_session(grow, Volume(gt.dims, {1, 1, 1}), gt, 8, b);
  EXPECT_EQ(ra.clicks, rb.clicks);
  EXPECT_EQ(ra.steps, rb.steps);
}
