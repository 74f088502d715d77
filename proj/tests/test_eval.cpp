#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <tuple>

#include "ocrlens/error.hpp"
#include "ocrlens/eval.hpp"

using namespace ocrlens;

namespace {

const ToyModel& model() {
  static const ToyModel m = build_model(ToyModelConfig{});
  return m;
}

std::vector<ToyScene> read_set(std::size_t n, std::uint64_t seed) {
  SceneDistribution d;
  return generate_scenes(d, n, seed);
}

}  // namespace

// Expected verdicts were produced by tests/tools/check_match_fixture.py.
TEST(NormalizedMatch, FiftyCaseFixture) {
  std::ifstream in(std::filesystem::path(OCRLENS_TEST_DATA) / "normalized_match_cases.json");
  ASSERT_TRUE(in);
  const nlohmann::json cases = nlohmann::json::parse(in);
  ASSERT_EQ(cases.size(), 50u);
  for (const auto& c : cases) {
    const auto gt = c.at("ground_truth").get<std::string>();
    const auto pred = c.at("prediction").get<std::string>();
    const MatchVerdict v = match_answer(gt, pred);
    EXPECT_EQ(v.matched, c.at("matched").get<bool>()) << c.at("note");
    EXPECT_EQ(v.flagged, c.at("flagged").get<bool>()) << c.at("note");
  }
}

TEST(NormalizedMatch, Examples) {
  EXPECT_EQ(normalize_answer("  Hello,   WORLD! "), "hello world");
  EXPECT_EQ(normalize_answer("\xc3\x89T\xc3\x89"), "\xc3\xa9t\xc3\xa9");
  EXPECT_EQ(normalize_answer("a\xff" "b"), "a\xef\xbf\xbd" "b");
  EXPECT_TRUE(normalized_match("glyph07", "glyph07"));
  EXPECT_FALSE(normalized_match("glyph07", "glyph08"));
  const MatchVerdict empty = match_answer("!!!", "anything");
  EXPECT_FALSE(empty.matched);
  EXPECT_TRUE(empty.flagged);
}

TEST(Selectivity, WorkedExamples) {
  Matrix uniform(2, 4);
  for (double& v : uniform.data()) v = 0.25;
  const std::vector<std::size_t> ocr = {0, 1}, bg = {2, 3};
  EXPECT_DOUBLE_EQ(selectivity_ratio(uniform, ocr, bg).ratio, 1.0);

  // ocr mean 0.3, background mean 0.05
  Matrix a = Matrix::from_rows({{0.3, 0.3, 0.05, 0.05, 0.3}});
  const std::vector<std::size_t> ocr2 = {0, 1, 4};
  EXPECT_NEAR(selectivity_ratio(a, ocr2, bg).ratio, 6.0, 1e-12);

  Matrix none = Matrix::from_rows({{0.0, 0.0, 0.5, 0.5}});
  EXPECT_EQ(selectivity_ratio(none, ocr, bg).ratio, 0.0);
  Matrix all = Matrix::from_rows({{0.5, 0.5, 0.0, 0.0}});
  const Selectivity inf = selectivity_ratio(all, ocr, bg);
  EXPECT_TRUE(inf.infinite);
}

TEST(Selectivity, InvariantUnderMaskOrderAndRowDuplication) {
  const Matrix a = Matrix::from_rows({{0.1, 0.2, 0.3, 0.4}, {0.4, 0.3, 0.2, 0.1}});
  const std::vector<std::size_t> o1 = {0, 2}, o2 = {2, 0}, bg = {1, 3};
  EXPECT_DOUBLE_EQ(selectivity_ratio(a, o1, bg).ratio, selectivity_ratio(a, o2, bg).ratio);
  const std::vector<std::size_t> rows = {0, 1}, twice = {0, 1, 1, 0};
  EXPECT_DOUBLE_EQ(selectivity_ratio(a, o1, bg, rows).ratio, selectivity_ratio(a, o1, bg, twice).ratio);
}

TEST(Selectivity, Errors) {
  const Matrix a(2, 4);
  const std::vector<std::size_t> e, x = {0}, y = {1}, xy = {0, 1}, far = {9};
  auto code = [&](std::span<const std::size_t> o, std::span<const std::size_t> b) {
    try {
      selectivity_ratio(a, o, b);
    } catch (const Error& err) {
      return err.code();
    }
    return ErrorCode::IoFailure;
  };
  EXPECT_EQ(code(e, y), ErrorCode::EmptyMask);
  EXPECT_EQ(code(xy, y), ErrorCode::OverlappingMasks);
  EXPECT_EQ(code(x, far), ErrorCode::DimensionMismatch);
}

TEST(RankHeads, CopyHeadRanksFirst) {
  const auto scenes = read_set(16, 3);
  const auto ranking = rank_heads(model(), scenes);
  ASSERT_EQ(ranking.size(), static_cast<std::size_t>(model().layer_count() * model().heads_per_layer()));
  EXPECT_EQ(ranking[0].layer, model().copy_head().layer);
  EXPECT_EQ(ranking[0].head, model().copy_head().head);
  for (std::size_t i = 1; i < ranking.size(); ++i) EXPECT_GE(ranking[i - 1].ratio, ranking[i].ratio);
  const auto readout = rank_heads(model(), scenes, RankOptions{true});
  EXPECT_EQ(readout[0].layer, model().copy_head().layer);

  const std::string table = format_head_table(ranking, 3);
  EXPECT_EQ(std::count(table.begin(), table.end(), '\n'), 4);
  EXPECT_EQ(table.rfind("rank,layer,head,ratio,mean_mass\n", 0), 0u);
}

TEST(RankHeads, SceneOrderDoesNotMatter) {
  auto scenes = read_set(8, 5);
  const auto a = rank_heads(model(), scenes);
  std::reverse(scenes.begin(), scenes.end());
  auto b = rank_heads(model(), scenes);
  ASSERT_EQ(a.size(), b.size());
  EXPECT_EQ(a[0].layer, b[0].layer);
  EXPECT_EQ(a[0].head, b[0].head);
  // near-equal ratios may swap places, so compare per head
  auto by_head = [](std::vector<HeadSelectivity> v) {
    std::sort(v.begin(), v.end(), [](const auto& x, const auto& y) {
      return std::tie(x.layer, x.head) < std::tie(y.layer, y.head);
    });
    return v;
  };
  const auto sa = by_head(a), sb = by_head(b);
  for (std::size_t i = 0; i < sa.size(); ++i) {
    EXPECT_EQ(sa[i].layer, sb[i].layer);
    EXPECT_EQ(sa[i].head, sb[i].head);
    EXPECT_NEAR(sa[i].ratio, sb[i].ratio, 1e-9);
  }
}

TEST(RankHeads, NeedsText) {
  SceneDistribution d;
  d.question = Question::count_objects;
  d.text_probability = 0.0;
  const auto scenes = generate_scenes(d, 4, 1);
  try {
    rank_heads(model(), scenes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NoTextScenes);
  }
}

TEST(Evaluate, BaselineEqualsZeroStrength) {
  const auto scenes = read_set(24, 7);
  const EvalResult base = evaluate_task(model(), scenes, InterventionSpec::baseline());
  EXPECT_EQ(base.n, 24u);
  EXPECT_EQ(base.accuracy, 1.0);
  EXPECT_EQ(base.task, Task::ocr_read);

  const DirectionSet set = [&] {
    DirectionSet s;
    s.model_id = model().model_id();
    s.hidden = static_cast<std::uint32_t>(model().hidden());
    PrincipalSubspace sub;
    sub.layer = 6;
    sub.components = model().channel_directions(Channel::LVL);
    sub.variance_ratios = {1.0};
    sub.delta_mean.assign(model().hidden(), 0.0);
    s.subspaces.push_back(sub);
    return s;
  }();
  const EvalResult zero = evaluate_task(model(), scenes, parse_spec("pca_L6_pc1@alpha=0"), &set);
  EXPECT_EQ(zero.verdicts, base.verdicts);
  EXPECT_EQ(zero.predictions, base.predictions);
  EXPECT_EQ(zero.intervention, "pca_L6_pc1@alpha=0");
  const EvalResult full = evaluate_task(model(), scenes, parse_spec("pca_L6_pc1"), &set);
  EXPECT_LT(full.accuracy, 0.5);
}

TEST(Evaluate, Errors) {
  const std::vector<ToyScene> none;
  try {
    evaluate_task(model(), none, InterventionSpec::baseline());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyEvalSet);
  }
  auto scenes = read_set(2, 1);
  SceneDistribution d;
  d.question = Question::count_objects;
  scenes.push_back(generate_scenes(d, 1, 1).front());
  try {
    evaluate_task(model(), scenes, InterventionSpec::baseline());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MixedTasks);
  }
}

TEST(Evaluate, TaskNames) {
  for (Task t : {Task::ocr_read, Task::count_objects, Task::left_of_marker}) EXPECT_EQ(parse_task(to_string(t)), t);
  EXPECT_EQ(task_for(Question::left_of_marker), Task::left_of_marker);
  EXPECT_THROW(parse_task("ocr"), Error);
}
