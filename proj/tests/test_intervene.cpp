#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "ocrlens/error.hpp"
#include "ocrlens/intervene.hpp"

using namespace ocrlens;

namespace {

struct ParseFailure {
  ErrorCode code;
  std::size_t position;
};

ParseFailure failure_of(std::string_view text) {
  try {
    parse_spec(text);
  } catch (const SpecParseError& e) {
    return {e.code(), e.position()};
  }
  ADD_FAILURE() << "'" << text << "' parsed";
  return {ErrorCode::IoFailure, 0};
}

PrincipalSubspace axis_subspace(std::size_t d, std::vector<std::size_t> axes) {
  PrincipalSubspace s;
  s.components = Matrix(axes.size(), d);
  for (std::size_t i = 0; i < axes.size(); ++i) s.components(i, axes[i]) = 1.0;
  s.variance_ratios.assign(axes.size(), 1.0 / axes.size());
  s.delta_mean.assign(d, 0.0);
  return s;
}

PrincipalSubspace random_subspace(std::size_t d, std::size_t n, std::mt19937_64& rng) {
  const Matrix q = random_orthogonal(d, rng);
  PrincipalSubspace s;
  s.components = Matrix(n, d);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) s.components(i, c) = q(i, c);
  s.variance_ratios.assign(n, 0.0);
  s.delta_mean.assign(d, 0.0);
  return s;
}

std::vector<double> random_vector(std::size_t d, std::mt19937_64& rng) {
  std::vector<double> v(d);
  for (double& x : v) x = standard_normal(rng);
  return v;
}

}  // namespace

TEST(SpecGrammar, Examples) {
  EXPECT_EQ(parse_spec("baseline"), InterventionSpec::baseline());
  EXPECT_EQ(parse_spec("pca_L6_pc3"), InterventionSpec::pca(6, 6, 3));
  EXPECT_EQ(parse_spec("pca_L4-7_pc1@alpha=0.5"), InterventionSpec::pca(4, 7, 1, 0.5));
  EXPECT_EQ(parse_spec("pca_L0_pc2@alpha=0"), InterventionSpec::pca(0, 0, 2, 0.0));
  EXPECT_EQ(parse_spec("heads:L6H1"), InterventionSpec::ablate({{6, 1}}));
  const InterventionSpec h = parse_spec("heads:L7H2,L3H0,L7H2");
  EXPECT_EQ(h.heads, (std::vector<HeadRef>{{3, 0}, {7, 2}}));
  EXPECT_EQ(parse_spec("pca_L4-7_pc1").layers(), (std::vector<int>{4, 5, 6, 7}));
}

TEST(SpecGrammar, ErrorsCarryPositions) {
  auto f = failure_of("pca_L5-3_pc1");
  EXPECT_EQ(f.code, ErrorCode::RangeError);
  EXPECT_EQ(f.position, 7u);
  f = failure_of("pca_L5_pc0");
  EXPECT_EQ(f.code, ErrorCode::RangeError);
  EXPECT_EQ(f.position, 9u);
  f = failure_of("pca_L5_pc1@alpha=3");
  EXPECT_EQ(f.code, ErrorCode::RangeError);
  EXPECT_EQ(f.position, 17u);
  f = failure_of("pca_Lx_pc1");
  EXPECT_EQ(f.code, ErrorCode::ParseError);
  EXPECT_EQ(f.position, 5u);
  f = failure_of("pca_L5_pc1@beta=1");
  EXPECT_EQ(f.code, ErrorCode::ParseError);
  EXPECT_EQ(f.position, 10u);
  f = failure_of("heads:L1H2,");
  EXPECT_EQ(f.code, ErrorCode::ParseError);
  EXPECT_EQ(f.position, 11u);
  EXPECT_EQ(failure_of("baseline ").code, ErrorCode::ParseError);
  EXPECT_EQ(failure_of("").code, ErrorCode::ParseError);
  EXPECT_EQ(failure_of("pca_L5_pc1@alpha=nan").code, ErrorCode::RangeError);
}

TEST(SpecGrammar, CanonicalFormRoundtrips) {
  for (const char* text : {"baseline", "pca_L6_pc3", "pca_L2-9_pc4@alpha=0.25", "pca_L1_pc1@alpha=0",
                           "heads:L0H0,L11H3"}) {
    EXPECT_EQ(to_string(parse_spec(text)), text);
  }
  EXPECT_EQ(to_string(parse_spec("pca_L6-6_pc3@alpha=1.0")), "pca_L6_pc3");
  EXPECT_EQ(to_string(parse_spec("heads:L3H1,L1H2")), "heads:L1H2,L3H1");
  std::mt19937_64 rng(4);
  for (int i = 0; i < 200; ++i) {
    const int a = static_cast<int>(rng() % 12);
    const int b = a + static_cast<int>(rng() % 3);
    const double alpha = std::round(uniform01(rng) * 2000.0) / 1000.0;
    const InterventionSpec s = InterventionSpec::pca(a, b, 1 + static_cast<int>(rng() % 5), alpha);
    EXPECT_EQ(parse_spec(to_string(s)), s);
  }
}

TEST(ProjectOut, WorkedExamples) {
  const PrincipalSubspace x = axis_subspace(3, {0});
  EXPECT_EQ(project_out(std::vector<double>{3, 4, 5}, x, 1, 1.0), (std::vector<double>{0, 4, 5}));
  EXPECT_EQ(project_out(std::vector<double>{3, 4, 5}, x, 1, 0.5), (std::vector<double>{1.5, 4, 5}));
  const PrincipalSubspace xy = axis_subspace(3, {0, 1});
  EXPECT_EQ(project_out(std::vector<double>{3, 4, 5}, xy, 2, 1.0), (std::vector<double>{0, 0, 5}));
  EXPECT_EQ(project_out(std::vector<double>{3, 4, 5}, xy, 1, 1.0), (std::vector<double>{0, 4, 5}));
  const std::vector<double> h = {0.1, -7.25, 1e-30};
  EXPECT_EQ(project_out(h, xy, 2, 0.0), h);
}

TEST(ProjectOut, Errors) {
  const PrincipalSubspace s = axis_subspace(3, {0, 1});
  EXPECT_THROW(project_out(std::vector<double>{1, 2}, s, 1, 1.0), Error);
  try {
    project_out(std::vector<double>{1, 2, 3}, s, 3, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NTooLarge);
  }
}

TEST(ProjectOut, Properties) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = 2 + rng() % 10;
    const std::size_t k = 1 + rng() % (d - 1);
    const PrincipalSubspace s = random_subspace(d, k, rng);
    const std::vector<double> h = random_vector(d, rng);
    const double hn = norm(h);
    const std::size_t n = 1 + rng() % k;
    const std::vector<double> p = project_out(h, s, n, 1.0);
    for (std::size_t i = 0; i < n; ++i) EXPECT_LE(std::abs(dot(p, s.components.row(i))), 1e-9 * hn);
    const std::vector<double> pp = project_out(p, s, n, 1.0);
    for (std::size_t i = 0; i < d; ++i) EXPECT_NEAR(pp[i], p[i], 1e-9 * hn);
    EXPECT_LE(norm(p), hn * (1 + 1e-12));
    // more components never leave more behind
    if (n < k) EXPECT_LE(norm(project_out(h, s, n + 1, 1.0)), norm(p) * (1 + 1e-12));
    // partial strength sits between
    const double alpha = uniform01(rng);
    const std::vector<double> partial = project_out(h, s, n, alpha);
    EXPECT_LE(norm(partial), hn * (1 + 1e-12));
    EXPECT_GE(norm(partial), norm(p) * (1 - 1e-12));
  }
}

TEST(ProjectRows, MatchesVectorForm) {
  std::mt19937_64 rng(5);
  const PrincipalSubspace s = random_subspace(6, 2, rng);
  Matrix rows(4, 6);
  for (double& v : rows.data()) v = standard_normal(rng);
  Matrix copy = rows;
  project_rows(copy, s.components, 0.7);
  for (std::size_t r = 0; r < 4; ++r) {
    const std::vector<double> want = project_out(rows.row(r), s, 2, 0.7);
    for (std::size_t c = 0; c < 6; ++c) EXPECT_NEAR(copy(r, c), want[c], 1e-12);
  }
}

TEST(Hooks, OnePerLayer) {
  std::mt19937_64 rng(6);
  DirectionSet set;
  set.hidden = 6;
  for (std::uint32_t l = 2; l <= 5; ++l) {
    PrincipalSubspace s = random_subspace(6, 3, rng);
    s.layer = l;
    set.subspaces.push_back(s);
  }
  const auto hooks = make_projection_hooks(InterventionSpec::pca(3, 5, 2), set);
  ASSERT_EQ(hooks.size(), 3u);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(hooks[i].layer, 3 + i);
    EXPECT_EQ(hooks[i].site, HookSite::residual_post);
  }
  try {
    make_projection_hooks(InterventionSpec::pca(1, 3, 2), set);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::MissingDirections);
  }
  try {
    make_projection_hooks(InterventionSpec::pca(3, 3, 4), set);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::NTooLarge);
  }
}

TEST(Hooks, ProjectionHookRewritesRows) {
  std::mt19937_64 rng(9);
  DirectionSet set;
  set.hidden = 5;
  PrincipalSubspace s = random_subspace(5, 2, rng);
  s.layer = 1;
  set.subspaces.push_back(s);
  const auto hooks = make_projection_hooks(InterventionSpec::pca(1, 1, 2), set);
  Matrix rows(3, 5);
  for (double& v : rows.data()) v = standard_normal(rng);
  const Matrix before = rows;
  hooks[0].fn(HookContext{1, -1, Phase::prefill, 0}, rows);
  for (std::size_t r = 0; r < 3; ++r) {
    const auto want = project_out(before.row(r), s, 2, 1.0);
    for (std::size_t c = 0; c < 5; ++c) EXPECT_NEAR(rows(r, c), want[c], 1e-12);
  }
}

TEST(Hooks, AblationHooksZeroContribution) {
  const ToyModel m = build_model(ToyModelConfig{});
  const auto hooks = make_ablation_hooks(parse_spec("heads:L1H0,L6H3"), m);
  ASSERT_EQ(hooks.size(), 2u);
  EXPECT_EQ(hooks[1].site, HookSite::head_output);
  EXPECT_EQ(hooks[1].layer, 6);
  EXPECT_EQ(hooks[1].head, 3);
  Matrix rows = Matrix::identity(4);
  hooks[0].fn(HookContext{1, 0, Phase::prefill, 0}, rows);
  EXPECT_EQ(max_abs(rows), 0.0);
  EXPECT_THROW(make_ablation_hooks(parse_spec("heads:L1H4"), m), Error);
  EXPECT_THROW(make_ablation_hooks(parse_spec("heads:L12H0"), m), Error);
  EXPECT_TRUE(make_hooks(InterventionSpec::baseline(), m, nullptr).empty());
  EXPECT_THROW(make_hooks(parse_spec("pca_L1_pc1"), m, nullptr), Error);
}
