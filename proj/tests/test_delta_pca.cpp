#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "ocrlens/delta_pca.hpp"
#include "ocrlens/error.hpp"

using namespace ocrlens;

namespace {

ActivationRecord rec(std::uint32_t layer, std::uint32_t d, std::vector<float> values) {
  ActivationRecord r;
  r.sample_id = "p";
  r.layer = layer;
  r.hidden = d;
  r.tokens = static_cast<std::uint32_t>(values.size() / d);
  r.values = std::move(values);
  r.region_labels.assign(r.tokens, RegionLabel::visual_text);
  return r;
}

// Original rows carry `delta` on every aligned token; inpainted rows are zero.
PairedSample pair_with(const std::vector<float>& delta, std::uint32_t tokens, std::uint32_t layer = 3) {
  const auto d = static_cast<std::uint32_t>(delta.size());
  std::vector<float> a, b(tokens * d, 0.0f);
  for (std::uint32_t t = 0; t < tokens; ++t) a.insert(a.end(), delta.begin(), delta.end());
  PairedSample s;
  s.sample_id = "p";
  s.original.push_back(rec(layer, d, a));
  s.inpainted.push_back(rec(layer, d, b));
  for (std::uint32_t t = 0; t < tokens; ++t) s.aligned_positions.push_back(t);
  return s;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an ocrlens::Error";
  return ErrorCode::IoFailure;
}

DirectionSet sample_set() {
  std::mt19937_64 rng(31);
  DirectionSet set;
  set.model_id = "toy-a";
  set.hidden = 6;
  set.source_tag = "unit";
  for (std::uint32_t layer : {2u, 5u}) {
    DeltaSampleSet ds;
    ds.layer = layer;
    ds.samples = Matrix(40, 6);
    for (std::size_t r = 0; r < 40; ++r)
      for (std::size_t c = 0; c < 6; ++c) ds.samples(r, c) = (c + 1) * standard_normal(rng);
    PrincipalSubspace s = fit_directions(ds, 3);
    s.source_tag = "unit";
    set.subspaces.push_back(s);
  }
  return set;
}

}  // namespace

TEST(Deltas, MeanPoolingByHand) {
  PairedSample s;
  s.sample_id = "hand";
  s.original.push_back(rec(1, 2, {1, 2, 3, 4, 5, 6}));
  s.inpainted.push_back(rec(1, 2, {0, 0, 1, 1, 5, 6}));
  s.aligned_positions = {0, 1};
  const DeltaSampleSet mean = compute_deltas(std::vector<PairedSample>{s}, 1, Pooling::mean_tokens);
  ASSERT_EQ(mean.samples.rows(), 1u);
  EXPECT_DOUBLE_EQ(mean.samples(0, 0), 1.5);
  EXPECT_DOUBLE_EQ(mean.samples(0, 1), 2.5);
  const DeltaSampleSet last = compute_deltas(std::vector<PairedSample>{s}, 1, Pooling::last_token);
  EXPECT_DOUBLE_EQ(last.samples(0, 0), 2.0);
  EXPECT_DOUBLE_EQ(last.samples(0, 1), 3.0);
}

TEST(Deltas, PerTokenGivesOneRowPerPosition) {
  const std::vector<PairedSample> pairs = {pair_with({1, 0}, 3), pair_with({0, 1}, 3)};
  const DeltaSampleSet set = compute_deltas(pairs, 3, Pooling::per_token);
  EXPECT_EQ(set.samples.rows(), 6u);
  EXPECT_EQ(set.samples.cols(), 2u);
}

TEST(Deltas, PoolingsAgreeOnSingleToken) {
  std::mt19937_64 rng(2);
  std::vector<PairedSample> pairs;
  for (int i = 0; i < 5; ++i) pairs.push_back(pair_with({float(standard_normal(rng)), float(standard_normal(rng))}, 1));
  const Matrix a = compute_deltas(pairs, 3, Pooling::last_token).samples;
  EXPECT_EQ(a, compute_deltas(pairs, 3, Pooling::mean_tokens).samples);
  EXPECT_EQ(a, compute_deltas(pairs, 3, Pooling::per_token).samples);
}

TEST(Deltas, Errors) {
  std::vector<PairedSample> pairs = {pair_with({1, 2}, 2)};
  EXPECT_EQ(code_of([&] { compute_deltas(pairs, 4, Pooling::mean_tokens); }), ErrorCode::LayerNotCaptured);
  pairs[0].aligned_positions.clear();
  EXPECT_EQ(code_of([&] { compute_deltas(pairs, 3, Pooling::mean_tokens); }), ErrorCode::NoAlignedPositions);
  pairs = {pair_with({1, 2}, 2), pair_with({1, 2, 3}, 2)};
  EXPECT_EQ(code_of([&] { compute_deltas(pairs, 3, Pooling::mean_tokens); }), ErrorCode::DimensionMismatch);
}

TEST(Deltas, LinearInTheDifference) {
  const std::vector<float> v = {0.5f, -1.0f, 2.0f};
  const Matrix one = compute_deltas(std::vector<PairedSample>{pair_with(v, 2)}, 3, Pooling::mean_tokens).samples;
  std::vector<float> twice = v;
  for (float& x : twice) x *= 2.0f;
  const Matrix two = compute_deltas(std::vector<PairedSample>{pair_with(twice, 2)}, 3, Pooling::mean_tokens).samples;
  for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(two(0, i), 2.0 * one(0, i));
}

TEST(Fit, RecoversPlantedDirection) {
  std::mt19937_64 rng(8);
  std::vector<double> u = {1, 2, 0, -1, 0.5, 0};
  const double un = norm(u);
  for (double& x : u) x /= un;
  std::vector<PairedSample> pairs;
  for (int i = 0; i < 200; ++i) {
    const double a = 3.0 * standard_normal(rng);
    std::vector<float> delta;
    for (double x : u) delta.push_back(static_cast<float>(a * x + 0.05 * standard_normal(rng)));
    pairs.push_back(pair_with(delta, 1));
  }
  const PrincipalSubspace s = fit_directions(compute_deltas(pairs, 3, Pooling::mean_tokens), 1);
  EXPECT_GE(std::abs(dot(s.components.row(0), u)), 0.999);
  EXPECT_GT(s.variance_ratios[0], 0.99);
}

TEST(Fit, AnisotropicRatios) {
  std::mt19937_64 rng(12);
  DeltaSampleSet set;
  set.samples = Matrix(500, 2);
  for (std::size_t r = 0; r < 500; ++r) {
    set.samples(r, 0) = std::sqrt(3.0) * standard_normal(rng);
    set.samples(r, 1) = standard_normal(rng);
  }
  const PrincipalSubspace s = fit_directions(set, 2);
  EXPECT_NEAR(s.variance_ratios[0], 0.75, 0.02);
  EXPECT_NEAR(s.variance_ratios[1], 0.25, 0.02);
  EXPECT_EQ(s.fit_sample_count, 500u);
}

TEST(Fit, Errors) {
  DeltaSampleSet set;
  set.samples = Matrix(10, 4);
  EXPECT_EQ(code_of([&] { fit_directions(set, 1); }), ErrorCode::DegenerateData);
  EXPECT_EQ(code_of([&] { fit_directions(set, 0); }), ErrorCode::KOutOfRange);
  EXPECT_EQ(code_of([&] { fit_directions(set, 5); }), ErrorCode::KOutOfRange);
  set.samples = Matrix(1, 4);
  set.samples(0, 0) = 1;
  EXPECT_EQ(code_of([&] { fit_directions(set, 1); }), ErrorCode::TooFewSamples);
  set.samples = Matrix(3, 2);
  set.samples(0, 0) = NAN;
  EXPECT_EQ(code_of([&] { fit_directions(set, 1); }), ErrorCode::NonFinite);
}

TEST(Pcad, RoundtripEqualsQuantized) {
  const DirectionSet set = sample_set();
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  const std::uint64_t bytes = save_directions(set, buf);
  EXPECT_EQ(bytes, buf.str().size());
  const DirectionSet back = load_directions(buf);
  EXPECT_EQ(back, quantized(set));
  // a second cycle is bit-exact
  std::stringstream again(std::ios::in | std::ios::out | std::ios::binary);
  save_directions(back, again);
  EXPECT_EQ(again.str(), buf.str());
}

TEST(Pcad, ExpectationsAreChecked) {
  const DirectionSet set = sample_set();
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  save_directions(set, buf);
  const std::string bytes = buf.str();
  auto load = [&](DirectionExpectation e) {
    std::istringstream in(bytes, std::ios::binary);
    return load_directions(in, e);
  };
  EXPECT_NO_THROW(load({std::string("toy-a"), 6u}));
  EXPECT_EQ(code_of([&] { load({std::string("toy-b"), std::nullopt}); }), ErrorCode::ModelMismatch);
  EXPECT_EQ(code_of([&] { load({std::nullopt, 8u}); }), ErrorCode::ModelMismatch);
}

TEST(Pcad, CorruptionIsDetected) {
  const DirectionSet set = sample_set();
  std::ostringstream out(std::ios::binary);
  save_directions(set, out);
  const std::string bytes = out.str();
  auto load = [](const std::string& b) {
    std::istringstream in(b, std::ios::binary);
    load_directions(in);
  };
  std::string flipped = bytes;
  flipped[flipped.size() - 9] ^= 0x40;
  EXPECT_EQ(code_of([&] { load(flipped); }), ErrorCode::ChecksumMismatch);
  EXPECT_EQ(code_of([&] { load("ACTB" + bytes.substr(4)); }), ErrorCode::BadMagic);
  EXPECT_EQ(code_of([&] { load(bytes.substr(0, bytes.size() - 3)); }), ErrorCode::Truncated);
  EXPECT_EQ(code_of([&] { load(bytes + "x"); }), ErrorCode::InvalidRecord);
}

TEST(Pcad, WriterRejectsInconsistentSets) {
  DirectionSet set = sample_set();
  std::swap(set.subspaces[0], set.subspaces[1]);
  std::ostringstream out;
  EXPECT_EQ(code_of([&] { save_directions(set, out); }), ErrorCode::InconsistentManifest);
  set = sample_set();
  set.hidden = 7;
  EXPECT_EQ(code_of([&] { save_directions(set, out); }), ErrorCode::InconsistentManifest);
}

TEST(Pcad, PoolingNames) {
  for (Pooling p : {Pooling::last_token, Pooling::mean_tokens, Pooling::per_token})
    EXPECT_EQ(parse_pooling(to_string(p)), p);
  EXPECT_THROW(parse_pooling("median"), Error);
}
