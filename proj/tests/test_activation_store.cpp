#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "ocrlens/activation_store.hpp"
#include "ocrlens/error.hpp"

using namespace ocrlens;

namespace {

RunManifest small_manifest(std::vector<std::uint32_t> layers = {0, 2}) {
  RunManifest m;
  m.model_id = "toy-test";
  m.layer_count = 4;
  m.hidden = 8;
  m.head_count = 2;
  m.capture_layers = std::move(layers);
  return m;
}

ActivationRecord record(const std::string& id, std::uint32_t layer, std::uint32_t tokens, std::uint32_t hidden,
                        std::mt19937_64& rng) {
  ActivationRecord r;
  r.sample_id = id;
  r.layer = layer;
  r.tokens = tokens;
  r.hidden = hidden;
  std::normal_distribution<float> n;
  for (std::uint32_t i = 0; i < tokens * hidden; ++i) r.values.push_back(n(rng));
  for (std::uint32_t t = 0; t < tokens; ++t) r.region_labels.push_back(static_cast<RegionLabel>(t % 4));
  return r;
}

PairedSample sample(const std::string& id, const RunManifest& m, std::uint32_t tokens, std::mt19937_64& rng) {
  PairedSample s;
  s.sample_id = id;
  for (std::uint32_t l : m.capture_layers) {
    s.original.push_back(record(id, l, tokens, m.hidden, rng));
    s.inpainted.push_back(record(id, l, tokens, m.hidden, rng));
  }
  for (std::uint32_t t = 0; t < tokens; ++t) s.aligned_positions.push_back(t);
  return s;
}

std::string bytes_of(std::span<const PairedSample> samples, const RunManifest& m) {
  std::ostringstream out(std::ios::binary);
  write_actb(samples, m, out);
  return out.str();
}

ActbContents parse(const std::string& bytes) {
  std::istringstream in(bytes, std::ios::binary);
  return read_actb(in);
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

}  // namespace

TEST(Actb, EmptyRecordList) {
  const RunManifest m = small_manifest();
  const std::string bytes = bytes_of({}, m);
  const ActbContents c = parse(bytes);
  EXPECT_TRUE(c.samples.empty());
  EXPECT_EQ(c.manifest, m);
}

TEST(Actb, SizeArithmetic) {
  std::mt19937_64 rng(1);
  const RunManifest m = small_manifest();
  const std::vector<PairedSample> one = {sample("s0", m, 4, rng)};
  const std::string empty = bytes_of({}, m);
  const std::string bytes = bytes_of(one, m);
  // id + aligned list, then per side: T + labels + 2 blocks of (12-byte header, 4·8 floats, crc)
  const std::size_t expected = (4 + 2) + (4 + 4 * 4) + 2 * ((4 + 4) + 2 * (12 + 4 * 8 * 4 + 4));
  EXPECT_EQ(bytes.size() - empty.size(), expected);
}

TEST(Actb, RoundtripIsBitExact) {
  std::mt19937_64 rng(2);
  const RunManifest m = small_manifest({1, 2, 3});
  std::vector<PairedSample> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(sample("sample-" + std::to_string(i), m, 3 + i, rng));
  samples[2].original[1].values[3] = -0.0f;
  samples[3].inpainted[0].values[0] = 1e-40f;  // subnormal
  const std::string bytes = bytes_of(samples, m);
  const ActbContents c = parse(bytes);
  ASSERT_EQ(c.samples.size(), samples.size());
  EXPECT_EQ(c.samples, samples);
  EXPECT_TRUE(std::signbit(c.samples[2].original[1].values[3]));
  EXPECT_EQ(bytes_of(c.samples, c.manifest), bytes);
}

TEST(Actb, WritesAreDeterministic) {
  std::mt19937_64 a(3), b(3);
  const RunManifest m = small_manifest();
  const std::vector<PairedSample> x = {sample("x", m, 2, a)};
  const std::vector<PairedSample> y = {sample("x", m, 2, b)};
  EXPECT_EQ(bytes_of(x, m), bytes_of(y, m));
}

TEST(Actb, CorruptMagic) {
  std::string bytes = bytes_of({}, small_manifest());
  bytes[0] = 'X';
  EXPECT_EQ(code_of([&] { parse(bytes); }), ErrorCode::BadMagic);
}

TEST(Actb, UnsupportedVersion) {
  std::string bytes = bytes_of({}, small_manifest());
  bytes[4] = 9;
  EXPECT_EQ(code_of([&] { parse(bytes); }), ErrorCode::VersionUnsupported);
}

TEST(Actb, TruncationAnywhereIsDetected) {
  std::mt19937_64 rng(4);
  const RunManifest m = small_manifest();
  const std::vector<PairedSample> s = {sample("s", m, 2, rng)};
  const std::string bytes = bytes_of(s, m);
  for (std::size_t cut = 0; cut < bytes.size(); cut += 7) {
    const ErrorCode c = code_of([&] { parse(bytes.substr(0, cut)); });
    EXPECT_TRUE(c == ErrorCode::Truncated || c == ErrorCode::BadMagic || c == ErrorCode::InconsistentManifest)
        << "cut at " << cut << " gave " << to_string(c);
  }
}

TEST(Actb, PayloadFlipFailsChecksum) {
  std::mt19937_64 rng(5);
  const RunManifest m = small_manifest();
  const std::vector<PairedSample> s = {sample("s", m, 2, rng)};
  std::string bytes = bytes_of(s, m);
  bytes[bytes.size() - 10] ^= 0x01;
  EXPECT_EQ(code_of([&] { parse(bytes); }), ErrorCode::ChecksumMismatch);
}

TEST(Actb, TrailingBytesRejected) {
  std::string bytes = bytes_of({}, small_manifest()) + "junk";
  EXPECT_EQ(code_of([&] { parse(bytes); }), ErrorCode::InvalidRecord);
}

TEST(Actb, InconsistentInputsRejectedOnWrite) {
  std::mt19937_64 rng(6);
  const RunManifest m = small_manifest();
  PairedSample s = sample("s", m, 2, rng);
  s.inpainted.pop_back();
  std::ostringstream out;
  EXPECT_EQ(code_of([&] { write_actb(std::vector<PairedSample>{s}, m, out); }), ErrorCode::InconsistentManifest);

  RunManifest bad = m;
  bad.capture_layers = {2, 1};
  EXPECT_EQ(code_of([&] { write_actb({}, bad, out); }), ErrorCode::InconsistentManifest);
  bad.capture_layers = {4};
  EXPECT_EQ(code_of([&] { write_actb({}, bad, out); }), ErrorCode::InconsistentManifest);
}

TEST(Actb, ValidationGivesOneDiagnostic) {
  std::mt19937_64 rng(7);
  const RunManifest m = small_manifest();
  ActivationRecord r = record("r", 0, 2, 8, rng);
  EXPECT_FALSE(validate_record(r, m).has_value());
  r.values[0] = std::numeric_limits<float>::infinity();
  r.region_labels.pop_back();
  const auto err = validate_record(r, m);
  ASSERT_TRUE(err.has_value());
  EXPECT_NE(std::string(err->what()).find(':'), std::string::npos);

  PairedSample s = sample("s", m, 2, rng);
  s.aligned_positions.clear();
  EXPECT_TRUE(validate_sample(s, m).has_value());
}

TEST(Actb, ManifestJsonRoundtrip) {
  RunManifest m = small_manifest();
  m.split = SplitTag::eval;
  EXPECT_EQ(manifest_from_json(manifest_to_json(m)), m);
  auto j = manifest_to_json(m);
  j["endianness"] = "big";
  EXPECT_EQ(code_of([&] { manifest_from_json(j); }), ErrorCode::InconsistentManifest);
}

TEST(Actb, FileRoundtripAndMissingFile) {
  std::mt19937_64 rng(8);
  const RunManifest m = small_manifest();
  const std::vector<PairedSample> s = {sample("f", m, 3, rng)};
  const auto path = std::filesystem::temp_directory_path() / "ocrlens_roundtrip.actb";
  write_actb_file(path, s, m);
  EXPECT_EQ(read_actb_file(path).samples, s);
  std::filesystem::remove(path);
  EXPECT_EQ(code_of([&] { read_actb_file(path); }), ErrorCode::IoFailure);
}

// Produced by tests/tools/make_golden_actb.py, an independent struct-based writer.
TEST(Actb, GoldenFixtureFromIndependentWriter) {
  const ActbContents c = read_actb_file(std::filesystem::path(OCRLENS_TEST_DATA) / "golden_small.actb");
  EXPECT_EQ(c.manifest.model_id, "toy-golden");
  EXPECT_EQ(c.manifest.layer_count, 4u);
  EXPECT_EQ(c.manifest.hidden, 8u);
  EXPECT_EQ(c.manifest.head_count, 2u);
  EXPECT_EQ(c.manifest.capture_layers, (std::vector<std::uint32_t>{0, 2}));
  EXPECT_EQ(c.manifest.split, SplitTag::eval);
  ASSERT_EQ(c.samples.size(), 2u);
  const PairedSample& s1 = c.samples[1];
  EXPECT_EQ(s1.sample_id, "golden-1");
  EXPECT_EQ(s1.aligned_positions, (std::vector<std::uint32_t>{0, 1, 2}));
  const ActivationRecord* r = s1.original_at(2);
  ASSERT_NE(r, nullptr);
  EXPECT_EQ(r->region_labels,
            (std::vector<RegionLabel>{RegionLabel::visual_text, RegionLabel::visual_background,
                                      RegionLabel::prompt_text}));
  // value = (s+1)/2 + layer/4 + t/8 + i/16, negated for odd i; inpainted halves it
  EXPECT_EQ(r->row(1)[3], -(1.0f + 0.5f + 0.125f + 0.1875f));
  EXPECT_EQ(s1.inpainted_at(2)->row(1)[2], 0.5f * (1.0f + 0.5f + 0.125f + 0.125f));

  std::ifstream in(std::filesystem::path(OCRLENS_TEST_DATA) / "golden_small.actb", std::ios::binary);
  const std::string golden((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  EXPECT_EQ(bytes_of(c.samples, c.manifest), golden);
}
