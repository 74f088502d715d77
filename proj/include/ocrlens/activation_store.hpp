#pragma once

// Activation interchange: in-memory records for paired forward passes and the
// .actb container shared with external exporters.
//
// .actb layout (all integers little-endian):
//
//   "ACTB"                      4-byte magic
//   u32 version                 currently 1
//   u32 manifest_len, bytes     RunManifest as UTF-8 JSON (keys sorted)
//   u64 sample_count
//   per sample:
//     u32 id_len, id bytes
//     u32 aligned_count, u32 × aligned_count
//     for side in (original, inpainted):
//       u32 T, u8 × T region labels (0..3)
//       per capture layer, in manifest order:
//         u32 layer, u32 T, u32 d, f32 × T·d (row-major),
//         u32 CRC32 over the block from `layer` through the payload

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ocrlens/error.hpp"

namespace ocrlens {

enum class RegionLabel : std::uint8_t {
  visual_text = 0,
  visual_background = 1,
  prompt_text = 2,
  generated = 3,
};

enum class DType : std::uint32_t { float32 = 0 };
enum class SplitTag { pca_train, eval };

std::string_view to_string(SplitTag split);
SplitTag parse_split_tag(std::string_view text);

inline constexpr std::uint32_t kActbVersion = 1;

struct ActivationRecord {
  std::string sample_id;
  std::uint32_t layer = 0;
  std::uint32_t tokens = 0;
  std::uint32_t hidden = 0;
  std::vector<float> values;  // tokens × hidden, row-major
  std::vector<RegionLabel> region_labels;

  std::span<const float> row(std::size_t t) const {
    return std::span<const float>(values).subspan(t * hidden, hidden);
  }

  friend bool operator==(const ActivationRecord&, const ActivationRecord&) = default;
};

struct PairedSample {
  std::string sample_id;
  std::vector<ActivationRecord> original;   // one per captured layer
  std::vector<ActivationRecord> inpainted;
  std::vector<std::uint32_t> aligned_positions;

  const ActivationRecord* original_at(std::uint32_t layer) const;
  const ActivationRecord* inpainted_at(std::uint32_t layer) const;

  friend bool operator==(const PairedSample&, const PairedSample&) = default;
};

struct RunManifest {
  std::string model_id;
  std::uint32_t layer_count = 0;
  std::uint32_t hidden = 0;
  std::uint32_t head_count = 0;
  std::vector<std::uint32_t> capture_layers;
  DType dtype = DType::float32;
  SplitTag split = SplitTag::pca_train;

  friend bool operator==(const RunManifest&, const RunManifest&) = default;
};

nlohmann::json manifest_to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::json& j);

// Validation returns the first violated rule, so every rejected record carries
// exactly one diagnostic.
std::optional<Error> validate_manifest(const RunManifest& manifest);
std::optional<Error> validate_record(const ActivationRecord& record, const RunManifest& manifest);
std::optional<Error> validate_sample(const PairedSample& sample, const RunManifest& manifest);

// Returns the number of bytes written. Throws InconsistentManifest or SinkFailure.
std::uint64_t write_actb(std::span<const PairedSample> samples, const RunManifest& manifest,
                         std::ostream& destination);

struct ActbContents {
  std::vector<PairedSample> samples;
  RunManifest manifest;
};

// Throws BadMagic, VersionUnsupported, ChecksumMismatch, Truncated, or
// InvalidRecord for content that decodes but violates the record rules.
ActbContents read_actb(std::istream& source);

std::uint64_t write_actb_file(const std::filesystem::path& path, std::span<const PairedSample> samples,
                              const RunManifest& manifest);
ActbContents read_actb_file(const std::filesystem::path& path);

}  // namespace ocrlens
