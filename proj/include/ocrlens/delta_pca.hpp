#pragma once

// Activation deltas between paired runs, per-layer principal subspaces, and
// the .pcad direction file.
//
// .pcad layout (little-endian):
//
//   "PCAD", u32 version (1)
//   u32 manifest_len, JSON {model_id, hidden, pooling, source_tag, layers,
//                           fit_sample_counts, has_ties}
//   per layer, in manifest order:
//     u32 layer, u32 N, u32 d,
//     f32 × N·d components (row-major), f32 × d delta_mean, f32 × N ratios,
//     u32 CRC32 over the block from `layer` through the ratios

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ocrlens/activation_store.hpp"
#include "ocrlens/tensor.hpp"

namespace ocrlens {

enum class Pooling { last_token, mean_tokens, per_token };

// CLI spelling: "last", "mean", "per-token".
std::string_view to_string(Pooling pooling);
Pooling parse_pooling(std::string_view text);

struct DeltaSampleSet {
  std::uint32_t layer = 0;
  Pooling pooling = Pooling::mean_tokens;
  Matrix samples;  // n × d rows of h_original − h_inpainted
  std::string source_tag;
};

// Throws LayerNotCaptured / NoAlignedPositions / DimensionMismatch.
DeltaSampleSet compute_deltas(std::span<const PairedSample> pairs, std::uint32_t layer, Pooling pooling,
                              std::string source_tag = {});

inline constexpr std::size_t kMaxComponents = 64;

struct PrincipalSubspace {
  std::uint32_t layer = 0;
  Matrix components;  // N × d, orthonormal rows
  std::vector<double> variance_ratios;
  std::vector<double> delta_mean;
  Pooling pooling = Pooling::mean_tokens;
  std::string source_tag;
  std::size_t fit_sample_count = 0;
  bool has_ties = false;

  std::size_t size() const { return components.rows(); }
  std::size_t hidden() const { return components.cols(); }

  friend bool operator==(const PrincipalSubspace&, const PrincipalSubspace&) = default;
};

// PCA of the mean-centred deltas. Throws TooFewSamples (n < max(2, k)),
// KOutOfRange (k == 0, k > d or k > 64), DegenerateData, NonFinite.
PrincipalSubspace fit_directions(const DeltaSampleSet& set, std::size_t k);

struct DirectionSet {
  std::string model_id;
  std::uint32_t hidden = 0;
  Pooling pooling = Pooling::mean_tokens;
  std::string source_tag;
  std::vector<PrincipalSubspace> subspaces;  // strictly increasing layers

  const PrincipalSubspace* at(std::uint32_t layer) const;

  friend bool operator==(const DirectionSet&, const DirectionSet&) = default;
};

struct DirectionExpectation {
  std::optional<std::string> model_id;
  std::optional<std::uint32_t> hidden;
};

inline constexpr std::uint32_t kPcadVersion = 1;
inline constexpr double kLoadOrthonormalTolerance = 1e-5;

// Throws InconsistentManifest (layer order, dimension or pooling disagreement)
// or SinkFailure. Returns the byte count.
std::uint64_t save_directions(const DirectionSet& set, std::ostream& destination);
std::uint64_t save_directions_file(const std::filesystem::path& path, const DirectionSet& set);

// Throws BadMagic, VersionUnsupported, Truncated, ChecksumMismatch,
// InvalidRecord, or ModelMismatch when `expect` disagrees with the manifest.
DirectionSet load_directions(std::istream& source, const DirectionExpectation& expect = {});
DirectionSet load_directions_file(const std::filesystem::path& path, const DirectionExpectation& expect = {});

// Rounds every stored quantity through float32, i.e. what a save/load cycle yields.
DirectionSet quantized(const DirectionSet& set);

}  // namespace ocrlens
