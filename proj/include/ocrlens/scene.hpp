#pragma once

// Symbolic 6×6 scenes for the toy model, their JSON form, corpus generation,
// and paired (original, inpainted) rendering.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace ocrlens {

inline constexpr int kGridSide = 6;
inline constexpr int kPatchCount = kGridSide * kGridSide;
inline constexpr int kGlyphCodes = 16;
inline constexpr int kPromptTokens = 4;
inline constexpr int kPrefillTokens = kPatchCount + kPromptTokens;
inline constexpr int kMaxObjects = 9;

enum class PatchKind : std::uint8_t { background, object, text_glyph, spatial_marker };

struct Patch {
  PatchKind kind = PatchKind::background;
  int glyph = -1;  // 0..15 for text_glyph, else -1

  friend bool operator==(const Patch&, const Patch&) = default;
};

enum class Question { read_text, count_objects, left_of_marker };

std::string_view to_string(Question q);
Question parse_question(std::string_view text);

struct ToyScene {
  std::string id;
  std::array<Patch, kPatchCount> grid{};
  Question question = Question::read_text;
  std::string answer;
  std::uint64_t seed = 0;

  const Patch& at(int row, int col) const { return grid[row * kGridSide + col]; }
  Patch& at(int row, int col) { return grid[row * kGridSide + col]; }

  friend bool operator==(const ToyScene&, const ToyScene&) = default;
};

// "glyph07": fixed width, so no glyph name is a substring of another.
std::string glyph_token(int code);

int object_count(const ToyScene& scene);
std::vector<int> text_patches(const ToyScene& scene);
bool has_text(const ToyScene& scene);
std::optional<int> text_code(const ToyScene& scene);
std::string derive_answer(const ToyScene& scene);

// Throws SceneInvalid: more than one text region, mixed codes within the
// region, object count outside 1..9, spatial scenes without exactly one
// marker or with the object centroid on the marker column, answer mismatch.
void validate_scene(const ToyScene& scene);

// Grid rows serialise as 6-character strings: '.' background, 'o' object,
// 'm' marker, hex digit for a glyph code.
nlohmann::json scene_to_json(const ToyScene& scene);
ToyScene scene_from_json(const nlohmann::json& j);
nlohmann::json scenes_to_json(std::span<const ToyScene> scenes);
std::vector<ToyScene> scenes_from_json(const nlohmann::json& j);
void write_scene_file(const std::filesystem::path& path, std::span<const ToyScene> scenes);
std::vector<ToyScene> read_scene_file(const std::filesystem::path& path);

enum class TextPlacement { anywhere, top_left, bottom_right };

struct SceneDistribution {
  Question question = Question::read_text;
  std::vector<int> glyph_codes;  // empty means all 16
  TextPlacement placement = TextPlacement::anywhere;
  double text_probability = 1.0;  // forced to 1 for read_text
  int text_length = 2;            // horizontal run of glyph patches
  int min_objects = 1;
  int max_objects = kMaxObjects;
  std::string tag = "toy";
};

// Glyph codes cycle through `glyph_codes` in order so every code is equally
// represented. Scene i has id "<tag>-<seed>-<i>".
std::vector<ToyScene> generate_scenes(const SceneDistribution& dist, std::size_t count, std::uint64_t seed);

// Rendering keeps scenes symbolic: every visual patch carries a noise seed from
// which the model draws its feature noise, so unchanged patches are identical
// between the two halves of a pair.
struct RenderedPatch {
  PatchKind kind = PatchKind::background;
  int glyph = -1;
  std::uint64_t noise_seed = 0;
};

struct RenderedScene {
  std::string scene_id;
  Question question = Question::read_text;
  std::array<RenderedPatch, kPatchCount> patches{};
};

struct RenderedPair {
  RenderedScene original;
  RenderedScene inpainted;
  std::vector<int> changed_patches;
};

RenderedScene render(const ToyScene& scene);

// Text patches become background with fresh noise; everything else identical.
RenderedPair render_pair(const ToyScene& scene);

// Control pair: a background region sized like the text region (at least one
// patch) is re-rendered as background with fresh noise. Text stays intact.
RenderedPair render_random_box_pair(const ToyScene& scene, std::uint64_t salt);

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t stable_hash(std::string_view text);

}  // namespace ocrlens
