#include "ocrlens/scene.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>

#include "ocrlens/error.hpp"
#include "ocrlens/tensor.hpp"

namespace ocrlens {

namespace {

constexpr std::uint64_t kInpaintSalt = 0x5eed'1a9e'0f00'0001ULL;

char patch_char(const Patch& p) {
  switch (p.kind) {
    case PatchKind::background: return '.';
    case PatchKind::object: return 'o';
    case PatchKind::spatial_marker: return 'm';
    case PatchKind::text_glyph: return "0123456789abcdef"[p.glyph & 0xF];
  }
  return '?';
}

Patch patch_from_char(char c) {
  if (c == '.') return {PatchKind::background, -1};
  if (c == 'o') return {PatchKind::object, -1};
  if (c == 'm') return {PatchKind::spatial_marker, -1};
  if (c >= '0' && c <= '9') return {PatchKind::text_glyph, c - '0'};
  if (c >= 'a' && c <= 'f') return {PatchKind::text_glyph, 10 + (c - 'a')};
  throw Error(ErrorCode::SceneInvalid, std::string("unknown grid character '") + c + "'");
}

std::optional<int> marker_patch(const ToyScene& s) {
  std::optional<int> found;
  for (int i = 0; i < kPatchCount; ++i) {
    if (s.grid[i].kind == PatchKind::spatial_marker) {
      if (found) return std::nullopt;
      found = i;
    }
  }
  return found;
}

int marker_count(const ToyScene& s) {
  return static_cast<int>(std::count_if(s.grid.begin(), s.grid.end(), [](const Patch& p) {
    return p.kind == PatchKind::spatial_marker;
  }));
}

double mean_object_column(const ToyScene& s) {
  double sum = 0.0;
  int n = 0;
  for (int i = 0; i < kPatchCount; ++i) {
    if (s.grid[i].kind == PatchKind::object) {
      sum += i % kGridSide;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  // inclusive range, portable across standard libraries
  const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
  return lo + static_cast<int>(rng() % span);
}

template <typename T>
void portable_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) {
    const std::size_t j = rng() % i;
    std::swap(v[i - 1], v[j]);
  }
}

std::vector<int> free_patches(const ToyScene& s) {
  std::vector<int> out;
  for (int i = 0; i < kPatchCount; ++i)
    if (s.grid[i].kind == PatchKind::background) out.push_back(i);
  return out;
}

void place_text(ToyScene& s, int code, TextPlacement placement, int length, std::mt19937_64& rng) {
  int row_lo = 0, row_hi = kGridSide - 1, col_lo = 0, col_hi = kGridSide - 1;
  if (placement == TextPlacement::top_left) {
    row_hi = 2;
    col_hi = 2;
  } else if (placement == TextPlacement::bottom_right) {
    row_lo = 3;
    col_lo = 3;
  }
  const int max_start = col_hi - length + 1;
  if (max_start < col_lo) throw Error(ErrorCode::SceneInvalid, "text run does not fit the placement region");
  const int row = uniform_int(rng, row_lo, row_hi);
  const int col = uniform_int(rng, col_lo, max_start);
  for (int c = col; c < col + length; ++c) s.at(row, c) = {PatchKind::text_glyph, code};
}

}  // namespace

std::string_view to_string(Question q) {
  switch (q) {
    case Question::read_text: return "read_text";
    case Question::count_objects: return "count_objects";
    case Question::left_of_marker: return "left_of_marker";
  }
  return "unknown";
}

Question parse_question(std::string_view text) {
  if (text == "read_text") return Question::read_text;
  if (text == "count_objects") return Question::count_objects;
  if (text == "left_of_marker") return Question::left_of_marker;
  throw Error(ErrorCode::SceneInvalid, "unknown question '" + std::string(text) + "'");
}

std::string glyph_token(int code) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "glyph%02d", code);
  return buf;
}

int object_count(const ToyScene& s) {
  return static_cast<int>(std::count_if(s.grid.begin(), s.grid.end(),
                                        [](const Patch& p) { return p.kind == PatchKind::object; }));
}

std::vector<int> text_patches(const ToyScene& s) {
  std::vector<int> out;
  for (int i = 0; i < kPatchCount; ++i)
    if (s.grid[i].kind == PatchKind::text_glyph) out.push_back(i);
  return out;
}

bool has_text(const ToyScene& s) { return !text_patches(s).empty(); }

std::optional<int> text_code(const ToyScene& s) {
  for (const Patch& p : s.grid)
    if (p.kind == PatchKind::text_glyph) return p.glyph;
  return std::nullopt;
}

std::string derive_answer(const ToyScene& s) {
  switch (s.question) {
    case Question::read_text: {
      auto code = text_code(s);
      return code ? glyph_token(*code) : std::string();
    }
    case Question::count_objects:
      return std::to_string(object_count(s));
    case Question::left_of_marker: {
      auto marker = marker_patch(s);
      if (!marker) return {};
      return mean_object_column(s) < (*marker % kGridSide) ? "yes" : "no";
    }
  }
  return {};
}

void validate_scene(const ToyScene& s) {
  const std::vector<int> text = text_patches(s);
  if (!text.empty()) {
    const int code = s.grid[text.front()].glyph;
    for (int i : text) {
      if (s.grid[i].glyph != code) throw Error(ErrorCode::SceneInvalid, "scene '" + s.id + "' mixes glyph codes");
      if (code < 0 || code >= kGlyphCodes) throw Error(ErrorCode::SceneInvalid, "glyph code out of range");
    }
    // one 4-connected region
    std::vector<int> seen{text.front()};
    std::vector<int> frontier{text.front()};
    while (!frontier.empty()) {
      const int cur = frontier.back();
      frontier.pop_back();
      const int r = cur / kGridSide, c = cur % kGridSide;
      const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nbrs) {
        if (n[0] < 0 || n[0] >= kGridSide || n[1] < 0 || n[1] >= kGridSide) continue;
        const int idx = n[0] * kGridSide + n[1];
        if (s.grid[idx].kind == PatchKind::text_glyph &&
            std::find(seen.begin(), seen.end(), idx) == seen.end()) {
          seen.push_back(idx);
          frontier.push_back(idx);
        }
      }
    }
    if (seen.size() != text.size()) {
      throw Error(ErrorCode::SceneInvalid, "scene '" + s.id + "' has more than one text region");
    }
  }
  const int objects = object_count(s);
  if (objects < 1 || objects > kMaxObjects) {
    throw Error(ErrorCode::SceneInvalid, "scene '" + s.id + "' object count " + std::to_string(objects));
  }
  if (marker_count(s) > 1) throw Error(ErrorCode::SceneInvalid, "scene '" + s.id + "' has several markers");
  if (s.question == Question::read_text && text.empty()) {
    throw Error(ErrorCode::SceneInvalid, "read_text scene '" + s.id + "' has no text");
  }
  if (s.question == Question::left_of_marker) {
    auto marker = marker_patch(s);
    if (!marker) throw Error(ErrorCode::SceneInvalid, "spatial scene '" + s.id + "' needs one marker");
    if (std::abs(mean_object_column(s) - (*marker % kGridSide)) < 0.5) {
      throw Error(ErrorCode::SceneInvalid, "spatial scene '" + s.id + "' is ambiguous");
    }
  }
  if (s.answer != derive_answer(s)) {
    throw Error(ErrorCode::SceneInvalid, "scene '" + s.id + "' answer '" + s.answer + "' != '" +
                                             derive_answer(s) + "'");
  }
}

nlohmann::json scene_to_json(const ToyScene& s) {
  nlohmann::json grid = nlohmann::json::array();
  for (int r = 0; r < kGridSide; ++r) {
    std::string row;
    for (int c = 0; c < kGridSide; ++c) row.push_back(patch_char(s.at(r, c)));
    grid.push_back(row);
  }
  return {{"id", s.id}, {"grid", grid}, {"question", std::string(to_string(s.question))},
          {"answer", s.answer}, {"seed", s.seed}};
}

ToyScene scene_from_json(const nlohmann::json& j) {
  ToyScene s;
  try {
    s.id = j.at("id").get<std::string>();
    s.question = parse_question(j.at("question").get<std::string>());
    s.answer = j.at("answer").get<std::string>();
    s.seed = j.at("seed").get<std::uint64_t>();
    const auto& grid = j.at("grid");
    if (!grid.is_array() || grid.size() != kGridSide) throw Error(ErrorCode::SceneInvalid, "grid needs 6 rows");
    for (int r = 0; r < kGridSide; ++r) {
      const std::string row = grid[r].get<std::string>();
      if (row.size() != kGridSide) throw Error(ErrorCode::SceneInvalid, "grid rows need 6 cells");
      for (int c = 0; c < kGridSide; ++c) s.at(r, c) = patch_from_char(row[c]);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SceneInvalid, std::string("malformed scene: ") + e.what());
  }
  validate_scene(s);
  return s;
}

nlohmann::json scenes_to_json(std::span<const ToyScene> scenes) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& s : scenes) out.push_back(scene_to_json(s));
  return out;
}

std::vector<ToyScene> scenes_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw Error(ErrorCode::SceneInvalid, "scene file must hold a JSON list");
  std::vector<ToyScene> out;
  out.reserve(j.size());
  for (const auto& item : j) out.push_back(scene_from_json(item));
  return out;
}

void write_scene_file(const std::filesystem::path& path, std::span<const ToyScene> scenes) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  out << scenes_to_json(scenes).dump(1) << '\n';
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
}

std::vector<ToyScene> read_scene_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::SceneInvalid, std::string("scene file is not JSON: ") + e.what());
  }
  return scenes_from_json(j);
}

std::vector<ToyScene> generate_scenes(const SceneDistribution& dist, std::size_t count, std::uint64_t seed) {
  std::vector<int> codes = dist.glyph_codes;
  if (codes.empty()) {
    codes.resize(kGlyphCodes);
    std::iota(codes.begin(), codes.end(), 0);
  }
  for (int c : codes)
    if (c < 0 || c >= kGlyphCodes) throw Error(ErrorCode::SceneInvalid, "glyph code out of range");
  if (dist.min_objects < 1 || dist.max_objects > kMaxObjects || dist.min_objects > dist.max_objects) {
    throw Error(ErrorCode::SceneInvalid, "object range must lie within 1..9");
  }
  if (dist.text_length < 1 || dist.text_length > 3) {
    throw Error(ErrorCode::SceneInvalid, "text_length must be 1..3");
  }

  std::vector<ToyScene> scenes;
  scenes.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t scene_seed = mix_seed(seed, i);
    std::mt19937_64 rng(scene_seed);
    ToyScene s;
    s.id = dist.tag + "-" + std::to_string(seed) + "-" + std::to_string(i);
    s.seed = scene_seed;
    s.question = dist.question;

    const bool with_text = dist.question == Question::read_text || uniform01(rng) < dist.text_probability;
    for (int attempt = 0;; ++attempt) {
      if (attempt > 1000) throw Error(ErrorCode::SceneInvalid, "could not place a valid scene");
      s.grid.fill(Patch{});
      if (with_text) place_text(s, codes[i % codes.size()], dist.placement, dist.text_length, rng);
      if (dist.question == Question::left_of_marker) {
        auto free = free_patches(s);
        s.grid[free[rng() % free.size()]] = {PatchKind::spatial_marker, -1};
      }
      auto free = free_patches(s);
      portable_shuffle(free, rng);
      const int n = uniform_int(rng, dist.min_objects, dist.max_objects);
      for (int k = 0; k < n; ++k) s.grid[free[k]] = {PatchKind::object, -1};
      if (dist.question == Question::left_of_marker) {
        auto marker = marker_patch(s);
        if (std::abs(mean_object_column(s) - (*marker % kGridSide)) < 0.5) continue;
      }
      break;
    }
    s.answer = derive_answer(s);
    validate_scene(s);
    scenes.push_back(std::move(s));
  }
  return scenes;
}

RenderedScene render(const ToyScene& scene) {
  RenderedScene out;
  out.scene_id = scene.id;
  out.question = scene.question;
  for (int i = 0; i < kPatchCount; ++i) {
    out.patches[i] = {scene.grid[i].kind, scene.grid[i].glyph, mix_seed(scene.seed, static_cast<std::uint64_t>(i))};
  }
  return out;
}

RenderedPair render_pair(const ToyScene& scene) {
  RenderedPair pair;
  pair.original = render(scene);
  pair.inpainted = pair.original;
  for (int i = 0; i < kPatchCount; ++i) {
    if (scene.grid[i].kind != PatchKind::text_glyph) continue;
    RenderedPatch& p = pair.inpainted.patches[i];
    p = {PatchKind::background, -1, mix_seed(p.noise_seed, kInpaintSalt)};
    pair.changed_patches.push_back(i);
  }
  return pair;
}

RenderedPair render_random_box_pair(const ToyScene& scene, std::uint64_t salt) {
  RenderedPair pair;
  pair.original = render(scene);
  pair.inpainted = pair.original;
  const int length = std::max<int>(1, static_cast<int>(text_patches(scene).size()));

  std::mt19937_64 rng(mix_seed(scene.seed, salt));
  std::vector<int> starts;
  for (int r = 0; r < kGridSide; ++r) {
    for (int c = 0; c + length <= kGridSide; ++c) {
      bool ok = true;
      for (int k = 0; k < length; ++k) ok = ok && scene.at(r, c + k).kind == PatchKind::background;
      if (ok) starts.push_back(r * kGridSide + c);
    }
  }
  std::vector<int> box;
  if (!starts.empty()) {
    const int start = starts[rng() % starts.size()];
    for (int k = 0; k < length; ++k) box.push_back(start + k);
  } else {
    auto free = free_patches(scene);
    portable_shuffle(free, rng);
    free.resize(std::min<std::size_t>(free.size(), static_cast<std::size_t>(length)));
    box = free;
  }
  for (int i : box) {
    RenderedPatch& p = pair.inpainted.patches[i];
    p.noise_seed = mix_seed(p.noise_seed, mix_seed(kInpaintSalt, salt));
    pair.changed_patches.push_back(i);
  }
  std::sort(pair.changed_patches.begin(), pair.changed_patches.end());
  return pair;
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::uint64_t stable_hash(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace ocrlens
