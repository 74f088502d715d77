#pragma once

// Answer matching, task accuracy, and attention-head selectivity.

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ocrlens/delta_pca.hpp"
#include "ocrlens/intervene.hpp"
#include "ocrlens/scene.hpp"
#include "ocrlens/toy_model.hpp"

namespace ocrlens {

// Lowercase, drop Unicode category P, collapse whitespace runs, trim. Input is
// UTF-8; malformed sequences are replaced by U+FFFD first.
std::string normalize_answer(std::string_view text);

struct MatchVerdict {
  bool matched = false;
  bool flagged = false;  // a side normalised to the empty string
};

// Either normalised string contains the other. An empty normalised side never
// matches and sets `flagged`.
MatchVerdict match_answer(std::string_view ground_truth, std::string_view prediction);
inline bool normalized_match(std::string_view ground_truth, std::string_view prediction) {
  return match_answer(ground_truth, prediction).matched;
}

enum class Task { ocr_read, count_objects, left_of_marker };

std::string_view to_string(Task task);
Task parse_task(std::string_view text);
Task task_for(Question question);

struct EvalResult {
  Task task = Task::ocr_read;
  std::string intervention;
  std::size_t n = 0;
  double accuracy = 0.0;
  std::vector<bool> verdicts;          // scene order
  std::vector<std::string> predictions;
};

nlohmann::json to_json(const EvalResult& result);

// Greedy-decodes every scene with the spec's hooks. OCR uses normalized_match,
// the other tasks exact token match. Throws EmptyEvalSet / MixedTasks plus
// anything the hooks or model raise.
EvalResult evaluate_task(const ToyModel& model, std::span<const ToyScene> scenes, const InterventionSpec& spec,
                         const DirectionSet* directions = nullptr);

// Same, with prepared hooks; `label` fills the intervention field.
EvalResult evaluate_with_hooks(const ToyModel& model, std::span<const ToyScene> scenes,
                               std::span<const HookPoint> hooks, const std::string& label);

struct Selectivity {
  double ratio = 0.0;
  bool infinite = false;  // background keys got exactly zero attention
};

// Mean over query rows of the mean attention per OCR key, divided by the same
// quantity for background keys. `query_rows` empty means every row. Throws
// EmptyMask / OverlappingMasks / DimensionMismatch.
Selectivity selectivity_ratio(const Matrix& attention, std::span<const std::size_t> ocr_keys,
                              std::span<const std::size_t> background_keys,
                              std::span<const std::size_t> query_rows = {});

struct HeadSelectivity {
  int layer = 0;
  int head = 0;
  double ratio = 0.0;
  double mean_attention_mass = 0.0;  // average attention mass on OCR keys per query row
};

struct RankOptions {
  bool readout_queries_only = false;  // restrict query rows to prompt tokens
};

// Ratios averaged over text scenes, sorted descending; ties by (layer, head).
// Throws NoTextScenes.
std::vector<HeadSelectivity> rank_heads(const ToyModel& model, std::span<const ToyScene> scenes,
                                        const RankOptions& options = {});

// "rank,layer,head,ratio,mean_mass" rows for the first `top` entries (0 = all).
std::string format_head_table(std::span<const HeadSelectivity> ranking, std::size_t top = 0);

}  // namespace ocrlens
