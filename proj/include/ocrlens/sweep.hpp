#pragma once

// Experiment orchestration: scene splits, paired extraction, layer sweeps,
// retention tables, transfer runs, control experiments and report files.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ocrlens/delta_pca.hpp"
#include "ocrlens/eval.hpp"
#include "ocrlens/intervene.hpp"
#include "ocrlens/scene.hpp"
#include "ocrlens/toy_model.hpp"

namespace ocrlens {

inline constexpr int kDefaultTrainPercent = 60;

bool in_train_split(const std::string& scene_id, int train_percent = kDefaultTrainPercent);

struct SceneSplit {
  std::vector<ToyScene> train;
  std::vector<ToyScene> eval;
};

// Throws SplitLeakage when an id lands on both sides (duplicate ids).
SceneSplit split_scenes(std::span<const ToyScene> scenes, int train_percent = kDefaultTrainPercent);
void check_disjoint(std::span<const ToyScene> train, std::span<const ToyScene> eval);

enum class PairKind { text_inpaint, random_box };

// Runs both halves of every pair, capturing `layers` (empty = all) over all
// prompt positions.
std::vector<PairedSample> extract_pairs(const ToyModel& model, std::span<const ToyScene> scenes,
                                        std::vector<int> layers = {}, PairKind kind = PairKind::text_inpaint,
                                        std::uint64_t box_salt = 0);

RunManifest make_manifest(const ToyModel& model, std::span<const int> layers, SplitTag split);

// One subspace of `k` components per layer; every pair must capture them.
DirectionSet fit_direction_set(const std::string& model_id, std::uint32_t hidden, std::span<const PairedSample> pairs,
                               std::span<const int> layers, Pooling pooling, std::size_t k,
                               const std::string& source_tag);

struct SweepRow {
  std::string intervention;
  Task task = Task::ocr_read;
  double baseline = 0.0;    // accuracy in [0, 1]
  double intervened = 0.0;
  std::optional<int> layer;
  std::optional<int> components;
  std::optional<double> alpha;
  std::uint64_t seed = 0;

  double delta_pp() const { return 100.0 * (intervened - baseline); }
};

struct CurvePoint {
  std::string series;
  int layer = 0;
  double baseline = 0.0;
  double intervened = 0.0;
};

struct SweepResult {
  std::string kind;  // layer_sweep | retention | transfer | controls
  std::vector<SweepRow> rows;
  std::vector<CurvePoint> curve;
  std::optional<int> max_drop_layer;
  nlohmann::json details = nlohmann::json::object();
};

nlohmann::json to_json(const SweepResult& result);
SweepResult sweep_result_from_json(const nlohmann::json& j);

struct LayerSweepConfig {
  ToyModelConfig model;
  std::vector<int> layers;                  // empty = every layer
  std::vector<int> components = {3};
  std::vector<double> alphas = {1.0};
  Pooling pooling = Pooling::mean_tokens;
  std::size_t scene_count = 160;
  std::uint64_t seed = 0;                   // scene seed
  int train_percent = kDefaultTrainPercent;
};

// Directions fit on the train split only; OCR evaluated on the eval split.
// The curve follows the first (N, alpha) pair; max-drop ties go to the lower layer.
SweepResult run_layer_sweep(const LayerSweepConfig& config);

struct RetentionConfig {
  ToyModelConfig model;
  std::vector<std::string> specs;  // pca specs use directions fit on read_text train pairs
  std::vector<Task> tasks = {Task::ocr_read, Task::count_objects, Task::left_of_marker};
  Pooling pooling = Pooling::mean_tokens;
  std::size_t fit_scene_count = 160;
  std::size_t scene_count = 200;  // per retention task
  double text_probability = 0.8;
  std::uint64_t seed = 0;
};

SweepResult run_retention(const RetentionConfig& config);

struct TransferConfig {
  ToyModelConfig model;
  std::vector<int> layers;  // empty = routing layer
  int components = 3;
  Pooling pooling = Pooling::mean_tokens;
  std::size_t scene_count = 160;  // per distribution
  std::uint64_t seed = 0;
};

// Distribution A: codes 0–7, text top-left. B: codes 8–15, bottom-right.
// details.transfer_ratio[layer] = B-drop / A-drop (null when A-drop is 0).
SweepResult run_transfer(const TransferConfig& config);

struct ControlsConfig {
  ToyModelConfig model;
  std::optional<int> layer;  // default routing layer
  int components = 3;
  Pooling pooling = Pooling::mean_tokens;
  std::size_t scene_count = 160;
  int draws = 10;
  std::optional<int> random_head_count;  // default: heads with ratio > 1
  std::uint64_t seed = 0;
};

// details: text_pc1_ratio, box_pc1_ratio, box_delta_pp, top_head,
// top_head_delta_pp, random_head_k, random_all_* and random_excluding_top_*
// (mean_pp, sd_pp, deltas_pp, includes_top).
SweepResult run_controls(const ControlsConfig& config);

enum class ReportFormat { csv, json, plotdata };

ReportFormat parse_report_format(std::string_view text);

std::string render_report(const SweepResult& result, ReportFormat format);

// Writes <dir>/<stem>.csv | .json | .plot.csv. Throws IoFailure.
std::filesystem::path emit_report(const SweepResult& result, ReportFormat format, const std::filesystem::path& dir,
                                  const std::string& stem);

}  // namespace ocrlens
