#include "ocrlens/sweep.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "ocrlens/error.hpp"

namespace ocrlens {

namespace {

constexpr std::uint64_t kDrawSalt = 0xd4a3'0001ULL;
constexpr std::uint64_t kBoxSalt = 0xb0c5'0001ULL;

std::string shortest(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

// Rounded to 0.1 with negative zero folded away.
std::string tenth(double v) {
  double r = std::round(v * 10.0) / 10.0;
  if (r == 0.0) r = 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.1f", r);
  return buf;
}

std::string series_name(int n, double alpha) {
  std::string s = "pc" + std::to_string(n);
  if (alpha != 1.0) s += "@alpha=" + shortest(alpha);
  return s;
}

std::vector<int> all_layers(const ToyModel& model) {
  std::vector<int> out(model.layer_count());
  std::iota(out.begin(), out.end(), 0);
  return out;
}

SweepRow make_row(const InterventionSpec& spec, Task task, double baseline, double intervened, std::uint64_t seed) {
  SweepRow row;
  row.intervention = to_string(spec);
  row.task = task;
  row.baseline = baseline;
  row.intervened = intervened;
  row.seed = seed;
  if (spec.kind == InterventionKind::pca_projection) {
    row.layer = spec.first_layer;
    row.components = spec.components;
    row.alpha = spec.alpha;
  } else if (spec.kind == InterventionKind::head_ablation && !spec.heads.empty()) {
    row.layer = spec.heads.front().layer;
  }
  return row;
}

std::vector<ToyScene> read_scenes(std::size_t count, std::uint64_t seed, const std::string& tag,
                                  std::vector<int> codes = {}, TextPlacement placement = TextPlacement::anywhere) {
  SceneDistribution dist;
  dist.question = Question::read_text;
  dist.glyph_codes = std::move(codes);
  dist.placement = placement;
  dist.tag = tag;
  return generate_scenes(dist, count, seed);
}

double eval_accuracy(const ToyModel& model, std::span<const ToyScene> scenes, std::span<const HookPoint> hooks) {
  return evaluate_with_hooks(model, scenes, hooks, "").accuracy;
}

std::vector<int> layers_of(const std::vector<InterventionSpec>& specs) {
  std::set<int> layers;
  for (const auto& s : specs)
    if (s.kind == InterventionKind::pca_projection)
      for (int l : s.layers()) layers.insert(l);
  return {layers.begin(), layers.end()};
}

struct MeanSd {
  double mean = 0.0;
  double sd = 0.0;
};

MeanSd mean_sd(const std::vector<double>& v) {
  if (v.empty()) return {};
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0};
}

}  // namespace

bool in_train_split(const std::string& scene_id, int train_percent) {
  return static_cast<int>(stable_hash(scene_id) % 100) < train_percent;
}

void check_disjoint(std::span<const ToyScene> train, std::span<const ToyScene> eval) {
  std::set<std::string> ids;
  for (const ToyScene& s : train) ids.insert(s.id);
  for (const ToyScene& s : eval) {
    if (ids.count(s.id)) throw Error(ErrorCode::SplitLeakage, "scene '" + s.id + "' is in both splits");
  }
}

SceneSplit split_scenes(std::span<const ToyScene> scenes, int train_percent) {
  if (train_percent < 0 || train_percent > 100) throw Error(ErrorCode::ConfigInvalid, "train_percent outside 0..100");
  SceneSplit split;
  for (const ToyScene& s : scenes) (in_train_split(s.id, train_percent) ? split.train : split.eval).push_back(s);
  check_disjoint(split.train, split.eval);
  return split;
}

std::vector<PairedSample> extract_pairs(const ToyModel& model, std::span<const ToyScene> scenes,
                                        std::vector<int> layers, PairKind kind, std::uint64_t box_salt) {
  if (layers.empty()) layers = all_layers(model);
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  ForwardOptions options;
  options.capture_layers = layers;

  std::vector<PairedSample> out;
  out.reserve(scenes.size());
  for (const ToyScene& scene : scenes) {
    const RenderedPair pair = kind == PairKind::text_inpaint ? render_pair(scene) : render_random_box_pair(scene, box_salt);
    PairedSample sample;
    sample.sample_id = scene.id;
    sample.original = forward(model, model.embed(pair.original), {}, options).captures;
    sample.inpainted = forward(model, model.embed(pair.inpainted), {}, options).captures;
    sample.aligned_positions.resize(kPrefillTokens);
    std::iota(sample.aligned_positions.begin(), sample.aligned_positions.end(), 0u);
    out.push_back(std::move(sample));
  }
  return out;
}

RunManifest make_manifest(const ToyModel& model, std::span<const int> layers, SplitTag split) {
  RunManifest m;
  m.model_id = model.model_id();
  m.layer_count = static_cast<std::uint32_t>(model.layer_count());
  m.hidden = static_cast<std::uint32_t>(model.hidden());
  m.head_count = static_cast<std::uint32_t>(model.heads_per_layer());
  for (int l : layers) m.capture_layers.push_back(static_cast<std::uint32_t>(l));
  std::sort(m.capture_layers.begin(), m.capture_layers.end());
  m.split = split;
  return m;
}

DirectionSet fit_direction_set(const std::string& model_id, std::uint32_t hidden, std::span<const PairedSample> pairs,
                               std::span<const int> layers, Pooling pooling, std::size_t k,
                               const std::string& source_tag) {
  DirectionSet set;
  set.model_id = model_id;
  set.hidden = hidden;
  set.pooling = pooling;
  set.source_tag = source_tag;
  std::vector<int> sorted(layers.begin(), layers.end());
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());
  for (int l : sorted) {
    const DeltaSampleSet deltas = compute_deltas(pairs, static_cast<std::uint32_t>(l), pooling, source_tag);
    set.subspaces.push_back(fit_directions(deltas, k));
  }
  return set;
}

SweepResult run_layer_sweep(const LayerSweepConfig& cfg) {
  if (cfg.components.empty() || cfg.alphas.empty()) throw Error(ErrorCode::ConfigInvalid, "sweep needs N and alpha values");
  const ToyModel model = build_model(cfg.model);
  std::vector<int> layers = cfg.layers.empty() ? all_layers(model) : cfg.layers;
  const std::vector<ToyScene> scenes = read_scenes(cfg.scene_count, cfg.seed, "sweep");
  const SceneSplit split = split_scenes(scenes, cfg.train_percent);
  if (split.train.size() < 2 || split.eval.empty()) throw Error(ErrorCode::ConfigInvalid, "too few scenes for a split");

  const std::size_t k = static_cast<std::size_t>(*std::max_element(cfg.components.begin(), cfg.components.end()));
  const std::vector<PairedSample> pairs = extract_pairs(model, split.train, layers);
  const DirectionSet dirs =
      fit_direction_set(model.model_id(), static_cast<std::uint32_t>(model.hidden()), pairs, layers, cfg.pooling, k, "sweep");

  SweepResult result;
  result.kind = "layer_sweep";
  const double baseline = eval_accuracy(model, split.eval, {});
  double worst_drop = -std::numeric_limits<double>::infinity();
  for (int layer : layers) {
    for (std::size_t ni = 0; ni < cfg.components.size(); ++ni) {
      for (std::size_t ai = 0; ai < cfg.alphas.size(); ++ai) {
        const InterventionSpec spec = InterventionSpec::pca(layer, layer, cfg.components[ni], cfg.alphas[ai]);
        const double acc = eval_accuracy(model, split.eval, make_projection_hooks(spec, dirs));
        result.rows.push_back(make_row(spec, Task::ocr_read, baseline, acc, cfg.seed));
        if (ni == 0 && ai == 0) {
          result.curve.push_back({series_name(cfg.components[0], cfg.alphas[0]), layer, baseline, acc});
          if (baseline - acc > worst_drop) {
            worst_drop = baseline - acc;
            result.max_drop_layer = layer;
          }
        }
      }
    }
  }
  nlohmann::json ratios = nlohmann::json::object();
  for (const PrincipalSubspace& s : dirs.subspaces) ratios[std::to_string(s.layer)] = s.variance_ratios;
  result.details = {{"model_id", model.model_id()},
                    {"train_scenes", split.train.size()},
                    {"eval_scenes", split.eval.size()},
                    {"variance_ratios", ratios},
                    {"max_drop_pp", 100.0 * worst_drop}};
  return result;
}

SweepResult run_retention(const RetentionConfig& cfg) {
  const ToyModel model = build_model(cfg.model);
  std::vector<InterventionSpec> specs;
  for (const std::string& s : cfg.specs) specs.push_back(parse_spec(s));
  if (cfg.tasks.empty()) throw Error(ErrorCode::ConfigInvalid, "retention needs at least one task");

  const std::vector<ToyScene> fit_scenes = read_scenes(cfg.fit_scene_count, cfg.seed, "fit");
  const SceneSplit split = split_scenes(fit_scenes);
  DirectionSet dirs;
  const std::vector<int> layers = layers_of(specs);
  if (!layers.empty()) {
    int k = 1;
    for (const auto& s : specs) k = std::max(k, s.components);
    const std::vector<PairedSample> pairs = extract_pairs(model, split.train, layers);
    dirs = fit_direction_set(model.model_id(), static_cast<std::uint32_t>(model.hidden()), pairs, layers, cfg.pooling,
                             static_cast<std::size_t>(k), "fit");
  }

  SweepResult result;
  result.kind = "retention";
  for (Task task : cfg.tasks) {
    std::vector<ToyScene> scenes;
    if (task == Task::ocr_read) {
      scenes = split.eval;
    } else {
      SceneDistribution dist;
      dist.question = task == Task::count_objects ? Question::count_objects : Question::left_of_marker;
      dist.text_probability = cfg.text_probability;
      dist.tag = std::string(to_string(task));
      scenes = generate_scenes(dist, cfg.scene_count, cfg.seed);
    }
    const double baseline = eval_accuracy(model, scenes, {});
    for (const InterventionSpec& spec : specs) {
      const std::vector<HookPoint> hooks = make_hooks(spec, model, &dirs);
      const double acc = spec.kind == InterventionKind::none ? baseline : eval_accuracy(model, scenes, hooks);
      result.rows.push_back(make_row(spec, task, baseline, acc, cfg.seed));
    }
  }
  result.details = {{"model_id", model.model_id()}, {"interference_mode", cfg.model.interference_mode}};
  return result;
}

SweepResult run_transfer(const TransferConfig& cfg) {
  const ToyModel model = build_model(cfg.model);
  const std::vector<int> layers = cfg.layers.empty() ? std::vector<int>{cfg.model.routing_layer} : cfg.layers;
  const std::vector<ToyScene> a = read_scenes(cfg.scene_count, cfg.seed, "transferA", {0, 1, 2, 3, 4, 5, 6, 7},
                                              TextPlacement::top_left);
  const std::vector<ToyScene> b = read_scenes(cfg.scene_count, cfg.seed, "transferB",
                                              {8, 9, 10, 11, 12, 13, 14, 15}, TextPlacement::bottom_right);
  const SceneSplit sa = split_scenes(a);
  const SceneSplit sb = split_scenes(b);

  const std::vector<PairedSample> pairs = extract_pairs(model, sa.train, layers);
  const DirectionSet dirs = fit_direction_set(model.model_id(), static_cast<std::uint32_t>(model.hidden()), pairs,
                                              layers, cfg.pooling, static_cast<std::size_t>(cfg.components), "A");
  // Directions are applied to B through the same model context they were fit in.
  if (dirs.hidden != static_cast<std::uint32_t>(model.hidden())) throw Error(ErrorCode::ModelMismatch, "hidden size");

  SweepResult result;
  result.kind = "transfer";
  const double base_a = eval_accuracy(model, sa.eval, {});
  const double base_b = eval_accuracy(model, sb.eval, {});
  nlohmann::json ratios = nlohmann::json::object();
  nlohmann::json drops = nlohmann::json::object();
  for (int layer : layers) {
    const InterventionSpec spec = InterventionSpec::pca(layer, layer, cfg.components);
    const std::vector<HookPoint> hooks = make_projection_hooks(spec, dirs);
    const double acc_a = eval_accuracy(model, sa.eval, hooks);
    const double acc_b = eval_accuracy(model, sb.eval, hooks);
    SweepRow ra = make_row(spec, Task::ocr_read, base_a, acc_a, cfg.seed);
    ra.intervention += " [A->A]";
    SweepRow rb = make_row(spec, Task::ocr_read, base_b, acc_b, cfg.seed);
    rb.intervention += " [A->B]";
    result.rows.push_back(ra);
    result.rows.push_back(rb);
    const double drop_a = 100.0 * (base_a - acc_a);
    const double drop_b = 100.0 * (base_b - acc_b);
    drops[std::to_string(layer)] = {{"A_drop_pp", drop_a}, {"B_drop_pp", drop_b}};
    ratios[std::to_string(layer)] = drop_a > 0.0 ? nlohmann::json(drop_b / drop_a) : nlohmann::json(nullptr);
  }
  result.details = {{"model_id", model.model_id()}, {"transfer_ratio", ratios}, {"drops", drops}};
  return result;
}

SweepResult run_controls(const ControlsConfig& cfg) {
  const ToyModel model = build_model(cfg.model);
  const int layer = cfg.layer.value_or(cfg.model.routing_layer);
  const std::vector<int> layers = {layer};
  const std::vector<ToyScene> scenes = read_scenes(cfg.scene_count, cfg.seed, "controls");
  const SceneSplit split = split_scenes(scenes);
  const auto k = static_cast<std::size_t>(cfg.components);
  const auto hidden = static_cast<std::uint32_t>(model.hidden());

  SweepResult result;
  result.kind = "controls";
  const double baseline = eval_accuracy(model, split.eval, {});

  // (a) random boxes over background versus the text pairs
  const auto text_pairs = extract_pairs(model, split.train, layers);
  const auto box_pairs = extract_pairs(model, split.train, layers, PairKind::random_box, mix_seed(cfg.seed, kBoxSalt));
  const DirectionSet text_dirs = fit_direction_set(model.model_id(), hidden, text_pairs, layers, cfg.pooling, k, "text");
  const DirectionSet box_dirs = fit_direction_set(model.model_id(), hidden, box_pairs, layers, cfg.pooling, k, "boxes");
  const InterventionSpec box_spec = InterventionSpec::pca(layer, layer, cfg.components);
  const double box_acc = eval_accuracy(model, split.eval, make_projection_hooks(box_spec, box_dirs));
  SweepRow box_row = make_row(box_spec, Task::ocr_read, baseline, box_acc, cfg.seed);
  box_row.intervention = "random_box:" + box_row.intervention;
  result.rows.push_back(box_row);

  // (b) head ablation: top-ranked head, then matched-size random draws
  const std::vector<HeadSelectivity> ranking = rank_heads(model, split.train);
  const HeadRef top{ranking.front().layer, ranking.front().head};
  const InterventionSpec top_spec = InterventionSpec::ablate({top});
  const double top_acc = eval_accuracy(model, split.eval, make_ablation_hooks(top_spec, model));
  result.rows.push_back(make_row(top_spec, Task::ocr_read, baseline, top_acc, cfg.seed));

  int selective = 0;
  for (const HeadSelectivity& h : ranking) selective += h.ratio > 1.0;
  const int draw_k = cfg.random_head_count.value_or(selective);

  std::vector<HeadRef> everyone;
  for (const HeadSelectivity& h : ranking) everyone.push_back({h.layer, h.head});
  std::sort(everyone.begin(), everyone.end());
  std::vector<HeadRef> others;
  for (const HeadRef& h : everyone)
    if (!(h == top)) others.push_back(h);

  std::mt19937_64 rng(mix_seed(cfg.seed, kDrawSalt));
  auto draw = [&](std::vector<HeadRef> pool) {
    const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(std::max(draw_k, 0)), pool.size());
    for (std::size_t i = 0; i < want; ++i) std::swap(pool[i], pool[i + rng() % (pool.size() - i)]);
    pool.resize(want);
    return pool;
  };
  nlohmann::json random_json = nlohmann::json::object();
  for (const char* which : {"random_all", "random_excluding_top"}) {
    const bool exclude = std::string(which) == "random_excluding_top";
    std::vector<double> deltas;
    int includes_top = 0;
    for (int i = 0; i < cfg.draws; ++i) {
      const std::vector<HeadRef> heads = draw(exclude ? others : everyone);
      includes_top += std::find(heads.begin(), heads.end(), top) != heads.end();
      const InterventionSpec spec = InterventionSpec::ablate(heads);
      const double acc = eval_accuracy(model, split.eval, make_ablation_hooks(spec, model));
      SweepRow row = make_row(spec, Task::ocr_read, baseline, acc, cfg.seed);
      row.intervention = std::string(which) + ":" + row.intervention;
      result.rows.push_back(row);
      deltas.push_back(row.delta_pp());
    }
    const MeanSd ms = mean_sd(deltas);
    random_json[which] = {{"mean_pp", ms.mean}, {"sd_pp", ms.sd}, {"deltas_pp", deltas}, {"includes_top", includes_top}};
  }

  result.details = {{"model_id", model.model_id()},
                    {"layer", layer},
                    {"text_pc1_ratio", text_dirs.subspaces.front().variance_ratios.front()},
                    {"box_pc1_ratio", box_dirs.subspaces.front().variance_ratios.front()},
                    {"box_delta_pp", box_row.delta_pp()},
                    {"top_head", {{"layer", top.layer}, {"head", top.head}, {"ratio", ranking.front().ratio}}},
                    {"top_head_delta_pp", 100.0 * (top_acc - baseline)},
                    {"random_head_k", draw_k},
                    {"random", random_json}};
  return result;
}

nlohmann::json to_json(const SweepResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const SweepRow& row : r.rows) {
    rows.push_back({{"intervention", row.intervention},
                    {"task", std::string(to_string(row.task))},
                    {"baseline", row.baseline},
                    {"intervened", row.intervened},
                    {"delta_pp", row.delta_pp()},
                    {"layer", row.layer ? nlohmann::json(*row.layer) : nlohmann::json(nullptr)},
                    {"N", row.components ? nlohmann::json(*row.components) : nlohmann::json(nullptr)},
                    {"alpha", row.alpha ? nlohmann::json(*row.alpha) : nlohmann::json(nullptr)},
                    {"seed", row.seed}});
  }
  nlohmann::json curve = nlohmann::json::array();
  for (const CurvePoint& p : r.curve) {
    curve.push_back({{"series", p.series}, {"layer", p.layer}, {"baseline", p.baseline}, {"intervened", p.intervened}});
  }
  return {{"kind", r.kind},
          {"rows", rows},
          {"curve", curve},
          {"max_drop_layer", r.max_drop_layer ? nlohmann::json(*r.max_drop_layer) : nlohmann::json(nullptr)},
          {"details", r.details}};
}

SweepResult sweep_result_from_json(const nlohmann::json& j) {
  SweepResult r;
  try {
    r.kind = j.at("kind").get<std::string>();
    for (const auto& row : j.at("rows")) {
      SweepRow s;
      s.intervention = row.at("intervention").get<std::string>();
      s.task = parse_task(row.at("task").get<std::string>());
      s.baseline = row.at("baseline").get<double>();
      s.intervened = row.at("intervened").get<double>();
      if (!row.at("layer").is_null()) s.layer = row.at("layer").get<int>();
      if (!row.at("N").is_null()) s.components = row.at("N").get<int>();
      if (!row.at("alpha").is_null()) s.alpha = row.at("alpha").get<double>();
      s.seed = row.at("seed").get<std::uint64_t>();
      r.rows.push_back(std::move(s));
    }
    for (const auto& p : j.at("curve")) {
      r.curve.push_back({p.at("series").get<std::string>(), p.at("layer").get<int>(), p.at("baseline").get<double>(),
                         p.at("intervened").get<double>()});
    }
    if (!j.at("max_drop_layer").is_null()) r.max_drop_layer = j.at("max_drop_layer").get<int>();
    if (j.contains("details")) r.details = j.at("details");
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("not a sweep result: ") + e.what());
  }
  return r;
}

ReportFormat parse_report_format(std::string_view text) {
  if (text == "csv") return ReportFormat::csv;
  if (text == "json") return ReportFormat::json;
  if (text == "plotdata") return ReportFormat::plotdata;
  throw Error(ErrorCode::ConfigInvalid, "unknown report format '" + std::string(text) + "' (csv|json|plotdata)");
}

std::string render_report(const SweepResult& r, ReportFormat format) {
  if (r.rows.empty() && r.curve.empty()) throw Error(ErrorCode::ConfigInvalid, "nothing to report");
  switch (format) {
    case ReportFormat::json:
      return to_json(r).dump(2) + "\n";
    case ReportFormat::csv: {
      std::string out = "intervention,task,baseline,intervened,delta_pp,layer,N,alpha,seed\n";
      for (const SweepRow& row : r.rows) {
        out += row.intervention + "," + std::string(to_string(row.task)) + "," + tenth(100.0 * row.baseline) + "," +
               tenth(100.0 * row.intervened) + "," + tenth(row.delta_pp()) + "," +
               (row.layer ? std::to_string(*row.layer) : "") + "," +
               (row.components ? std::to_string(*row.components) : "") + "," + (row.alpha ? shortest(*row.alpha) : "") +
               "," + std::to_string(row.seed) + "\n";
      }
      return out;
    }
    case ReportFormat::plotdata: {
      std::string out = "series,layer,baseline,intervened\n";
      for (const CurvePoint& p : r.curve) {
        out += p.series + "," + std::to_string(p.layer) + "," + tenth(100.0 * p.baseline) + "," +
               tenth(100.0 * p.intervened) + "\n";
      }
      return out;
    }
  }
  return {};
}

std::filesystem::path emit_report(const SweepResult& result, ReportFormat format, const std::filesystem::path& dir,
                                  const std::string& stem) {
  const std::string text = render_report(result, format);
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
  const char* suffix = format == ReportFormat::csv ? ".csv" : format == ReportFormat::json ? ".json" : ".plot.csv";
  const std::filesystem::path path = dir / (stem + suffix);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  out << text;
  out.flush();
  if (!out) throw Error(ErrorCode::IoFailure, "write failed for " + path.string());
  return path;
}

}  // namespace ocrlens
