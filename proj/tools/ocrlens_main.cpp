// ocrlens command-line tool. Exit codes: 0 ok, 2 validation error, 3 I/O error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>

#include "ocrlens/activation_store.hpp"
#include "ocrlens/delta_pca.hpp"
#include "ocrlens/error.hpp"
#include "ocrlens/eval.hpp"
#include "ocrlens/intervene.hpp"
#include "ocrlens/scene.hpp"
#include "ocrlens/sweep.hpp"
#include "ocrlens/toy_model.hpp"

namespace fs = std::filesystem;
using namespace ocrlens;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitIo = 3;

struct Common {
  std::string model_config;
  std::vector<std::string> specs;
  std::string pooling = "mean";
  std::uint64_t seed = 0;
  bool seed_set = false;
  std::string out = ".";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--model-config", c.model_config, "Toy model config (JSON file)");
  cmd->add_option("--spec", c.specs, "Intervention spec, e.g. pca_L6_pc3 or heads:L6H2 (repeatable)");
  cmd->add_option("--pooling", c.pooling, "Delta pooling: last | mean | per-token");
  cmd->add_option_function<std::uint64_t>(
      "--seed", [&c](std::uint64_t s) { c.seed = s, c.seed_set = true; }, "Seed for scenes (and the model unless the config sets one)");
  cmd->add_option("--out", c.out, "Output directory");
}

ToyModelConfig model_config(const Common& c) {
  ToyModelConfig cfg;
  if (!c.model_config.empty()) {
    cfg = read_config_file(c.model_config);
  } else if (c.seed_set) {
    cfg.seed = c.seed;
  }
  validate_config(cfg);
  return cfg;
}

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  if (text.empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const int v = std::stoi(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::ConfigInvalid, "not an integer list: '" + text + "'");
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      const double v = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
      out.push_back(v);
    } catch (const std::exception&) {
      throw Error(ErrorCode::ConfigInvalid, "not a number list: '" + text + "'");
    }
  }
  return out;
}

void check_layers(const std::vector<int>& layers, const ToyModelConfig& cfg) {
  for (int l : layers) {
    if (l < 0 || l >= cfg.layer_count) {
      throw Error(ErrorCode::HookLayerOutOfRange, "layer " + std::to_string(l) + " outside the model");
    }
  }
}

void emit_all(const SweepResult& r, const fs::path& dir, const std::string& stem) {
  for (ReportFormat f : {ReportFormat::csv, ReportFormat::json, ReportFormat::plotdata}) {
    if (f == ReportFormat::plotdata && r.curve.empty()) continue;
    std::cout << "wrote " << emit_report(r, f, dir, stem).string() << "\n";
  }
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ocrlens: locate and remove OCR routing directions in a toy vision-language model"};
  app.require_subcommand(1);

  // gen-scenes
  Common gen_c;
  std::string gen_question = "read_text";
  std::size_t gen_count = 64;
  double gen_text_p = 0.8;
  std::string gen_tag = "toy";
  auto* gen = app.add_subcommand("gen-scenes", "Generate toy scenes as JSON");
  add_common(gen, gen_c);
  gen->add_option("--question", gen_question, "read_text | count_objects | left_of_marker");
  gen->add_option("--count", gen_count, "Number of scenes");
  gen->add_option("--text-probability", gen_text_p, "Chance of a text region in non-reading scenes");
  gen->add_option("--tag", gen_tag, "Scene id prefix");

  // extract
  Common ex_c;
  std::string ex_scenes, ex_layers, ex_split = "pca_train";
  std::size_t ex_count = 64;
  std::string ex_pairs = "text";
  auto* ex = app.add_subcommand("extract", "Run the toy model on scene pairs and write activations (.actb)");
  add_common(ex, ex_c);
  ex->add_option("--scenes", ex_scenes, "Scene JSON file (default: generate read_text scenes)");
  ex->add_option("--count", ex_count, "Scenes to generate when --scenes is absent");
  ex->add_option("--layers", ex_layers, "Comma-separated layers (default all)");
  ex->add_option("--split", ex_split, "pca_train | eval; selects that side of the 60/40 split");
  ex->add_option("--pairs", ex_pairs, "text | random-box");

  // fit-pca
  Common fit_c;
  std::string fit_actb, fit_layers, fit_tag;
  std::size_t fit_k = 3;
  auto* fit = app.add_subcommand("fit-pca", "Fit delta principal directions from a .actb file (.pcad out)");
  add_common(fit, fit_c);
  fit->add_option("--actb", fit_actb, "Activation file")->required();
  fit->add_option("--layers", fit_layers, "Comma-separated layers (default every captured layer)");
  fit->add_option("-k,--components", fit_k, "Components stored per layer");
  fit->add_option("--source-tag", fit_tag, "Tag recorded in the direction file");

  // sweep
  Common sw_c;
  std::string sw_layers, sw_components = "3", sw_alphas = "1";
  std::size_t sw_count = 160;
  auto* sw = app.add_subcommand("sweep", "Layer sweep of OCR accuracy under PCA removal");
  add_common(sw, sw_c);
  sw->add_option("--layers", sw_layers, "Comma-separated layers (default all)");
  sw->add_option("--components", sw_components, "Comma-separated N values");
  sw->add_option("--alphas", sw_alphas, "Comma-separated alpha values");
  sw->add_option("--count", sw_count, "read_text scenes before the split");

  // retention
  Common ret_c;
  std::string ret_tasks = "ocr_read,count_objects,left_of_marker";
  std::size_t ret_count = 200;
  double ret_text_p = 0.8;
  auto* ret = app.add_subcommand("retention", "Per-task accuracy under each --spec");
  add_common(ret, ret_c);
  ret->add_option("--tasks", ret_tasks, "Comma-separated tasks");
  ret->add_option("--count", ret_count, "Scenes per retention task");
  ret->add_option("--text-probability", ret_text_p, "Chance of a text region in count/spatial scenes");

  // transfer
  Common tr_c;
  std::string tr_layers;
  int tr_components = 3;
  std::size_t tr_count = 160;
  auto* tr = app.add_subcommand("transfer", "Fit on distribution A, evaluate on A and B");
  add_common(tr, tr_c);
  tr->add_option("--layers", tr_layers, "Comma-separated layers (default routing layer)");
  tr->add_option("--components", tr_components, "N");
  tr->add_option("--count", tr_count, "Scenes per distribution");

  // controls
  Common ct_c;
  std::optional<int> ct_layer, ct_random_heads;
  int ct_components = 3, ct_draws = 10;
  std::size_t ct_count = 160;
  auto* ct = app.add_subcommand("controls", "Random-box and random-head controls");
  add_common(ct, ct_c);
  ct->add_option("--layer", ct_layer, "Layer for the PCA controls (default routing layer)");
  ct->add_option("--components", ct_components, "N");
  ct->add_option("--draws", ct_draws, "Random-head draws");
  ct->add_option("--random-heads", ct_random_heads, "Heads per draw (default: heads with ratio > 1)");
  ct->add_option("--count", ct_count, "read_text scenes before the split");

  // rank-heads
  Common rk_c;
  std::size_t rk_count = 64, rk_top = 0;
  bool rk_readout = false;
  auto* rk = app.add_subcommand("rank-heads", "Rank attention heads by OCR selectivity");
  add_common(rk, rk_c);
  rk->add_option("--count", rk_count, "read_text scenes");
  rk->add_option("--top", rk_top, "Rows to print (0 = all)");
  rk->add_flag("--readout-queries-only", rk_readout, "Average over prompt query rows only");

  // report
  Common rp_c;
  std::string rp_input, rp_format = "csv", rp_stem;
  auto* rp = app.add_subcommand("report", "Re-render a saved JSON result");
  add_common(rp, rp_c);
  rp->add_option("--input", rp_input, "Result JSON written by sweep/retention/transfer/controls")->required();
  rp->add_option("--format", rp_format, "csv | json | plotdata");
  rp->add_option("--stem", rp_stem, "Output file stem (default: input stem)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*gen) {
      SceneDistribution dist;
      dist.question = parse_question(gen_question);
      dist.text_probability = gen_text_p;
      dist.tag = gen_tag;
      const auto scenes = generate_scenes(dist, gen_count, gen_c.seed);
      ensure_dir(gen_c.out);
      const fs::path path = fs::path(gen_c.out) / "scenes.json";
      write_scene_file(path, scenes);
      std::cout << "wrote " << path.string() << " (" << scenes.size() << " scenes)\n";
    } else if (*ex) {
      const ToyModel model = build_model(model_config(ex_c));
      std::vector<ToyScene> scenes;
      if (!ex_scenes.empty()) {
        scenes = read_scene_file(ex_scenes);
      } else {
        SceneDistribution dist;
        scenes = generate_scenes(dist, ex_count, ex_c.seed);
      }
      const SplitTag tag = parse_split_tag(ex_split);
      const SceneSplit split = split_scenes(scenes);
      const auto& side = tag == SplitTag::pca_train ? split.train : split.eval;
      std::vector<int> layers = parse_int_list(ex_layers);
      check_layers(layers, model.config());
      if (layers.empty()) {
        for (int l = 0; l < model.layer_count(); ++l) layers.push_back(l);
      }
      PairKind kind;
      if (ex_pairs == "text") kind = PairKind::text_inpaint;
      else if (ex_pairs == "random-box") kind = PairKind::random_box;
      else throw Error(ErrorCode::ConfigInvalid, "unknown --pairs '" + ex_pairs + "' (text|random-box)");
      const auto pairs = extract_pairs(model, side, layers, kind, ex_c.seed);
      ensure_dir(ex_c.out);
      const fs::path path = fs::path(ex_c.out) / "activations.actb";
      const auto bytes = write_actb_file(path, pairs, make_manifest(model, layers, tag));
      std::cout << "wrote " << path.string() << " (" << pairs.size() << " pairs, " << bytes << " bytes)\n";
    } else if (*fit) {
      const ActbContents contents = read_actb_file(fit_actb);
      std::vector<int> layers = parse_int_list(fit_layers);
      if (layers.empty()) {
        for (auto l : contents.manifest.capture_layers) layers.push_back(static_cast<int>(l));
      }
      const DirectionSet set = fit_direction_set(contents.manifest.model_id, contents.manifest.hidden, contents.samples,
                                                 layers, parse_pooling(fit_c.pooling), fit_k,
                                                 fit_tag.empty() ? fs::path(fit_actb).stem().string() : fit_tag);
      ensure_dir(fit_c.out);
      const fs::path path = fs::path(fit_c.out) / "directions.pcad";
      save_directions_file(path, set);
      for (const PrincipalSubspace& s : set.subspaces) {
        std::printf("layer %u pc1 ratio %.4f%s\n", s.layer, s.variance_ratios.front(), s.has_ties ? " (ties)" : "");
      }
      std::cout << "wrote " << path.string() << "\n";
    } else if (*sw) {
      LayerSweepConfig cfg;
      cfg.model = model_config(sw_c);
      cfg.seed = sw_c.seed;
      cfg.pooling = parse_pooling(sw_c.pooling);
      cfg.scene_count = sw_count;
      cfg.layers = parse_int_list(sw_layers);
      cfg.components = parse_int_list(sw_components);
      cfg.alphas = parse_double_list(sw_alphas);
      if (!sw_c.specs.empty()) {
        // explicit specs replace the grid flags
        std::set<int> layers, ns;
        std::set<double> alphas;
        for (const std::string& s : sw_c.specs) {
          const InterventionSpec spec = parse_spec(s);
          if (spec.kind != InterventionKind::pca_projection) {
            throw Error(ErrorCode::ConfigInvalid, "sweep takes pca specs only, got '" + s + "'");
          }
          for (int l : spec.layers()) layers.insert(l);
          ns.insert(spec.components);
          alphas.insert(spec.alpha);
        }
        cfg.layers.assign(layers.begin(), layers.end());
        cfg.components.assign(ns.begin(), ns.end());
        cfg.alphas.assign(alphas.begin(), alphas.end());
      }
      check_layers(cfg.layers, cfg.model);
      const SweepResult r = run_layer_sweep(cfg);
      emit_all(r, sw_c.out, "sweep");
      std::cout << "max-drop layer " << *r.max_drop_layer << "\n";
    } else if (*ret) {
      RetentionConfig cfg;
      cfg.model = model_config(ret_c);
      cfg.seed = ret_c.seed;
      cfg.pooling = parse_pooling(ret_c.pooling);
      cfg.specs = ret_c.specs.empty() ? std::vector<std::string>{"baseline"} : ret_c.specs;
      cfg.tasks.clear();
      std::stringstream ss(ret_tasks);
      std::string t;
      while (std::getline(ss, t, ',')) cfg.tasks.push_back(parse_task(t));
      cfg.scene_count = ret_count;
      cfg.text_probability = ret_text_p;
      const SweepResult r = run_retention(cfg);
      emit_all(r, ret_c.out, "retention");
    } else if (*tr) {
      TransferConfig cfg;
      cfg.model = model_config(tr_c);
      cfg.seed = tr_c.seed;
      cfg.pooling = parse_pooling(tr_c.pooling);
      cfg.layers = parse_int_list(tr_layers);
      check_layers(cfg.layers, cfg.model);
      cfg.components = tr_components;
      cfg.scene_count = tr_count;
      const SweepResult r = run_transfer(cfg);
      emit_all(r, tr_c.out, "transfer");
      std::cout << "transfer ratio " << r.details["transfer_ratio"].dump() << "\n";
    } else if (*ct) {
      ControlsConfig cfg;
      cfg.model = model_config(ct_c);
      cfg.seed = ct_c.seed;
      cfg.pooling = parse_pooling(ct_c.pooling);
      cfg.layer = ct_layer;
      if (ct_layer) check_layers({*ct_layer}, cfg.model);
      cfg.components = ct_components;
      cfg.draws = ct_draws;
      cfg.random_head_count = ct_random_heads;
      cfg.scene_count = ct_count;
      const SweepResult r = run_controls(cfg);
      emit_all(r, ct_c.out, "controls");
      const auto& d = r.details;
      std::printf("text pc1 %.4f, box pc1 %.4f, box delta %.1fpp, top head L%dH%d delta %.1fpp\n",
                  d["text_pc1_ratio"].get<double>(), d["box_pc1_ratio"].get<double>(),
                  d["box_delta_pp"].get<double>(), d["top_head"]["layer"].get<int>(),
                  d["top_head"]["head"].get<int>(), d["top_head_delta_pp"].get<double>());
    } else if (*rk) {
      const ToyModel model = build_model(model_config(rk_c));
      SceneDistribution dist;
      const auto scenes = generate_scenes(dist, rk_count, rk_c.seed);
      RankOptions opts;
      opts.readout_queries_only = rk_readout;
      const std::string table = format_head_table(rank_heads(model, scenes, opts), rk_top);
      std::cout << table;
      ensure_dir(rk_c.out);
      const fs::path path = fs::path(rk_c.out) / "heads.csv";
      std::ofstream out(path, std::ios::binary | std::ios::trunc);
      if (!(out << table)) throw Error(ErrorCode::IoFailure, "cannot write " + path.string());
    } else if (*rp) {
      std::ifstream in(rp_input);
      if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + rp_input);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ConfigInvalid, std::string("input is not JSON: ") + e.what());
      }
      const SweepResult r = sweep_result_from_json(j);
      const std::string stem = rp_stem.empty() ? fs::path(rp_input).stem().string() : rp_stem;
      std::cout << "wrote " << emit_report(r, parse_report_format(rp_format), rp_c.out, stem).string() << "\n";
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return is_io_error(e.code()) ? kExitIo : kExitValidation;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  }
  return 0;
}
