#include "ocrlens/eval.hpp"

#include <unicode/locid.h>
#include <unicode/uchar.h>
#include <unicode/unistr.h>

#include <algorithm>
#include <cstdio>
#include <limits>

#include "ocrlens/error.hpp"

namespace ocrlens {

std::string normalize_answer(std::string_view text) {
  icu::UnicodeString s = icu::UnicodeString::fromUTF8(icu::StringPiece(text.data(), static_cast<int32_t>(text.size())));
  s.toLower(icu::Locale::getRoot());

  icu::UnicodeString out;
  bool pending_space = false;
  for (int32_t i = 0; i < s.length();) {
    const UChar32 c = s.char32At(i);
    i += U16_LENGTH(c);
    if (U_GET_GC_MASK(c) & U_GC_P_MASK) continue;
    if (u_isUWhiteSpace(c)) {
      pending_space = true;
      continue;
    }
    if (pending_space && !out.isEmpty()) out.append(static_cast<UChar>(' '));
    pending_space = false;
    out.append(c);
  }
  std::string utf8;
  out.toUTF8String(utf8);
  return utf8;
}

MatchVerdict match_answer(std::string_view ground_truth, std::string_view prediction) {
  const std::string gt = normalize_answer(ground_truth);
  const std::string pred = normalize_answer(prediction);
  if (gt.empty() || pred.empty()) return {false, true};
  return {gt.find(pred) != std::string::npos || pred.find(gt) != std::string::npos, false};
}

std::string_view to_string(Task task) {
  switch (task) {
    case Task::ocr_read: return "ocr_read";
    case Task::count_objects: return "count_objects";
    case Task::left_of_marker: return "left_of_marker";
  }
  return "ocr_read";
}

Task parse_task(std::string_view text) {
  if (text == "ocr_read" || text == "read_text") return Task::ocr_read;
  if (text == "count_objects") return Task::count_objects;
  if (text == "left_of_marker") return Task::left_of_marker;
  throw Error(ErrorCode::ConfigInvalid, "unknown task '" + std::string(text) + "'");
}

Task task_for(Question question) {
  switch (question) {
    case Question::read_text: return Task::ocr_read;
    case Question::count_objects: return Task::count_objects;
    case Question::left_of_marker: return Task::left_of_marker;
  }
  return Task::ocr_read;
}

nlohmann::json to_json(const EvalResult& r) {
  return {{"task", std::string(to_string(r.task))},
          {"intervention", r.intervention},
          {"n", r.n},
          {"accuracy", r.accuracy},
          {"verdicts", r.verdicts}};
}

EvalResult evaluate_with_hooks(const ToyModel& model, std::span<const ToyScene> scenes,
                               std::span<const HookPoint> hooks, const std::string& label) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyEvalSet, "no scenes to evaluate");
  const Question question = scenes.front().question;
  for (const ToyScene& s : scenes) {
    if (s.question != question) throw Error(ErrorCode::MixedTasks, "scene '" + s.id + "' asks a different question");
  }
  EvalResult r;
  r.task = task_for(question);
  r.intervention = label;
  r.n = scenes.size();
  std::size_t hits = 0;
  for (const ToyScene& s : scenes) {
    const Decoded decoded = greedy_decode(model, model.embed(s), hooks);
    const bool ok = r.task == Task::ocr_read ? normalized_match(s.answer, decoded.answer) : decoded.answer == s.answer;
    hits += ok;
    r.verdicts.push_back(ok);
    r.predictions.push_back(decoded.answer);
  }
  r.accuracy = static_cast<double>(hits) / static_cast<double>(r.n);
  return r;
}

EvalResult evaluate_task(const ToyModel& model, std::span<const ToyScene> scenes, const InterventionSpec& spec,
                         const DirectionSet* directions) {
  if (scenes.empty()) throw Error(ErrorCode::EmptyEvalSet, "no scenes to evaluate");
  const std::vector<HookPoint> hooks = make_hooks(spec, model, directions);
  return evaluate_with_hooks(model, scenes, hooks, to_string(spec));
}

Selectivity selectivity_ratio(const Matrix& attention, std::span<const std::size_t> ocr_keys,
                              std::span<const std::size_t> background_keys, std::span<const std::size_t> query_rows) {
  if (ocr_keys.empty() || background_keys.empty()) throw Error(ErrorCode::EmptyMask, "both key masks must be non-empty");
  std::vector<std::size_t> a(ocr_keys.begin(), ocr_keys.end());
  std::vector<std::size_t> b(background_keys.begin(), background_keys.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  std::vector<std::size_t> both;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(both));
  if (!both.empty()) throw Error(ErrorCode::OverlappingMasks, "token " + std::to_string(both.front()) + " in both masks");
  if (a.back() >= attention.cols() || b.back() >= attention.cols()) {
    throw Error(ErrorCode::DimensionMismatch, "mask index beyond the key count");
  }
  std::vector<std::size_t> rows(query_rows.begin(), query_rows.end());
  if (rows.empty()) {
    rows.resize(attention.rows());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  }
  if (rows.empty()) throw Error(ErrorCode::EmptyMask, "no query rows");

  double ocr = 0.0, bg = 0.0;
  for (std::size_t r : rows) {
    if (r >= attention.rows()) throw Error(ErrorCode::DimensionMismatch, "query row beyond the attention map");
    double so = 0.0, sb = 0.0;
    for (std::size_t k : ocr_keys) so += attention(r, k);
    for (std::size_t k : background_keys) sb += attention(r, k);
    ocr += so / static_cast<double>(ocr_keys.size());
    bg += sb / static_cast<double>(background_keys.size());
  }
  ocr /= static_cast<double>(rows.size());
  bg /= static_cast<double>(rows.size());
  if (ocr == 0.0) return {0.0, false};
  if (bg == 0.0) return {std::numeric_limits<double>::infinity(), true};
  return {ocr / bg, false};
}

std::vector<HeadSelectivity> rank_heads(const ToyModel& model, std::span<const ToyScene> scenes,
                                        const RankOptions& options) {
  const int L = model.layer_count();
  const int H = model.heads_per_layer();
  std::vector<double> ratio_sum(L * H, 0.0), mass_sum(L * H, 0.0);
  std::size_t used = 0;

  ForwardOptions fo;
  fo.capture_attention = true;
  for (const ToyScene& scene : scenes) {
    if (!has_text(scene)) continue;
    std::vector<std::size_t> ocr, bg, queries;
    for (int p = 0; p < kPatchCount; ++p) {
      (scene.grid[p].kind == PatchKind::text_glyph ? ocr : bg).push_back(static_cast<std::size_t>(p));
    }
    if (options.readout_queries_only) {
      for (int t = kPatchCount; t < kPrefillTokens; ++t) queries.push_back(static_cast<std::size_t>(t));
    }
    const ForwardResult fr = forward(model, model.embed(scene), {}, fo);
    for (int i = 0; i < L * H; ++i) {
      const Matrix& a = fr.attention[i];
      ratio_sum[i] += selectivity_ratio(a, ocr, bg, queries).ratio;
      double mass = 0.0;
      const std::size_t row_count = queries.empty() ? a.rows() : queries.size();
      for (std::size_t q = 0; q < row_count; ++q) {
        const std::size_t r = queries.empty() ? q : queries[q];
        for (std::size_t k : ocr) mass += a(r, k);
      }
      mass_sum[i] += mass / static_cast<double>(row_count);
    }
    ++used;
  }
  if (used == 0) throw Error(ErrorCode::NoTextScenes, "head ranking needs scenes with text regions");

  std::vector<HeadSelectivity> out;
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      const int i = l * H + h;
      out.push_back({l, h, ratio_sum[i] / static_cast<double>(used), mass_sum[i] / static_cast<double>(used)});
    }
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const HeadSelectivity& x, const HeadSelectivity& y) { return x.ratio > y.ratio; });
  return out;
}

std::string format_head_table(std::span<const HeadSelectivity> ranking, std::size_t top) {
  std::string out = "rank,layer,head,ratio,mean_mass\n";
  const std::size_t count = top == 0 ? ranking.size() : std::min(top, ranking.size());
  char buf[128];
  for (std::size_t i = 0; i < count; ++i) {
    const HeadSelectivity& h = ranking[i];
    std::snprintf(buf, sizeof buf, "%zu,%d,%d,%.4f,%.4f\n", i + 1, h.layer, h.head, h.ratio, h.mean_attention_mass);
    out += buf;
  }
  return out;
}

}  // namespace ocrlens
