#include "ocrlens/toy_model.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>

#include "ocrlens/error.hpp"

namespace ocrlens {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

MapMat view(Matrix& m) { return MapMat(m.data().data(), m.rows(), m.cols()); }
ConstMapMat view(const Matrix& m) { return ConstMapMat(m.data().data(), m.rows(), m.cols()); }

constexpr double kScore = 30.0;       // score for a matching query/key flag pair
constexpr double kCopyBroad = 4.0;    // copy-head score for non-readout rows
constexpr double kScratchGain = 0.25;
constexpr double kLevelGain = 16.0;   // LVL = kLevelGain · level
constexpr double kAnswerGain = 0.5;
constexpr double kUnembedGain = 10.0;
constexpr double kGateBias = 100.0;
constexpr double kEncodeSlope = 20.0;
constexpr double kEncodeThreshold = 0.3;
constexpr double kFeatureNoise = 0.05;
constexpr double kSpatialSlope = 4.0;
// Shift that pushes the count decoder past the half-way point for the two
// highest levels only: 14/29 < 0.5 < 15/29.
constexpr double kInterferenceLeak = 0.5 / 14.5;

constexpr std::array<Channel, 22> kAllChannels = {
    Channel::VIS, Channel::OBJ, Channel::TXT, Channel::MRK, Channel::BGF, Channel::COL,
    Channel::ROW, Channel::APP, Channel::GLY, Channel::PRM, Channel::RDO, Channel::TSK,
    Channel::GEN, Channel::SCR, Channel::LVL, Channel::CNT, Channel::MCOL, Channel::OCOL,
    Channel::ANS_G, Channel::ANS_D, Channel::ANS_Y, Channel::ANS_N};

struct Layout {
  int g = 8;

  int width(Channel c) const {
    switch (c) {
      case Channel::APP: return 4;
      case Channel::GLY:
      case Channel::SCR: return g;
      case Channel::TSK: return 3;
      case Channel::ANS_G: return kGlyphCodes;
      case Channel::ANS_D: return kMaxObjects;
      default: return 1;
    }
  }

  int offset(Channel c) const {
    int at = 0;
    for (Channel k : kAllChannels) {
      if (k == c) return at;
      at += width(k);
    }
    return at;
  }

  int total() const { return offset(Channel::ANS_N) + 1; }
  int operator()(Channel c, int i = 0) const { return offset(c) + i; }
};

int task_index(Question q) {
  switch (q) {
    case Question::read_text: return 0;
    case Question::count_objects: return 1;
    case Question::left_of_marker: return 2;
  }
  return 0;
}

int app_index(PatchKind kind) {
  switch (kind) {
    case PatchKind::background: return 0;
    case PatchKind::object: return 1;
    case PatchKind::text_glyph: return 2;
    case PatchKind::spatial_marker: return 3;
  }
  return 0;
}

template <typename T>
void portable_shuffle(std::vector<T>& v, std::mt19937_64& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng() % i]);
}

// Accumulates ReLU units in canonical coordinates.
struct MlpBuilder {
  int d;
  std::vector<std::vector<double>> in;
  std::vector<double> bias;
  std::vector<std::vector<double>> out;

  int unit(double b) {
    in.emplace_back(d, 0.0);
    out.emplace_back(d, 0.0);
    bias.push_back(b);
    return static_cast<int>(bias.size()) - 1;
  }

  Mlp build() const {
    Mlp m;
    const std::size_t width = bias.size();
    m.w_in = Matrix(d, width);
    m.w_out = Matrix(width, d);
    m.b_in = bias;
    for (std::size_t u = 0; u < width; ++u) {
      for (int i = 0; i < d; ++i) {
        m.w_in(i, u) = in[u][i];
        m.w_out(u, i) = out[u][i];
      }
    }
    return m;
  }
};

// Triangular bump 1 − |x − centre| gated by a 0/1 flag, built from three units
// whose inputs share the weights `x_weights`.
void add_gated_bump(MlpBuilder& mlp, const std::vector<std::pair<int, double>>& x_weights, double centre,
                    int gate, int target, double gain) {
  const double offsets[3] = {1.0, 0.0, -1.0};
  const double coeffs[3] = {1.0, -2.0, 1.0};
  for (int j = 0; j < 3; ++j) {
    const int u = mlp.unit(offsets[j] - centre - kGateBias);
    for (auto [idx, w] : x_weights) mlp.in[u][idx] += w;
    mlp.in[u][gate] += kGateBias;
    mlp.out[u][target] += coeffs[j] * gain;
  }
}

AttentionHead routing_head(HeadRole role, const Layout& at, int d, int dh) {
  AttentionHead h{role, Matrix(d, dh), Matrix(d, dh), Matrix(d, dh), Matrix(dh, d)};
  // every token carries exactly one of VIS / PRM / GEN, so this query is constant
  h.w_q(at(Channel::VIS), 0) = 1.0;
  h.w_q(at(Channel::PRM), 0) = 1.0;
  h.w_q(at(Channel::GEN), 0) = 1.0;
  switch (role) {
    // Values read only the non-background appearance channels, so the scratch
    // stays small in absolute terms.
    case HeadRole::visual_mean:
      h.w_k(at(Channel::VIS), 0) = kScore;
      for (int i = 0; i < 3; ++i) {
        h.w_v(at(Channel::APP, 1 + i), i) = 1.0;
        h.w_o(i, at(Channel::SCR, i)) = kScratchGain;
      }
      break;
    case HeadRole::background:
      h.w_k(at(Channel::BGF), 0) = kScore;
      for (int i = 0; i < 3; ++i) {
        h.w_v(at(Channel::APP, 1 + i), i) = 1.0;
        h.w_o(i, at(Channel::SCR, 3 + i)) = kScratchGain;
      }
      break;
    case HeadRole::object:
      h.w_k(at(Channel::OBJ), 0) = kScore;
      h.w_v(at(Channel::APP, 2), 0) = 1.0;
      h.w_o(0, at(Channel::SCR, 6)) = kScratchGain;
      break;
    case HeadRole::prompt:
      h.w_k(at(Channel::PRM), 0) = kScore;
      h.w_v(at(Channel::PRM), 0) = 1.0;
      h.w_o(0, at(Channel::SCR, 7)) = kScratchGain;
      break;
    default:
      throw Error(ErrorCode::ConfigInvalid, "not a routing role");
  }
  return h;
}

AttentionHead readout_head(HeadRole role, Channel key, Channel value, Channel target, const Layout& at, int d,
                           int dh) {
  AttentionHead h{role, Matrix(d, dh), Matrix(d, dh), Matrix(d, dh), Matrix(dh, d)};
  h.w_q(at(Channel::RDO), 0) = kScore;
  h.w_k(at(key), 0) = 1.0;
  h.w_v(at(value), 0) = 1.0;
  h.w_o(0, at(target)) = 1.0;
  return h;
}

struct KvCache {
  std::vector<RowMat> k, v;  // per layer, positions × H·dh
};

struct PassOutput {
  Matrix logits;
  std::vector<ActivationRecord> captures;
  std::vector<Matrix> attention;
};

void check_hooks(const ToyModel& model, std::span<const HookPoint> hooks) {
  for (const HookPoint& h : hooks) {
    if (h.layer < 0 || h.layer >= model.layer_count()) {
      throw Error(ErrorCode::HookLayerOutOfRange,
                  "hook layer " + std::to_string(h.layer) + " outside 0.." + std::to_string(model.layer_count() - 1));
    }
    if (h.site == HookSite::head_output && (h.head < 0 || h.head >= model.heads_per_layer())) {
      throw Error(ErrorCode::HeadOutOfRange, "hook head " + std::to_string(h.head));
    }
    if (!h.fn) throw Error(ErrorCode::ConfigInvalid, "hook without a callback");
  }
}

// Runs `x` (rows at positions first_row..) through every block, extending the cache.
PassOutput run_pass(const ToyModel& model, Matrix x, std::size_t first_row, const ModelInput* prefill,
                    KvCache& cache, std::span<const HookPoint> hooks, Phase phase, const ForwardOptions& options) {
  const int L = model.layer_count();
  const int H = model.heads_per_layer();
  const int d = model.hidden();
  const std::size_t n = x.rows();
  const std::size_t total = first_row + n;

  PassOutput out;
  if (options.capture_attention) out.attention.resize(static_cast<std::size_t>(L * H));

  for (int l = 0; l < L; ++l) {
    const Block& block = model.blocks()[l];
    const ToyModel::Fused& fused = model.fused()[l];
    const Eigen::Index sw = fused.w_q.cols();
    const Eigen::Index vw = fused.w_v.cols();

    if (prefill != nullptr && !prefill->injections[l].empty()) {
      view(x).topRows(prefill->injections[l].rows()) += view(prefill->injections[l]);
    }

    auto xv = view(x);
    RowMat q = xv * view(fused.w_q);
    RowMat& kc = cache.k[l];
    RowMat& vc = cache.v[l];
    kc.conservativeResize(total, sw);
    vc.conservativeResize(total, vw);
    kc.bottomRows(n) = xv * view(fused.w_k);
    vc.bottomRows(n) = xv * view(fused.w_v);

    RowMat z = RowMat::Zero(n, vw);
    for (int h = 0; h < H; ++h) {
      Matrix* amap = nullptr;
      if (options.capture_attention) {
        out.attention[l * H + h] = Matrix(n, total);
        amap = &out.attention[l * H + h];
      }
      const int s0 = fused.score_offset[h], s1 = fused.score_offset[h + 1];
      const int v0 = fused.value_offset[h], v1 = fused.value_offset[h + 1];
      const auto kh = kc.middleCols(s0, s1 - s0);
      const auto vh = vc.middleCols(v0, v1 - v0);
      RowMat a = RowMat::Zero(n, total);
      if (s1 > s0) a.noalias() = q.middleCols(s0, s1 - s0) * kh.transpose();
      for (std::size_t i = 0; i < n; ++i) {
        const Eigen::Index visible = static_cast<Eigen::Index>(first_row + i + 1);
        auto row = a.row(i).head(visible).array();
        row = (row - row.maxCoeff()).exp();
        row /= row.sum();
        a.row(i).tail(total - visible).setZero();
      }
      if (v1 > v0) z.middleCols(v0, v1 - v0).noalias() = a * vh;
      if (amap) view(*amap) = a;
    }

    bool head_hooks = false;
    for (const HookPoint& hp : hooks) head_hooks |= hp.site == HookSite::head_output && hp.layer == l;
    if (!head_hooks) {
      if (vw > 0) xv.noalias() += z * view(fused.w_o);
    } else {
      for (int h = 0; h < H; ++h) {
        const int v0 = fused.value_offset[h], v1 = fused.value_offset[h + 1];
        Matrix contribution(n, d);
        if (v1 > v0) {
          view(contribution).noalias() = z.middleCols(v0, v1 - v0) * view(fused.w_o).middleRows(v0, v1 - v0);
        }
        for (const HookPoint& hp : hooks) {
          if (hp.site == HookSite::head_output && hp.layer == l && hp.head == h) {
            hp.fn(HookContext{l, h, phase, first_row}, contribution);
          }
        }
        xv += view(contribution);
      }
    }
    xv.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(block.out_bias.data(), d);

    if (!block.mlp.b_in.empty()) {
      RowMat pre = xv * view(block.mlp.w_in);
      pre.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(block.mlp.b_in.data(), block.mlp.b_in.size());
      pre = pre.cwiseMax(0.0);
      xv.noalias() += pre * view(block.mlp.w_out);
    }

    for (const HookPoint& hp : hooks) {
      if (hp.site == HookSite::residual_post && hp.layer == l) hp.fn(HookContext{l, -1, phase, first_row}, x);
    }

    if (prefill != nullptr &&
        std::find(options.capture_layers.begin(), options.capture_layers.end(), l) != options.capture_layers.end()) {
      ActivationRecord rec;
      rec.sample_id = prefill->sample_id;
      rec.layer = static_cast<std::uint32_t>(l);
      rec.tokens = static_cast<std::uint32_t>(n);
      rec.hidden = static_cast<std::uint32_t>(d);
      rec.values.assign(x.data().begin(), x.data().end());
      rec.region_labels = prefill->labels;
      out.captures.push_back(std::move(rec));
    }
  }

  out.logits = Matrix(n, model.unembedding().cols());
  view(out.logits).noalias() = view(x) * view(model.unembedding());
  return out;
}

}  // namespace

std::string_view to_string(Integration integration) {
  return integration == Integration::staged_injection ? "staged_injection" : "single_stage";
}

Integration parse_integration(std::string_view text) {
  if (text == "staged_injection") return Integration::staged_injection;
  if (text == "single_stage") return Integration::single_stage;
  throw Error(ErrorCode::ConfigInvalid, "unknown integration '" + std::string(text) + "'");
}

std::string_view to_string(HeadRole role) {
  switch (role) {
    case HeadRole::copy: return "copy";
    case HeadRole::count: return "count";
    case HeadRole::marker: return "marker";
    case HeadRole::object_column: return "object_column";
    case HeadRole::visual_mean: return "visual_mean";
    case HeadRole::background: return "background";
    case HeadRole::prompt: return "prompt";
    case HeadRole::object: return "object";
  }
  return "unknown";
}

void validate_config(const ToyModelConfig& c) {
  auto fail = [](const std::string& msg) { throw Error(ErrorCode::ConfigInvalid, msg); };
  if (c.layer_count < 3) fail("layer_count must be at least 3");
  if (c.heads_per_layer < 3) fail("heads_per_layer must be at least 3");
  if (c.hidden <= 0 || c.hidden % c.heads_per_layer != 0) fail("hidden must be a positive multiple of heads_per_layer");
  if (c.glyph_subspace_dim < 8) fail("glyph_subspace_dim must be at least 8");
  if (c.glyph_subspace_dim >= c.hidden) fail("glyph_subspace_dim must be below hidden");
  if (c.glyph_subspace_dim > c.hidden / c.heads_per_layer) fail("glyph_subspace_dim exceeds the head dimension");
  Layout at{c.glyph_subspace_dim};
  if (c.hidden < at.total()) {
    fail("hidden " + std::to_string(c.hidden) + " cannot hold the " + std::to_string(at.total()) + " wired channels");
  }
  if (c.routing_layer < 0 || c.routing_layer >= c.layer_count) fail("routing_layer outside the model");
  if (c.routing_layer + 2 >= c.layer_count) fail("routing_layer leaves no room for decode and count layers");
  if (c.integration == Integration::staged_injection && c.routing_layer < 2) {
    fail("staged injection finishes at layer 2; routing_layer must be at least 2");
  }
}

nlohmann::json config_to_json(const ToyModelConfig& c) {
  return {{"layer_count", c.layer_count},
          {"hidden", c.hidden},
          {"heads_per_layer", c.heads_per_layer},
          {"integration", std::string(to_string(c.integration))},
          {"routing_layer", c.routing_layer},
          {"interference_mode", c.interference_mode},
          {"glyph_subspace_dim", c.glyph_subspace_dim},
          {"seed", c.seed}};
}

ToyModelConfig config_from_json(const nlohmann::json& j) {
  ToyModelConfig c;
  try {
    if (!j.is_object()) throw Error(ErrorCode::ConfigInvalid, "model config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key == "layer_count") c.layer_count = value.get<int>();
      else if (key == "hidden") c.hidden = value.get<int>();
      else if (key == "heads_per_layer") c.heads_per_layer = value.get<int>();
      else if (key == "integration") c.integration = parse_integration(value.get<std::string>());
      else if (key == "routing_layer") c.routing_layer = value.get<int>();
      else if (key == "interference_mode") c.interference_mode = value.get<bool>();
      else if (key == "glyph_subspace_dim") c.glyph_subspace_dim = value.get<int>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else throw Error(ErrorCode::ConfigInvalid, "unknown config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("bad config value: ") + e.what());
  }
  validate_config(c);
  return c;
}

ToyModelConfig read_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::ConfigInvalid, std::string("config is not JSON: ") + e.what());
  }
  return config_from_json(j);
}

ToyModel build_model(const ToyModelConfig& config) {
  validate_config(config);
  const int L = config.layer_count;
  const int H = config.heads_per_layer;
  const int d = config.hidden;
  const int dh = d / H;
  const int g = config.glyph_subspace_dim;
  const int routing = config.routing_layer;
  const int counting = routing + 2;
  const Layout at{g};

  ToyModel model;
  model.config_ = config;
  model.model_id_ = "toy-vlm-" + std::string(to_string(config.integration)) + "-L" + std::to_string(L) + "-d" +
                    std::to_string(d) + "-H" + std::to_string(H) + "-r" + std::to_string(routing) + "-g" +
                    std::to_string(g) + (config.interference_mode ? "-interference" : "") + "-s" +
                    std::to_string(config.seed);

  for (int k = 0; k < kGlyphCodes; ++k) model.vocabulary_.push_back(glyph_token(k));
  for (int n = 1; n <= kMaxObjects; ++n) model.vocabulary_.push_back(std::to_string(n));
  model.vocabulary_.push_back("yes");
  model.vocabulary_.push_back("no");
  model.vocabulary_.push_back("<eos>");
  const int V = static_cast<int>(model.vocabulary_.size());

  std::mt19937_64 rng(mix_seed(config.seed, 0x70f7'a11eULL));
  model.rotation_ = random_orthogonal(static_cast<std::size_t>(d), rng);
  const Matrix glyph_basis = random_orthogonal(static_cast<std::size_t>(g), rng);
  model.glyph_codes_ = Matrix(kGlyphCodes, g);
  for (int k = 0; k < kGlyphCodes; ++k) {
    const double sign = k < kGlyphCodes / 2 ? 1.0 : -1.0;
    for (int i = 0; i < g; ++i) model.glyph_codes_(k, i) = sign * glyph_basis(k % (kGlyphCodes / 2), i);
  }
  std::vector<int> levels(kGlyphCodes);
  std::iota(levels.begin(), levels.end(), 1);
  portable_shuffle(levels, rng);
  std::copy(levels.begin(), levels.end(), model.levels_.begin());

  const std::vector<HeadRole> routing_roles = {HeadRole::visual_mean, HeadRole::background, HeadRole::prompt,
                                               HeadRole::object};
  model.blocks_.resize(L);
  for (int l = 0; l < L; ++l) {
    std::vector<HeadRole> roles = routing_roles;
    portable_shuffle(roles, rng);
    std::vector<HeadRole> layer_roles;
    for (int h = 0; h < H; ++h) layer_roles.push_back(roles[h % roles.size()]);
    if (l == routing) {
      const int c = static_cast<int>(rng() % H);
      layer_roles[c] = HeadRole::copy;
      model.copy_head_ = {l, c};
    } else if (l == counting) {
      std::vector<int> slots(H);
      std::iota(slots.begin(), slots.end(), 0);
      portable_shuffle(slots, rng);
      layer_roles[slots[0]] = HeadRole::count;
      layer_roles[slots[1]] = HeadRole::marker;
      layer_roles[slots[2]] = HeadRole::object_column;
      model.count_head_ = {l, slots[0]};
    }
    Block& block = model.blocks_[l];
    block.out_bias.assign(d, 0.0);
    for (HeadRole role : layer_roles) {
      switch (role) {
        case HeadRole::copy: {
          AttentionHead h{role, Matrix(d, dh), Matrix(d, dh), Matrix(d, dh), Matrix(dh, d)};
          h.w_q(at(Channel::VIS), 0) = kCopyBroad;
          h.w_q(at(Channel::PRM), 0) = kCopyBroad;
          h.w_q(at(Channel::RDO), 0) = kScore;
          h.w_q(at(Channel::GEN), 0) = kScore;
          h.w_k(at(Channel::TXT), 0) = 1.0;
          for (int i = 0; i < g; ++i) {
            h.w_v(at(Channel::GLY, i), i) = 1.0;
            h.w_o(i, at(Channel::GLY, i)) = 1.0;
          }
          block.heads.push_back(std::move(h));
          break;
        }
        case HeadRole::count:
          block.heads.push_back(readout_head(role, Channel::VIS, Channel::OBJ, Channel::CNT, at, d, dh));
          break;
        case HeadRole::marker:
          block.heads.push_back(readout_head(role, Channel::MRK, Channel::COL, Channel::MCOL, at, d, dh));
          break;
        case HeadRole::object_column:
          block.heads.push_back(readout_head(role, Channel::OBJ, Channel::COL, Channel::OCOL, at, d, dh));
          break;
        default:
          block.heads.push_back(routing_head(role, at, d, dh));
      }
    }

    MlpBuilder mlp{d, {}, {}, {}};
    if (l == routing) {
      // saturating detector per code, gated by the readout flag, writing the level
      for (int k = 0; k < kGlyphCodes; ++k) {
        const double level_out = kLevelGain * model.levels_[k];
        for (int j = 0; j < 2; ++j) {
          const int u = mlp.unit(-kEncodeSlope * kEncodeThreshold - kGateBias - j);
          for (int i = 0; i < g; ++i) mlp.in[u][at(Channel::GLY, i)] = kEncodeSlope * model.glyph_codes_(k, i);
          mlp.in[u][at(Channel::RDO)] = kGateBias;
          mlp.out[u][at(Channel::LVL)] = j == 0 ? level_out : -level_out;
        }
      }
    } else if (l == routing + 1) {
      for (int k = 0; k < kGlyphCodes; ++k) {
        add_gated_bump(mlp, {{at(Channel::LVL), 1.0 / kLevelGain}}, model.levels_[k], at(Channel::TSK, 0),
                       at(Channel::ANS_G, k), kAnswerGain);
      }
    } else if (l == counting) {
      std::vector<std::pair<int, double>> x = {{at(Channel::CNT), static_cast<double>(kPatchCount)}};
      if (config.interference_mode) x.emplace_back(at(Channel::LVL), kInterferenceLeak / kLevelGain);
      for (int n = 1; n <= kMaxObjects; ++n) {
        add_gated_bump(mlp, x, n, at(Channel::TSK, 1), at(Channel::ANS_D, n - 1), kAnswerGain);
      }
      const int yes = mlp.unit(-kGateBias);
      mlp.in[yes][at(Channel::MCOL)] = kSpatialSlope;
      mlp.in[yes][at(Channel::OCOL)] = -kSpatialSlope;
      mlp.in[yes][at(Channel::TSK, 2)] = kGateBias;
      mlp.out[yes][at(Channel::ANS_Y)] = kAnswerGain;
      const int no = mlp.unit(-kGateBias);
      mlp.in[no][at(Channel::MCOL)] = -kSpatialSlope;
      mlp.in[no][at(Channel::OCOL)] = kSpatialSlope;
      mlp.in[no][at(Channel::TSK, 2)] = kGateBias;
      mlp.out[no][at(Channel::ANS_N)] = kAnswerGain;
    }
    block.mlp = mlp.build();
  }

  Matrix unembed(d, V);
  for (int k = 0; k < kGlyphCodes; ++k) unembed(at(Channel::ANS_G, k), k) = kUnembedGain;
  for (int n = 0; n < kMaxObjects; ++n) unembed(at(Channel::ANS_D, n), kGlyphCodes + n) = kUnembedGain;
  unembed(at(Channel::ANS_Y), V - 3) = kUnembedGain;
  unembed(at(Channel::ANS_N), V - 2) = kUnembedGain;
  unembed(at(Channel::GEN), V - 1) = kUnembedGain;

  // Express everything in the rotated basis: h = c · R.
  const Matrix& R = model.rotation_;
  const Matrix Rt = R.transposed();
  for (Block& block : model.blocks_) {
    for (AttentionHead& h : block.heads) {
      h.w_q = matmul(Rt, h.w_q);
      h.w_k = matmul(Rt, h.w_k);
      h.w_v = matmul(Rt, h.w_v);
      h.w_o = matmul(h.w_o, R);
    }
    if (!block.mlp.b_in.empty()) {
      block.mlp.w_in = matmul(Rt, block.mlp.w_in);
      block.mlp.w_out = matmul(block.mlp.w_out, R);
    }
    Matrix bias(1, d, block.out_bias);
    bias = matmul(bias, R);
    block.out_bias.assign(bias.data().begin(), bias.data().end());
  }
  model.unembed_ = matmul(Rt, unembed);
  model.fuse();
  return model;
}

void ToyModel::fuse() {
  const int H = heads_per_layer();
  const int dh = head_dim();
  const int d = hidden();
  auto column_used = [&](const Matrix& m, int c) {
    for (int r = 0; r < static_cast<int>(m.rows()); ++r)
      if (m(r, c) != 0.0) return true;
    return false;
  };
  auto row_used = [&](const Matrix& m, int r) {
    for (double v : m.row(r))
      if (v != 0.0) return true;
    return false;
  };
  fused_.clear();
  for (const Block& block : blocks_) {
    std::vector<std::pair<int, int>> score_cols, value_cols;  // (head, dim)
    Fused f;
    f.score_offset.push_back(0);
    f.value_offset.push_back(0);
    for (int h = 0; h < H; ++h) {
      const AttentionHead& head = block.heads[h];
      for (int c = 0; c < dh; ++c) {
        if (column_used(head.w_q, c) && column_used(head.w_k, c)) score_cols.emplace_back(h, c);
        if (column_used(head.w_v, c) && row_used(head.w_o, c)) value_cols.emplace_back(h, c);
      }
      f.score_offset.push_back(static_cast<int>(score_cols.size()));
      f.value_offset.push_back(static_cast<int>(value_cols.size()));
    }
    f.w_q = Matrix(d, score_cols.size());
    f.w_k = Matrix(d, score_cols.size());
    f.w_v = Matrix(d, value_cols.size());
    f.w_o = Matrix(value_cols.size(), d);
    for (std::size_t j = 0; j < score_cols.size(); ++j) {
      const auto [h, c] = score_cols[j];
      for (int r = 0; r < d; ++r) {
        f.w_q(r, j) = block.heads[h].w_q(r, c);
        f.w_k(r, j) = block.heads[h].w_k(r, c);
      }
    }
    for (std::size_t j = 0; j < value_cols.size(); ++j) {
      const auto [h, c] = value_cols[j];
      for (int r = 0; r < d; ++r) {
        f.w_v(r, j) = block.heads[h].w_v(r, c);
        f.w_o(j, r) = block.heads[h].w_o(c, r);
      }
    }
    fused_.push_back(std::move(f));
  }
}

Matrix ToyModel::channel_directions(Channel channel) const {
  const Layout at{config_.glyph_subspace_dim};
  const int w = at.width(channel);
  Matrix out(w, hidden());
  for (int i = 0; i < w; ++i) {
    const auto src = rotation_.row(at(channel, i));
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

ToyModel ToyModel::with_head_zeroed(HeadRef head) const {
  if (head.layer < 0 || head.layer >= layer_count() || head.head < 0 || head.head >= heads_per_layer()) {
    throw Error(ErrorCode::HeadOutOfRange,
                "head L" + std::to_string(head.layer) + "H" + std::to_string(head.head) + " outside the model");
  }
  ToyModel copy = *this;
  Matrix& w_o = copy.blocks_[head.layer].heads[head.head].w_o;
  w_o = Matrix(w_o.rows(), w_o.cols());
  copy.fuse();
  return copy;
}

ModelInput ToyModel::embed(const RenderedScene& scene) const {
  const Layout at{config_.glyph_subspace_dim};
  const int d = hidden();
  const int g = config_.glyph_subspace_dim;

  ModelInput input;
  input.sample_id = scene.scene_id;
  input.question = scene.question;
  Matrix base(kPrefillTokens, d);
  Matrix features(kPatchCount, d);
  for (int p = 0; p < kPatchCount; ++p) {
    const RenderedPatch& patch = scene.patches[p];
    base(p, at(Channel::VIS)) = 1.0;
    switch (patch.kind) {
      case PatchKind::background: base(p, at(Channel::BGF)) = 1.0; break;
      case PatchKind::object: base(p, at(Channel::OBJ)) = 1.0; break;
      case PatchKind::text_glyph: base(p, at(Channel::TXT)) = 1.0; break;
      case PatchKind::spatial_marker: base(p, at(Channel::MRK)) = 1.0; break;
    }
    base(p, at(Channel::COL)) = p % kGridSide;
    base(p, at(Channel::ROW)) = p / kGridSide;

    std::mt19937_64 noise(patch.noise_seed);
    features(p, at(Channel::APP, app_index(patch.kind))) = 1.0;
    for (int i = 0; i < 4; ++i) features(p, at(Channel::APP, i)) += kFeatureNoise * standard_normal(noise);
    if (patch.kind == PatchKind::text_glyph) {
      if (patch.glyph < 0 || patch.glyph >= kGlyphCodes) throw Error(ErrorCode::SceneInvalid, "glyph out of range");
      for (int i = 0; i < g; ++i) features(p, at(Channel::GLY, i)) = glyph_codes_(patch.glyph, i);
    }
    for (int i = 0; i < g; ++i) features(p, at(Channel::GLY, i)) += kFeatureNoise * standard_normal(noise);

    input.labels.push_back(patch.kind == PatchKind::text_glyph ? RegionLabel::visual_text
                                                                : RegionLabel::visual_background);
  }
  for (int t = kPatchCount; t < kPrefillTokens; ++t) {
    base(t, at(Channel::PRM)) = 1.0;
    input.labels.push_back(RegionLabel::prompt_text);
  }
  base(kPrefillTokens - 1, at(Channel::RDO)) = 1.0;
  base(kPrefillTokens - 1, at(Channel::TSK, task_index(scene.question))) = 1.0;

  input.embeddings = matmul(base, rotation_);
  const Matrix rotated = matmul(features, rotation_);
  input.injections.assign(layer_count(), Matrix());
  if (config_.integration == Integration::single_stage) {
    input.injections[0] = rotated;
  } else {
    Matrix third = rotated;
    for (double& v : third.data()) v /= 3.0;
    for (int l = 0; l < 3; ++l) input.injections[l] = third;
  }
  return input;
}

Matrix ToyModel::generated_embedding() const {
  const Layout at{config_.glyph_subspace_dim};
  Matrix row(1, hidden());
  row(0, at(Channel::GEN)) = 1.0;
  return matmul(row, rotation_);
}

ForwardResult forward(const ToyModel& model, const ModelInput& input, std::span<const HookPoint> hooks,
                      const ForwardOptions& options) {
  check_hooks(model, hooks);
  for (int l : options.capture_layers) {
    if (l < 0 || l >= model.layer_count()) {
      throw Error(ErrorCode::HookLayerOutOfRange, "capture layer " + std::to_string(l));
    }
  }
  if (input.embeddings.cols() != static_cast<std::size_t>(model.hidden()) ||
      input.injections.size() != static_cast<std::size_t>(model.layer_count())) {
    throw Error(ErrorCode::DimensionMismatch, "input was embedded for a different model shape");
  }
  KvCache cache{std::vector<RowMat>(model.layer_count()), std::vector<RowMat>(model.layer_count())};
  PassOutput pass = run_pass(model, input.embeddings, 0, &input, cache, hooks, Phase::prefill, options);

  ForwardResult result;
  result.logits = std::move(pass.logits);
  // keep captures in the requested order
  for (int l : options.capture_layers) {
    for (auto& rec : pass.captures) {
      if (static_cast<int>(rec.layer) == l) {
        result.captures.push_back(rec);
        break;
      }
    }
  }
  result.attention = std::move(pass.attention);
  return result;
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = static_cast<int>(i);
  return best;
}

Decoded greedy_decode(const ToyModel& model, const ModelInput& input, std::span<const HookPoint> hooks) {
  check_hooks(model, hooks);
  KvCache cache{std::vector<RowMat>(model.layer_count()), std::vector<RowMat>(model.layer_count())};
  PassOutput pass = run_pass(model, input.embeddings, 0, &input, cache, hooks, Phase::prefill, {});
  std::size_t position = input.embeddings.rows();

  Decoded out;
  const Matrix generated = model.generated_embedding();
  for (int step = 0; step < kMaxDecodeTokens; ++step) {
    const int token = argmax(pass.logits.row(pass.logits.rows() - 1));
    out.tokens.push_back(token);
    if (token == model.eos_token()) break;
    if (!out.answer.empty()) out.answer += ' ';
    out.answer += model.vocabulary()[token];
    if (step + 1 == kMaxDecodeTokens) break;
    pass = run_pass(model, generated, position, nullptr, cache, hooks, Phase::decode, {});
    ++position;
  }
  return out;
}

}  // namespace ocrlens
