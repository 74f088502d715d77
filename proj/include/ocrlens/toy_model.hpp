#pragma once

// Hand-wired miniature vision-language transformer.
//
// Residual layout before rotation (g = glyph_subspace_dim):
//
//   flags     VIS OBJ TXT MRK BGF        token kind, noise free
//   position  COL ROW                    patch column / row index
//   features  APP[4] GLY[g]              appearance and glyph code, noisy
//   prompt    PRM RDO TSK[3] GEN         prompt / readout / task / generated
//   scratch   SCR[g]                     written by content-free heads
//   slots     LVL CNT MCOL OCOL          readout-side scalars
//   answers   ANS_G[16] ANS_D[9] ANS_Y ANS_N
//
// Every weight is then expressed in a seeded random orthonormal basis so no
// channel is axis aligned in the residual the hooks see.
//
// Wiring: visual features enter at layer 0 (single stage) or in thirds at
// layers 0, 1, 2 (staged). At the routing layer the copy head moves the glyph
// vector from text patches into the readout token and the MLP encodes it as a
// scalar level in LVL. The next layer decodes LVL into ANS_G. Two layers after
// routing the count head, marker head and object-column head feed the count
// and spatial MLPs. Every other head is content-independent routing into SCR.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "ocrlens/activation_store.hpp"
#include "ocrlens/scene.hpp"
#include "ocrlens/tensor.hpp"

namespace ocrlens {

enum class Integration { staged_injection, single_stage };

std::string_view to_string(Integration integration);
Integration parse_integration(std::string_view text);

struct ToyModelConfig {
  int layer_count = 12;
  int hidden = 64;
  int heads_per_layer = 4;
  Integration integration = Integration::staged_injection;
  int routing_layer = 6;
  bool interference_mode = false;
  int glyph_subspace_dim = 8;
  std::uint64_t seed = 0;

  friend bool operator==(const ToyModelConfig&, const ToyModelConfig&) = default;
};

// Throws ConfigInvalid.
void validate_config(const ToyModelConfig& config);
nlohmann::json config_to_json(const ToyModelConfig& config);
ToyModelConfig config_from_json(const nlohmann::json& j);
ToyModelConfig read_config_file(const std::filesystem::path& path);

enum class Channel {
  VIS, OBJ, TXT, MRK, BGF, COL, ROW, APP, GLY, PRM, RDO, TSK, GEN, SCR,
  LVL, CNT, MCOL, OCOL, ANS_G, ANS_D, ANS_Y, ANS_N,
};

enum class Phase { prefill, decode };
enum class HookSite { residual_post, head_output };

struct HookContext {
  int layer = 0;
  int head = -1;  // set for head_output hooks
  Phase phase = Phase::prefill;
  std::size_t first_row = 0;  // position of rows(0) in the full sequence
};

// Hooks receive the rows computed in the current pass (all prompt rows during
// prefill, the new row during decode) and may rewrite them in place.
using HookFn = std::function<void(const HookContext&, Matrix& rows)>;

struct HookPoint {
  int layer = 0;
  HookSite site = HookSite::residual_post;
  int head = -1;
  HookFn fn;
};

struct HeadRef {
  int layer = 0;
  int head = 0;

  friend auto operator<=>(const HeadRef&, const HeadRef&) = default;
};

enum class HeadRole { copy, count, marker, object_column, visual_mean, background, prompt, object };

std::string_view to_string(HeadRole role);

struct AttentionHead {
  HeadRole role = HeadRole::visual_mean;
  Matrix w_q;  // d × dh
  Matrix w_k;  // d × dh
  Matrix w_v;  // d × dh
  Matrix w_o;  // dh × d
};

struct Mlp {
  Matrix w_in;               // d × m
  std::vector<double> b_in;  // m
  Matrix w_out;              // m × d
};

struct Block {
  std::vector<AttentionHead> heads;
  std::vector<double> out_bias;  // d, added after the head sum
  Mlp mlp;                       // m == 0 means no MLP
};

struct ModelInput {
  std::string sample_id;
  Question question = Question::read_text;
  Matrix embeddings;                   // prompt rows × d
  std::vector<Matrix> injections;      // per layer; empty or rows × d, added at the layer input
  std::vector<RegionLabel> labels;     // one per prompt row
};

class ToyModel {
 public:
  const ToyModelConfig& config() const noexcept { return config_; }
  const std::string& model_id() const noexcept { return model_id_; }
  int layer_count() const noexcept { return config_.layer_count; }
  int hidden() const noexcept { return config_.hidden; }
  int heads_per_layer() const noexcept { return config_.heads_per_layer; }
  int head_dim() const noexcept { return config_.hidden / config_.heads_per_layer; }
  int count_layer() const noexcept { return config_.routing_layer + 2; }

  const std::vector<std::string>& vocabulary() const noexcept { return vocabulary_; }
  int eos_token() const noexcept { return static_cast<int>(vocabulary_.size()) - 1; }

  HeadRef copy_head() const noexcept { return copy_head_; }
  HeadRef count_head() const noexcept { return count_head_; }
  const std::vector<Block>& blocks() const noexcept { return blocks_; }
  const Matrix& unembedding() const noexcept { return unembed_; }

  // 1-based level the encoder assigns to each glyph code.
  const std::array<int, kGlyphCodes>& glyph_levels() const noexcept { return levels_; }

  // Rows spanning one residual channel group, in the rotated basis.
  Matrix channel_directions(Channel channel) const;

  // Copy of this model with the head's output projection zeroed.
  ToyModel with_head_zeroed(HeadRef head) const;

  ModelInput embed(const RenderedScene& scene) const;
  ModelInput embed(const ToyScene& scene) const { return embed(render(scene)); }
  Matrix generated_embedding() const;  // 1 × d, shared by every generated token

  friend ToyModel build_model(const ToyModelConfig& config);

  // Per-layer weights used by the forward pass: all heads side by side, with
  // head dimensions that are identically zero dropped. Head h owns columns
  // [score_offset[h], score_offset[h+1]) of w_q/w_k and [value_offset[h],
  // value_offset[h+1]) of w_v (rows of w_o).
  struct Fused {
    Matrix w_q, w_k, w_v, w_o;
    std::vector<int> score_offset, value_offset;
  };
  const std::vector<Fused>& fused() const noexcept { return fused_; }

 private:
  void fuse();

  ToyModelConfig config_;
  std::string model_id_;
  std::vector<std::string> vocabulary_;
  std::vector<Block> blocks_;
  std::vector<Fused> fused_;
  Matrix unembed_;   // d × V
  Matrix rotation_;  // rows are the rotated images of canonical axes
  std::array<int, kGlyphCodes> levels_{};
  Matrix glyph_codes_;  // 16 × g, canonical GLY coordinates per code
  HeadRef copy_head_;
  HeadRef count_head_;
};

// Throws ConfigInvalid.
ToyModel build_model(const ToyModelConfig& config);

struct ForwardOptions {
  std::vector<int> capture_layers;
  bool capture_attention = false;
};

struct ForwardResult {
  Matrix logits;                          // prompt rows × V
  std::vector<ActivationRecord> captures; // in capture_layers order
  std::vector<Matrix> attention;          // layer·H + head, each T × T
};

// Throws HookLayerOutOfRange / HeadOutOfRange for bad hook targets.
ForwardResult forward(const ToyModel& model, const ModelInput& input, std::span<const HookPoint> hooks = {},
                      const ForwardOptions& options = {});

struct Decoded {
  std::vector<int> tokens;  // includes <eos> when emitted
  std::string answer;       // non-eos tokens joined by single spaces
};

inline constexpr int kMaxDecodeTokens = 2;

Decoded greedy_decode(const ToyModel& model, const ModelInput& input, std::span<const HookPoint> hooks = {});

// Lowest index wins ties.
int argmax(std::span<const double> values);

}  // namespace ocrlens
