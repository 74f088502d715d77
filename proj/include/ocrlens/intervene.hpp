#pragma once

// Intervention grammar and the hooks that implement it.
//
//   baseline
//   pca_L<a>[-<b>]_pc<N>[@alpha=<f>]     layers a..b inclusive, top N, strength f
//   heads:L<l>H<h>(,L<l>H<h>)*           zero those heads' output contributions

#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ocrlens/delta_pca.hpp"
#include "ocrlens/toy_model.hpp"

namespace ocrlens {

enum class InterventionKind { none, pca_projection, head_ablation };

inline constexpr double kMaxAlpha = 2.0;

struct InterventionSpec {
  InterventionKind kind = InterventionKind::none;
  int first_layer = 0;
  int last_layer = 0;
  int components = 0;
  double alpha = 1.0;
  std::vector<HeadRef> heads;  // sorted, unique

  std::vector<int> layers() const;

  static InterventionSpec baseline() { return {}; }
  static InterventionSpec pca(int first, int last, int n, double alpha = 1.0);
  static InterventionSpec ablate(std::vector<HeadRef> heads);

  friend bool operator==(const InterventionSpec&, const InterventionSpec&) = default;
};

// Throws SpecParseError (ParseError with a byte position, or RangeError for
// b < a, N == 0, alpha outside [0, 2]).
InterventionSpec parse_spec(std::string_view text);

// Canonical form: single layer written once, alpha omitted when 1 and
// otherwise printed in shortest round-trip form, heads sorted.
std::string to_string(const InterventionSpec& spec);

// h − α Σ_{i<N} ⟨h, pc_i⟩ pc_i. Throws DimensionMismatch / NTooLarge.
std::vector<double> project_out(std::span<const double> h, const PrincipalSubspace& subspace, std::size_t n,
                                double alpha);

// Same update applied to every row; `basis` rows must be orthonormal.
void project_rows(Matrix& rows, const Matrix& basis, double alpha);

// One residual hook per spec layer, each holding that layer's first N
// components re-orthonormalised. Throws MissingDirections / NTooLarge /
// DimensionMismatch.
std::vector<HookPoint> make_projection_hooks(const InterventionSpec& spec, const DirectionSet& directions);

// One head_output hook per listed head. Throws HeadOutOfRange.
std::vector<HookPoint> make_ablation_hooks(const InterventionSpec& spec, const ToyModel& model);

// Dispatches on spec.kind; `directions` may be null for non-pca specs.
std::vector<HookPoint> make_hooks(const InterventionSpec& spec, const ToyModel& model,
                                  const DirectionSet* directions);

}  // namespace ocrlens
