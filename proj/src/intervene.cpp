#include "ocrlens/intervene.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <memory>

#include "ocrlens/error.hpp"

namespace ocrlens {

namespace {

constexpr int kMaxIndex = 1'000'000;

class SpecParser {
 public:
  explicit SpecParser(std::string_view text) : text_(text) {}

  InterventionSpec parse() {
    if (text_ == "baseline") return InterventionSpec::baseline();
    if (text_.starts_with("pca_")) return parse_pca();
    if (text_.starts_with("heads:")) return parse_heads();
    fail(0, "expected 'baseline', 'pca_L…' or 'heads:…'");
  }

 private:
  [[noreturn]] void fail(std::size_t at, const std::string& what) const {
    throw SpecParseError(ErrorCode::ParseError, at, "cannot parse intervention '" + std::string(text_) + "': " + what);
  }
  [[noreturn]] void range(std::size_t at, const std::string& what) const {
    throw SpecParseError(ErrorCode::RangeError, at, "intervention '" + std::string(text_) + "': " + what);
  }

  void expect(std::string_view literal) {
    if (text_.substr(pos_, literal.size()) != literal) fail(pos_, "expected '" + std::string(literal) + "'");
    pos_ += literal.size();
  }

  bool peek(char c) const { return pos_ < text_.size() && text_[pos_] == c; }

  int number() {
    const std::size_t start = pos_;
    long value = 0;
    while (pos_ < text_.size() && text_[pos_] >= '0' && text_[pos_] <= '9') {
      value = value * 10 + (text_[pos_] - '0');
      if (value > kMaxIndex) range(start, "index too large");
      ++pos_;
    }
    if (pos_ == start) fail(start, "expected a decimal number");
    return static_cast<int>(value);
  }

  void expect_end() const {
    if (pos_ != text_.size()) fail(pos_, "unexpected trailing characters");
  }

  InterventionSpec parse_pca() {
    InterventionSpec spec;
    spec.kind = InterventionKind::pca_projection;
    pos_ = 4;
    expect("L");
    spec.first_layer = number();
    spec.last_layer = spec.first_layer;
    if (peek('-')) {
      ++pos_;
      const std::size_t at = pos_;
      spec.last_layer = number();
      if (spec.last_layer < spec.first_layer) range(at, "layer range end precedes its start");
    }
    expect("_pc");
    const std::size_t n_at = pos_;
    spec.components = number();
    if (spec.components < 1) range(n_at, "component count must be at least 1");
    if (pos_ < text_.size()) {
      expect("@alpha=");
      const std::size_t at = pos_;
      const char* begin = text_.data() + pos_;
      const char* end = text_.data() + text_.size();
      double alpha = 0.0;
      const auto [ptr, ec] = std::from_chars(begin, end, alpha);
      if (ec == std::errc::result_out_of_range) range(at, "alpha out of range");
      if (ec != std::errc() || ptr == begin) fail(at, "expected a real number after '@alpha='");
      pos_ += static_cast<std::size_t>(ptr - begin);
      expect_end();
      if (!std::isfinite(alpha) || alpha < 0.0 || alpha > kMaxAlpha) range(at, "alpha must lie in [0, 2]");
      spec.alpha = alpha;
    }
    return spec;
  }

  InterventionSpec parse_heads() {
    InterventionSpec spec;
    spec.kind = InterventionKind::head_ablation;
    pos_ = 6;
    for (;;) {
      expect("L");
      HeadRef ref;
      ref.layer = number();
      expect("H");
      ref.head = number();
      spec.heads.push_back(ref);
      if (!peek(',')) break;
      ++pos_;
    }
    expect_end();
    std::sort(spec.heads.begin(), spec.heads.end());
    spec.heads.erase(std::unique(spec.heads.begin(), spec.heads.end()), spec.heads.end());
    return spec;
  }

  std::string_view text_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<int> InterventionSpec::layers() const {
  std::vector<int> out;
  if (kind == InterventionKind::pca_projection) {
    for (int l = first_layer; l <= last_layer; ++l) out.push_back(l);
  } else if (kind == InterventionKind::head_ablation) {
    for (const HeadRef& h : heads)
      if (out.empty() || out.back() != h.layer) out.push_back(h.layer);
  }
  return out;
}

InterventionSpec InterventionSpec::pca(int first, int last, int n, double alpha) {
  InterventionSpec spec;
  spec.kind = InterventionKind::pca_projection;
  spec.first_layer = first;
  spec.last_layer = last;
  spec.components = n;
  spec.alpha = alpha;
  return parse_spec(to_string(spec));
}

InterventionSpec InterventionSpec::ablate(std::vector<HeadRef> heads) {
  InterventionSpec spec;
  if (heads.empty()) return spec;
  spec.kind = InterventionKind::head_ablation;
  std::sort(heads.begin(), heads.end());
  heads.erase(std::unique(heads.begin(), heads.end()), heads.end());
  spec.heads = std::move(heads);
  return spec;
}

InterventionSpec parse_spec(std::string_view text) { return SpecParser(text).parse(); }

std::string to_string(const InterventionSpec& spec) {
  switch (spec.kind) {
    case InterventionKind::none:
      return "baseline";
    case InterventionKind::pca_projection: {
      std::string out = "pca_L" + std::to_string(spec.first_layer);
      if (spec.last_layer != spec.first_layer) out += "-" + std::to_string(spec.last_layer);
      out += "_pc" + std::to_string(spec.components);
      if (spec.alpha != 1.0) {
        char buf[64];
        const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, spec.alpha);
        out += "@alpha=" + std::string(buf, ptr);
      }
      return out;
    }
    case InterventionKind::head_ablation: {
      std::string out = "heads:";
      for (std::size_t i = 0; i < spec.heads.size(); ++i) {
        if (i) out += ',';
        out += "L" + std::to_string(spec.heads[i].layer) + "H" + std::to_string(spec.heads[i].head);
      }
      return out;
    }
  }
  return "baseline";
}

std::vector<double> project_out(std::span<const double> h, const PrincipalSubspace& subspace, std::size_t n,
                                double alpha) {
  if (h.size() != subspace.hidden()) {
    throw Error(ErrorCode::DimensionMismatch, "vector has " + std::to_string(h.size()) + " entries, subspace " +
                                                  std::to_string(subspace.hidden()));
  }
  if (n > subspace.size()) {
    throw Error(ErrorCode::NTooLarge,
                "N=" + std::to_string(n) + " but only " + std::to_string(subspace.size()) + " components stored");
  }
  std::vector<double> out(h.begin(), h.end());
  if (alpha == 0.0) return out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto pc = subspace.components.row(i);
    const double c = alpha * dot(h, pc);
    for (std::size_t j = 0; j < out.size(); ++j) out[j] -= c * pc[j];
  }
  return out;
}

void project_rows(Matrix& rows, const Matrix& basis, double alpha) {
  if (alpha == 0.0 || basis.rows() == 0 || rows.rows() == 0) return;
  if (rows.cols() != basis.cols()) throw Error(ErrorCode::DimensionMismatch, "row width differs from basis width");
  Matrix coeffs = matmul_transposed(rows, basis);  // rows × N
  for (double& c : coeffs.data()) c *= alpha;
  const Matrix removed = matmul(coeffs, basis);
  auto dst = rows.data();
  const auto src = removed.data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= src[i];
}

std::vector<HookPoint> make_projection_hooks(const InterventionSpec& spec, const DirectionSet& directions) {
  std::vector<HookPoint> hooks;
  if (spec.kind != InterventionKind::pca_projection) return hooks;
  for (int layer : spec.layers()) {
    const PrincipalSubspace* s = directions.at(static_cast<std::uint32_t>(layer));
    if (s == nullptr) {
      throw Error(ErrorCode::MissingDirections, "no fitted directions for layer " + std::to_string(layer) + " in " +
                                                    to_string(spec));
    }
    if (static_cast<std::size_t>(spec.components) > s->size()) {
      throw Error(ErrorCode::NTooLarge, "layer " + std::to_string(layer) + " stores " + std::to_string(s->size()) +
                                            " components, spec asks for " + std::to_string(spec.components));
    }
    Matrix first(spec.components, s->hidden());
    for (int i = 0; i < spec.components; ++i) {
      const auto src = s->components.row(i);
      std::copy(src.begin(), src.end(), first.row(i).begin());
    }
    auto basis = std::make_shared<const Matrix>(orthonormalize_rows(first, 1e-10));
    const double alpha = spec.alpha;
    hooks.push_back(HookPoint{layer, HookSite::residual_post, -1,
                              [basis, alpha](const HookContext&, Matrix& rows) { project_rows(rows, *basis, alpha); }});
  }
  return hooks;
}

std::vector<HookPoint> make_ablation_hooks(const InterventionSpec& spec, const ToyModel& model) {
  std::vector<HookPoint> hooks;
  if (spec.kind != InterventionKind::head_ablation) return hooks;
  for (const HeadRef& h : spec.heads) {
    if (h.layer < 0 || h.layer >= model.layer_count() || h.head < 0 || h.head >= model.heads_per_layer()) {
      throw Error(ErrorCode::HeadOutOfRange, "head L" + std::to_string(h.layer) + "H" + std::to_string(h.head) +
                                                 " outside the model");
    }
    hooks.push_back(HookPoint{h.layer, HookSite::head_output, h.head, [](const HookContext&, Matrix& rows) {
                                for (double& v : rows.data()) v = 0.0;
                              }});
  }
  return hooks;
}

std::vector<HookPoint> make_hooks(const InterventionSpec& spec, const ToyModel& model,
                                  const DirectionSet* directions) {
  switch (spec.kind) {
    case InterventionKind::none: return {};
    case InterventionKind::head_ablation: return make_ablation_hooks(spec, model);
    case InterventionKind::pca_projection:
      if (directions == nullptr) throw Error(ErrorCode::MissingDirections, "pca spec without a direction set");
      if (directions->hidden != static_cast<std::uint32_t>(model.hidden())) {
        throw Error(ErrorCode::ModelMismatch, "directions have hidden=" + std::to_string(directions->hidden) +
                                                  ", model has " + std::to_string(model.hidden()));
      }
      return make_projection_hooks(spec, *directions);
  }
  return {};
}

}  // namespace ocrlens
