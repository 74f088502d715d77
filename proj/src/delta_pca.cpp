#include "ocrlens/delta_pca.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "binary_io.hpp"
#include "ocrlens/error.hpp"

namespace ocrlens {

namespace {

constexpr char kMagic[4] = {'P', 'C', 'A', 'D'};
constexpr std::uint32_t kMaxManifestBytes = 1u << 20;

double to_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

nlohmann::json manifest_json(const DirectionSet& set) {
  nlohmann::json layers = nlohmann::json::array();
  nlohmann::json counts = nlohmann::json::array();
  nlohmann::json ties = nlohmann::json::array();
  for (const PrincipalSubspace& s : set.subspaces) {
    layers.push_back(s.layer);
    counts.push_back(s.fit_sample_count);
    ties.push_back(s.has_ties);
  }
  return {{"model_id", set.model_id},
          {"hidden", set.hidden},
          {"pooling", std::string(to_string(set.pooling))},
          {"source_tag", set.source_tag},
          {"layers", layers},
          {"fit_sample_counts", counts},
          {"has_ties", ties}};
}

void check_consistent(const DirectionSet& set) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::InconsistentManifest, m); };
  for (std::size_t i = 0; i < set.subspaces.size(); ++i) {
    const PrincipalSubspace& s = set.subspaces[i];
    if (i > 0 && s.layer <= set.subspaces[i - 1].layer) fail("subspace layers must be strictly increasing");
    if (s.hidden() != set.hidden) fail("subspace at layer " + std::to_string(s.layer) + " has wrong width");
    if (s.size() == 0 || s.size() > kMaxComponents) fail("component count outside 1..64");
    if (s.variance_ratios.size() != s.size()) fail("one variance ratio per component required");
    if (s.delta_mean.size() != set.hidden) fail("delta_mean width differs from hidden");
    if (s.pooling != set.pooling) fail("mixed pooling within one direction set");
    if (s.source_tag != set.source_tag) fail("mixed source tags within one direction set");
  }
}

}  // namespace

std::string_view to_string(Pooling pooling) {
  switch (pooling) {
    case Pooling::last_token: return "last";
    case Pooling::mean_tokens: return "mean";
    case Pooling::per_token: return "per-token";
  }
  return "mean";
}

Pooling parse_pooling(std::string_view text) {
  if (text == "last" || text == "last_token") return Pooling::last_token;
  if (text == "mean" || text == "mean_tokens") return Pooling::mean_tokens;
  if (text == "per-token" || text == "per_token") return Pooling::per_token;
  throw Error(ErrorCode::ConfigInvalid, "unknown pooling '" + std::string(text) + "' (last|mean|per-token)");
}

DeltaSampleSet compute_deltas(std::span<const PairedSample> pairs, std::uint32_t layer, Pooling pooling,
                              std::string source_tag) {
  DeltaSampleSet set;
  set.layer = layer;
  set.pooling = pooling;
  set.source_tag = std::move(source_tag);

  std::size_t d = 0;
  std::vector<double> rows;
  for (const PairedSample& pair : pairs) {
    const ActivationRecord* a = pair.original_at(layer);
    const ActivationRecord* b = pair.inpainted_at(layer);
    if (a == nullptr || b == nullptr) {
      throw Error(ErrorCode::LayerNotCaptured,
                  "pair '" + pair.sample_id + "' has no capture at layer " + std::to_string(layer));
    }
    if (pair.aligned_positions.empty()) {
      throw Error(ErrorCode::NoAlignedPositions, "pair '" + pair.sample_id + "' has no aligned positions");
    }
    if (a->hidden != b->hidden || (d != 0 && a->hidden != d)) {
      throw Error(ErrorCode::DimensionMismatch, "pair '" + pair.sample_id + "' hidden size differs");
    }
    d = a->hidden;
    for (std::uint32_t t : pair.aligned_positions) {
      if (t >= a->tokens || t >= b->tokens) {
        throw Error(ErrorCode::InvalidRecord, "pair '" + pair.sample_id + "' aligned position out of range");
      }
    }
    auto delta_at = [&](std::uint32_t t, std::vector<double>& acc, double w) {
      const auto ra = a->row(t);
      const auto rb = b->row(t);
      for (std::size_t i = 0; i < d; ++i) acc[i] += w * (static_cast<double>(ra[i]) - static_cast<double>(rb[i]));
    };
    switch (pooling) {
      case Pooling::last_token: {
        std::vector<double> row(d, 0.0);
        delta_at(pair.aligned_positions.back(), row, 1.0);
        rows.insert(rows.end(), row.begin(), row.end());
        break;
      }
      case Pooling::mean_tokens: {
        std::vector<double> row(d, 0.0);
        const double w = 1.0 / static_cast<double>(pair.aligned_positions.size());
        for (std::uint32_t t : pair.aligned_positions) delta_at(t, row, w);
        rows.insert(rows.end(), row.begin(), row.end());
        break;
      }
      case Pooling::per_token:
        for (std::uint32_t t : pair.aligned_positions) {
          std::vector<double> row(d, 0.0);
          delta_at(t, row, 1.0);
          rows.insert(rows.end(), row.begin(), row.end());
        }
        break;
    }
  }
  const std::size_t n = d == 0 ? 0 : rows.size() / d;
  set.samples = d == 0 ? Matrix() : Matrix(n, d, std::move(rows));
  return set;
}

PrincipalSubspace fit_directions(const DeltaSampleSet& set, std::size_t k) {
  const std::size_t n = set.samples.rows();
  const std::size_t d = set.samples.cols();
  if (k == 0 || k > kMaxComponents || (d != 0 && k > d)) {
    throw Error(ErrorCode::KOutOfRange, "k=" + std::to_string(k) + " outside 1.." +
                                            std::to_string(std::min<std::size_t>(d, kMaxComponents)));
  }
  if (n < std::max<std::size_t>(2, k)) {
    throw Error(ErrorCode::TooFewSamples,
                std::to_string(n) + " delta rows, need " + std::to_string(std::max<std::size_t>(2, k)));
  }
  if (!set.samples.all_finite()) throw Error(ErrorCode::NonFinite, "delta rows contain non-finite values");

  const Covariance cov = covariance(set.samples, true);
  const PrincipalComponents pcs = top_k_components(cov.cov, k);

  PrincipalSubspace out;
  out.layer = set.layer;
  out.components = pcs.components;
  out.variance_ratios = pcs.variance_ratios;
  out.delta_mean = cov.mean;
  out.pooling = set.pooling;
  out.source_tag = set.source_tag;
  out.fit_sample_count = n;
  out.has_ties = pcs.has_ties;
  return out;
}

const PrincipalSubspace* DirectionSet::at(std::uint32_t layer) const {
  auto it = std::find_if(subspaces.begin(), subspaces.end(),
                         [&](const PrincipalSubspace& s) { return s.layer == layer; });
  return it == subspaces.end() ? nullptr : &*it;
}

std::uint64_t save_directions(const DirectionSet& set, std::ostream& destination) {
  check_consistent(set);
  detail::ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  w.u32(kPcadVersion);
  const std::string text = manifest_json(set).dump();
  w.u32(static_cast<std::uint32_t>(text.size()));
  w.str(text);
  for (const PrincipalSubspace& s : set.subspaces) {
    const std::size_t start = w.size();
    w.u32(s.layer);
    w.u32(static_cast<std::uint32_t>(s.size()));
    w.u32(static_cast<std::uint32_t>(s.hidden()));
    for (double v : s.components.data()) w.f32(static_cast<float>(v));
    for (double v : s.delta_mean) w.f32(static_cast<float>(v));
    for (double v : s.variance_ratios) w.f32(static_cast<float>(v));
    w.u32(detail::crc32_of(w.since(start)));
  }
  detail::flush_to(destination, w);
  return w.size();
}

std::uint64_t save_directions_file(const std::filesystem::path& path, const DirectionSet& set) {
  const std::filesystem::path temp = path.string() + ".tmp";
  std::uint64_t bytes = 0;
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + temp.string());
    bytes = save_directions(set, out);
  }
  std::error_code ec;
  std::filesystem::rename(temp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "rename to " + path.string() + ": " + ec.message());
  return bytes;
}

DirectionSet load_directions(std::istream& source, const DirectionExpectation& expect) {
  detail::ByteReader r = detail::ByteReader::slurp(source);
  if (r.remaining() < 4 || r.str(4) != std::string(kMagic, 4)) {
    throw Error(ErrorCode::BadMagic, "source does not start with PCAD");
  }
  const std::uint32_t version = r.u32();
  if (version != kPcadVersion) throw Error(ErrorCode::VersionUnsupported, "pcad version " + std::to_string(version));
  const std::uint32_t len = r.u32();
  if (len > kMaxManifestBytes) throw Error(ErrorCode::InvalidRecord, "manifest length implausible");
  const std::string text = r.str(len);

  DirectionSet set;
  std::vector<std::uint32_t> layers;
  std::vector<std::size_t> counts;
  std::vector<bool> ties;
  try {
    const nlohmann::json j = nlohmann::json::parse(text);
    set.model_id = j.at("model_id").get<std::string>();
    set.hidden = j.at("hidden").get<std::uint32_t>();
    set.pooling = parse_pooling(j.at("pooling").get<std::string>());
    set.source_tag = j.at("source_tag").get<std::string>();
    layers = j.at("layers").get<std::vector<std::uint32_t>>();
    counts = j.at("fit_sample_counts").get<std::vector<std::size_t>>();
    ties = j.at("has_ties").get<std::vector<bool>>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidRecord, std::string("bad direction manifest: ") + e.what());
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidRecord, e.what());
  }
  if (counts.size() != layers.size() || ties.size() != layers.size()) {
    throw Error(ErrorCode::InvalidRecord, "manifest lists disagree in length");
  }
  if (expect.model_id && *expect.model_id != set.model_id) {
    throw Error(ErrorCode::ModelMismatch, "directions fit on '" + set.model_id + "', expected '" +
                                              *expect.model_id + "'");
  }
  if (expect.hidden && *expect.hidden != set.hidden) {
    throw Error(ErrorCode::ModelMismatch, "directions have hidden=" + std::to_string(set.hidden) +
                                              ", context has hidden=" + std::to_string(*expect.hidden));
  }

  for (std::size_t i = 0; i < layers.size(); ++i) {
    const std::size_t start = r.position();
    PrincipalSubspace s;
    s.layer = r.u32();
    const std::uint32_t n = r.u32();
    const std::uint32_t d = r.u32();
    if (s.layer != layers[i]) throw Error(ErrorCode::InvalidRecord, "block layer differs from manifest");
    if (d != set.hidden) throw Error(ErrorCode::InvalidRecord, "block width differs from manifest hidden");
    if (n == 0 || n > kMaxComponents) throw Error(ErrorCode::InvalidRecord, "component count outside 1..64");
    r.need((static_cast<std::size_t>(n) * d + d + n) * 4 + 4);
    s.components = Matrix(n, d);
    for (double& v : s.components.data()) v = r.f32();
    s.delta_mean.resize(d);
    for (double& v : s.delta_mean) v = r.f32();
    s.variance_ratios.resize(n);
    for (double& v : s.variance_ratios) v = r.f32();
    const std::uint32_t computed = detail::crc32_of(r.between(start, r.position()));
    if (r.u32() != computed) {
      throw Error(ErrorCode::ChecksumMismatch, "direction block for layer " + std::to_string(s.layer));
    }
    if (!s.components.all_finite()) throw Error(ErrorCode::InvalidRecord, "non-finite component");
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a; b < n; ++b) {
        const double target = a == b ? 1.0 : 0.0;
        if (std::abs(dot(s.components.row(a), s.components.row(b)) - target) > kLoadOrthonormalTolerance) {
          throw Error(ErrorCode::InvalidRecord,
                      "components at layer " + std::to_string(s.layer) + " are not orthonormal");
        }
      }
    }
    s.pooling = set.pooling;
    s.source_tag = set.source_tag;
    s.fit_sample_count = counts[i];
    s.has_ties = ties[i];
    set.subspaces.push_back(std::move(s));
  }
  if (r.remaining() != 0) throw Error(ErrorCode::InvalidRecord, "trailing bytes after direction blocks");
  try {
    check_consistent(set);
  } catch (const Error& e) {
    throw Error(ErrorCode::InvalidRecord, e.what());
  }
  return set;
}

DirectionSet load_directions_file(const std::filesystem::path& path, const DirectionExpectation& expect) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return load_directions(in, expect);
}

DirectionSet quantized(const DirectionSet& set) {
  DirectionSet out = set;
  for (PrincipalSubspace& s : out.subspaces) {
    for (double& v : s.components.data()) v = to_f32(v);
    for (double& v : s.delta_mean) v = to_f32(v);
    for (double& v : s.variance_ratios) v = to_f32(v);
  }
  return out;
}

}  // namespace ocrlens
