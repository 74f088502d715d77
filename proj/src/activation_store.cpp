#include "ocrlens/activation_store.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>

#include "binary_io.hpp"

namespace ocrlens {

namespace {

constexpr char kMagic[4] = {'A', 'C', 'T', 'B'};
constexpr std::uint32_t kMaxManifestBytes = 16u << 20;
constexpr std::uint32_t kMaxIdBytes = 1u << 16;

const ActivationRecord* find_layer(const std::vector<ActivationRecord>& side, std::uint32_t layer) {
  auto it = std::find_if(side.begin(), side.end(),
                         [&](const ActivationRecord& r) { return r.layer == layer; });
  return it == side.end() ? nullptr : &*it;
}

std::optional<Error> validate_side(const std::vector<ActivationRecord>& side, const RunManifest& manifest,
                                   const std::string& sample_id, const char* name) {
  if (side.size() != manifest.capture_layers.size()) {
    return Error(ErrorCode::InconsistentManifest,
                 "sample '" + sample_id + "' " + name + " has " + std::to_string(side.size()) +
                     " layers, manifest captures " + std::to_string(manifest.capture_layers.size()));
  }
  for (std::size_t i = 0; i < side.size(); ++i) {
    const ActivationRecord& r = side[i];
    if (r.layer != manifest.capture_layers[i]) {
      return Error(ErrorCode::InconsistentManifest, "sample '" + sample_id + "' " + name +
                                                        " layer order differs from manifest capture_layers");
    }
    if (auto err = validate_record(r, manifest)) return err;
    if (r.tokens != side.front().tokens || r.region_labels != side.front().region_labels) {
      return Error(ErrorCode::InconsistentManifest,
                   "sample '" + sample_id + "' " + name + " token layout differs across layers");
    }
  }
  return std::nullopt;
}

void write_side(detail::ByteWriter& w, const std::vector<ActivationRecord>& side) {
  const ActivationRecord& first = side.front();
  w.u32(first.tokens);
  for (RegionLabel label : first.region_labels) w.u8(static_cast<std::uint8_t>(label));
  for (const ActivationRecord& r : side) {
    const std::size_t block_start = w.size();
    w.u32(r.layer);
    w.u32(r.tokens);
    w.u32(r.hidden);
    for (float v : r.values) w.f32(v);
    w.u32(detail::crc32_of(w.since(block_start)));
  }
}

std::vector<ActivationRecord> read_side(detail::ByteReader& r, const RunManifest& manifest,
                                        const std::string& sample_id) {
  const std::uint32_t tokens = r.u32();
  r.need(tokens);
  std::vector<RegionLabel> labels(tokens);
  for (auto& label : labels) {
    const std::uint8_t raw = r.u8();
    if (raw > 3) throw Error(ErrorCode::InvalidRecord, "region label " + std::to_string(raw) + " out of range");
    label = static_cast<RegionLabel>(raw);
  }
  std::vector<ActivationRecord> side;
  side.reserve(manifest.capture_layers.size());
  for (std::size_t i = 0; i < manifest.capture_layers.size(); ++i) {
    const std::size_t block_start = r.position();
    ActivationRecord rec;
    rec.sample_id = sample_id;
    rec.layer = r.u32();
    rec.tokens = r.u32();
    rec.hidden = r.u32();
    const std::uint64_t count = static_cast<std::uint64_t>(rec.tokens) * rec.hidden;
    r.need(count * 4);
    rec.values.resize(count);
    for (float& v : rec.values) v = r.f32();
    const std::size_t block_end = r.position();
    const std::uint32_t stored = r.u32();
    if (stored != detail::crc32_of(r.between(block_start, block_end))) {
      throw Error(ErrorCode::ChecksumMismatch, "tensor block for sample '" + sample_id + "' layer " +
                                                   std::to_string(rec.layer));
    }
    rec.region_labels = labels;
    side.push_back(std::move(rec));
  }
  return side;
}

}  // namespace

std::string_view to_string(SplitTag split) {
  return split == SplitTag::pca_train ? "pca_train" : "eval";
}

SplitTag parse_split_tag(std::string_view text) {
  if (text == "pca_train") return SplitTag::pca_train;
  if (text == "eval") return SplitTag::eval;
  throw Error(ErrorCode::InconsistentManifest, "unknown split tag '" + std::string(text) + "'");
}

const ActivationRecord* PairedSample::original_at(std::uint32_t layer) const {
  return find_layer(original, layer);
}

const ActivationRecord* PairedSample::inpainted_at(std::uint32_t layer) const {
  return find_layer(inpainted, layer);
}

nlohmann::json manifest_to_json(const RunManifest& m) {
  return nlohmann::json{
      {"model_id", m.model_id},
      {"layer_count", m.layer_count},
      {"hidden", m.hidden},
      {"head_count", m.head_count},
      {"capture_layers", m.capture_layers},
      {"dtype", "float32"},
      {"endianness", "little"},
      {"split", std::string(to_string(m.split))},
  };
}

RunManifest manifest_from_json(const nlohmann::json& j) {
  try {
    RunManifest m;
    m.model_id = j.at("model_id").get<std::string>();
    m.layer_count = j.at("layer_count").get<std::uint32_t>();
    m.hidden = j.at("hidden").get<std::uint32_t>();
    m.head_count = j.at("head_count").get<std::uint32_t>();
    m.capture_layers = j.at("capture_layers").get<std::vector<std::uint32_t>>();
    if (j.at("dtype").get<std::string>() != "float32") {
      throw Error(ErrorCode::InconsistentManifest, "unsupported dtype");
    }
    if (j.at("endianness").get<std::string>() != "little") {
      throw Error(ErrorCode::InconsistentManifest, "unsupported endianness");
    }
    m.split = parse_split_tag(j.at("split").get<std::string>());
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InconsistentManifest, std::string("malformed manifest: ") + e.what());
  }
}

std::optional<Error> validate_manifest(const RunManifest& m) {
  if (m.hidden == 0) return Error(ErrorCode::InconsistentManifest, "hidden must be positive");
  for (std::size_t i = 0; i < m.capture_layers.size(); ++i) {
    if (m.capture_layers[i] >= m.layer_count) {
      return Error(ErrorCode::InconsistentManifest,
                   "capture layer " + std::to_string(m.capture_layers[i]) + " >= layer_count");
    }
    if (i > 0 && m.capture_layers[i] <= m.capture_layers[i - 1]) {
      return Error(ErrorCode::InconsistentManifest, "capture_layers must be strictly increasing");
    }
  }
  return std::nullopt;
}

std::optional<Error> validate_record(const ActivationRecord& r, const RunManifest& m) {
  if (r.layer >= m.layer_count) {
    return Error(ErrorCode::InvalidRecord, "record layer " + std::to_string(r.layer) + " >= layer_count");
  }
  if (r.hidden != m.hidden) {
    return Error(ErrorCode::InvalidRecord, "record hidden " + std::to_string(r.hidden) +
                                               " != manifest hidden " + std::to_string(m.hidden));
  }
  if (r.values.size() != static_cast<std::size_t>(r.tokens) * r.hidden) {
    return Error(ErrorCode::InvalidRecord, "values length does not match tokens x hidden");
  }
  if (r.region_labels.size() != r.tokens) {
    return Error(ErrorCode::InvalidRecord, "region_labels length != tokens");
  }
  if (!std::all_of(r.values.begin(), r.values.end(), [](float v) { return std::isfinite(v); })) {
    return Error(ErrorCode::InvalidRecord, "non-finite activation value");
  }
  return std::nullopt;
}

std::optional<Error> validate_sample(const PairedSample& s, const RunManifest& m) {
  if (s.aligned_positions.empty()) {
    return Error(ErrorCode::InvalidRecord, "sample '" + s.sample_id + "' has no aligned positions");
  }
  if (auto err = validate_side(s.original, m, s.sample_id, "original")) return err;
  if (auto err = validate_side(s.inpainted, m, s.sample_id, "inpainted")) return err;
  if (!s.original.empty()) {
    const std::uint32_t limit = std::min(s.original.front().tokens, s.inpainted.front().tokens);
    for (std::uint32_t p : s.aligned_positions) {
      if (p >= limit) {
        return Error(ErrorCode::InvalidRecord,
                     "aligned position " + std::to_string(p) + " not valid in both runs");
      }
    }
  }
  return std::nullopt;
}

std::uint64_t write_actb(std::span<const PairedSample> samples, const RunManifest& manifest,
                         std::ostream& destination) {
  if (auto err = validate_manifest(manifest)) throw *err;
  for (const PairedSample& s : samples) {
    if (auto err = validate_sample(s, manifest)) throw Error(ErrorCode::InconsistentManifest, err->what());
    if (s.sample_id.size() > kMaxIdBytes) throw Error(ErrorCode::InconsistentManifest, "sample id too long");
  }

  detail::ByteWriter w;
  w.raw(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(kMagic), 4));
  w.u32(kActbVersion);
  const std::string manifest_text = manifest_to_json(manifest).dump();
  w.u32(static_cast<std::uint32_t>(manifest_text.size()));
  w.str(manifest_text);
  w.u64(samples.size());
  for (const PairedSample& s : samples) {
    w.u32(static_cast<std::uint32_t>(s.sample_id.size()));
    w.str(s.sample_id);
    w.u32(static_cast<std::uint32_t>(s.aligned_positions.size()));
    for (std::uint32_t p : s.aligned_positions) w.u32(p);
    if (manifest.capture_layers.empty()) {
      // No layers: the token layout still needs a home, so write T=0 labels.
      w.u32(0);
      w.u32(0);
      continue;
    }
    write_side(w, s.original);
    write_side(w, s.inpainted);
  }
  detail::flush_to(destination, w);
  return w.size();
}

ActbContents read_actb(std::istream& source) {
  detail::ByteReader r = detail::ByteReader::slurp(source);
  if (r.remaining() < 4 || r.str(4) != std::string(kMagic, 4)) {
    throw Error(ErrorCode::BadMagic, "source does not start with ACTB");
  }
  const std::uint32_t version = r.u32();
  if (version != kActbVersion) {
    throw Error(ErrorCode::VersionUnsupported, "actb version " + std::to_string(version));
  }
  const std::uint32_t manifest_len = r.u32();
  if (manifest_len > kMaxManifestBytes) throw Error(ErrorCode::InvalidRecord, "manifest length implausible");
  const std::string manifest_text = r.str(manifest_len);
  nlohmann::json manifest_json;
  try {
    manifest_json = nlohmann::json::parse(manifest_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InconsistentManifest, std::string("manifest is not JSON: ") + e.what());
  }

  ActbContents out;
  out.manifest = manifest_from_json(manifest_json);
  if (auto err = validate_manifest(out.manifest)) throw *err;

  const std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    PairedSample s;
    const std::uint32_t id_len = r.u32();
    if (id_len > kMaxIdBytes) throw Error(ErrorCode::InvalidRecord, "sample id length implausible");
    s.sample_id = r.str(id_len);
    const std::uint32_t aligned = r.u32();
    r.need(static_cast<std::uint64_t>(aligned) * 4);
    s.aligned_positions.resize(aligned);
    for (auto& p : s.aligned_positions) p = r.u32();
    if (out.manifest.capture_layers.empty()) {
      r.u32();
      r.u32();
    } else {
      s.original = read_side(r, out.manifest, s.sample_id);
      s.inpainted = read_side(r, out.manifest, s.sample_id);
    }
    if (auto err = validate_sample(s, out.manifest)) throw Error(ErrorCode::InvalidRecord, err->what());
    out.samples.push_back(std::move(s));
  }
  if (r.remaining() != 0) {
    throw Error(ErrorCode::InvalidRecord, std::to_string(r.remaining()) + " trailing bytes after sample table");
  }
  return out;
}

std::uint64_t write_actb_file(const std::filesystem::path& path, std::span<const PairedSample> samples,
                              const RunManifest& manifest) {
  const std::filesystem::path temp = path.string() + ".tmp";
  std::uint64_t bytes = 0;
  {
    std::ofstream out(temp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::IoFailure, "cannot open " + temp.string());
    bytes = write_actb(samples, manifest, out);
  }
  std::error_code ec;
  std::filesystem::rename(temp, path, ec);
  if (ec) throw Error(ErrorCode::IoFailure, "rename to " + path.string() + ": " + ec.message());
  return bytes;
}

ActbContents read_actb_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoFailure, "cannot open " + path.string());
  return read_actb(in);
}

}  // namespace ocrlens
