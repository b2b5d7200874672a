#include "sbfa/bundle.hpp"

#include <fnmatch.h>
#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <functional>
#include <iterator>
#include <numeric>

#include <fmt/format.h>

namespace sbfa {

std::string_view mode_name(AttackMode m) {
  switch (m) {
    case AttackMode::Float:
      return "float";
    case AttackMode::Int8:
      return "int8";
    case AttackMode::Mixed:
      return "mixed";
  }
  return "?";
}

std::optional<AttackMode> parse_mode(std::string_view name) {
  if (name == "float") return AttackMode::Float;
  if (name == "int8") return AttackMode::Int8;
  if (name == "mixed") return AttackMode::Mixed;
  return std::nullopt;
}

nlohmann::json to_json(const Architecture& arch) {
  nlohmann::json j;
  j["kind"] = arch.kind == ArchKind::Mlp ? "mlp" : "attention";
  j["input_dim"] = arch.input_dim;
  j["num_outputs"] = arch.num_outputs;
  if (arch.kind == ArchKind::Mlp) {
    j["hidden"] = arch.hidden;
  } else {
    j["tokens"] = arch.tokens;
    j["model_dim"] = arch.model_dim;
    j["ffn_dim"] = arch.ffn_dim;
  }
  return j;
}

Architecture architecture_from_json(const nlohmann::json& j) {
  Architecture a;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "mlp") {
    a.kind = ArchKind::Mlp;
    a.hidden = j.at("hidden").get<std::vector<int>>();
  } else if (kind == "attention") {
    a.kind = ArchKind::Attention;
    a.tokens = j.at("tokens").get<int>();
    a.model_dim = j.at("model_dim").get<int>();
    a.ffn_dim = j.at("ffn_dim").get<int>();
  } else {
    throw BundleError("unknown architecture kind '" + kind + "'");
  }
  a.input_dim = j.at("input_dim").get<int>();
  a.num_outputs = j.at("num_outputs").get<int>();
  return a;
}

std::size_t TensorMeta::numel() const {
  if (shape.empty()) return 0;
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

bool name_matches(std::string_view name, std::string_view pattern) {
  const std::string n(name);
  const std::string p(pattern);
  return ::fnmatch(p.c_str(), n.c_str(), 0) == 0;
}

std::size_t ModelBundle::add_tensor(TensorMeta meta, std::vector<std::uint32_t> raw) {
  if (meta.shape.empty() || meta.numel() == 0) {
    throw BundleError(fmt::format("tensor '{}' has an empty shape", meta.name));
  }
  if (raw.size() != meta.numel()) {
    throw BundleError(fmt::format("tensor '{}': {} words for {} elements", meta.name, raw.size(),
                                  meta.numel()));
  }
  if (find(meta.name)) throw BundleError(fmt::format("duplicate tensor '{}'", meta.name));
  if (meta.quantized) {
    if (meta.format != Format::INT8) {
      throw BundleError(fmt::format("quantized tensor '{}' must be int8", meta.name));
    }
    if (meta.shape.size() < 2) {
      throw BundleError(fmt::format("1D tensor '{}' cannot be quantized", meta.name));
    }
    if (meta.scales.size() != meta.rows()) {
      throw BundleError(fmt::format("tensor '{}': {} scales for {} rows", meta.name,
                                    meta.scales.size(), meta.rows()));
    }
  } else if (!meta.scales.empty()) {
    throw BundleError(fmt::format("unquantized tensor '{}' carries scales", meta.name));
  }
  const std::uint32_t mask = raw_mask(meta.format);
  if (std::any_of(raw.begin(), raw.end(), [mask](std::uint32_t w) { return (w & ~mask) != 0; })) {
    throw BundleError(fmt::format("tensor '{}' has bits above the format width", meta.name));
  }

  Tensor t{std::move(meta), std::move(raw), {}, {}};
  t.effective.resize(t.raw.size());
  tensors_.push_back(std::move(t));
  Tensor& added = tensors_.back();
  const std::size_t id = tensors_.size() - 1;
  for (std::size_t i = 0; i < added.raw.size(); ++i) {
    added.effective[i] = effective_of({id, i}, added.raw[i]);
  }
  refresh_stats(added);
  return id;
}

bool ModelBundle::quantized() const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [](const Tensor& t) { return t.meta.quantized; });
}

std::optional<std::size_t> ModelBundle::find(std::string_view name) const {
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    if (tensors_[i].meta.name == name) return i;
  }
  return std::nullopt;
}

void ModelBundle::check_ref(WeightRef ref) const {
  if (ref.tensor >= tensors_.size() || ref.index >= tensors_[ref.tensor].raw.size()) {
    throw std::out_of_range(
        fmt::format("weight ref ({}, {}) out of bounds", ref.tensor, ref.index));
  }
}

BitWord ModelBundle::word(WeightRef ref) const {
  check_ref(ref);
  const Tensor& t = tensors_[ref.tensor];
  return {t.raw[ref.index], t.meta.format};
}

double ModelBundle::effective_value(WeightRef ref) const {
  check_ref(ref);
  return tensors_[ref.tensor].effective[ref.index];
}

double ModelBundle::effective_of(WeightRef ref, std::uint32_t raw) const {
  const TensorMeta& m = tensors_.at(ref.tensor).meta;
  const double v = decode({raw, m.format});
  if (!m.quantized) return v;
  const double scale = m.scales[ref.index / m.row_length()];
  // Zero scale marks an all-zero row.
  return scale == 0.0 ? 0.0 : v * scale;
}

void ModelBundle::refresh_stats(Tensor& t) {
  bool any = false;
  double lo = 0.0;
  double hi = 0.0;
  for (double v : t.effective) {
    if (!std::isfinite(v)) continue;
    if (!any) {
      lo = hi = v;
      any = true;
    } else {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  t.stats = {lo, hi};
}

UndoToken ModelBundle::apply_flip(WeightRef ref, int bit) {
  check_ref(ref);
  Tensor& t = tensors_[ref.tensor];
  if (bit < 0 || bit >= format_spec(t.meta.format).bit_width) {
    throw std::out_of_range(fmt::format("bit {} invalid for {}", bit, format_name(t.meta.format)));
  }
  UndoToken token{ref, t.raw[ref.index]};
  t.raw[ref.index] ^= std::uint32_t{1} << bit;
  t.effective[ref.index] = effective_of(ref, t.raw[ref.index]);
  if (!freeze_stats_) refresh_stats(t);
  return token;
}

void ModelBundle::undo(const UndoToken& token) {
  check_ref(token.ref);
  Tensor& t = tensors_[token.ref.tensor];
  t.raw[token.ref.index] = token.raw;
  t.effective[token.ref.index] = effective_of(token.ref, token.raw);
  if (!freeze_stats_) refresh_stats(t);
}

void ModelBundle::set_freeze_stats(bool frozen) {
  freeze_stats_ = frozen;
  if (!frozen) {
    for (Tensor& t : tensors_) refresh_stats(t);
  }
}

std::size_t ModelBundle::nonfinite_count() const {
  std::size_t n = 0;
  for (const Tensor& t : tensors_) {
    n += static_cast<std::size_t>(std::count_if(t.effective.begin(), t.effective.end(),
                                                [](double v) { return !std::isfinite(v); }));
  }
  return n;
}

void ModelBundle::set_gradients(std::vector<std::vector<double>> grads) {
  if (grads.size() != tensors_.size()) {
    throw BundleError(fmt::format("{} gradient buffers for {} tensors", grads.size(),
                                  tensors_.size()));
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (grads[i].size() != tensors_[i].raw.size()) {
      throw BundleError(fmt::format("gradient shape mismatch for '{}'", tensors_[i].meta.name));
    }
  }
  gradients_ = std::move(grads);
}

std::vector<std::size_t> ModelBundle::targets(AttackMode mode,
                                              std::span<const std::string> exclusions) const {
  const bool bundle_quantized = quantized();
  if (mode == AttackMode::Float && bundle_quantized) {
    throw BundleError("float mode requires an unquantized bundle");
  }
  if (mode != AttackMode::Float && !bundle_quantized) {
    throw BundleError(fmt::format("{} mode requires a quantized bundle", mode_name(mode)));
  }
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tensors_.size(); ++i) {
    const TensorMeta& m = tensors_[i].meta;
    if (mode == AttackMode::Int8 && !m.quantized) continue;
    const bool excluded = std::any_of(exclusions.begin(), exclusions.end(),
                                      [&](const std::string& p) { return name_matches(m.name, p); });
    if (!excluded) out.push_back(i);
  }
  return out;
}

std::uint32_t ModelBundle::content_checksum() const {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  for (const Tensor& t : tensors_) {
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(t.raw.data()),
                  static_cast<uInt>(t.raw.size() * sizeof(std::uint32_t)));
  }
  return static_cast<std::uint32_t>(crc);
}

// ---------------------------------------------------------------------------
// On-disk format: JSON manifest + little-endian blob, 64-byte aligned tensors.

namespace {

constexpr std::size_t kAlign = 64;
constexpr int kManifestVersion = 1;

std::size_t align_up(std::size_t n) { return (n + kAlign - 1) / kAlign * kAlign; }

void put_le(std::vector<unsigned char>& out, std::size_t at, std::uint64_t v, int bytes) {
  for (int b = 0; b < bytes; ++b) out[at + b] = static_cast<unsigned char>(v >> (8 * b));
}

std::uint64_t get_le(const std::vector<unsigned char>& in, std::size_t at, int bytes) {
  std::uint64_t v = 0;
  for (int b = 0; b < bytes; ++b) v |= std::uint64_t{in[at + b]} << (8 * b);
  return v;
}

std::string crc_tag(const std::vector<unsigned char>& blob) {
  const uLong crc = ::crc32(::crc32(0L, Z_NULL, 0), blob.data(), static_cast<uInt>(blob.size()));
  return fmt::format("crc32:{:08x}", static_cast<std::uint32_t>(crc));
}

}  // namespace

void save_bundle(const ModelBundle& bundle, const std::filesystem::path& manifest) {
  std::filesystem::path blob_path = manifest;
  blob_path.replace_extension(".bin");

  std::vector<unsigned char> blob;
  nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
  for (std::size_t t = 0; t < bundle.size(); ++t) {
    const TensorMeta& m = bundle.meta(t);
    const int width = format_spec(m.format).bit_width / 8;
    const std::size_t offset = align_up(blob.size());
    const std::size_t nbytes = m.numel() * static_cast<std::size_t>(width);
    blob.resize(offset + nbytes, 0);
    const auto raw = bundle.raw(t);
    for (std::size_t i = 0; i < raw.size(); ++i) {
      put_le(blob, offset + i * static_cast<std::size_t>(width), raw[i], width);
    }
    nlohmann::ordered_json e;
    e["name"] = m.name;
    e["layer_index"] = m.layer_index;
    e["param_kind"] = m.param_kind;
    e["shape"] = m.shape;
    e["format"] = format_name(m.format);
    e["quantized"] = m.quantized;
    e["offset"] = offset;
    e["nbytes"] = nbytes;
    if (m.quantized) {
      const std::size_t scale_offset = align_up(blob.size());
      blob.resize(scale_offset + m.scales.size() * 8, 0);
      for (std::size_t r = 0; r < m.scales.size(); ++r) {
        put_le(blob, scale_offset + r * 8, std::bit_cast<std::uint64_t>(m.scales[r]), 8);
      }
      e["scale_offset"] = scale_offset;
    } else {
      e["scale_offset"] = nullptr;
    }
    tensors.push_back(std::move(e));
  }

  nlohmann::ordered_json j;
  j["format"] = "sbfa-bundle";
  j["version"] = kManifestVersion;
  j["architecture"] = nlohmann::ordered_json::parse(to_json(bundle.architecture()).dump());
  j["provenance"] = nlohmann::ordered_json::parse(bundle.provenance.dump());
  j["blob"] = blob_path.filename().string();
  j["blob_bytes"] = blob.size();
  j["checksum"] = crc_tag(blob);
  j["tensors"] = std::move(tensors);

  std::ofstream bout(blob_path, std::ios::binary | std::ios::trunc);
  bout.write(reinterpret_cast<const char*>(blob.data()), static_cast<std::streamsize>(blob.size()));
  std::ofstream mout(manifest, std::ios::trunc);
  mout << j.dump(2) << '\n';
  if (!bout || !mout) throw BundleError("failed to write bundle " + manifest.string());
}

ModelBundle load_bundle(const std::filesystem::path& manifest) {
  std::ifstream min(manifest);
  if (!min) throw BundleError("cannot open manifest " + manifest.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(min);
  } catch (const nlohmann::json::exception& e) {
    throw BundleError(fmt::format("manifest {} is not valid JSON: {}", manifest.string(), e.what()));
  }

  try {
    if (j.at("format") != "sbfa-bundle" || j.at("version") != kManifestVersion) {
      throw BundleError("unsupported manifest format/version");
    }
    const auto blob_path = manifest.parent_path() / j.at("blob").get<std::string>();
    std::ifstream bin(blob_path, std::ios::binary);
    if (!bin) throw BundleError("cannot open blob " + blob_path.string());
    std::vector<unsigned char> blob((std::istreambuf_iterator<char>(bin)),
                                    std::istreambuf_iterator<char>());

    ModelBundle bundle(architecture_from_json(j.at("architecture")));
    bundle.provenance = j.value("provenance", nlohmann::json::object());

    for (const auto& e : j.at("tensors")) {
      TensorMeta m;
      m.name = e.at("name").get<std::string>();
      m.layer_index = e.at("layer_index").get<int>();
      m.param_kind = e.at("param_kind").get<std::string>();
      m.shape = e.at("shape").get<std::vector<std::size_t>>();
      const auto tag = e.at("format").get<std::string>();
      const auto fmt_tag = parse_format(tag);
      if (!fmt_tag) throw BundleError(fmt::format("tensor '{}': unknown format '{}'", m.name, tag));
      m.format = *fmt_tag;
      m.quantized = e.at("quantized").get<bool>();

      const std::size_t width = static_cast<std::size_t>(format_spec(m.format).bit_width / 8);
      const auto offset = e.at("offset").get<std::size_t>();
      const auto nbytes = e.at("nbytes").get<std::size_t>();
      if (nbytes != m.numel() * width) {
        throw BundleError(fmt::format("tensor '{}': {} bytes disagree with shape", m.name, nbytes));
      }
      if (offset + nbytes > blob.size()) {
        throw BundleError(fmt::format("tensor '{}' extends past the end of the blob", m.name));
      }
      if (m.quantized) {
        if (!e.contains("scale_offset") || e.at("scale_offset").is_null()) {
          throw BundleError(fmt::format("quantized tensor '{}' has no scales", m.name));
        }
        const auto so = e.at("scale_offset").get<std::size_t>();
        if (so + m.rows() * 8 > blob.size()) {
          throw BundleError(fmt::format("scales of tensor '{}' extend past the blob", m.name));
        }
        m.scales.resize(m.rows());
        for (std::size_t r = 0; r < m.rows(); ++r) {
          m.scales[r] = std::bit_cast<double>(get_le(blob, so + r * 8, 8));
        }
      }
      std::vector<std::uint32_t> raw(m.numel());
      for (std::size_t i = 0; i < raw.size(); ++i) {
        raw[i] = static_cast<std::uint32_t>(get_le(blob, offset + i * width, static_cast<int>(width)));
      }
      bundle.add_tensor(std::move(m), std::move(raw));
    }

    if (blob.size() != j.at("blob_bytes").get<std::size_t>()) {
      throw BundleError("blob size disagrees with manifest");
    }
    if (crc_tag(blob) != j.at("checksum").get<std::string>()) {
      throw BundleError("blob checksum mismatch");
    }
    return bundle;
  } catch (const nlohmann::json::exception& e) {
    throw BundleError(fmt::format("malformed manifest {}: {}", manifest.string(), e.what()));
  }
}

}  // namespace sbfa
