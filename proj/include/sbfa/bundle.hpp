#pragma once

// Layered tensor container holding the attackable weight words.
//
// Every tensor keeps its raw storage words plus a float64 cache of the
// effective (dequantized) values the forward pass consumes. A "layer" for
// range statistics is one named tensor.
//
// Concurrency: read-many / write-exclusive. apply_flip and undo mutate the
// bundle and need exclusive access; parallel candidate evaluation works on
// per-worker copies of the bundle.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "sbfa/bitcodec.hpp"

namespace sbfa {

enum class AttackMode : std::uint8_t { Float, Int8, Mixed };

std::string_view mode_name(AttackMode m);
std::optional<AttackMode> parse_mode(std::string_view name);

enum class ArchKind : std::uint8_t { Mlp, Attention };

// Network topology carried in the bundle manifest.
struct Architecture {
  ArchKind kind = ArchKind::Mlp;
  int input_dim = 0;
  // Width of the classification head; tasks with fewer classes use a prefix.
  int num_outputs = 0;
  // Mlp: hidden widths.
  std::vector<int> hidden;
  // Attention: input_dim = tokens * token_dim.
  int tokens = 0;
  int model_dim = 0;
  int ffn_dim = 0;

  friend bool operator==(const Architecture&, const Architecture&) = default;
};

nlohmann::json to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);

struct TensorMeta {
  std::string name;
  int layer_index = 0;
  std::string param_kind;
  std::vector<std::size_t> shape;
  Format format = Format::BF16;
  bool quantized = false;
  // One scale per row when quantized.
  std::vector<double> scales;

  std::size_t numel() const;
  std::size_t rows() const { return shape.empty() ? 0 : shape.front(); }
  std::size_t row_length() const { return rows() == 0 ? 0 : numel() / rows(); }
};

struct LayerStats {
  double w_min = 0.0;
  double w_max = 0.0;
  double range() const { return w_max - w_min; }
};

struct WeightRef {
  std::size_t tensor = 0;
  std::size_t index = 0;

  friend auto operator<=>(const WeightRef&, const WeightRef&) = default;
};

struct UndoToken {
  WeightRef ref;
  std::uint32_t raw = 0;
};

class BundleError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ModelBundle {
 public:
  ModelBundle() = default;
  explicit ModelBundle(Architecture arch) : arch_(std::move(arch)) {}

  /// Validates the metadata and buffer, returns the new tensor id.
  std::size_t add_tensor(TensorMeta meta, std::vector<std::uint32_t> raw);

  std::size_t size() const { return tensors_.size(); }
  const Architecture& architecture() const { return arch_; }
  bool quantized() const;

  const TensorMeta& meta(std::size_t t) const { return tensors_.at(t).meta; }
  std::span<const std::uint32_t> raw(std::size_t t) const { return tensors_.at(t).raw; }
  std::span<const double> effective(std::size_t t) const { return tensors_.at(t).effective; }
  const LayerStats& stats(std::size_t t) const { return tensors_.at(t).stats; }
  std::optional<std::size_t> find(std::string_view name) const;

  BitWord word(WeightRef ref) const;
  /// Dequantized value (int * row scale) or decoded float.
  double effective_value(WeightRef ref) const;
  /// Effective value the given raw word would have at `ref`.
  double effective_of(WeightRef ref, std::uint32_t raw) const;

  /// XORs one bit and refreshes the affected tensor's stats (unless frozen).
  UndoToken apply_flip(WeightRef ref, int bit);
  void undo(const UndoToken& token);

  /// With frozen stats the ranges stay at their values from the moment of
  /// freezing; otherwise they are recomputed after every flip.
  void set_freeze_stats(bool frozen);
  bool stats_frozen() const { return freeze_stats_; }

  /// Number of non-finite effective values over all tensors.
  std::size_t nonfinite_count() const;

  bool has_gradients() const { return !gradients_.empty(); }
  std::span<const double> gradient(std::size_t t) const { return gradients_.at(t); }
  double gradient(WeightRef ref) const { return gradients_.at(ref.tensor).at(ref.index); }
  void set_gradients(std::vector<std::vector<double>> grads);
  void clear_gradients() { gradients_.clear(); }

  /// Tensors attackable under `mode`, in manifest order, minus tensors whose
  /// name matches one of the glob `exclusions`.
  std::vector<std::size_t> targets(AttackMode mode,
                                   std::span<const std::string> exclusions = {}) const;

  /// CRC-32 over every raw word, for bit-identity checks.
  std::uint32_t content_checksum() const;

  nlohmann::json provenance;

 private:
  struct Tensor {
    TensorMeta meta;
    std::vector<std::uint32_t> raw;
    std::vector<double> effective;
    LayerStats stats;
  };

  void check_ref(WeightRef ref) const;
  static void refresh_stats(Tensor& t);

  Architecture arch_;
  std::vector<Tensor> tensors_;
  std::vector<std::vector<double>> gradients_;
  bool freeze_stats_ = false;
};

/// Glob match (fnmatch semantics) of a tensor name against a pattern.
bool name_matches(std::string_view name, std::string_view pattern);

/// Symmetric per-row absmax INT8 quantization of every >=2D tensor.
/// 1D tensors keep their float format.
ModelBundle quantize_int8(const ModelBundle& bundle);

/// Writes `<manifest>` (JSON) and a sibling `.bin` blob.
void save_bundle(const ModelBundle& bundle, const std::filesystem::path& manifest);
ModelBundle load_bundle(const std::filesystem::path& manifest);

}  // namespace sbfa
