#include <algorithm>
#include <cmath>

#include "sbfa/bundle.hpp"

namespace sbfa {

ModelBundle quantize_int8(const ModelBundle& bundle) {
  if (bundle.quantized()) throw BundleError("bundle is already quantized");

  ModelBundle out(bundle.architecture());
  out.provenance = bundle.provenance;
  out.provenance["quantization"] = "int8 symmetric per-row absmax";

  for (std::size_t t = 0; t < bundle.size(); ++t) {
    TensorMeta meta = bundle.meta(t);
    const auto values = bundle.effective(t);
    if (meta.shape.size() < 2) {
      out.add_tensor(std::move(meta), {bundle.raw(t).begin(), bundle.raw(t).end()});
      continue;
    }

    const std::size_t rows = meta.rows();
    const std::size_t cols = meta.row_length();
    std::vector<std::uint32_t> raw(values.size());
    meta.scales.assign(rows, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto row = values.subspan(r * cols, cols);
      double absmax = 0.0;
      for (double v : row) absmax = std::max(absmax, std::fabs(v));
      // All-zero rows keep scale 0 and dequantize to zeros.
      if (absmax == 0.0) {
        std::fill_n(raw.begin() + static_cast<std::ptrdiff_t>(r * cols), cols, 0u);
        continue;
      }
      meta.scales[r] = absmax / 127.0;
      for (std::size_t c = 0; c < cols; ++c) {
        const double q = std::clamp(std::nearbyint(row[c] * 127.0 / absmax), -127.0, 127.0);
        raw[r * cols + c] = encode(q, Format::INT8).raw;
      }
    }
    meta.format = Format::INT8;
    meta.quantized = true;
    out.add_tensor(std::move(meta), std::move(raw));
  }
  return out;
}

}  // namespace sbfa
