#include "hsfl/quantize.hpp"

#include <algorithm>
#include <cmath>

namespace hsfl {

QuantizedTensor quantize(const Tensor& z, int bits, Rng& rng) {
  if (bits < 1 || bits > 24) throw Error("quantize: bits must be in 1..24");
  if (z.empty()) throw Error("quantize: empty tensor");
  z.check_finite("quantize");

  QuantizedTensor q;
  q.shape = z.shape;
  q.bits = bits;
  q.lo = *std::min_element(z.data.begin(), z.data.end());
  q.hi = *std::max_element(z.data.begin(), z.data.end());
  q.codes.reserve(z.data.size());

  if (q.hi == q.lo) {
    // Degenerate range: one level, exact reconstruction.
    q.codes.assign(z.data.size(), 0);
    return q;
  }

  const uint32_t levels = (1u << bits) - 1;  // code range 0..levels
  const double scale = levels / (q.hi - q.lo);
  for (double v : z.data) {
    const double pos = (v - q.lo) * scale;  // in [0, levels]
    double floor_pos = std::floor(pos);
    double frac = pos - floor_pos;
    if (floor_pos >= levels) {  // v == hi lands exactly on the top level
      floor_pos = levels;
      frac = 0.0;
    }
    uint32_t code = static_cast<uint32_t>(floor_pos);
    if (frac > 0.0 && rng.uniform01() < frac) ++code;
    q.codes.push_back(code);
  }
  return q;
}

Tensor dequantize(const QuantizedTensor& q) {
  if (q.bits < 1 || q.bits > 24) throw Error("dequantize: bits must be in 1..24");
  if (q.hi < q.lo) throw Error("dequantize: inverted range");
  Tensor out = Tensor::zeros(q.shape);
  if (out.size() != q.codes.size())
    throw Error("dequantize: code count does not match shape");
  if (q.hi == q.lo) {
    for (double& v : out.data) v = q.lo;
    return out;
  }
  const uint32_t levels = (1u << q.bits) - 1;
  const double step = (q.hi - q.lo) / levels;
  for (size_t i = 0; i < q.codes.size(); ++i) {
    if (q.codes[i] > levels) throw Error("dequantize: code exceeds level count");
    out.data[i] = q.lo + step * q.codes[i];
  }
  return out;
}

}  // namespace hsfl
