#pragma once

#include <cstdint>
#include <vector>

#include "hsfl/tensor.hpp"

namespace hsfl {

// b-bit stochastically rounded tensor on a per-tensor [lo, hi] range.
struct QuantizedTensor {
  std::vector<int> shape;
  int bits = 0;
  double lo = 0.0;
  double hi = 0.0;
  std::vector<uint32_t> codes;  // values in [0, 2^bits - 1]

  size_t size() const { return codes.size(); }
  bool operator==(const QuantizedTensor& other) const = default;
};

// Unbiased stochastic uniform quantization: each value rounds up with
// probability equal to its fractional position between adjacent levels, so
// E[dequantize(quantize(z))] == z elementwise. A constant tensor (lo == hi)
// encodes exactly.
QuantizedTensor quantize(const Tensor& z, int bits, Rng& rng);
Tensor dequantize(const QuantizedTensor& q);

}  // namespace hsfl
