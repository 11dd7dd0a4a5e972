#pragma once

#include <vector>

#include "hsfl/tensor.hpp"

namespace hsfl {

struct Dataset {
  Tensor features;          // (n, d)
  std::vector<int> labels;  // values in {0..class_count-1}
  int class_count = 0;

  int size() const { return static_cast<int>(labels.size()); }
};

struct Shard {
  int owner = 0;
  std::vector<int> indices;  // rows of the parent Dataset
  double weight = 0.0;       // zeta_n = |D_n| / sum |D_i|
};

struct Batch {
  Tensor x;            // (B, d)
  std::vector<int> y;  // length B

  int size() const { return static_cast<int>(y.size()); }
};

// Isotropic Gaussian mixture with fixed per-class means (+-unit basis
// vectors, class c at sign (-1)^c times e_{c/2}) and balanced labels.
Dataset gen_gaussian_mixture(int class_count, int dim, int samples, double spread, uint64_t seed);

// Label-skew non-IID split: per-class client proportions drawn from a
// symmetric Dirichlet; whole partition resampled until every client has at
// least one sample.
std::vector<Shard> dirichlet_partition(const Dataset& ds, int clients, double concentration,
                                       uint64_t seed);

// Gathers the given dataset rows into a batch.
Batch gather_batch(const Dataset& ds, const std::vector<int>& rows);
// `size` uniform iid draws from pool (with replacement).
std::vector<int> draw_with_replacement(const std::vector<int>& pool, int size, Rng& rng);

}  // namespace hsfl
