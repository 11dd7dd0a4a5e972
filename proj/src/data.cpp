#include "hsfl/data.hpp"

#include <algorithm>

namespace hsfl {

Dataset gen_gaussian_mixture(int class_count, int dim, int samples, double spread,
                             uint64_t seed) {
  if (class_count < 2) throw Error("gen_gaussian_mixture: need at least 2 classes");
  if (dim < 1) throw Error("gen_gaussian_mixture: dim must be positive");
  if (samples < class_count) throw Error("gen_gaussian_mixture: need at least one sample per class");
  if (class_count > 2 * dim)
    throw Error("gen_gaussian_mixture: at most 2*dim classes fit the fixed mean layout");
  if (spread < 0.0) throw Error("gen_gaussian_mixture: spread must be non-negative");

  // Class c sits at (-1)^c * e_{c/2}: distinct unit-norm means for up to 2d classes.
  const auto mean_of = [dim](int c) {
    Tensor m = Tensor::zeros({dim});
    m.data[static_cast<size_t>(c / 2)] = (c % 2 == 0) ? 1.0 : -1.0;
    return m;
  };

  // Balanced labels (counts differ by at most 1), then a seeded shuffle so
  // class runs do not align with shard boundaries downstream.
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(samples));
  for (int i = 0; i < samples; ++i) labels.push_back(i % class_count);
  Rng rng = Rng::stream({seed, /*tag=*/0x64617461ull});  // "data"
  rng.shuffle(labels);

  Dataset ds;
  ds.class_count = class_count;
  ds.labels = labels;
  ds.features = Tensor::zeros({samples, dim});
  for (int i = 0; i < samples; ++i) {
    const Tensor m = mean_of(labels[static_cast<size_t>(i)]);
    for (int j = 0; j < dim; ++j)
      ds.features.at(i, j) = m.data[static_cast<size_t>(j)] + spread * rng.normal();
  }
  return ds;
}

std::vector<Shard> dirichlet_partition(const Dataset& ds, int clients, double concentration,
                                       uint64_t seed) {
  if (clients < 1) throw Error("dirichlet_partition: need at least 1 client");
  if (clients > ds.size()) throw Error("dirichlet_partition: more clients than samples");
  if (concentration <= 0.0) throw Error("dirichlet_partition: concentration must be positive");

  std::vector<std::vector<int>> by_class(static_cast<size_t>(ds.class_count));
  for (int i = 0; i < ds.size(); ++i)
    by_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

  Rng rng = Rng::stream({seed, /*tag=*/0x70617274ull});  // "part"

  // Rejection loop: resample the whole partition until no client is empty.
  for (int attempt = 0; attempt < 10000; ++attempt) {
    std::vector<std::vector<int>> assigned(static_cast<size_t>(clients));
    for (const std::vector<int>& members : by_class) {
      if (members.empty()) continue;
      std::vector<int> order = members;
      rng.shuffle(order);
      const std::vector<double> prop = rng.dirichlet(concentration, clients);
      // Cut the shuffled class list at cumulative-proportion boundaries.
      const int m = static_cast<int>(order.size());
      size_t next = 0;
      double cum = 0.0;
      for (int c = 0; c < clients; ++c) {
        cum += prop[static_cast<size_t>(c)];
        const size_t upto =
            c == clients - 1
                ? static_cast<size_t>(m)
                : std::min(static_cast<size_t>(m),
                           static_cast<size_t>(std::llround(cum * m)));
        for (; next < upto; ++next)
          assigned[static_cast<size_t>(c)].push_back(order[next]);
      }
    }
    const bool all_nonempty = std::all_of(assigned.begin(), assigned.end(),
                                          [](const auto& v) { return !v.empty(); });
    if (!all_nonempty) continue;

    std::vector<Shard> shards(static_cast<size_t>(clients));
    for (int c = 0; c < clients; ++c) {
      Shard& s = shards[static_cast<size_t>(c)];
      s.owner = c;
      s.indices = std::move(assigned[static_cast<size_t>(c)]);
      std::sort(s.indices.begin(), s.indices.end());
      s.weight = static_cast<double>(s.indices.size()) / static_cast<double>(ds.size());
    }
    return shards;
  }
  throw Error("dirichlet_partition: could not produce non-empty shards after 10000 attempts");
}

Batch gather_batch(const Dataset& ds, const std::vector<int>& rows) {
  if (rows.empty()) throw Error("gather_batch: empty row list");
  const int d = ds.features.cols();
  Batch b;
  b.x = Tensor::zeros({static_cast<int>(rows.size()), d});
  b.y.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    const int r = rows[i];
    if (r < 0 || r >= ds.size()) throw Error("gather_batch: row index out of range");
    for (int j = 0; j < d; ++j) b.x.at(static_cast<int>(i), j) = ds.features.at(r, j);
    b.y.push_back(ds.labels[static_cast<size_t>(r)]);
  }
  return b;
}

std::vector<int> draw_with_replacement(const std::vector<int>& pool, int size, Rng& rng) {
  if (pool.empty()) throw Error("draw_with_replacement: empty pool");
  if (size < 1) throw Error("draw_with_replacement: size must be positive");
  std::vector<int> out;
  out.reserve(static_cast<size_t>(size));
  for (int i = 0; i < size; ++i)
    out.push_back(pool[static_cast<size_t>(rng.below(pool.size()))]);
  return out;
}

}  // namespace hsfl
