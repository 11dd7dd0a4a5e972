// Shared test utilities: the finite-difference oracle harness and small
// helpers. The harness treats the reverse-mode engine as a black box and
// checks it against central differences on freshly rebuilt graphs.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "hsfl/common.hpp"
#include "hsfl/tape.hpp"

namespace testsupport {

using hsfl::NodeId;
using hsfl::Rng;
using hsfl::Tape;
using hsfl::Tensor;

// A differentiable scalar case. `build` constructs the loss on a fresh tape
// from parameter nodes created in `shapes` order. `kink_margin` (optional)
// returns the distance from the nearest nondifferentiable point (ReLU zero
// crossing, contrastive margin, coincident pair); the harness redraws
// parameters until the margin clears the FD step comfortably.
struct FdCase {
  std::vector<std::vector<int>> shapes;
  std::function<NodeId(Tape&, const std::vector<NodeId>&)> build;
  std::function<double(const std::vector<Tensor>&)> kink_margin;
};

inline std::vector<Tensor> draw_params(const std::vector<std::vector<int>>& shapes,
                                       uint64_t seed, double scale = 1.0) {
  Rng rng = Rng::stream({seed, 0x74657374u});
  std::vector<Tensor> params;
  for (const auto& shape : shapes) {
    Tensor t = Tensor::zeros(shape);
    for (double& v : t.data) v = scale * rng.normal();
    params.push_back(std::move(t));
  }
  return params;
}

// Deterministic rejection: derive fresh seeds until the case is safely
// differentiable in an FD-step neighborhood.
inline std::vector<Tensor> draw_safe_params(const FdCase& c, uint64_t seed,
                                            double min_margin = 1e-3, double scale = 1.0) {
  for (uint64_t attempt = 0; attempt < 64; ++attempt) {
    std::vector<Tensor> params = draw_params(c.shapes, hsfl::fold_seed({seed, attempt}), scale);
    if (!c.kink_margin || c.kink_margin(params) > min_margin) return params;
  }
  throw hsfl::Error("draw_safe_params: no kink-safe draw in 64 attempts");
}

inline double eval_case(const FdCase& c, const std::vector<Tensor>& params) {
  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.param(p));
  return tape.value(c.build(tape, ids)).data[0];
}

// max over coordinates of |analytic - numeric| / max(1, |numeric|).
inline double fd_max_rel_error(const FdCase& c, const std::vector<Tensor>& params,
                               double h = 1e-5) {
  Tape tape;
  std::vector<NodeId> ids;
  ids.reserve(params.size());
  for (const Tensor& p : params) ids.push_back(tape.param(p));
  const NodeId loss = c.build(tape, ids);
  hsfl::Gradients grads = tape.backward(loss);

  double worst = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    const Tensor analytic = grads.or_zeros(ids[pi], params[pi]);
    for (size_t i = 0; i < params[pi].data.size(); ++i) {
      std::vector<Tensor> plus = params;
      std::vector<Tensor> minus = params;
      plus[pi].data[i] += h;
      minus[pi].data[i] -= h;
      const double numeric = (eval_case(c, plus) - eval_case(c, minus)) / (2.0 * h);
      const double err =
          std::abs(analytic.data[i] - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace testsupport
