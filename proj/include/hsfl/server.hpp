#pragma once

#include <vector>

#include "hsfl/backbone.hpp"

namespace hsfl {

// The main server: trunk blocks at depths min_split+1..D (so every valid
// exit depth has a landing block) plus the final affine head.
struct ServerState {
  std::vector<ParamBlock> trunk;
  ParamBlock head;  // depth 0 by convention
  double margin = 1.0;
  double csa_weight = 1.0;
  double csa_lr = 0.05;
};

ServerState init_server(const BackboneTemplate& tmpl, double margin, double csa_weight,
                        double csa_lr, Rng& rng);

// Deep, independent copy (the per-round duplicate handed to a client pair).
ServerState duplicate(const ServerState& server);

// Runs trunk blocks with template depth > from_depth, in order, up to the
// last block; the head is not applied. Value-only.
Tensor depth_matched_forward(const ServerState& server, const BackboneTemplate& tmpl,
                             const Tensor& z, int from_depth);

// Convenience: depth-matched forward then the affine head (fallback logits).
Tensor server_logits(const ServerState& server, const BackboneTemplate& tmpl, const Tensor& z,
                     int from_depth);

// Mean over pairs of I*0.5*||a-b||^2 + (1-I)*0.5*max(0, margin-||a-b||)^2.
double csa_loss(const Tensor& z_s_dagger, const Tensor& z_s_ddagger,
                const std::vector<uint8_t>& indicator, double margin);

// One contrastive-alignment step: depth-matched forwards of both views meet
// in csa_loss; a step of size csa_lr * csa_weight's gradient lands on the
// trunk only. The head is untouched and no gradient leaves the server.
// Returns the (unweighted) pair loss; `work` accumulates tape MACs.
double csa_update(ServerState& server, const BackboneTemplate& tmpl, const Tensor& z_dagger,
                  int exit_depth, const Tensor& z_ddagger, int split_depth,
                  const std::vector<uint8_t>& indicator, uint64_t* work = nullptr);

// Retained tape of one U-shaped task forward, consumed by exactly one
// apply_upstream_grad.
struct TaskRun {
  Tape tape;
  NodeId z_node = -1;
  NodeId u_node = -1;
  std::vector<BoundBlock> trunk_bound;
  BoundBlock head_bound;
  Tensor u;  // logits, returned to the client
  bool spent = false;
};

// u = head(trunk_{from_depth+1..D}(z)); the tape is retained for the
// gradient exchange.
TaskRun u_shaped_task_forward(const ServerState& server, const BackboneTemplate& tmpl,
                              const Tensor& z, int from_depth);

// Backpropagates (1-gamma)*g_u through head and trunk, applies one SGD step
// of size beta to both, and returns the gradient at the cut (already
// (1-gamma)-scaled) for the client to continue into its prefix.
Tensor apply_upstream_grad(ServerState& server, TaskRun& run, const Tensor& g_u, double beta,
                           double gamma);

}  // namespace hsfl
