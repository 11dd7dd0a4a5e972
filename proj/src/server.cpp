#include "hsfl/server.hpp"

#include <cmath>

namespace hsfl {

ServerState init_server(const BackboneTemplate& tmpl, double margin, double csa_weight,
                        double csa_lr, Rng& rng) {
  tmpl.validate();
  if (margin <= 0.0) throw Error("init_server: margin must be positive");
  ServerState server;
  for (int d = tmpl.min_split() + 1; d <= tmpl.depth; ++d)
    server.trunk.push_back(init_block(tmpl, d, rng));
  server.head = init_head(tmpl, 0, rng);
  server.margin = margin;
  server.csa_weight = csa_weight;
  server.csa_lr = csa_lr;
  return server;
}

ServerState duplicate(const ServerState& server) { return server; }

namespace {

void check_entry(const ServerState& server, const BackboneTemplate& tmpl, const Tensor& z,
                 int from_depth) {
  if (from_depth < tmpl.min_split() || from_depth > tmpl.depth)
    throw Error("depth_matched_forward: depth " + std::to_string(from_depth) +
                " has no trunk entry");
  const int want = tmpl.feature_dim(from_depth);
  if (z.rank() != 2 || z.cols() != want)
    throw Error("depth_matched_forward: at depth " + std::to_string(from_depth) + " expected " +
                std::to_string(want) + " feature columns, got " + z.shape_str());
  (void)server;
}

}  // namespace

Tensor depth_matched_forward(const ServerState& server, const BackboneTemplate& tmpl,
                             const Tensor& z, int from_depth) {
  check_entry(server, tmpl, z, from_depth);
  Tensor cur = z;
  for (const ParamBlock& block : server.trunk) {
    if (block.depth <= from_depth) continue;
    cur = block_value(block, cur, tmpl.activation);
  }
  return cur;
}

Tensor server_logits(const ServerState& server, const BackboneTemplate& tmpl, const Tensor& z,
                     int from_depth) {
  return affine_value(server.head, depth_matched_forward(server, tmpl, z, from_depth));
}

double csa_loss(const Tensor& z_s_dagger, const Tensor& z_s_ddagger,
                const std::vector<uint8_t>& indicator, double margin) {
  if (z_s_dagger.rank() != 2 || !z_s_dagger.same_shape(z_s_ddagger))
    throw Error("csa_loss: shapes " + z_s_dagger.shape_str() + " and " + z_s_ddagger.shape_str());
  if (indicator.size() != static_cast<size_t>(z_s_dagger.rows()))
    throw Error("csa_loss: indicator count does not match pair count");
  const int p = z_s_dagger.rows(), d = z_s_dagger.cols();
  double total = 0.0;
  for (int r = 0; r < p; ++r) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = z_s_dagger.at(r, j) - z_s_ddagger.at(r, j);
      sq += diff * diff;
    }
    if (indicator[static_cast<size_t>(r)]) {
      total += 0.5 * sq;
    } else {
      const double gap = margin - std::sqrt(sq);
      if (gap > 0.0) total += 0.5 * gap * gap;
    }
  }
  return total / p;
}

double csa_update(ServerState& server, const BackboneTemplate& tmpl, const Tensor& z_dagger,
                  int exit_depth, const Tensor& z_ddagger, int split_depth,
                  const std::vector<uint8_t>& indicator, uint64_t* work) {
  check_entry(server, tmpl, z_dagger, exit_depth);
  check_entry(server, tmpl, z_ddagger, split_depth);
  if (indicator.size() != static_cast<size_t>(z_dagger.rows()))
    throw Error("csa_update: missing or mis-sized indicator");

  // One tape, trunk bound once, so the two depth-matched chains share
  // parameters and their gradients accumulate. The views enter as inputs:
  // gradient flow back to the client is severed by construction.
  Tape tape;
  std::vector<BoundBlock> bound;
  bound.reserve(server.trunk.size());
  for (const ParamBlock& block : server.trunk) bound.push_back(bind_block(tape, block));

  const auto chain = [&](const Tensor& z, int from_depth) {
    NodeId cur = tape.input(z);
    for (size_t i = 0; i < server.trunk.size(); ++i) {
      if (server.trunk[i].depth <= from_depth) continue;
      cur = apply_block(tape, bound[i], cur, tmpl.activation);
    }
    return cur;
  };
  const NodeId s_dagger = chain(z_dagger, exit_depth);
  const NodeId s_ddagger = chain(z_ddagger, split_depth);
  const NodeId loss = tape.csa_pair_loss(s_dagger, s_ddagger, indicator, server.margin);
  const double loss_value = tape.value(loss).data[0];

  Gradients grads = tape.backward(loss, server.csa_weight);
  for (size_t i = 0; i < server.trunk.size(); ++i) {
    ParamBlock& block = server.trunk[i];
    const BlockGrad g{grads.or_zeros(bound[i].w, block.w), grads.or_zeros(bound[i].b, block.b)};
    sgd_step(block, g, server.csa_lr);
  }
  if (work) *work += tape.work();
  return loss_value;
}

TaskRun u_shaped_task_forward(const ServerState& server, const BackboneTemplate& tmpl,
                              const Tensor& z, int from_depth) {
  check_entry(server, tmpl, z, from_depth);
  TaskRun run;
  run.z_node = run.tape.input(z);
  NodeId cur = run.z_node;
  for (const ParamBlock& block : server.trunk) {
    BoundBlock b = bind_block(run.tape, block);
    run.trunk_bound.push_back(b);
    if (block.depth <= from_depth) continue;
    cur = apply_block(run.tape, b, cur, tmpl.activation);
  }
  run.head_bound = bind_block(run.tape, server.head);
  run.u_node = apply_affine(run.tape, run.head_bound, cur);
  run.u = run.tape.value(run.u_node);
  return run;
}

Tensor apply_upstream_grad(ServerState& server, TaskRun& run, const Tensor& g_u, double beta,
                           double gamma) {
  if (run.spent) throw Error("apply_upstream_grad: task tape already consumed");
  if (run.u_node < 0) throw Error("apply_upstream_grad: missing task tape");
  if (gamma < 0.0 || gamma > 1.0) throw Error("apply_upstream_grad: gamma must be in [0,1]");
  if (!g_u.same_shape(run.u))
    throw Error("apply_upstream_grad: g_u shape " + g_u.shape_str() + " does not match logits " +
                run.u.shape_str());
  run.spent = true;

  Tensor seed = g_u;
  for (double& v : seed.data) v *= 1.0 - gamma;
  Gradients grads = run.tape.backward({Seed{run.u_node, std::move(seed)}});

  if (run.trunk_bound.size() != server.trunk.size())
    throw Error("apply_upstream_grad: tape does not match this server");
  for (size_t i = 0; i < server.trunk.size(); ++i) {
    ParamBlock& block = server.trunk[i];
    const BlockGrad g{grads.or_zeros(run.trunk_bound[i].w, block.w),
                      grads.or_zeros(run.trunk_bound[i].b, block.b)};
    sgd_step(block, g, beta);
  }
  const BlockGrad gh{grads.or_zeros(run.head_bound.w, server.head.w),
                     grads.or_zeros(run.head_bound.b, server.head.b)};
  sgd_step(server.head, gh, beta);

  return grads.or_zeros(run.z_node, run.tape.value(run.z_node));
}

}  // namespace hsfl
