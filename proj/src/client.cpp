#include "hsfl/client.hpp"

#include <algorithm>
#include <cmath>

namespace hsfl {

namespace {

// Gradient of mean cross-entropy at given logits: (softmax - onehot)/rows.
Tensor cross_entropy_grad(const Tensor& logits, const std::vector<int>& labels) {
  const int n = logits.rows(), c = logits.cols();
  Tensor g = Tensor::zeros(logits.shape);
  for (int r = 0; r < n; ++r) {
    double mx = logits.at(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(r, j));
    double se = 0.0;
    for (int j = 0; j < c; ++j) se += std::exp(logits.at(r, j) - mx);
    for (int j = 0; j < c; ++j) {
      const double p = std::exp(logits.at(r, j) - mx) / se;
      g.at(r, j) = (p - (j == labels[static_cast<size_t>(r)] ? 1.0 : 0.0)) / n;
    }
  }
  return g;
}

}  // namespace

ClientState init_client(const BackboneTemplate& tmpl, int id, int split_depth,
                        double entropy_threshold, Shard shard, double holdout_frac,
                        uint64_t run_seed) {
  tmpl.validate();
  if (std::find(tmpl.exit_set.begin(), tmpl.exit_set.end(), split_depth) == tmpl.exit_set.end())
    throw Error("init_client: split depth " + std::to_string(split_depth) +
                " is not in the template exit_set");
  if (entropy_threshold < 0.0) throw Error("init_client: entropy threshold must be >= 0");
  if (holdout_frac < 0.0 || holdout_frac >= 1.0)
    throw Error("init_client: holdout fraction must be in [0,1)");
  if (shard.indices.empty()) throw Error("init_client: empty shard");

  ClientState state;
  state.id = id;
  state.split_depth = split_depth;
  state.entropy_threshold = entropy_threshold;
  state.shard = std::move(shard);
  state.run_seed = run_seed;

  Rng init_rng = Rng::stream({run_seed, /*tag=*/0x696e6974ull, static_cast<uint64_t>(id)});
  for (int d = 1; d <= split_depth; ++d)
    state.params.prefix.push_back(init_block(tmpl, d, init_rng));
  state.params.head = init_head(tmpl, split_depth, init_rng);

  // Deterministic holdout split: shuffle a copy of the shard, reserve the
  // tail. At least one training sample always remains.
  std::vector<int> order = state.shard.indices;
  Rng split_rng = Rng::stream({run_seed, /*tag=*/0x686f6c64ull, static_cast<uint64_t>(id)});
  split_rng.shuffle(order);
  size_t holdout = static_cast<size_t>(holdout_frac * static_cast<double>(order.size()));
  if (holdout >= order.size()) holdout = order.size() - 1;
  state.train_indices.assign(order.begin(), order.end() - static_cast<long>(holdout));
  state.holdout_indices.assign(order.end() - static_cast<long>(holdout), order.end());
  std::sort(state.train_indices.begin(), state.train_indices.end());
  std::sort(state.holdout_indices.begin(), state.holdout_indices.end());
  return state;
}

ClientParams adapt(const BackboneTemplate& tmpl, const ClientParams& params, const Batch& batch,
                   const AdaptConfig& cfg, uint64_t* work) {
  if (batch.size() == 0) throw Error("adapt: empty batch");
  if (cfg.inner_steps < 0) throw Error("adapt: inner_steps must be >= 0");
  if (cfg.inner_lr < 0.0) throw Error("adapt: inner_lr must be >= 0");

  ClientParams cur = params;
  for (int s = 0; s < cfg.inner_steps; ++s) {
    PrefixRun run = run_prefix(cur.prefix, batch.x, /*upto_depth=*/tmpl.depth, tmpl.activation);
    const BoundBlock head = bind_block(run.tape, cur.head);
    const NodeId logits = apply_affine(run.tape, head, run.out);
    const NodeId loss = run.tape.softmax_cross_entropy(logits, batch.y);
    Gradients grads = run.tape.backward(loss);
    for (size_t i = 0; i < cur.prefix.size(); ++i) {
      ParamBlock& block = cur.prefix[i];
      const BoundBlock& b = run.bound[i];
      sgd_step(block, {grads.or_zeros(b.w, block.w), grads.or_zeros(b.b, block.b)}, cfg.inner_lr);
    }
    sgd_step(cur.head, {grads.or_zeros(head.w, cur.head.w), grads.or_zeros(head.b, cur.head.b)},
             cfg.inner_lr);
    if (work) *work += run.tape.work();
  }
  return cur;
}

ViewWork make_views(const BackboneTemplate& tmpl, const ClientState& state, const Batch& b1,
                    const Batch& b2, int exit_depth, const AdaptConfig& cfg) {
  if (b1.size() != b2.size()) throw Error("make_views: batch sizes differ");
  if (std::find(tmpl.exit_set.begin(), tmpl.exit_set.end(), exit_depth) == tmpl.exit_set.end() ||
      exit_depth > state.split_depth)
    throw Error("make_views: exit depth " + std::to_string(exit_depth) +
                " is not a valid exit at or below the split");

  ViewWork w;
  w.adapted_dagger = adapt(tmpl, state.params, b1, cfg, &w.adapt_work);
  w.adapted_ddagger = adapt(tmpl, state.params, b2, cfg, &w.adapt_work);

  // Branch dagger is only ever read as a value (it feeds CSA on the server
  // and nothing returns), so a plain forward suffices.
  w.views.z_dagger = forward_prefix(w.adapted_dagger.prefix, b2.x, exit_depth, tmpl.activation);
  w.views.exit_depth = exit_depth;

  // Branch ddagger carries both client-side gradient paths (l_C and the
  // server's cut gradient), so it runs on a retained tape.
  w.run = run_prefix(w.adapted_ddagger.prefix, b1.x, state.split_depth, tmpl.activation);
  w.z_node = w.run.out;
  w.views.z_ddagger = w.run.tape.value(w.z_node);
  w.head_bound = bind_block(w.run.tape, w.adapted_ddagger.head);
  const NodeId logits = apply_affine(w.run.tape, w.head_bound, w.z_node);
  w.loss_c_node = w.run.tape.softmax_cross_entropy(logits, b1.y);
  w.loss_c = w.run.tape.value(w.loss_c_node).data[0];

  w.views.indicator.reserve(b1.y.size());
  for (size_t i = 0; i < b1.y.size(); ++i)
    w.views.indicator.push_back(b1.y[i] == b2.y[i] ? 1 : 0);
  return w;
}

int sample_exit_depth(const BackboneTemplate& tmpl, const ClientState& state, Rng& rng) {
  std::vector<int> candidates;
  for (int k : tmpl.exit_set)
    if (k <= state.split_depth) candidates.push_back(k);
  if (candidates.empty()) throw Error("sample_exit_depth: no valid exits at or below the split");
  return candidates[static_cast<size_t>(rng.below(candidates.size()))];
}

void outer_update(ClientState& state, ViewWork& work, const Tensor& g_z, double gamma,
                  double outer_lr) {
  if (work.spent) throw Error("outer_update: work bundle already consumed");
  if (work.loss_c_node < 0) throw Error("outer_update: missing view tape");
  if (gamma < 0.0 || gamma > 1.0) throw Error("outer_update: gamma must be in [0,1]");
  if (!g_z.same_shape(work.views.z_ddagger))
    throw Error("outer_update: cut gradient shape " + g_z.shape_str() +
                " does not match the view " + work.views.z_ddagger.shape_str());
  work.spent = true;

  // Straight-through: the server computed g_z at the dequantized feature,
  // we inject it at the pre-quantization node.
  std::vector<Seed> seeds;
  seeds.push_back({work.loss_c_node, Tensor::vec({gamma})});
  seeds.push_back({work.z_node, g_z});
  Gradients grads = work.run.tape.backward(seeds);

  // FOMAML: gradients live at the adapted (ddagger) parameters, the step is
  // applied to the pre-adaptation parameters.
  if (work.run.bound.size() != state.params.prefix.size())
    throw Error("outer_update: view tape does not match this client");
  for (size_t i = 0; i < state.params.prefix.size(); ++i) {
    ParamBlock& block = state.params.prefix[i];
    const BoundBlock& b = work.run.bound[i];
    sgd_step(block, {grads.or_zeros(b.w, block.w), grads.or_zeros(b.b, block.b)}, outer_lr);
  }
  sgd_step(state.params.head,
           {grads.or_zeros(work.head_bound.w, state.params.head.w),
            grads.or_zeros(work.head_bound.b, state.params.head.b)},
           outer_lr);
}

InferenceOutcome infer(const BackboneTemplate& tmpl, const ClientState& state, const Tensor& x_row,
                       const ServerLink* link, int bits, Rng& rng) {
  if (x_row.rank() != 2 || x_row.rows() != 1)
    throw Error("infer: expected a single-sample (1, d) input");

  const Tensor z = forward_prefix(state.params.prefix, x_row, state.split_depth, tmpl.activation);
  const Tensor local_logits = affine_value(state.params.head, z);
  const double entropy = softmax_entropy_rows(local_logits).data[0];

  if (entropy < state.entropy_threshold)
    return {argmax_row(local_logits, 0), Route::kLocal};

  if (link == nullptr || link->server == nullptr || link->channel == nullptr)
    throw Error("infer: server unreachable (no link) for client " + std::to_string(state.id));

  WireMessage up;
  up.kind = MsgKind::kInferenceFeature;
  up.round = link->round;
  up.step = link->step;
  up.client = static_cast<uint32_t>(state.id);
  up.payload = InferenceFeatureBody{state.split_depth, quantize(z, bits, rng)};
  const WireMessage up_rx = link->channel->transfer(up);
  const auto& feat = std::get<InferenceFeatureBody>(up_rx.payload);

  const Tensor logits =
      server_logits(*link->server, tmpl, dequantize(feat.z), feat.depth);

  WireMessage down;
  down.kind = MsgKind::kInferenceLogits;
  down.round = link->round;
  down.step = link->step;
  down.client = static_cast<uint32_t>(state.id);
  down.payload = InferenceLogitsBody{quantize(logits, bits, rng)};
  const WireMessage down_rx = link->channel->transfer(down);
  const Tensor received = dequantize(std::get<InferenceLogitsBody>(down_rx.payload).logits);

  return {argmax_row(received, 0), Route::kOffload};
}

void personalize(const BackboneTemplate& tmpl, ClientState& state, const ClientParams& global,
                 const Dataset& ds, const AdaptConfig& cfg, int steps, Rng& rng) {
  if (state.train_indices.empty()) throw Error("personalize: empty shard");
  if (steps < 0) throw Error("personalize: steps must be >= 0");

  ClientParams cur = global;
  AdaptConfig one_step = cfg;
  one_step.inner_steps = 1;

  std::vector<int> order = state.train_indices;
  size_t cursor = order.size();  // forces a shuffle before the first batch
  for (int s = 0; s < steps; ++s) {
    std::vector<int> rows;
    rows.reserve(static_cast<size_t>(cfg.batch_size));
    while (rows.size() < static_cast<size_t>(cfg.batch_size)) {
      if (cursor == order.size()) {
        rng.shuffle(order);
        cursor = 0;
      }
      rows.push_back(order[cursor++]);
    }
    cur = adapt(tmpl, cur, gather_batch(ds, rows), one_step);
  }
  state.params = std::move(cur);
}

double local_accuracy(const BackboneTemplate& tmpl, const ClientParams& params, const Dataset& ds,
                      const std::vector<int>& rows) {
  if (rows.empty()) return 0.0;
  const Batch batch = gather_batch(ds, rows);
  const int split = params.prefix.empty() ? 0 : params.prefix.back().depth;
  const Tensor z = forward_prefix(params.prefix, batch.x, split, tmpl.activation);
  return accuracy(affine_value(params.head, z), batch.y);
}

// Exposed for the wire exchange: the client evaluates l_S and its gradient
// on the logits it received.
Tensor client_task_grad(const Tensor& logits, const std::vector<int>& labels) {
  return cross_entropy_grad(logits, labels);
}

}  // namespace hsfl
