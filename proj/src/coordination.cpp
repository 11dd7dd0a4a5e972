#include "hsfl/coordination.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <thread>

#include "hsfl/checkpoint.hpp"
#include "hsfl/quantize.hpp"
#include "hsfl/wire.hpp"

namespace hsfl {

namespace {

// Stream tags: every random decision derives from (seed, tag, entity,
// round, step), so no draw ever depends on scheduling.
constexpr uint64_t kTagServerInit = 0x73727669;
constexpr uint64_t kTagSelect = 0x73656c63;
constexpr uint64_t kTagStep = 0x73746570;
constexpr uint64_t kTagServerQuant = 0x73727671;
constexpr uint64_t kTagGate = 0x67617465;
constexpr uint64_t kTagPersonalize = 0x70657273;
constexpr uint64_t kTagFallback = 0x66616c6c;
constexpr uint64_t kTagDiag = 0x64696167;
constexpr uint64_t kTagNoise = 0x6e6f6973;
constexpr uint64_t kTagQuantProbe = 0x71707262;

uint64_t u64_of(int v) { return static_cast<uint64_t>(v); }

std::vector<double> zetas(const SimState& state) {
  std::vector<double> z;
  z.reserve(state.clients.size());
  for (const ClientState& c : state.clients) z.push_back(c.shard.weight);
  return z;
}

Tensor rotate_rows(const Tensor& m) {
  Tensor out = m;
  const int rows = m.rows();
  if (rows < 2) return out;
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < m.cols(); ++c) out.at(r, c) = m.at((r + 1) % rows, c);
  return out;
}

void add_scaled(Tensor& acc, const Tensor& t, double scale) {
  if (!acc.same_shape(t)) throw Error("aggregate: block shape mismatch");
  for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += scale * t.data[i];
}

double squared_norm(const Tensor& t) {
  double s = 0.0;
  for (double v : t.data) s += v * v;
  return s;
}

}  // namespace

SimState build_sim(const RunConfig& config) {
  const std::vector<std::string> problems = config.validate();
  if (!problems.empty()) {
    std::string msg = "invalid config:";
    for (const std::string& p : problems) msg += " [" + p + "]";
    throw Error(msg);
  }

  SimState state;
  state.tmpl = make_chain_template(config.dim, config.width, config.depth, config.exit_set,
                                   config.classes);
  state.dataset = gen_gaussian_mixture(config.classes, config.dim, config.samples, config.spread,
                                       config.seed);
  std::vector<Shard> shards =
      dirichlet_partition(state.dataset, config.clients, config.concentration, config.seed);

  for (int n = 0; n < config.clients; ++n) {
    const int split = config.split_depths.empty()
                          ? config.exit_set[static_cast<size_t>(n) % config.exit_set.size()]
                          : config.split_depths[static_cast<size_t>(n)];
    state.clients.push_back(init_client(state.tmpl, n, split, config.entropy_threshold,
                                        std::move(shards[static_cast<size_t>(n)]),
                                        config.holdout_frac, config.seed));
  }

  Rng server_rng = Rng::stream({config.seed, kTagServerInit});
  state.server = init_server(state.tmpl, config.margin, config.csa_weight, config.csa_lr,
                             server_rng);
  return state;
}

HyperParams hyper_from_config(const RunConfig& config) {
  HyperParams hp;
  hp.rounds = config.rounds;
  hp.local_steps.assign(static_cast<size_t>(config.clients), config.local_steps);
  hp.participation = config.participation;
  hp.gamma = config.gamma;
  hp.lambda = config.lambda;
  hp.inner_lr = config.inner_lr;
  hp.outer_lr = config.outer_lr;
  hp.margin = config.margin;
  hp.bits = config.bits;
  hp.seed = config.seed;
  hp.inner_steps = config.inner_steps;
  hp.batch_size = config.batch_size;
  hp.csa_weight = config.csa_weight;
  hp.csa_lr = config.csa_lr;
  hp.stochastic_depth = config.stochastic_depth;
  hp.workers = config.workers;
  return hp;
}

std::vector<int> select_participants(int clients, double participation, int round,
                                     uint64_t seed) {
  if (clients < 1) throw Error("select_participants: need at least one client");
  if (participation <= 0.0 || participation > 1.0)
    throw Error("select_participants: participation must be in (0,1]");
  const int k = static_cast<int>(std::ceil(participation * clients));
  Rng rng = Rng::stream({seed, kTagSelect, u64_of(round)});
  return rng.sample_without_replacement(clients, std::max(1, std::min(k, clients)));
}

void aggregate_clients(std::vector<ClientState>& clients, const std::vector<int>& participants,
                       double lambda, const std::vector<double>& zeta) {
  if (lambda < 0.0 || lambda > 1.0) throw Error("aggregate_clients: lambda must be in [0,1]");
  if (zeta.size() != clients.size())
    throw Error("aggregate_clients: need one weight per client");

  struct Accum {
    Tensor w, b;
    double weight = 0.0;
  };
  std::map<int, Accum> prefix_acc;  // keyed by template depth
  std::map<int, Accum> head_acc;    // keyed by the exit depth the head serves

  const auto feed = [](std::map<int, Accum>& acc, int key, const ParamBlock& block, double z) {
    Accum& a = acc[key];
    if (a.w.empty()) {
      a.w = Tensor::zeros(block.w.shape);
      a.b = Tensor::zeros(block.b.shape);
    }
    add_scaled(a.w, block.w, z);
    add_scaled(a.b, block.b, z);
    a.weight += z;
  };

  for (int n : participants) {
    if (n < 0 || static_cast<size_t>(n) >= clients.size())
      throw Error("aggregate_clients: participant id out of range");
    const ClientState& c = clients[static_cast<size_t>(n)];
    for (const ParamBlock& block : c.params.prefix)
      feed(prefix_acc, block.depth, block, zeta[static_cast<size_t>(n)]);
    feed(head_acc, c.params.head.depth, c.params.head, zeta[static_cast<size_t>(n)]);
  }
  // Renormalize each depth over the participants that actually hold it.
  for (auto& [depth, a] : prefix_acc) {
    if (a.weight <= 0.0) throw Error("aggregate_clients: zero aggregate weight at depth " +
                                     std::to_string(depth));
    for (double& v : a.w.data) v /= a.weight;
    for (double& v : a.b.data) v /= a.weight;
  }
  for (auto& [depth, a] : head_acc) {
    if (a.weight <= 0.0) throw Error("aggregate_clients: zero aggregate head weight");
    for (double& v : a.w.data) v /= a.weight;
    for (double& v : a.b.data) v /= a.weight;
  }

  const auto blend = [lambda](ParamBlock& block, const Accum& a) {
    if (!block.w.same_shape(a.w) || !block.b.same_shape(a.b))
      throw Error("aggregate_clients: shape mismatch at depth " + std::to_string(block.depth));
    for (size_t i = 0; i < block.w.data.size(); ++i)
      block.w.data[i] = lambda * block.w.data[i] + (1.0 - lambda) * a.w.data[i];
    for (size_t i = 0; i < block.b.data.size(); ++i)
      block.b.data[i] = lambda * block.b.data[i] + (1.0 - lambda) * a.b.data[i];
  };

  for (ClientState& c : clients) {
    for (ParamBlock& block : c.params.prefix) {
      auto it = prefix_acc.find(block.depth);
      if (it != prefix_acc.end()) blend(block, it->second);
      // A depth no participant holds keeps the owner's block.
    }
    auto it = head_acc.find(c.params.head.depth);
    if (it != head_acc.end()) blend(c.params.head, it->second);
  }
}

void aggregate_server(ServerState& master, const std::vector<ServerState>& duplicates,
                      const std::vector<int>& participants, const std::vector<double>& zeta) {
  if (duplicates.empty()) throw Error("aggregate_server: no duplicates");
  if (duplicates.size() != participants.size())
    throw Error("aggregate_server: duplicates and participants differ in count");

  double renorm = 0.0;
  for (int n : participants) {
    if (n < 0 || static_cast<size_t>(n) >= zeta.size())
      throw Error("aggregate_server: participant id out of range");
    renorm += zeta[static_cast<size_t>(n)];
  }
  if (renorm <= 0.0) throw Error("aggregate_server: zero total weight");

  ServerState out = master;
  for (ParamBlock& block : out.trunk) {
    block.w = Tensor::zeros(block.w.shape);
    block.b = Tensor::zeros(block.b.shape);
  }
  out.head.w = Tensor::zeros(out.head.w.shape);
  out.head.b = Tensor::zeros(out.head.b.shape);

  for (size_t j = 0; j < duplicates.size(); ++j) {
    const ServerState& dup = duplicates[j];
    const double w = zeta[static_cast<size_t>(participants[j])] / renorm;
    if (dup.trunk.size() != out.trunk.size())
      throw Error("aggregate_server: trunk shape drift");
    for (size_t i = 0; i < out.trunk.size(); ++i) {
      add_scaled(out.trunk[i].w, dup.trunk[i].w, w);
      add_scaled(out.trunk[i].b, dup.trunk[i].b, w);
    }
    add_scaled(out.head.w, dup.head.w, w);
    add_scaled(out.head.b, dup.head.b, w);
  }
  master = std::move(out);
}

namespace {

// One client's contribution to the deterministic probe: l_C, l_S, l_CSA on
// the full training shard at K = split_depth with no quantization. Client
// gradients are consumed immediately; theta gradients accumulate across
// clients into `theta_acc`/`head_acc` (the global gradient sums over n).
struct ProbeAccum {
  std::vector<BlockGrad> trunk;
  BlockGrad head;
  double objective = 0.0;
  double client_sq = 0.0;       // sum over n of ||p_n grad_{phi_n,h_n}||^2
  double per_client_sq_sum = 0.0;  // sum over n of p_n ||grad F_n||^2 (diagnostics)
  uint64_t work = 0;
};

void probe_client(const SimState& state, const HyperParams& hp, const ClientState& client,
                  ProbeAccum& acc) {
  const BackboneTemplate& tmpl = state.tmpl;
  const double p = client.shard.weight;
  const Batch full = gather_batch(state.dataset, client.train_indices);

  PrefixRun run = run_prefix(client.params.prefix, full.x, client.split_depth, tmpl.activation);
  const BoundBlock client_head = bind_block(run.tape, client.params.head);
  const NodeId lc =
      run.tape.softmax_cross_entropy(apply_affine(run.tape, client_head, run.out), full.y);

  std::vector<BoundBlock> trunk_bound;
  trunk_bound.reserve(state.server.trunk.size());
  for (const ParamBlock& block : state.server.trunk)
    trunk_bound.push_back(bind_block(run.tape, block));
  const auto trunk_chain = [&](NodeId from, int from_depth) {
    NodeId cur = from;
    for (size_t i = 0; i < state.server.trunk.size(); ++i) {
      if (state.server.trunk[i].depth <= from_depth) continue;
      cur = apply_block(run.tape, trunk_bound[i], cur, tmpl.activation);
    }
    return cur;
  };
  const BoundBlock server_head = bind_block(run.tape, state.server.head);
  const NodeId ls = run.tape.softmax_cross_entropy(
      apply_affine(run.tape, server_head, trunk_chain(run.out, client.split_depth)), full.y);

  // CSA pairs each shard sample with its cyclic successor; both views enter
  // as fresh inputs, which severs gradient flow at the cut exactly like the
  // protocol does (the CSA term touches theta only).
  const Tensor z_value = run.tape.value(run.out);
  const NodeId za = run.tape.input(z_value);
  const NodeId zb = run.tape.input(rotate_rows(z_value));
  std::vector<uint8_t> indicator(full.y.size());
  for (size_t i = 0; i < full.y.size(); ++i)
    indicator[i] = full.y[i] == full.y[(i + 1) % full.y.size()] ? 1 : 0;
  const NodeId lcsa = run.tape.csa_pair_loss(trunk_chain(za, client.split_depth),
                                             trunk_chain(zb, client.split_depth),
                                             std::move(indicator), hp.margin);

  const double lc_v = run.tape.value(lc).data[0];
  const double ls_v = run.tape.value(ls).data[0];
  const double lcsa_v = run.tape.value(lcsa).data[0];
  acc.objective += p * (hp.gamma * lc_v + (1.0 - hp.gamma) * ls_v + hp.csa_weight * lcsa_v);

  Gradients grads = run.tape.backward({Seed{lc, Tensor::vec({hp.gamma * p})},
                                       Seed{ls, Tensor::vec({(1.0 - hp.gamma) * p})},
                                       Seed{lcsa, Tensor::vec({hp.csa_weight * p})}});

  double own_sq = 0.0;  // ||p grad F_n||^2 over every coordinate F_n touches
  for (size_t i = 0; i < run.bound.size(); ++i) {
    const ParamBlock& block = client.params.prefix[i];
    own_sq += squared_norm(grads.or_zeros(run.bound[i].w, block.w));
    own_sq += squared_norm(grads.or_zeros(run.bound[i].b, block.b));
  }
  own_sq += squared_norm(grads.or_zeros(client_head.w, client.params.head.w));
  own_sq += squared_norm(grads.or_zeros(client_head.b, client.params.head.b));
  acc.client_sq += own_sq;

  for (size_t i = 0; i < trunk_bound.size(); ++i) {
    const ParamBlock& block = state.server.trunk[i];
    const Tensor gw = grads.or_zeros(trunk_bound[i].w, block.w);
    const Tensor gb = grads.or_zeros(trunk_bound[i].b, block.b);
    own_sq += squared_norm(gw) + squared_norm(gb);
    add_scaled(acc.trunk[i].w, gw, 1.0);
    add_scaled(acc.trunk[i].b, gb, 1.0);
  }
  {
    const Tensor gw = grads.or_zeros(server_head.w, state.server.head.w);
    const Tensor gb = grads.or_zeros(server_head.b, state.server.head.b);
    own_sq += squared_norm(gw) + squared_norm(gb);
    add_scaled(acc.head.w, gw, 1.0);
    add_scaled(acc.head.b, gb, 1.0);
  }
  // p_n ||grad F_n||^2 = ||p_n grad F_n||^2 / p_n (guard degenerate weights).
  if (p > 0.0) acc.per_client_sq_sum += own_sq / p;
  acc.work += run.tape.work();
}

ProbeAccum probe_all(const SimState& state, const HyperParams& hp) {
  ProbeAccum acc;
  acc.trunk.resize(state.server.trunk.size());
  for (size_t i = 0; i < acc.trunk.size(); ++i) {
    acc.trunk[i].w = Tensor::zeros(state.server.trunk[i].w.shape);
    acc.trunk[i].b = Tensor::zeros(state.server.trunk[i].b.shape);
  }
  acc.head.w = Tensor::zeros(state.server.head.w.shape);
  acc.head.b = Tensor::zeros(state.server.head.b.shape);
  for (const ClientState& client : state.clients) probe_client(state, hp, client, acc);
  return acc;
}

}  // namespace

GlobalProbe probe_global(const SimState& state, const HyperParams& hp) {
  const ProbeAccum acc = probe_all(state, hp);
  GlobalProbe out;
  out.objective = acc.objective;
  double theta_sq = 0.0;
  for (const BlockGrad& g : acc.trunk) theta_sq += squared_norm(g.w) + squared_norm(g.b);
  theta_sq += squared_norm(acc.head.w) + squared_norm(acc.head.b);
  out.grad_norm_sq = acc.client_sq + theta_sq;
  out.work = acc.work;
  return out;
}

double estimate_global_grad_norm(const SimState& state, const HyperParams& hp) {
  return probe_global(state, hp).grad_norm_sq;
}

namespace {

struct StepPhaseResult {
  double loss_c_sum = 0.0;
  double loss_s_sum = 0.0;
  double loss_csa_sum = 0.0;
  int steps = 0;
  uint64_t work = 0;
  Channel channel;
};

void run_participant_steps(const BackboneTemplate& tmpl, const Dataset& ds, ClientState& client,
                           ServerState& dup, const HyperParams& hp, int round,
                           StepPhaseResult& out, const RoundHooks* hooks) {
  const AdaptConfig cfg{hp.inner_lr, hp.inner_steps, hp.batch_size};
  const int local_steps = hp.local_steps[static_cast<size_t>(client.id)];
  const uint32_t r32 = static_cast<uint32_t>(round);
  const uint32_t n32 = static_cast<uint32_t>(client.id);

  for (int t = 0; t < local_steps; ++t) {
    Rng rng = Rng::stream({hp.seed, kTagStep, u64_of(client.id), u64_of(round), u64_of(t)});
    const uint32_t t32 = static_cast<uint32_t>(t);

    // Draw order is fixed: B1, B2, K, q(z_dagger), q(z_ddagger).
    const Batch b1 = gather_batch(ds, draw_with_replacement(client.train_indices,
                                                            hp.batch_size, rng));
    const Batch b2 = gather_batch(ds, draw_with_replacement(client.train_indices,
                                                            hp.batch_size, rng));
    const int exit_depth =
        hp.stochastic_depth ? sample_exit_depth(tmpl, client, rng) : client.split_depth;

    ViewWork views = make_views(tmpl, client, b1, b2, exit_depth, cfg);
    const QuantizedTensor q_dagger = quantize(views.views.z_dagger, hp.bits, rng);
    const QuantizedTensor q_ddagger = quantize(views.views.z_ddagger, hp.bits, rng);

    // 1. Both views cross to the server; CSA aligns the trunk.
    WireMessage pair_msg;
    pair_msg.kind = MsgKind::kFeaturePair;
    pair_msg.round = r32;
    pair_msg.step = t32;
    pair_msg.client = n32;
    pair_msg.payload = FeaturePairBody{exit_depth, client.split_depth, q_dagger, q_ddagger,
                                       views.views.indicator};
    const WireMessage pair_rx = out.channel.transfer(pair_msg);
    const auto& pair = std::get<FeaturePairBody>(pair_rx.payload);
    if (hooks && hooks->before_csa) hooks->before_csa(client.id, t, dup);
    const double lcsa =
        csa_update(dup, tmpl, dequantize(pair.z_dagger), pair.exit_depth,
                   dequantize(pair.z_ddagger), pair.split_depth, pair.indicator, &out.work);
    if (hooks && hooks->after_csa) hooks->after_csa(client.id, t, dup);

    // 2. The task view crosses for the U-shaped exchange.
    WireMessage task_msg;
    task_msg.kind = MsgKind::kTaskFeature;
    task_msg.round = r32;
    task_msg.step = t32;
    task_msg.client = n32;
    task_msg.payload = TaskFeatureBody{client.split_depth, q_ddagger};
    const WireMessage task_rx = out.channel.transfer(task_msg);
    const auto& task_body = std::get<TaskFeatureBody>(task_rx.payload);
    TaskRun task = u_shaped_task_forward(dup, tmpl, dequantize(task_body.z), task_body.depth);

    // 3. Logits come back quantized; the label never leaves the client.
    Rng server_rng =
        Rng::stream({hp.seed, kTagServerQuant, u64_of(client.id), u64_of(round), u64_of(t)});
    WireMessage logits_msg;
    logits_msg.kind = MsgKind::kTaskLogits;
    logits_msg.round = r32;
    logits_msg.step = t32;
    logits_msg.client = n32;
    logits_msg.payload = TaskLogitsBody{quantize(task.u, hp.bits, server_rng)};
    const WireMessage logits_rx = out.channel.transfer(logits_msg);
    const Tensor u_hat = dequantize(std::get<TaskLogitsBody>(logits_rx.payload).logits);

    const double loss_s = cross_entropy_value(u_hat, b1.y);
    const Tensor g_u = client_task_grad(u_hat, b1.y);

    // 4. Only the upstream gradient returns; the server steps and answers
    //    with the gradient at the cut.
    WireMessage grad_msg;
    grad_msg.kind = MsgKind::kUpstreamGrad;
    grad_msg.round = r32;
    grad_msg.step = t32;
    grad_msg.client = n32;
    grad_msg.payload = UpstreamGradBody{g_u};
    const WireMessage grad_rx = out.channel.transfer(grad_msg);
    const Tensor g_z = apply_upstream_grad(dup, task,
                                           std::get<UpstreamGradBody>(grad_rx.payload).grad,
                                           hp.outer_lr, hp.gamma);
    out.work += task.tape.work();

    WireMessage cut_msg;
    cut_msg.kind = MsgKind::kCutGrad;
    cut_msg.round = r32;
    cut_msg.step = t32;
    cut_msg.client = n32;
    cut_msg.payload = CutGradBody{g_z};
    const WireMessage cut_rx = out.channel.transfer(cut_msg);

    // 5. FOMAML outer step on the pre-adaptation parameters.
    outer_update(client, views, std::get<CutGradBody>(cut_rx.payload).grad, hp.gamma,
                 hp.outer_lr);
    out.work += views.adapt_work + views.run.tape.work();

    out.loss_c_sum += views.loss_c;
    out.loss_s_sum += loss_s;
    out.loss_csa_sum += lcsa;
    out.steps += 1;
  }
}

WireMessage model_message(MsgKind kind, uint32_t round, int client_id,
                          const ClientParams& params) {
  WireMessage msg;
  msg.kind = kind;
  msg.round = round;
  msg.step = 0;
  msg.client = static_cast<uint32_t>(client_id);
  std::vector<ParamBlock> blocks = params.prefix;
  blocks.push_back(params.head);  // head travels last
  if (kind == MsgKind::kModelUpload)
    msg.payload = ModelUploadBody{std::move(blocks)};
  else
    msg.payload = ModelDownloadBody{std::move(blocks)};
  return msg;
}

ClientParams params_from_blocks(std::vector<ParamBlock> blocks) {
  if (blocks.empty()) throw Error("model message with no blocks");
  ClientParams params;
  params.head = std::move(blocks.back());
  blocks.pop_back();
  params.prefix = std::move(blocks);
  return params;
}

}  // namespace

RoundMetrics run_round(SimState& state, const HyperParams& hp, int round,
                       const RoundHooks* hooks) {
  if (hp.local_steps.size() != state.clients.size())
    throw Error("run_round: need one local-step count per client");
  const uint32_t r32 = static_cast<uint32_t>(round);

  RoundMetrics metrics;
  metrics.round = round;

  // Deterministic probe of F and its gradient at v^r, before any training.
  const GlobalProbe probe = probe_global(state, hp);
  metrics.objective = probe.objective;
  metrics.grad_norm_sq = probe.grad_norm_sq;
  uint64_t work = probe.work;

  const std::vector<int> participants =
      select_participants(static_cast<int>(state.clients.size()), hp.participation, round,
                          hp.seed);

  // Fed server hands the current client-side models to the participants.
  for (int n : participants) {
    ClientState& client = state.clients[static_cast<size_t>(n)];
    const WireMessage rx = state.channel.transfer(
        model_message(MsgKind::kModelDownload, r32, n, client.params));
    client.params = params_from_blocks(std::get<ModelDownloadBody>(rx.payload).blocks);
  }

  // The main server duplicates theta per participant pair.
  std::vector<ServerState> dups;
  dups.reserve(participants.size());
  for (size_t i = 0; i < participants.size(); ++i) dups.push_back(duplicate(state.server));

  // Local steps: one logical task per participant, result slots disjoint, so
  // worker count cannot affect results. Hooks force single-worker execution.
  std::vector<StepPhaseResult> results(participants.size());
  for (StepPhaseResult& r : results)
    if (state.channel.recording()) r.channel.start_recording();

  const int worker_count =
      hooks ? 1 : std::max(1, std::min<int>(hp.workers, static_cast<int>(participants.size())));
  if (worker_count <= 1) {
    for (size_t i = 0; i < participants.size(); ++i)
      run_participant_steps(state.tmpl, state.dataset,
                            state.clients[static_cast<size_t>(participants[i])], dups[i], hp,
                            round, results[i], hooks);
  } else {
    std::vector<std::exception_ptr> failures(static_cast<size_t>(worker_count));
    std::vector<std::thread> workers;
    workers.reserve(static_cast<size_t>(worker_count));
    for (int w = 0; w < worker_count; ++w) {
      workers.emplace_back([&, w]() {
        try {
          for (size_t i = static_cast<size_t>(w); i < participants.size();
               i += static_cast<size_t>(worker_count))
            run_participant_steps(state.tmpl, state.dataset,
                                  state.clients[static_cast<size_t>(participants[i])], dups[i],
                                  hp, round, results[i], nullptr);
        } catch (...) {
          failures[static_cast<size_t>(w)] = std::current_exception();
        }
      });
    }
    for (std::thread& t : workers) t.join();
    for (const std::exception_ptr& e : failures)
      if (e) std::rethrow_exception(e);
  }

  // Merge worker-local traffic in participant order (stable transcripts).
  double loss_c_sum = 0.0, loss_s_sum = 0.0, loss_csa_sum = 0.0;
  int steps = 0;
  for (StepPhaseResult& r : results) {
    state.channel.absorb(std::move(r.channel));
    loss_c_sum += r.loss_c_sum;
    loss_s_sum += r.loss_s_sum;
    loss_csa_sum += r.loss_csa_sum;
    steps += r.steps;
    work += r.work;
  }

  // Participants upload their client-side models for aggregation.
  for (int n : participants) {
    ClientState& client = state.clients[static_cast<size_t>(n)];
    const WireMessage rx = state.channel.transfer(
        model_message(MsgKind::kModelUpload, r32, n, client.params));
    client.params = params_from_blocks(std::get<ModelUploadBody>(rx.payload).blocks);
  }

  const std::vector<double> zeta = zetas(state);
  aggregate_clients(state.clients, participants, hp.lambda, zeta);
  aggregate_server(state.server, dups, participants, zeta);

  // Entropy-gate probe on held-out data against the freshly aggregated
  // server: how often would each client exit locally right now?
  uint64_t local_hits = 0, gate_total = 0;
  for (ClientState& client : state.clients) {
    if (client.holdout_indices.empty()) continue;
    Rng gate_rng = Rng::stream({hp.seed, kTagGate, u64_of(client.id), u64_of(round)});
    ServerLink link{&state.server, &state.channel, r32, 0};
    for (int row : client.holdout_indices) {
      const Batch one = gather_batch(state.dataset, {row});
      const InferenceOutcome outcome = infer(state.tmpl, client, one.x, &link, hp.bits, gate_rng);
      local_hits += outcome.route == Route::kLocal ? 1 : 0;
      gate_total += 1;
    }
  }

  metrics.loss_c = steps > 0 ? loss_c_sum / steps : 0.0;
  metrics.loss_s = steps > 0 ? loss_s_sum / steps : 0.0;
  metrics.loss_csa = steps > 0 ? loss_csa_sum / steps : 0.0;
  metrics.bytes_up = state.channel.ledger().bytes_up(r32);
  metrics.bytes_down = state.channel.ledger().bytes_down(r32);
  metrics.local_exit_rate =
      gate_total > 0 ? static_cast<double>(local_hits) / static_cast<double>(gate_total) : 0.0;
  metrics.wall_ms = static_cast<double>(work) / 1e6;
  return metrics;
}

std::string render_metrics_csv(const std::vector<RoundMetrics>& rounds) {
  std::string out =
      "round,objective,grad_norm_sq,loss_c,loss_s,loss_csa,bytes_up,bytes_down,"
      "local_exit_rate,wall_ms\n";
  for (const RoundMetrics& m : rounds) {
    out += std::to_string(m.round);
    out += ',';
    out += format_double(m.objective);
    out += ',';
    out += format_double(m.grad_norm_sq);
    out += ',';
    out += format_double(m.loss_c);
    out += ',';
    out += format_double(m.loss_s);
    out += ',';
    out += format_double(m.loss_csa);
    out += ',';
    out += std::to_string(m.bytes_up);
    out += ',';
    out += std::to_string(m.bytes_down);
    out += ',';
    out += format_double(m.local_exit_rate);
    out += ',';
    out += format_double(m.wall_ms);
    out += '\n';
  }
  return out;
}

namespace {

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open for writing: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f) throw Error("failed writing: " + path);
}

struct DiagnosticsReport {
  double l_estimate = 0.0;
  double b_estimate = 0.0;
  double sigma_c_sq = 0.0;
  double sigma_s_sq = 0.0;
  double sigma_q_sq = 0.0;
  double g_max_sq = 0.0;
};

// Flattened global gradient in a fixed layout (clients in id order, then
// theta) so two probes can be compared coordinatewise.
std::vector<double> flat_probe_gradient(const SimState& state, const HyperParams& hp) {
  // Rebuild per-client gradients exactly as probe_global does, but keep the
  // raw vectors. This duplicates a little work for a lot of simplicity.
  std::vector<double> flat;
  ProbeAccum acc;
  acc.trunk.resize(state.server.trunk.size());
  for (size_t i = 0; i < acc.trunk.size(); ++i) {
    acc.trunk[i].w = Tensor::zeros(state.server.trunk[i].w.shape);
    acc.trunk[i].b = Tensor::zeros(state.server.trunk[i].b.shape);
  }
  acc.head.w = Tensor::zeros(state.server.head.w.shape);
  acc.head.b = Tensor::zeros(state.server.head.b.shape);

  for (const ClientState& client : state.clients) {
    // probe_client folds client coordinates into a scalar; for the flat
    // vector we need them explicitly, so run a private pass.
    const BackboneTemplate& tmpl = state.tmpl;
    const double p = client.shard.weight;
    const Batch full = gather_batch(state.dataset, client.train_indices);
    PrefixRun run = run_prefix(client.params.prefix, full.x, client.split_depth, tmpl.activation);
    const BoundBlock client_head = bind_block(run.tape, client.params.head);
    const NodeId lc =
        run.tape.softmax_cross_entropy(apply_affine(run.tape, client_head, run.out), full.y);
    std::vector<BoundBlock> trunk_bound;
    for (const ParamBlock& block : state.server.trunk)
      trunk_bound.push_back(bind_block(run.tape, block));
    const auto chain = [&](NodeId from, int from_depth) {
      NodeId cur = from;
      for (size_t i = 0; i < state.server.trunk.size(); ++i) {
        if (state.server.trunk[i].depth <= from_depth) continue;
        cur = apply_block(run.tape, trunk_bound[i], cur, tmpl.activation);
      }
      return cur;
    };
    const BoundBlock server_head = bind_block(run.tape, state.server.head);
    const NodeId ls = run.tape.softmax_cross_entropy(
        apply_affine(run.tape, server_head, chain(run.out, client.split_depth)), full.y);
    const Tensor z_value = run.tape.value(run.out);
    const NodeId za = run.tape.input(z_value);
    const NodeId zb = run.tape.input(rotate_rows(z_value));
    std::vector<uint8_t> indicator(full.y.size());
    for (size_t i = 0; i < full.y.size(); ++i)
      indicator[i] = full.y[i] == full.y[(i + 1) % full.y.size()] ? 1 : 0;
    const NodeId lcsa = run.tape.csa_pair_loss(chain(za, client.split_depth),
                                               chain(zb, client.split_depth),
                                               std::move(indicator), hp.margin);
    Gradients grads = run.tape.backward({Seed{lc, Tensor::vec({hp.gamma * p})},
                                         Seed{ls, Tensor::vec({(1.0 - hp.gamma) * p})},
                                         Seed{lcsa, Tensor::vec({hp.csa_weight * p})}});
    const auto append = [&flat](const Tensor& t) {
      flat.insert(flat.end(), t.data.begin(), t.data.end());
    };
    for (size_t i = 0; i < run.bound.size(); ++i) {
      append(grads.or_zeros(run.bound[i].w, client.params.prefix[i].w));
      append(grads.or_zeros(run.bound[i].b, client.params.prefix[i].b));
    }
    append(grads.or_zeros(client_head.w, client.params.head.w));
    append(grads.or_zeros(client_head.b, client.params.head.b));
    for (size_t i = 0; i < trunk_bound.size(); ++i) {
      add_scaled(acc.trunk[i].w, grads.or_zeros(trunk_bound[i].w, state.server.trunk[i].w), 1.0);
      add_scaled(acc.trunk[i].b, grads.or_zeros(trunk_bound[i].b, state.server.trunk[i].b), 1.0);
    }
    add_scaled(acc.head.w, grads.or_zeros(server_head.w, state.server.head.w), 1.0);
    add_scaled(acc.head.b, grads.or_zeros(server_head.b, state.server.head.b), 1.0);
  }
  for (const BlockGrad& g : acc.trunk) {
    flat.insert(flat.end(), g.w.data.begin(), g.w.data.end());
    flat.insert(flat.end(), g.b.data.begin(), g.b.data.end());
  }
  flat.insert(flat.end(), acc.head.w.data.begin(), acc.head.w.data.end());
  flat.insert(flat.end(), acc.head.b.data.begin(), acc.head.b.data.end());
  return flat;
}

void perturb_all_params(SimState& state, double scale, Rng& rng) {
  const auto jiggle = [&](Tensor& t) {
    for (double& v : t.data) v += scale * rng.normal();
  };
  for (ClientState& c : state.clients) {
    for (ParamBlock& b : c.params.prefix) {
      jiggle(b.w);
      jiggle(b.b);
    }
    jiggle(c.params.head.w);
    jiggle(c.params.head.b);
  }
  for (ParamBlock& b : state.server.trunk) {
    jiggle(b.w);
    jiggle(b.b);
  }
  jiggle(state.server.head.w);
  jiggle(state.server.head.b);
}

DiagnosticsReport run_diagnostics(const SimState& state, const HyperParams& hp,
                                  const RunConfig& config) {
  DiagnosticsReport report;

  // Empirical smoothness: max ||grad F(x) - grad F(y)|| / ||x - y|| over
  // random nearby parameter pairs (Assumption 1 stand-in).
  for (int pair = 0; pair < config.l_probe_pairs; ++pair) {
    Rng rng = Rng::stream({hp.seed, kTagDiag, u64_of(pair)});
    SimState a = state;
    SimState b = state;
    perturb_all_params(a, 0.05, rng);
    perturb_all_params(b, 0.05, rng);
    const std::vector<double> ga = flat_probe_gradient(a, hp);
    const std::vector<double> gb = flat_probe_gradient(b, hp);
    // Distance between the two perturbed parameter vectors: reconstruct the
    // perturbations by replaying the draws.
    Rng replay = Rng::stream({hp.seed, kTagDiag, u64_of(pair)});
    double dist_sq = 0.0;
    std::vector<double> delta_a, delta_b;
    size_t param_count = ga.size();
    delta_a.reserve(param_count);
    for (size_t i = 0; i < param_count; ++i) delta_a.push_back(0.05 * replay.normal());
    for (size_t i = 0; i < param_count; ++i) {
      const double d = 0.05 * replay.normal() - delta_a[i];
      dist_sq += d * d;
    }
    double grad_dist_sq = 0.0;
    for (size_t i = 0; i < ga.size(); ++i) {
      const double d = ga[i] - gb[i];
      grad_dist_sq += d * d;
    }
    if (dist_sq > 0.0)
      report.l_estimate = std::max(report.l_estimate, std::sqrt(grad_dist_sq / dist_sq));
  }

  // Client dissimilarity (Assumption 2): sqrt(sum p_n ||grad F_n||^2 /
  // ||grad F||^2) at the current parameters.
  const ProbeAccum acc = probe_all(state, hp);
  double theta_sq = 0.0;
  for (const BlockGrad& g : acc.trunk) theta_sq += squared_norm(g.w) + squared_norm(g.b);
  theta_sq += squared_norm(acc.head.w) + squared_norm(acc.head.b);
  const double global_sq = acc.client_sq + theta_sq;
  if (global_sq > 0.0) report.b_estimate = std::sqrt(acc.per_client_sq_sum / global_sq);

  // Stochastic gradient noise (Assumption 3): mean squared deviation of
  // mini-batch gradients from the full-shard gradient, client and server
  // sides separately; plus the inner-gradient second moment bound G
  // (Assumption 5) as an observed max.
  const AdaptConfig cfg{hp.inner_lr, 1, hp.batch_size};
  double noise_c = 0.0, noise_s = 0.0;
  uint64_t noise_count = 0;
  for (const ClientState& client : state.clients) {
    const Batch full = gather_batch(state.dataset, client.train_indices);
    const auto client_grad = [&](const Batch& batch) {
      PrefixRun run =
          run_prefix(client.params.prefix, batch.x, client.split_depth, state.tmpl.activation);
      const BoundBlock head = bind_block(run.tape, client.params.head);
      const NodeId lc =
          run.tape.softmax_cross_entropy(apply_affine(run.tape, head, run.out), batch.y);
      Gradients grads = run.tape.backward(lc);
      std::vector<double> flat;
      for (size_t i = 0; i < run.bound.size(); ++i) {
        const Tensor gw = grads.or_zeros(run.bound[i].w, client.params.prefix[i].w);
        const Tensor gb = grads.or_zeros(run.bound[i].b, client.params.prefix[i].b);
        flat.insert(flat.end(), gw.data.begin(), gw.data.end());
        flat.insert(flat.end(), gb.data.begin(), gb.data.end());
      }
      const Tensor gw = grads.or_zeros(head.w, client.params.head.w);
      const Tensor gb = grads.or_zeros(head.b, client.params.head.b);
      flat.insert(flat.end(), gw.data.begin(), gw.data.end());
      flat.insert(flat.end(), gb.data.begin(), gb.data.end());
      return flat;
    };
    const auto server_grad = [&](const Batch& batch) {
      const Tensor z = forward_prefix(client.params.prefix, batch.x, client.split_depth,
                                      state.tmpl.activation);
      TaskRun run = u_shaped_task_forward(state.server, state.tmpl, z, client.split_depth);
      Gradients grads = run.tape.backward(
          {Seed{run.tape.softmax_cross_entropy(run.u_node, batch.y), Tensor::vec({1.0})}});
      std::vector<double> flat;
      for (size_t i = 0; i < run.trunk_bound.size(); ++i) {
        const Tensor gw = grads.or_zeros(run.trunk_bound[i].w, state.server.trunk[i].w);
        const Tensor gb = grads.or_zeros(run.trunk_bound[i].b, state.server.trunk[i].b);
        flat.insert(flat.end(), gw.data.begin(), gw.data.end());
        flat.insert(flat.end(), gb.data.begin(), gb.data.end());
      }
      const Tensor gw = grads.or_zeros(run.head_bound.w, state.server.head.w);
      const Tensor gb = grads.or_zeros(run.head_bound.b, state.server.head.b);
      flat.insert(flat.end(), gw.data.begin(), gw.data.end());
      flat.insert(flat.end(), gb.data.begin(), gb.data.end());
      return flat;
    };

    const std::vector<double> full_c = client_grad(full);
    const std::vector<double> full_s = server_grad(full);
    double g_sq = 0.0;
    for (double v : full_c) g_sq += v * v;
    report.g_max_sq = std::max(report.g_max_sq, g_sq);

    for (int probe = 0; probe < config.noise_probes; ++probe) {
      Rng rng = Rng::stream({hp.seed, kTagNoise, u64_of(client.id), u64_of(probe)});
      const Batch batch =
          gather_batch(state.dataset,
                       draw_with_replacement(client.train_indices, hp.batch_size, rng));
      const std::vector<double> gc = client_grad(batch);
      const std::vector<double> gs = server_grad(batch);
      double dc = 0.0, ds = 0.0;
      for (size_t i = 0; i < gc.size(); ++i) dc += (gc[i] - full_c[i]) * (gc[i] - full_c[i]);
      for (size_t i = 0; i < gs.size(); ++i) ds += (gs[i] - full_s[i]) * (gs[i] - full_s[i]);
      noise_c += dc;
      noise_s += ds;
      noise_count += 1;
    }
  }
  if (noise_count > 0) {
    report.sigma_c_sq = noise_c / static_cast<double>(noise_count);
    report.sigma_s_sq = noise_s / static_cast<double>(noise_count);
  }

  // Quantization noise (Assumption 4): mean squared dequantization error on
  // a representative feature tensor.
  if (!state.clients.empty() && config.noise_probes > 0) {
    const ClientState& client = state.clients.front();
    const Batch full = gather_batch(state.dataset, client.train_indices);
    const Tensor z = forward_prefix(client.params.prefix, full.x, client.split_depth,
                                    state.tmpl.activation);
    double err = 0.0;
    for (int probe = 0; probe < config.noise_probes; ++probe) {
      Rng rng = Rng::stream({hp.seed, kTagQuantProbe, u64_of(probe)});
      const Tensor back = dequantize(quantize(z, hp.bits, rng));
      double e = 0.0;
      for (size_t i = 0; i < z.data.size(); ++i)
        e += (back.data[i] - z.data[i]) * (back.data[i] - z.data[i]);
      err += e / static_cast<double>(z.data.size());
    }
    report.sigma_q_sq = err / config.noise_probes;
  }
  return report;
}

}  // namespace

ExperimentResult run_experiment(const RunConfig& config) {
  SimState state = build_sim(config);
  const HyperParams hp = hyper_from_config(config);

  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(config.out_dir, ec);
  if (ec) throw Error("cannot create output directory " + config.out_dir + ": " + ec.message());

  if (config.record_transcript) state.channel.start_recording();

  ExperimentResult result;
  result.rounds.reserve(static_cast<size_t>(hp.rounds));
  for (int r = 0; r < hp.rounds; ++r) result.rounds.push_back(run_round(state, hp, r));

  // Final probe at v^R closes the running-minimum window.
  const GlobalProbe final_probe = probe_global(state, hp);
  double min_grad = final_probe.grad_norm_sq;
  double total_wall = 0.0;
  uint64_t total_up = 0, total_down = 0;
  for (const RoundMetrics& m : result.rounds) {
    min_grad = std::min(min_grad, m.grad_norm_sq);
    total_wall += m.wall_ms;
    total_up += m.bytes_up;
    total_down += m.bytes_down;
  }

  // Deployment: personalize from the final aggregated model and measure
  // held-out local accuracy before/after.
  std::vector<double> acc_pre, acc_post;
  const AdaptConfig cfg{config.inner_lr, config.inner_steps, config.batch_size};
  for (ClientState& client : state.clients) {
    acc_pre.push_back(
        local_accuracy(state.tmpl, client.params, state.dataset, client.holdout_indices));
    Rng rng = Rng::stream({hp.seed, kTagPersonalize, u64_of(client.id)});
    const ClientParams global = client.params;  // phi^R, h^R for this split depth
    personalize(state.tmpl, client, global, state.dataset, cfg, config.personalize_steps, rng);
    acc_post.push_back(
        local_accuracy(state.tmpl, client.params, state.dataset, client.holdout_indices));
  }

  // Fallback (forced offload) accuracy at every template exit depth each
  // client can reach, pooled across clients.
  std::vector<std::pair<int, double>> fallback;
  for (int exit_depth : state.tmpl.exit_set) {
    uint64_t hits = 0, total = 0;
    for (const ClientState& client : state.clients) {
      if (client.split_depth < exit_depth || client.holdout_indices.empty()) continue;
      ClientState probe_client_state = client;
      probe_client_state.split_depth = exit_depth;
      probe_client_state.entropy_threshold = 0.0;  // entropy >= 0: always offloads
      Rng rng = Rng::stream({hp.seed, kTagFallback, u64_of(client.id), u64_of(exit_depth)});
      ServerLink link{&state.server, &state.channel, static_cast<uint32_t>(hp.rounds), 0};
      for (int row : client.holdout_indices) {
        const Batch one = gather_batch(state.dataset, {row});
        const InferenceOutcome outcome =
            infer(state.tmpl, probe_client_state, one.x, &link, hp.bits, rng);
        hits += outcome.prediction == one.y.front() ? 1 : 0;
        total += 1;
      }
    }
    fallback.emplace_back(exit_depth,
                          total > 0 ? static_cast<double>(hits) / static_cast<double>(total)
                                    : 0.0);
  }

  // Assemble the summary (flat key = value lines, deterministic order).
  auto& summary = result.summary;
  const auto put = [&summary](const std::string& key, const std::string& value) {
    summary.emplace_back(key, value);
  };
  put("rounds", std::to_string(hp.rounds));
  put("clients", std::to_string(config.clients));
  put("objective_initial", format_double(result.rounds.front().objective));
  put("objective_final", format_double(final_probe.objective));
  put("grad_norm_sq_initial", format_double(result.rounds.front().grad_norm_sq));
  put("grad_norm_sq_final", format_double(final_probe.grad_norm_sq));
  put("min_grad_norm_sq", format_double(min_grad));
  put("bytes_up_total", std::to_string(total_up));
  put("bytes_down_total", std::to_string(total_down));
  put("wall_ms_total", format_double(total_wall));
  put("local_exit_rate_last_round", format_double(result.rounds.back().local_exit_rate));
  double mean_pre = 0.0, mean_post = 0.0;
  for (size_t i = 0; i < state.clients.size(); ++i) {
    put("client_" + std::to_string(i) + "_holdout_accuracy_pre", format_double(acc_pre[i]));
    put("client_" + std::to_string(i) + "_holdout_accuracy_post", format_double(acc_post[i]));
    mean_pre += acc_pre[i];
    mean_post += acc_post[i];
  }
  put("mean_holdout_accuracy_pre", format_double(mean_pre / state.clients.size()));
  put("mean_holdout_accuracy_post", format_double(mean_post / state.clients.size()));
  for (const auto& [depth, acc] : fallback)
    put("fallback_accuracy_depth_" + std::to_string(depth), format_double(acc));

  if (config.diagnostics) {
    const DiagnosticsReport diag = run_diagnostics(state, hp, config);
    put("l_estimate", format_double(diag.l_estimate));
    put("b_estimate", format_double(diag.b_estimate));
    put("sigma_c_sq", format_double(diag.sigma_c_sq));
    put("sigma_s_sq", format_double(diag.sigma_s_sq));
    put("sigma_q_sq", format_double(diag.sigma_q_sq));
    put("g_max_sq", format_double(diag.g_max_sq));
    // Assumption 7 guidance with k = k' = k'' = 1: warn, never enforce.
    if (diag.l_estimate > 0.0 && config.inner_lr > 1.0 / diag.l_estimate)
      std::fprintf(stderr, "warning: inner-lr %s exceeds 1/L estimate %s\n",
                   format_double(config.inner_lr).c_str(),
                   format_double(1.0 / diag.l_estimate).c_str());
    if (diag.l_estimate > 0.0) {
      const double cap = 1.0 / (diag.l_estimate * (diag.b_estimate * diag.b_estimate + 1.0));
      if (config.outer_lr > cap)
        std::fprintf(stderr, "warning: outer-lr %s exceeds 1/(L(B^2+1)) estimate %s\n",
                     format_double(config.outer_lr).c_str(), format_double(cap).c_str());
    }
  }

  // Files.
  const fs::path dir(config.out_dir);
  result.metrics_path = (dir / "metrics.csv").string();
  write_text_file(result.metrics_path, render_metrics_csv(result.rounds));

  std::string summary_text;
  for (const auto& [k, v] : result.summary) summary_text += k + " = " + v + "\n";
  result.summary_path = (dir / "summary.txt").string();
  write_text_file(result.summary_path, summary_text);

  result.checkpoint_path = (dir / "checkpoint.hsfl").string();
  write_checkpoint(result.checkpoint_path, state.clients, state.server);

  if (config.record_transcript) {
    result.transcript_path = (dir / "transcript.bin").string();
    const std::vector<uint8_t>& t = state.channel.transcript();
    std::ofstream f(result.transcript_path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot open for writing: " + result.transcript_path);
    f.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size()));
    if (!f) throw Error("failed writing: " + result.transcript_path);
  }

  if (config.export_data) {
    std::string csv = "index,label";
    for (int j = 0; j < state.dataset.features.cols(); ++j) csv += ",f" + std::to_string(j);
    csv += '\n';
    for (int i = 0; i < state.dataset.size(); ++i) {
      csv += std::to_string(i) + ',' + std::to_string(state.dataset.labels[static_cast<size_t>(i)]);
      for (int j = 0; j < state.dataset.features.cols(); ++j)
        csv += ',' + format_double(state.dataset.features.at(i, j));
      csv += '\n';
    }
    write_text_file((dir / "dataset.csv").string(), csv);
  }

  return result;
}

}  // namespace hsfl
