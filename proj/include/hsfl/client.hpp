#pragma once

#include <optional>
#include <vector>

#include "hsfl/data.hpp"
#include "hsfl/quantize.hpp"
#include "hsfl/server.hpp"
#include "hsfl/wire.hpp"

namespace hsfl {

struct AdaptConfig {
  double inner_lr = 0.05;  // alpha
  int inner_steps = 1;     // S
  int batch_size = 32;
};

// Client-side model: prefix blocks at depths 1..split_depth plus the exit
// head serving that depth.
struct ClientParams {
  std::vector<ParamBlock> prefix;
  ParamBlock head;
};

struct ClientState {
  int id = 0;
  ClientParams params;
  int split_depth = 0;         // n(phi), must be in the template exit_set
  double entropy_threshold = 0.0;
  Shard shard;
  std::vector<int> train_indices;    // shard minus holdout
  std::vector<int> holdout_indices;  // reserved for evaluation
  uint64_t run_seed = 0;             // folded into per-(round, step) streams
};

ClientState init_client(const BackboneTemplate& tmpl, int id, int split_depth,
                        double entropy_threshold, Shard shard, double holdout_frac,
                        uint64_t run_seed);

// The two complementary feature views of one local step.
struct ViewPair {
  Tensor z_dagger;   // branch-dagger features at exit_depth
  Tensor z_ddagger;  // branch-ddagger features at split_depth
  int exit_depth = 0;
  std::vector<uint8_t> indicator;  // 1 iff y1[i] == y2[i]
};

// S full-batch SGD steps on the client loss l_C = CE(head(prefix(x)), y).
// The input params are untouched; `work` (if given) accumulates tape MACs.
ClientParams adapt(const BackboneTemplate& tmpl, const ClientParams& params, const Batch& batch,
                   const AdaptConfig& cfg, uint64_t* work = nullptr);

// Everything the outer update needs from one pair of adapted branches. The
// retained tape runs x1 through the ddagger branch: z_ddagger and l_C both
// live on it so one backward covers the gamma*l_C seed and the server's cut
// gradient (straight-through at the pre-quantization z node).
struct ViewWork {
  ViewPair views;
  PrefixRun run;               // ddagger tape; run.out is the z node
  NodeId z_node = -1;
  BoundBlock head_bound;       // adapted ddagger head on run.tape
  NodeId loss_c_node = -1;
  double loss_c = 0.0;
  ClientParams adapted_dagger;
  ClientParams adapted_ddagger;
  uint64_t adapt_work = 0;
  bool spent = false;
};

// Adapts on B1 -> dagger, on B2 -> ddagger; z_dagger = dagger prefix at
// depth K on x2, z_ddagger = ddagger prefix at split_depth on x1.
ViewWork make_views(const BackboneTemplate& tmpl, const ClientState& state, const Batch& b1,
                    const Batch& b2, int exit_depth, const AdaptConfig& cfg);

// K uniform over exit_set intersected with {1..split_depth}.
int sample_exit_depth(const BackboneTemplate& tmpl, const ClientState& state, Rng& rng);

// FOMAML outer step: gradients of gamma*l_C (client tape) plus the server's
// returned cut gradient g_z (already (1-gamma)-scaled) are taken at the
// adapted ddagger parameters and applied to the pre-adaptation parameters
// with step outer_lr. Throws if the work bundle was already consumed.
void outer_update(ClientState& state, ViewWork& work, const Tensor& g_z, double gamma,
                  double outer_lr);

enum class Route { kLocal, kOffload };

struct InferenceOutcome {
  int prediction = -1;
  Route route = Route::kLocal;
};

// Simulation handle to the main server for fallback inference.
struct ServerLink {
  const ServerState* server = nullptr;
  Channel* channel = nullptr;
  uint32_t round = 0;
  uint32_t step = 0;
};

// Entropy gate: local exit iff the softmax entropy of the local logits is
// strictly below entropy_threshold; otherwise the quantized feature goes to
// the server and its (quantized) logits come back.
InferenceOutcome infer(const BackboneTemplate& tmpl, const ClientState& state, const Tensor& x_row,
                       const ServerLink* link, int bits, Rng& rng);

// Replaces the client's params with Adapt(global; D_n): `steps` mini-batch
// SGD steps over the client's training indices (epoch-shuffled).
void personalize(const BackboneTemplate& tmpl, ClientState& state, const ClientParams& global,
                 const Dataset& ds, const AdaptConfig& cfg, int steps, Rng& rng);

// Mean argmax accuracy of the client's own (local-exit) model on `rows`.
double local_accuracy(const BackboneTemplate& tmpl, const ClientParams& params, const Dataset& ds,
                      const std::vector<int>& rows);

// Gradient of mean cross-entropy at the given logits (the client-side l_S
// evaluation against its private labels: g_u sent upstream).
Tensor client_task_grad(const Tensor& logits, const std::vector<int>& labels);

}  // namespace hsfl
