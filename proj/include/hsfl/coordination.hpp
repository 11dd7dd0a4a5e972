#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "hsfl/client.hpp"
#include "hsfl/config.hpp"
#include "hsfl/server.hpp"

namespace hsfl {

struct HyperParams {
  int rounds = 50;
  std::vector<int> local_steps;  // T_n per client
  double participation = 1.0;    // rho
  double gamma = 0.5;
  double lambda = 0.0;
  double inner_lr = 0.05;
  double outer_lr = 0.05;
  double margin = 1.0;
  int bits = 8;
  uint64_t seed = 17;
  // Loop mechanics carried with the hyperparameters.
  int inner_steps = 1;
  int batch_size = 32;
  double csa_weight = 1.0;
  double csa_lr = 0.05;
  bool stochastic_depth = true;
  int workers = 1;
};

struct RoundMetrics {
  int round = 0;
  double objective = 0.0;      // F(v^r), probed at round start
  double grad_norm_sq = 0.0;   // ||grad F(v^r)||^2, same probe
  double loss_c = 0.0;         // mean over the round's local steps
  double loss_s = 0.0;
  double loss_csa = 0.0;
  uint64_t bytes_up = 0;
  uint64_t bytes_down = 0;
  double local_exit_rate = 0.0;
  double wall_ms = 0.0;  // simulated: multiply-accumulates / 1e6
};

struct SimState {
  BackboneTemplate tmpl;
  Dataset dataset;
  std::vector<ClientState> clients;
  ServerState server;
  Channel channel;  // master channel: all traffic ends up accounted here
};

// Builds template, dataset, shards, clients, and server from a validated
// config (split depths round-robin over exit_set unless pinned).
SimState build_sim(const RunConfig& config);
HyperParams hyper_from_config(const RunConfig& config);

// ceil(participation * clients) distinct ids, uniform, sorted; a pure
// function of (seed, round).
std::vector<int> select_participants(int clients, double participation, int round, uint64_t seed);

// Depth-aware FedAvg: per depth, the federated block averages the
// participants possessing that depth (zeta renormalized over them); every
// client then receives lambda*own + (1-lambda)*federated at the depths it
// holds. Heads aggregate per exit depth the same way. Depths no participant
// holds keep each owner's block.
void aggregate_clients(std::vector<ClientState>& clients, const std::vector<int>& participants,
                       double lambda, const std::vector<double>& zeta);

// zeta-weighted coordinatewise average of the participants' duplicates
// (weights renormalized over participants) into the master.
void aggregate_server(ServerState& master, const std::vector<ServerState>& duplicates,
                      const std::vector<int>& participants, const std::vector<double>& zeta);

// Deterministic full-batch probe of the global objective
//   F(v) = sum_n p_n (gamma*l_C + (1-gamma)*l_S + csa_weight*l_CSA)
// and its squared gradient norm over v = ({phi_n, h_n}, theta); quantization
// and exit-depth sampling are disabled, CSA gradients stop at the cut, and
// p_n = zeta_n.
struct GlobalProbe {
  double objective = 0.0;
  double grad_norm_sq = 0.0;
  uint64_t work = 0;
};
GlobalProbe probe_global(const SimState& state, const HyperParams& hp);
double estimate_global_grad_norm(const SimState& state, const HyperParams& hp);

// Test instrumentation around each csa_update. Supplying hooks forces
// single-worker execution.
struct RoundHooks {
  std::function<void(int client, int step, const ServerState& dup)> before_csa;
  std::function<void(int client, int step, const ServerState& dup)> after_csa;
};

RoundMetrics run_round(SimState& state, const HyperParams& hp, int round,
                       const RoundHooks* hooks = nullptr);

struct ExperimentResult {
  std::vector<RoundMetrics> rounds;
  // Ordered key/value pairs, exactly what summary.txt contains.
  std::vector<std::pair<std::string, std::string>> summary;
  std::string metrics_path;
  std::string summary_path;
  std::string checkpoint_path;
  std::string transcript_path;  // empty unless record_transcript
};

// The full pipeline: R rounds, final probe, personalization, accuracy
// sweeps, and all output files under config.out_dir.
ExperimentResult run_experiment(const RunConfig& config);

std::string render_metrics_csv(const std::vector<RoundMetrics>& rounds);

}  // namespace hsfl
