#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace hsfl {

// Full experiment configuration. Defaults are the reference setup; the CLI
// exposes every field as a kebab-case flag and as a `key = value` line in a
// flat config file.
struct RunConfig {
  // Data.
  int classes = 4;
  int dim = 16;
  int samples = 4096;
  double concentration = 0.5;
  double spread = 0.4;

  // Backbone.
  int depth = 6;
  int width = 32;
  std::vector<int> exit_set = {2, 3, 4};
  std::vector<int> split_depths;  // per client; empty = round-robin over exit_set

  // Federation.
  int clients = 8;
  int rounds = 50;
  int local_steps = 5;
  double participation = 1.0;
  double gamma = 0.5;
  double lambda = 0.0;

  // Optimization.
  double inner_lr = 0.05;
  double outer_lr = 0.05;
  int inner_steps = 1;
  int batch_size = 32;

  // Offloading and alignment.
  int bits = 8;
  double margin = 1.0;
  double csa_weight = 1.0;
  double csa_lr = 0.05;
  bool stochastic_depth = true;

  // Deployment.
  double entropy_threshold = 0.5;
  double holdout_frac = 0.2;
  int personalize_steps = 25;

  // Execution.
  uint64_t seed = 17;
  int workers = 1;
  std::string out_dir = "out";
  bool record_transcript = false;
  bool diagnostics = false;
  bool export_data = false;
  int l_probe_pairs = 4;
  int noise_probes = 8;

  // Returns one problem description per violated invariant, each naming the
  // offending key; empty means valid.
  std::vector<std::string> validate() const;

  // The flat `key = value` form (round-trips through the CLI config parser).
  std::string to_key_values() const;
};

// Parses "1,2,3" (used by the exit-set / split-depths flags).
std::vector<int> parse_int_list(const std::string& text);
std::string format_int_list(const std::vector<int>& values);

// Shortest decimal form that round-trips a double exactly.
std::string format_double(double v);

}  // namespace hsfl
