#include "hsfl/config.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "hsfl/common.hpp"

namespace hsfl {

std::vector<int> parse_int_list(const std::string& text) {
  std::vector<int> out;
  std::string token;
  std::istringstream in(text);
  while (std::getline(in, token, ',')) {
    // Trim spaces so "2, 3, 4" parses too.
    const auto l = token.find_first_not_of(" \t");
    const auto r = token.find_last_not_of(" \t");
    if (l == std::string::npos) continue;
    token = token.substr(l, r - l + 1);
    size_t used = 0;
    int v;
    try {
      v = std::stoi(token, &used);
    } catch (const std::exception&) {
      throw Error("not an integer list entry: '" + token + "'");
    }
    if (used != token.size()) throw Error("not an integer list entry: '" + token + "'");
    out.push_back(v);
  }
  return out;
}

std::string format_int_list(const std::vector<int>& values) {
  std::string out;
  for (size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(values[i]);
  }
  return out;
}

std::string format_double(double v) {
  // Shortest representation that parses back to exactly v.
  for (int prec = 1; prec <= 17; ++prec) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    double back = 0.0;
    std::sscanf(buf, "%lf", &back);
    if (back == v) return buf;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> RunConfig::validate() const {
  std::vector<std::string> problems;
  const auto bad = [&](const std::string& key, const std::string& why) {
    problems.push_back(key + ": " + why);
  };

  if (classes < 2) bad("classes", "need at least 2");
  if (dim < 1) bad("dim", "must be positive");
  if (classes > 2 * dim) bad("classes", "at most 2*dim classes fit the mixture layout");
  if (samples < classes) bad("samples", "need at least one sample per class");
  if (clients >= 1 && samples < clients) bad("samples", "need at least one sample per client");
  if (concentration <= 0.0) bad("concentration", "must be positive");
  if (spread < 0.0) bad("spread", "must be non-negative");

  if (depth < 2) bad("depth", "need at least 2 blocks (one client-side, one server-side)");
  if (width < 1) bad("width", "must be positive");
  if (exit_set.empty()) {
    bad("exit-set", "must be non-empty");
  } else {
    if (!std::is_sorted(exit_set.begin(), exit_set.end()) ||
        std::adjacent_find(exit_set.begin(), exit_set.end()) != exit_set.end())
      bad("exit-set", "must be sorted and unique");
    if (exit_set.front() < 1 || exit_set.back() > depth - 1)
      bad("exit-set", "entries must lie in 1..depth-1");
  }
  if (!split_depths.empty()) {
    if (static_cast<int>(split_depths.size()) != clients)
      bad("split-depths", "need one entry per client");
    for (int s : split_depths)
      if (std::find(exit_set.begin(), exit_set.end(), s) == exit_set.end()) {
        bad("split-depths", "every entry must be in exit-set");
        break;
      }
  }

  if (clients < 1) bad("clients", "need at least 1");
  if (rounds < 1) bad("rounds", "need at least 1");
  if (local_steps < 1) bad("local-steps", "need at least 1");
  if (participation <= 0.0 || participation > 1.0) bad("participation", "must be in (0,1]");
  if (gamma < 0.0 || gamma > 1.0) bad("gamma", "must be in [0,1]");
  if (lambda < 0.0 || lambda > 1.0) bad("lambda", "must be in [0,1]");

  if (inner_lr < 0.0) bad("inner-lr", "must be non-negative");
  if (outer_lr < 0.0) bad("outer-lr", "must be non-negative");
  if (inner_steps < 0) bad("inner-steps", "must be non-negative");
  if (batch_size < 1) bad("batch-size", "must be positive");

  if (bits < 1 || bits > 24) bad("bits", "must be in 1..24");
  if (margin <= 0.0) bad("margin", "must be positive");
  if (csa_weight < 0.0) bad("csa-weight", "must be non-negative");
  if (csa_lr < 0.0) bad("csa-lr", "must be non-negative");

  if (entropy_threshold < 0.0) bad("entropy-threshold", "must be non-negative");
  if (holdout_frac < 0.0 || holdout_frac >= 1.0) bad("holdout-frac", "must be in [0,1)");
  if (personalize_steps < 0) bad("personalize-steps", "must be non-negative");

  if (workers < 1) bad("workers", "need at least 1");
  if (out_dir.empty()) bad("out-dir", "must not be empty");
  if (l_probe_pairs < 0) bad("l-probe-pairs", "must be non-negative");
  if (noise_probes < 0) bad("noise-probes", "must be non-negative");
  return problems;
}

std::string RunConfig::to_key_values() const {
  std::ostringstream out;
  out << "classes = " << classes << '\n';
  out << "dim = " << dim << '\n';
  out << "samples = " << samples << '\n';
  out << "concentration = " << format_double(concentration) << '\n';
  out << "spread = " << format_double(spread) << '\n';
  out << "depth = " << depth << '\n';
  out << "width = " << width << '\n';
  out << "exit-set = " << format_int_list(exit_set) << '\n';
  if (!split_depths.empty()) out << "split-depths = " << format_int_list(split_depths) << '\n';
  out << "clients = " << clients << '\n';
  out << "rounds = " << rounds << '\n';
  out << "local-steps = " << local_steps << '\n';
  out << "participation = " << format_double(participation) << '\n';
  out << "gamma = " << format_double(gamma) << '\n';
  out << "lambda = " << format_double(lambda) << '\n';
  out << "inner-lr = " << format_double(inner_lr) << '\n';
  out << "outer-lr = " << format_double(outer_lr) << '\n';
  out << "inner-steps = " << inner_steps << '\n';
  out << "batch-size = " << batch_size << '\n';
  out << "bits = " << bits << '\n';
  out << "margin = " << format_double(margin) << '\n';
  out << "csa-weight = " << format_double(csa_weight) << '\n';
  out << "csa-lr = " << format_double(csa_lr) << '\n';
  out << "stochastic-depth = " << (stochastic_depth ? "true" : "false") << '\n';
  out << "entropy-threshold = " << format_double(entropy_threshold) << '\n';
  out << "holdout-frac = " << format_double(holdout_frac) << '\n';
  out << "personalize-steps = " << personalize_steps << '\n';
  out << "seed = " << seed << '\n';
  out << "workers = " << workers << '\n';
  out << "out-dir = " << out_dir << '\n';
  out << "record-transcript = " << (record_transcript ? "true" : "false") << '\n';
  out << "diagnostics = " << (diagnostics ? "true" : "false") << '\n';
  out << "export-data = " << (export_data ? "true" : "false") << '\n';
  out << "l-probe-pairs = " << l_probe_pairs << '\n';
  out << "noise-probes = " << noise_probes << '\n';
  return out.str();
}

}  // namespace hsfl
