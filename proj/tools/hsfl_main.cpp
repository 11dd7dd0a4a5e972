// hsfl command line: `run` executes an experiment, `audit` replays a wire
// transcript and checks the privacy envelope, `inspect` lists a checkpoint.
#include <charconv>
#include <cinttypes>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "hsfl/checkpoint.hpp"
#include "hsfl/coordination.hpp"

namespace {

struct RunFlags {
  hsfl::RunConfig cfg;
  std::string exit_set_text;
  std::string split_depths_text;
  std::string config_path;
};

// One entry per `run` option so values can also arrive from a flat
// key=value config file with the precedence flag > environment > file.
struct FileKey {
  CLI::Option* option = nullptr;                   // count() > 0 means flag/env won
  std::function<bool(const std::string&)> parse;   // false: value malformed
};

class RunOptions {
 public:
  RunOptions(CLI::App& run, RunFlags& f) : run_(run), flags_(f) {}

  void attach() {
    run_.add_option("--config", flags_.config_path, "flat key=value config file");
    number("--classes", flags_.cfg.classes, "number of classes");
    number("--dim", flags_.cfg.dim, "input feature dimension");
    number("--samples", flags_.cfg.samples, "total dataset size");
    number("--concentration", flags_.cfg.concentration, "Dirichlet concentration");
    number("--spread", flags_.cfg.spread, "per-class Gaussian spread");
    number("--depth", flags_.cfg.depth, "backbone depth D");
    number("--width", flags_.cfg.width, "hidden width");
    text("--exit-set", flags_.exit_set_text, "candidate exit depths, e.g. 2,3,4");
    text("--split-depths", flags_.split_depths_text,
         "per-client split depths (default: round-robin over exit-set)");
    number("--clients", flags_.cfg.clients, "number of clients N");
    number("--rounds", flags_.cfg.rounds, "federated rounds R");
    number("--local-steps", flags_.cfg.local_steps, "local steps per round T");
    number("--participation", flags_.cfg.participation, "participation fraction rho");
    number("--gamma", flags_.cfg.gamma, "client/server loss mix gamma");
    number("--lambda", flags_.cfg.lambda, "self-mixing weight lambda");
    number("--inner-lr", flags_.cfg.inner_lr, "adaptation step size alpha");
    number("--outer-lr", flags_.cfg.outer_lr, "meta / server step size beta");
    number("--inner-steps", flags_.cfg.inner_steps, "adaptation steps S");
    number("--batch-size", flags_.cfg.batch_size, "local mini-batch size");
    number("--bits", flags_.cfg.bits, "feature/logit quantization bits");
    number("--margin", flags_.cfg.margin, "contrastive margin m");
    number("--csa-weight", flags_.cfg.csa_weight, "alignment loss weight");
    number("--csa-lr", flags_.cfg.csa_lr, "alignment step size");
    toggle("--stochastic-depth", flags_.cfg.stochastic_depth,
           "sample the offload depth per step");
    number("--entropy-threshold", flags_.cfg.entropy_threshold, "local-exit entropy gate");
    number("--holdout-frac", flags_.cfg.holdout_frac, "per-client holdout fraction");
    number("--personalize-steps", flags_.cfg.personalize_steps,
           "post-training personalization steps");
    number("--seed", flags_.cfg.seed, "run seed", "HSFL_SEED");
    number("--workers", flags_.cfg.workers, "worker threads for the step phase");
    text("--out-dir", flags_.cfg.out_dir, "output directory");
    toggle("--record-transcript", flags_.cfg.record_transcript, "write transcript.bin");
    toggle("--diagnostics", flags_.cfg.diagnostics, "estimate smoothness/noise constants");
    toggle("--export-data", flags_.cfg.export_data, "write dataset.csv");
    number("--l-probe-pairs", flags_.cfg.l_probe_pairs, "smoothness probe pairs");
    number("--noise-probes", flags_.cfg.noise_probes, "noise probe draws");
  }

  // Applies file values to every option the command line and environment
  // left untouched. Returns the offending key on failure.
  std::string apply_file(const std::vector<std::pair<std::string, std::string>>& entries) {
    for (const auto& [key, value] : entries) {
      auto it = file_keys_.find(key);
      if (it == file_keys_.end()) return key + ": unknown key";
      if (it->second.option->count() > 0) continue;
      if (!it->second.parse(value)) return key + ": cannot parse '" + value + "'";
    }
    return "";
  }

 private:
  template <typename T>
  static bool parse_number(const std::string& text, T& out) {
    const char* begin = text.data();
    const char* end = begin + text.size();
    T value{};
    auto [ptr, ec] = std::from_chars(begin, end, value);
    if (ec != std::errc() || ptr != end) return false;
    out = value;
    return true;
  }

  static bool parse_bool(const std::string& text, bool& out) {
    if (text == "true" || text == "1") {
      out = true;
      return true;
    }
    if (text == "false" || text == "0") {
      out = false;
      return true;
    }
    return false;
  }

  template <typename T>
  void number(const std::string& name, T& target, const std::string& help,
              const std::string& env = "") {
    CLI::Option* opt = run_.add_option(name, target, help);
    if (!env.empty()) opt->envname(env);
    file_keys_[name.substr(2)] = {opt, [&target](const std::string& v) {
                                    return parse_number(v, target);
                                  }};
  }

  void text(const std::string& name, std::string& target, const std::string& help) {
    CLI::Option* opt = run_.add_option(name, target, help);
    file_keys_[name.substr(2)] = {opt, [&target](const std::string& v) {
                                    target = v;
                                    return true;
                                  }};
  }

  void toggle(const std::string& name, bool& target, const std::string& help) {
    CLI::Option* opt = run_.add_flag(name + ",!--no-" + name.substr(2), target, help);
    file_keys_[name.substr(2)] = {opt, [&target](const std::string& v) {
                                    return parse_bool(v, target);
                                  }};
  }

  CLI::App& run_;
  RunFlags& flags_;
  std::map<std::string, FileKey> file_keys_;
};

// Flat key=value reader: blank lines and #-comments skipped, whitespace
// around keys and values trimmed.
bool read_key_value_file(const std::string& path,
                         std::vector<std::pair<std::string, std::string>>& out,
                         std::string& error) {
  std::ifstream f(path);
  if (!f) {
    error = "cannot open " + path;
    return false;
  }
  const auto trim = [](std::string s) {
    const char* ws = " \t\r\n";
    const size_t a = s.find_first_not_of(ws);
    if (a == std::string::npos) return std::string();
    const size_t b = s.find_last_not_of(ws);
    return s.substr(a, b - a + 1);
  };
  std::string line;
  size_t line_no = 0;
  while (std::getline(f, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const size_t eq = t.find('=');
    if (eq == std::string::npos) {
      error = path + ": line " + std::to_string(line_no) + " is not key=value";
      return false;
    }
    out.emplace_back(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return true;
}

int cmd_run(RunFlags& f, RunOptions& options) {
  if (!f.config_path.empty()) {
    std::vector<std::pair<std::string, std::string>> entries;
    std::string error;
    if (!read_key_value_file(f.config_path, entries, error)) {
      std::fprintf(stderr, "invalid config: [%s]\n", error.c_str());
      return 1;
    }
    const std::string bad = options.apply_file(entries);
    if (!bad.empty()) {
      std::fprintf(stderr, "invalid config: [%s]\n", bad.c_str());
      return 1;
    }
  }
  if (!f.exit_set_text.empty()) {
    try {
      f.cfg.exit_set = hsfl::parse_int_list(f.exit_set_text);
    } catch (const hsfl::Error& e) {
      std::fprintf(stderr, "invalid config: [exit-set: %s]\n", e.what());
      return 1;
    }
  }
  if (!f.split_depths_text.empty()) {
    try {
      f.cfg.split_depths = hsfl::parse_int_list(f.split_depths_text);
    } catch (const hsfl::Error& e) {
      std::fprintf(stderr, "invalid config: [split-depths: %s]\n", e.what());
      return 1;
    }
  }
  const std::vector<std::string> problems = f.cfg.validate();
  if (!problems.empty()) {
    for (const std::string& p : problems) std::fprintf(stderr, "invalid config: [%s]\n", p.c_str());
    return 1;
  }
  try {
    const hsfl::ExperimentResult result = hsfl::run_experiment(f.cfg);
    for (const auto& [key, value] : result.summary)
      std::printf("%s = %s\n", key.c_str(), value.c_str());
    std::fprintf(stderr, "wrote %s\n", result.metrics_path.c_str());
    std::fprintf(stderr, "wrote %s\n", result.summary_path.c_str());
    std::fprintf(stderr, "wrote %s\n", result.checkpoint_path.c_str());
    if (!result.transcript_path.empty())
      std::fprintf(stderr, "wrote %s\n", result.transcript_path.c_str());
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "run failed: %s\n", e.what());
    return 2;
  }
}

int cmd_audit(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) {
    std::fprintf(stderr, "audit: cannot open %s\n", path.c_str());
    return 2;
  }
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  const hsfl::AuditReport report = hsfl::audit_privacy(bytes);

  std::printf("frames = %" PRIu64 "\n", report.frames);
  for (const auto& [kind, count] : report.counts)
    std::printf("frames_%s = %" PRIu64 "\n", hsfl::msg_kind_name(kind), count);

  if (report.corrupt) {
    std::fprintf(stderr, "audit: corrupt frame at offset %zu: %s\n", report.corrupt_offset,
                 report.corrupt_reason.c_str());
    return 2;
  }
  if (!report.violations.empty()) {
    for (const hsfl::AuditViolation& v : report.violations)
      std::fprintf(stderr, "audit: violation in frame %" PRIu64 " at offset %zu: %s\n",
                   v.frame_index, v.offset, v.reason.c_str());
    return 1;
  }
  std::printf("verdict = clean\n");
  return 0;
}

int cmd_inspect(const std::string& path) {
  try {
    const std::vector<hsfl::CheckpointEntity> entities = hsfl::read_checkpoint(path);
    std::fputs(hsfl::describe_checkpoint(entities).c_str(), stdout);
    return 0;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "inspect: %s\n", e.what());
    return 2;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hybrid split-federated learning simulator"};
  app.require_subcommand(1);

  RunFlags flags;
  CLI::App* run = app.add_subcommand("run", "run an experiment and write artifacts");
  RunOptions options(*run, flags);
  options.attach();

  std::string audit_path;
  CLI::App* audit = app.add_subcommand("audit", "replay a transcript and check privacy");
  audit->add_option("transcript", audit_path, "transcript.bin path")->required();

  std::string inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect", "describe a checkpoint");
  inspect->add_option("checkpoint", inspect_path, "checkpoint.hsfl path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  if (run->parsed()) return cmd_run(flags, options);
  if (audit->parsed()) return cmd_audit(audit_path);
  if (inspect->parsed()) return cmd_inspect(inspect_path);
  return 1;
}
