#include <string>
#include <vector>

#include "doctest.h"
#include "hsfl/common.hpp"
#include "hsfl/config.hpp"

using namespace hsfl;

TEST_SUITE_BEGIN("config");

namespace {

bool names_key(const std::vector<std::string>& problems, const std::string& key) {
  for (const std::string& p : problems)
    if (p.rfind(key + ":", 0) == 0) return true;
  return false;
}

}  // namespace

TEST_CASE("the default config validates cleanly") {
  CHECK(RunConfig{}.validate().empty());
}

TEST_CASE("each violated invariant names its key") {
  RunConfig c;
  c.classes = 1;
  CHECK(names_key(c.validate(), "classes"));
  c = RunConfig{};
  c.classes = 40;  // > 2*dim
  CHECK(names_key(c.validate(), "classes"));
  c = RunConfig{};
  c.dim = 0;
  CHECK(names_key(c.validate(), "dim"));
  c = RunConfig{};
  c.samples = 2;  // fewer than classes and clients
  CHECK(names_key(c.validate(), "samples"));
  c = RunConfig{};
  c.concentration = 0.0;
  CHECK(names_key(c.validate(), "concentration"));
  c = RunConfig{};
  c.spread = -0.1;
  CHECK(names_key(c.validate(), "spread"));
  c = RunConfig{};
  c.depth = 1;
  CHECK(names_key(c.validate(), "depth"));
  c = RunConfig{};
  c.width = 0;
  CHECK(names_key(c.validate(), "width"));
  c = RunConfig{};
  c.exit_set = {};
  CHECK(names_key(c.validate(), "exit-set"));
  c = RunConfig{};
  c.exit_set = {3, 2};
  CHECK(names_key(c.validate(), "exit-set"));
  c = RunConfig{};
  c.exit_set = {2, 2, 3};
  CHECK(names_key(c.validate(), "exit-set"));
  c = RunConfig{};
  c.exit_set = {2, 6};  // depth-1 == 5
  CHECK(names_key(c.validate(), "exit-set"));
  c = RunConfig{};
  c.split_depths = {2, 3};  // 8 clients
  CHECK(names_key(c.validate(), "split-depths"));
  c = RunConfig{};
  c.split_depths = {2, 3, 2, 3, 2, 3, 2, 5};  // 5 not an exit
  CHECK(names_key(c.validate(), "split-depths"));
  c = RunConfig{};
  c.clients = 0;
  CHECK(names_key(c.validate(), "clients"));
  c = RunConfig{};
  c.rounds = 0;
  CHECK(names_key(c.validate(), "rounds"));
  c = RunConfig{};
  c.local_steps = 0;
  CHECK(names_key(c.validate(), "local-steps"));
  c = RunConfig{};
  c.participation = 0.0;
  CHECK(names_key(c.validate(), "participation"));
  c = RunConfig{};
  c.participation = 1.5;
  CHECK(names_key(c.validate(), "participation"));
  c = RunConfig{};
  c.gamma = -0.01;
  CHECK(names_key(c.validate(), "gamma"));
  c = RunConfig{};
  c.lambda = 1.01;
  CHECK(names_key(c.validate(), "lambda"));
  c = RunConfig{};
  c.inner_lr = -1.0;
  CHECK(names_key(c.validate(), "inner-lr"));
  c = RunConfig{};
  c.outer_lr = -1.0;
  CHECK(names_key(c.validate(), "outer-lr"));
  c = RunConfig{};
  c.inner_steps = -1;
  CHECK(names_key(c.validate(), "inner-steps"));
  c = RunConfig{};
  c.batch_size = 0;
  CHECK(names_key(c.validate(), "batch-size"));
  c = RunConfig{};
  c.bits = 0;
  CHECK(names_key(c.validate(), "bits"));
  c = RunConfig{};
  c.bits = 25;
  CHECK(names_key(c.validate(), "bits"));
  c = RunConfig{};
  c.margin = 0.0;
  CHECK(names_key(c.validate(), "margin"));
  c = RunConfig{};
  c.csa_weight = -0.1;
  CHECK(names_key(c.validate(), "csa-weight"));
  c = RunConfig{};
  c.csa_lr = -0.1;
  CHECK(names_key(c.validate(), "csa-lr"));
  c = RunConfig{};
  c.entropy_threshold = -0.1;
  CHECK(names_key(c.validate(), "entropy-threshold"));
  c = RunConfig{};
  c.holdout_frac = 1.0;
  CHECK(names_key(c.validate(), "holdout-frac"));
  c = RunConfig{};
  c.personalize_steps = -1;
  CHECK(names_key(c.validate(), "personalize-steps"));
  c = RunConfig{};
  c.workers = 0;
  CHECK(names_key(c.validate(), "workers"));
  c = RunConfig{};
  c.out_dir = "";
  CHECK(names_key(c.validate(), "out-dir"));
  c = RunConfig{};
  c.l_probe_pairs = -1;
  CHECK(names_key(c.validate(), "l-probe-pairs"));
  c = RunConfig{};
  c.noise_probes = -1;
  CHECK(names_key(c.validate(), "noise-probes"));
}

TEST_CASE("multiple violations are all reported") {
  RunConfig c;
  c.clients = 0;
  c.bits = 0;
  c.gamma = 2.0;
  const std::vector<std::string> problems = c.validate();
  CHECK(problems.size() >= 3);
  CHECK(names_key(problems, "clients"));
  CHECK(names_key(problems, "bits"));
  CHECK(names_key(problems, "gamma"));
}

TEST_CASE("parse_int_list handles spaces, singletons, and junk") {
  CHECK(parse_int_list("1,2,3") == std::vector<int>{1, 2, 3});
  CHECK(parse_int_list("2, 3, 4") == std::vector<int>{2, 3, 4});
  CHECK(parse_int_list(" 7 ") == std::vector<int>{7});
  CHECK(parse_int_list("-1,0") == std::vector<int>{-1, 0});
  CHECK(parse_int_list("").empty());
  CHECK_THROWS_AS(parse_int_list("1,x,3"), Error);
  CHECK_THROWS_AS(parse_int_list("1.5"), Error);
  CHECK(format_int_list({2, 3, 4}) == "2,3,4");
  CHECK(format_int_list({}) == "");
  CHECK(parse_int_list(format_int_list({5, -6, 7})) == std::vector<int>{5, -6, 7});
}

TEST_CASE("format_double round-trips exactly and stays short") {
  CHECK(format_double(1.0) == "1");
  CHECK(format_double(0.5) == "0.5");
  CHECK(format_double(0.0) == "0");
  for (const double v : {1.0 / 3.0, 0.1, 1e-12, 123456.789, 6.02214076e23, -2.5e-7}) {
    const std::string s = format_double(v);
    CHECK(std::stod(s) == v);
    CHECK(s.size() <= 24);
  }
}

TEST_CASE("to_key_values emits every field and parses back") {
  RunConfig c;
  c.exit_set = {2, 4};
  c.split_depths = {2, 4, 2, 4, 2, 4, 2, 4};
  c.gamma = 0.375;
  c.seed = 12345;
  c.record_transcript = true;
  const std::string text = c.to_key_values();

  // Flat key = value lines, one per field, kebab-case keys.
  RunConfig parsed;  // fields overwritten below from the text
  size_t lines = 0;
  size_t pos = 0;
  while (pos < text.size()) {
    const size_t end = text.find('\n', pos);
    REQUIRE(end != std::string::npos);
    const std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++lines;
    const size_t eq = line.find(" = ");
    REQUIRE(eq != std::string::npos);
    const std::string key = line.substr(0, eq);
    const std::string value = line.substr(eq + 3);
    if (key == "gamma") parsed.gamma = std::stod(value);
    if (key == "seed") parsed.seed = std::stoull(value);
    if (key == "exit-set") parsed.exit_set = parse_int_list(value);
    if (key == "split-depths") parsed.split_depths = parse_int_list(value);
    if (key == "record-transcript") parsed.record_transcript = value == "true";
    if (key == "stochastic-depth") parsed.stochastic_depth = value == "true";
  }
  CHECK(lines >= 34);
  CHECK(parsed.gamma == 0.375);
  CHECK(parsed.seed == 12345);
  CHECK(parsed.exit_set == c.exit_set);
  CHECK(parsed.split_depths == c.split_depths);
  CHECK(parsed.record_transcript);
  CHECK(parsed.stochastic_depth);

  // split-depths is omitted when empty.
  RunConfig d;
  CHECK(d.to_key_values().find("split-depths") == std::string::npos);
}

TEST_SUITE_END();
