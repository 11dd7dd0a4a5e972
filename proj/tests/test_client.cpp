#include <cmath>
#include <vector>

#include "doctest.h"
#include "hsfl/client.hpp"
#include "hsfl/server.hpp"

using namespace hsfl;

TEST_SUITE_BEGIN("client");

namespace {

// Identity-activation toy: prefix z = x*W1 + b1, head u = z*Wh + bh. Every
// gradient below is computed with plain value-level matrix algebra, fully
// independent of the reverse-mode engine.
struct LinearOracle {
  Tensor softmax(const Tensor& logits) const {
    Tensor p = logits;
    for (int i = 0; i < p.rows(); ++i) {
      double mx = p.at(i, 0);
      for (int j = 1; j < p.cols(); ++j) mx = std::max(mx, p.at(i, j));
      double se = 0.0;
      for (int j = 0; j < p.cols(); ++j) se += std::exp(p.at(i, j) - mx);
      for (int j = 0; j < p.cols(); ++j) p.at(i, j) = std::exp(p.at(i, j) - mx) / se;
    }
    return p;
  }

  // (softmax - onehot) / B
  Tensor logits_grad(const Tensor& logits, const std::vector<int>& y) const {
    Tensor g = softmax(logits);
    const double inv = 1.0 / static_cast<double>(y.size());
    for (int i = 0; i < g.rows(); ++i) {
      g.at(i, y[static_cast<size_t>(i)]) -= 1.0;
      for (int j = 0; j < g.cols(); ++j) g.at(i, j) *= inv;
    }
    return g;
  }

  static Tensor col_sums(const Tensor& m) {
    Tensor s = Tensor::zeros({m.cols()});
    for (int i = 0; i < m.rows(); ++i)
      for (int j = 0; j < m.cols(); ++j) s.data[static_cast<size_t>(j)] += m.at(i, j);
    return s;
  }

  // One full-batch SGD step of the client loss on (prefix, head).
  ClientParams sgd_step_params(const ClientParams& p, const Batch& b, double lr) const {
    const Tensor z = affine_value(p.prefix[0], b.x);
    const Tensor logits = affine_value(p.head, z);
    const Tensor gl = logits_grad(logits, b.y);

    const Tensor d_wh = matmul_tn(z, gl);
    const Tensor d_bh = col_sums(gl);
    const Tensor dz = matmul_nt(gl, p.head.w);
    const Tensor d_w1 = matmul_tn(b.x, dz);
    const Tensor d_b1 = col_sums(dz);

    ClientParams out = p;
    for (size_t i = 0; i < out.prefix[0].w.data.size(); ++i)
      out.prefix[0].w.data[i] -= lr * d_w1.data[i];
    for (size_t i = 0; i < out.prefix[0].b.data.size(); ++i)
      out.prefix[0].b.data[i] -= lr * d_b1.data[i];
    for (size_t i = 0; i < out.head.w.data.size(); ++i)
      out.head.w.data[i] -= lr * d_wh.data[i];
    for (size_t i = 0; i < out.head.b.data.size(); ++i)
      out.head.b.data[i] -= lr * d_bh.data[i];
    return out;
  }
};

BackboneTemplate linear_template() {
  return make_chain_template(3, 4, 2, {1}, 3, Activation::kIdentity);
}

Dataset toy_dataset(int n, uint64_t seed) { return gen_gaussian_mixture(3, 3, n, 0.25, seed); }

ClientState toy_client(const BackboneTemplate& tmpl, const Dataset& ds, uint64_t seed) {
  std::vector<Shard> shards = dirichlet_partition(ds, 2, 10.0, seed);
  return init_client(tmpl, 0, 1, 0.5, std::move(shards[0]), 0.25, seed);
}

}  // namespace

TEST_CASE("init_client validates the split and carves a holdout") {
  const BackboneTemplate tmpl = linear_template();
  const Dataset ds = toy_dataset(60, 21);
  std::vector<Shard> shards = dirichlet_partition(ds, 2, 10.0, 21);
  const size_t shard_size = shards[0].indices.size();

  Shard copy = shards[0];
  const ClientState c = init_client(tmpl, 0, 1, 0.5, std::move(copy), 0.25, 21);
  CHECK(c.id == 0);
  CHECK(c.split_depth == 1);
  CHECK(c.params.prefix.size() == 1);  // blocks up to the split
  CHECK(c.params.head.depth == 1);
  CHECK(c.train_indices.size() + c.holdout_indices.size() == shard_size);
  CHECK(c.holdout_indices.size() == static_cast<size_t>(shard_size * 0.25));
  for (size_t i = 1; i < c.train_indices.size(); ++i)
    CHECK(c.train_indices[i] > c.train_indices[i - 1]);
  for (int h : c.holdout_indices)
    for (int t : c.train_indices) CHECK(h != t);

  // Split depth must be a template exit.
  Shard copy2 = shards[0];
  CHECK_THROWS_AS(init_client(tmpl, 0, 2, 0.5, std::move(copy2), 0.25, 21), Error);

  // Extreme holdout fractions still leave at least one training sample.
  Shard copy3 = shards[0];
  const ClientState tight = init_client(tmpl, 0, 1, 0.5, std::move(copy3), 0.999, 21);
  CHECK_FALSE(tight.train_indices.empty());
}

TEST_CASE("adapt equals the hand-computed SGD trajectory") {
  const BackboneTemplate tmpl = linear_template();
  const Dataset ds = toy_dataset(60, 33);
  const ClientState c = toy_client(tmpl, ds, 33);
  const Batch batch = gather_batch(ds, c.train_indices);

  LinearOracle oracle;
  for (const int steps : {1, 2, 3}) {
    AdaptConfig cfg{0.07, steps, 8};
    const ClientParams got = adapt(tmpl, c.params, batch, cfg);
    ClientParams want = c.params;
    for (int s = 0; s < steps; ++s) want = oracle.sgd_step_params(want, batch, 0.07);
    REQUIRE(got.prefix.size() == want.prefix.size());
    for (size_t i = 0; i < want.prefix[0].w.data.size(); ++i)
      CHECK(got.prefix[0].w.data[i] ==
            doctest::Approx(want.prefix[0].w.data[i]).epsilon(1e-12));
    for (size_t i = 0; i < want.head.w.data.size(); ++i)
      CHECK(got.head.w.data[i] == doctest::Approx(want.head.w.data[i]).epsilon(1e-12));
    for (size_t i = 0; i < want.head.b.data.size(); ++i)
      CHECK(got.head.b.data[i] == doctest::Approx(want.head.b.data[i]).epsilon(1e-12));
  }

  // S = 0 is the identity.
  AdaptConfig none{0.07, 0, 8};
  const ClientParams same = adapt(tmpl, c.params, batch, none);
  CHECK(same.prefix[0].w == c.params.prefix[0].w);
  CHECK(same.head.w == c.params.head.w);
}

TEST_CASE("make_views builds both adapted branches correctly") {
  const BackboneTemplate tmpl = linear_template();
  const Dataset ds = toy_dataset(80, 44);
  const ClientState c = toy_client(tmpl, ds, 44);
  Rng rng(5);
  const Batch b1 = gather_batch(ds, draw_with_replacement(c.train_indices, 6, rng));
  const Batch b2 = gather_batch(ds, draw_with_replacement(c.train_indices, 6, rng));
  AdaptConfig cfg{0.05, 1, 6};

  ViewWork work = make_views(tmpl, c, b1, b2, 1, cfg);

  const ClientParams dagger = adapt(tmpl, c.params, b1, cfg);
  const ClientParams ddagger = adapt(tmpl, c.params, b2, cfg);
  CHECK(work.adapted_dagger.prefix[0].w == dagger.prefix[0].w);
  CHECK(work.adapted_ddagger.prefix[0].w == ddagger.prefix[0].w);

  // z_dagger: the B1-adapted prefix applied to x2 at the sampled exit depth.
  const Tensor z_dagger = forward_prefix(dagger.prefix, b2.x, 1, tmpl.activation);
  REQUIRE(work.views.z_dagger.same_shape(z_dagger));
  for (size_t i = 0; i < z_dagger.data.size(); ++i)
    CHECK(work.views.z_dagger.data[i] == doctest::Approx(z_dagger.data[i]).epsilon(1e-13));

  // z_ddagger: the B2-adapted prefix applied to x1 at the split depth.
  const Tensor z_ddagger = forward_prefix(ddagger.prefix, b1.x, 1, tmpl.activation);
  for (size_t i = 0; i < z_ddagger.data.size(); ++i)
    CHECK(work.views.z_ddagger.data[i] == doctest::Approx(z_ddagger.data[i]).epsilon(1e-13));

  // l_C: the ddagger branch evaluated on (x1, y1).
  const Tensor logits = affine_value(ddagger.head, z_ddagger);
  CHECK(work.loss_c == doctest::Approx(cross_entropy_value(logits, b1.y)).epsilon(1e-12));

  // Indicator marks equal labels pairwise.
  REQUIRE(work.views.indicator.size() == b1.y.size());
  for (size_t i = 0; i < b1.y.size(); ++i)
    CHECK(work.views.indicator[i] == (b1.y[i] == b2.y[i] ? 1 : 0));
  CHECK(work.views.exit_depth == 1);
}

TEST_CASE("outer_update applies branch gradients to the pre-adaptation params") {
  const BackboneTemplate tmpl = linear_template();
  const Dataset ds = toy_dataset(80, 55);
  ClientState c = toy_client(tmpl, ds, 55);
  Rng rng(6);
  const Batch b1 = gather_batch(ds, draw_with_replacement(c.train_indices, 5, rng));
  const Batch b2 = gather_batch(ds, draw_with_replacement(c.train_indices, 5, rng));
  AdaptConfig cfg{0.05, 1, 5};
  const double gamma = 0.6, beta = 0.11;

  ViewWork work = make_views(tmpl, c, b1, b2, 1, cfg);
  Tensor g_z = Tensor::zeros({5, 4});
  Rng gz(7);
  for (double& v : g_z.data) v = 0.05 * gz.normal();

  const ClientParams before = c.params;
  const ClientParams ddagger = adapt(tmpl, c.params, b2, cfg);
  outer_update(c, work, g_z, gamma, beta);

  // Oracle: gradient of gamma*l_C at the ddagger parameters, plus g_z
  // continued through the ddagger prefix; step applied to the ORIGINAL
  // parameters.
  LinearOracle oracle;
  const Tensor z = affine_value(ddagger.prefix[0], b1.x);
  const Tensor logits = affine_value(ddagger.head, z);
  Tensor gl = oracle.logits_grad(logits, b1.y);
  for (double& v : gl.data) v *= gamma;

  const Tensor d_wh = matmul_tn(z, gl);
  const Tensor d_bh = LinearOracle::col_sums(gl);
  Tensor dz = matmul_nt(gl, ddagger.head.w);
  for (size_t i = 0; i < dz.data.size(); ++i) dz.data[i] += g_z.data[i];  // cut gradient
  const Tensor d_w1 = matmul_tn(b1.x, dz);
  const Tensor d_b1 = LinearOracle::col_sums(dz);

  for (size_t i = 0; i < before.prefix[0].w.data.size(); ++i)
    CHECK(c.params.prefix[0].w.data[i] ==
          doctest::Approx(before.prefix[0].w.data[i] - beta * d_w1.data[i]).epsilon(1e-12));
  for (size_t i = 0; i < before.prefix[0].b.data.size(); ++i)
    CHECK(c.params.prefix[0].b.data[i] ==
          doctest::Approx(before.prefix[0].b.data[i] - beta * d_b1.data[i]).epsilon(1e-12));
  for (size_t i = 0; i < before.head.w.data.size(); ++i)
    CHECK(c.params.head.w.data[i] ==
          doctest::Approx(before.head.w.data[i] - beta * d_wh.data[i]).epsilon(1e-12));
  for (size_t i = 0; i < before.head.b.data.size(); ++i)
    CHECK(c.params.head.b.data[i] ==
          doctest::Approx(before.head.b.data[i] - beta * d_bh.data[i]).epsilon(1e-12));

  // A work bundle is single-use.
  CHECK_THROWS_AS(outer_update(c, work, g_z, gamma, beta), Error);
}

TEST_CASE("sample_exit_depth is uniform over reachable exits") {
  const BackboneTemplate tmpl = make_chain_template(4, 4, 6, {2, 3, 4}, 3);
  const Dataset ds = gen_gaussian_mixture(3, 4, 40, 0.3, 9);
  std::vector<Shard> shards = dirichlet_partition(ds, 2, 10.0, 9);
  const ClientState c = init_client(tmpl, 0, 3, 0.5, std::move(shards[0]), 0.2, 9);

  Rng rng(71);
  int count2 = 0, count3 = 0;
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const int k = sample_exit_depth(tmpl, c, rng);
    REQUIRE((k == 2 || k == 3));  // 4 > split_depth is unreachable
    count2 += k == 2;
    count3 += k == 3;
  }
  CHECK(std::abs(count2 - draws / 2) < 250);
  CHECK(std::abs(count3 - draws / 2) < 250);
}

namespace {

ClientState gate_probe_client(const BackboneTemplate& tmpl, const Dataset& ds,
                              double threshold) {
  std::vector<Shard> shards = dirichlet_partition(ds, 2, 10.0, 13);
  ClientState c = init_client(tmpl, 0, 1, threshold, std::move(shards[0]), 0.2, 13);
  // Zero the head: logits all equal, local entropy exactly ln C.
  for (double& v : c.params.head.w.data) v = 0.0;
  for (double& v : c.params.head.b.data) v = 0.0;
  return c;
}

}  // namespace

TEST_CASE("the entropy gate is strict") {
  const BackboneTemplate tmpl = linear_template();  // C = 3
  const Dataset ds = toy_dataset(40, 13);
  const Tensor x = gather_batch(ds, {0}).x;
  const double lnC = std::log(3.0);

  ServerState server = [&] {
    Rng rng(3);
    return init_server(tmpl, 1.0, 1.0, 0.05, rng);
  }();
  Channel channel;
  ServerLink link{&server, &channel, 0, 0};

  // Uniform local logits: entropy == ln C exactly.
  ClientState at = gate_probe_client(tmpl, ds, lnC);
  Rng r1(1);
  CHECK(infer(tmpl, at, x, &link, 8, r1).route == Route::kOffload);  // not strictly below

  ClientState above = gate_probe_client(tmpl, ds, lnC + 1e-9);
  Rng r2(1);
  const InferenceOutcome local = infer(tmpl, above, x, &link, 8, r2);
  CHECK(local.route == Route::kLocal);
  CHECK(local.prediction >= 0);
  CHECK(local.prediction < 3);

  // Threshold zero can never exit locally, even at zero entropy.
  ClientState zero = gate_probe_client(tmpl, ds, 0.0);
  zero.params.head.w = Tensor::zeros({4, 3});
  zero.params.head.b = Tensor::vec({1000.0, 0.0, 0.0});  // entropy exactly 0
  CHECK(softmax_entropy_rows(
            affine_value(zero.params.head,
                         forward_prefix(zero.params.prefix, x, 1, tmpl.activation)))
            .data[0] == 0.0);
  Rng r3(1);
  CHECK(infer(tmpl, zero, x, &link, 8, r3).route == Route::kOffload);

  // Offloading without a reachable server is an error.
  Rng r4(1);
  CHECK_THROWS_AS(infer(tmpl, zero, x, nullptr, 8, r4), Error);

  // Each offloaded query ships exactly one feature frame up, one logits
  // frame down; the two offloads above are all the traffic there is.
  CHECK(channel.ledger().messages_of(MsgKind::kInferenceFeature) == 2);
  CHECK(channel.ledger().messages_of(MsgKind::kInferenceLogits) == 2);
}

TEST_CASE("personalize restarts from the global model deterministically") {
  const BackboneTemplate tmpl = linear_template();
  const Dataset ds = toy_dataset(200, 77);
  ClientState c = toy_client(tmpl, ds, 77);
  const ClientParams global = c.params;
  AdaptConfig cfg{0.1, 1, 16};

  Rng r1 = Rng::stream({77u, 1u});
  personalize(tmpl, c, global, ds, cfg, 30, r1);
  const ClientParams first = c.params;
  const double acc_after = local_accuracy(tmpl, c.params, ds, c.holdout_indices);
  const double acc_global = local_accuracy(tmpl, global, ds, c.holdout_indices);

  // Rerunning from the same global state reproduces the result exactly.
  Rng r2 = Rng::stream({77u, 1u});
  personalize(tmpl, c, global, ds, cfg, 30, r2);
  CHECK(c.params.prefix[0].w == first.prefix[0].w);
  CHECK(c.params.head.w == first.head.w);

  // On this easy mixture, training should not hurt held-out accuracy.
  CHECK(acc_after >= acc_global);
}

TEST_CASE("local_accuracy counts argmax hits") {
  const BackboneTemplate tmpl = linear_template();
  Dataset ds;
  ds.class_count = 3;
  ds.features = Tensor::matrix(2, 3, {1, 0, 0, 0, 1, 0});
  ds.labels = {0, 2};
  ClientParams p;
  ParamBlock b1;
  b1.depth = 1;
  b1.w = Tensor::zeros({3, 4});
  b1.b = Tensor::vec({0, 0, 0, 0});
  b1.w.at(0, 0) = 1.0;  // feature 0 -> unit 0
  b1.w.at(1, 1) = 1.0;  // feature 1 -> unit 1
  p.prefix = {b1};
  ParamBlock head;
  head.depth = 1;
  head.w = Tensor::zeros({4, 3});
  head.b = Tensor::vec({0, 0, 0});
  head.w.at(0, 0) = 1.0;  // unit 0 -> class 0
  head.w.at(1, 1) = 1.0;  // unit 1 -> class 1
  p.head = head;
  // Row 0 predicts class 0 (correct), row 1 predicts class 1 (label 2).
  CHECK(local_accuracy(tmpl, p, ds, {0, 1}) == doctest::Approx(0.5));
  CHECK(local_accuracy(tmpl, p, ds, {0}) == doctest::Approx(1.0));
}

TEST_CASE("client_task_grad equals the softmax-minus-onehot formula") {
  const Tensor logits = Tensor::matrix(2, 3, {0.2, -1.0, 0.5, 2.0, 0.0, -0.3});
  const std::vector<int> y{2, 0};
  const Tensor got = client_task_grad(logits, y);
  LinearOracle oracle;
  const Tensor want = oracle.logits_grad(logits, y);
  REQUIRE(got.same_shape(want));
  for (size_t i = 0; i < want.data.size(); ++i)
    CHECK(got.data[i] == doctest::Approx(want.data[i]).epsilon(1e-13));
}

TEST_SUITE_END();
