#include "hsfl/backbone.hpp"

#include <algorithm>
#include <cmath>

namespace hsfl {

void BackboneTemplate::validate() const {
  if (depth < 1) throw Error("BackboneTemplate: depth must be >= 1");
  if (block_dims.size() != static_cast<size_t>(depth))
    throw Error("BackboneTemplate: block_dims count does not match depth");
  for (const auto& [in, out] : block_dims)
    if (in < 1 || out < 1) throw Error("BackboneTemplate: block dims must be positive");
  for (int d = 1; d < depth; ++d)
    if (block_dims[static_cast<size_t>(d)].first != block_dims[static_cast<size_t>(d) - 1].second)
      throw Error("BackboneTemplate: block dims do not chain at depth " + std::to_string(d + 1));
  if (exit_set.empty()) throw Error("BackboneTemplate: exit_set must be non-empty");
  if (!std::is_sorted(exit_set.begin(), exit_set.end()) ||
      std::adjacent_find(exit_set.begin(), exit_set.end()) != exit_set.end())
    throw Error("BackboneTemplate: exit_set must be sorted and unique");
  if (exit_set.front() < 1 || exit_set.back() > depth - 1)
    throw Error("BackboneTemplate: exit depths must lie in 1..D-1");
  if (num_classes < 2) throw Error("BackboneTemplate: num_classes must be >= 2");
}

int BackboneTemplate::min_split() const {
  if (exit_set.empty()) throw Error("BackboneTemplate: exit_set must be non-empty");
  return exit_set.front();
}

int BackboneTemplate::feature_dim(int depth_index) const {
  if (depth_index < 1 || depth_index > depth)
    throw Error("BackboneTemplate: depth out of range: " + std::to_string(depth_index));
  return block_dims[static_cast<size_t>(depth_index) - 1].second;
}

BackboneTemplate make_chain_template(int input_dim, int width, int depth,
                                     std::vector<int> exit_set, int num_classes,
                                     Activation activation) {
  BackboneTemplate tmpl;
  tmpl.depth = depth;
  tmpl.block_dims.reserve(static_cast<size_t>(std::max(depth, 0)));
  for (int d = 1; d <= depth; ++d)
    tmpl.block_dims.emplace_back(d == 1 ? input_dim : width, width);
  tmpl.exit_set = std::move(exit_set);
  tmpl.num_classes = num_classes;
  tmpl.activation = activation;
  tmpl.validate();
  return tmpl;
}

ParamBlock init_block(const BackboneTemplate& tmpl, int depth, Rng& rng) {
  const auto [in, out] = tmpl.block_dims.at(static_cast<size_t>(depth) - 1);
  ParamBlock block;
  block.depth = depth;
  block.w = Tensor::zeros({in, out});
  // He scaling: rectifiers halve the signal variance per layer, so sqrt(2)
  // keeps activations (and hence early gradients) at unit scale down a deep
  // chain instead of decaying toward the small-init plateau.
  const double gain = tmpl.activation == Activation::kReLU ? std::sqrt(2.0) : 1.0;
  const double scale = gain / std::sqrt(static_cast<double>(in));
  for (double& v : block.w.data) v = scale * rng.normal();
  block.b = Tensor::zeros({out});
  return block;
}

ParamBlock init_head(const BackboneTemplate& tmpl, int depth, Rng& rng) {
  const int in = depth == 0 ? tmpl.feature_dim(tmpl.depth) : tmpl.feature_dim(depth);
  ParamBlock head;
  head.depth = depth;
  head.w = Tensor::zeros({in, tmpl.num_classes});
  const double scale = 1.0 / std::sqrt(static_cast<double>(in));
  for (double& v : head.w.data) v = scale * rng.normal();
  head.b = Tensor::zeros({tmpl.num_classes});
  return head;
}

BoundBlock bind_block(Tape& tape, const ParamBlock& block) {
  return BoundBlock{block.depth, tape.param(block.w), tape.param(block.b)};
}

NodeId apply_block(Tape& tape, const BoundBlock& bound, NodeId x, Activation activation) {
  const NodeId pre = tape.add_row_bias(tape.matmul(x, bound.w), bound.b);
  return activation == Activation::kReLU ? tape.relu(pre) : pre;
}

NodeId apply_affine(Tape& tape, const BoundBlock& bound, NodeId x) {
  return tape.add_row_bias(tape.matmul(x, bound.w), bound.b);
}

namespace {

void check_block_input(const ParamBlock& block, const Tensor& x) {
  if (x.rank() != 2 || x.cols() != block.in_dim())
    throw Error("block at depth " + std::to_string(block.depth) + " expects input dim " +
                std::to_string(block.in_dim()) + ", got " + x.shape_str());
}

}  // namespace

PrefixRun run_prefix(const std::vector<ParamBlock>& blocks, const Tensor& x, int upto_depth,
                     Activation activation) {
  PrefixRun run;
  run.input = run.tape.input(x);
  run.out = run.input;
  for (const ParamBlock& block : blocks) {
    if (block.depth > upto_depth) continue;
    check_block_input(block, run.tape.value(run.out));
    BoundBlock bound = bind_block(run.tape, block);
    run.out = apply_block(run.tape, bound, run.out, activation);
    run.bound.push_back(bound);
  }
  return run;
}

Tensor block_value(const ParamBlock& block, const Tensor& x, Activation activation) {
  Tensor out = affine_value(block, x);
  if (activation == Activation::kReLU)
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

Tensor affine_value(const ParamBlock& block, const Tensor& x) {
  Tensor out = matmul_value(x, block.w);
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) += block.b.data[static_cast<size_t>(c)];
  return out;
}

Tensor forward_prefix(const std::vector<ParamBlock>& blocks, const Tensor& x, int upto_depth,
                      Activation activation) {
  Tensor cur = x;
  for (const ParamBlock& block : blocks) {
    if (block.depth > upto_depth) continue;
    check_block_input(block, cur);
    cur = block_value(block, cur, activation);
  }
  return cur;
}

double softmax_entropy(const Tensor& logits) {
  if (logits.rank() != 1 || logits.size() == 0)
    throw Error("softmax_entropy: logits must be a non-empty vector");
  Tensor row = Tensor::zeros({1, static_cast<int>(logits.size())});
  row.data = logits.data;
  return softmax_entropy_rows(row).data[0];
}

Tensor softmax_entropy_rows(const Tensor& logits) {
  if (logits.rank() != 2) throw Error("softmax_entropy_rows: logits must be a matrix");
  const int n = logits.rows(), c = logits.cols();
  Tensor out = Tensor::zeros({n});
  for (int r = 0; r < n; ++r) {
    double mx = logits.at(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(r, j));
    double se = 0.0;
    for (int j = 0; j < c; ++j) se += std::exp(logits.at(r, j) - mx);
    // H = log(sum e^{z-m}) - sum p*(z-m); p in terms of the shifted logits.
    double dot = 0.0;
    for (int j = 0; j < c; ++j) {
      const double e = std::exp(logits.at(r, j) - mx);
      dot += e * (logits.at(r, j) - mx);
    }
    out.data[static_cast<size_t>(r)] = std::log(se) - dot / se;
  }
  return out;
}

double cross_entropy_value(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw Error("cross_entropy_value: logits must be a matrix");
  const int n = logits.rows(), c = logits.cols();
  if (labels.size() != static_cast<size_t>(n))
    throw Error("cross_entropy_value: label count does not match rows");
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y < 0 || y >= c) throw Error("cross_entropy_value: label out of range");
    double mx = logits.at(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, logits.at(r, j));
    double se = 0.0;
    for (int j = 0; j < c; ++j) se += std::exp(logits.at(r, j) - mx);
    total += std::log(se) + mx - logits.at(r, y);
  }
  return total / n;
}

int argmax_row(const Tensor& logits, int row) {
  int best = 0;
  for (int j = 1; j < logits.cols(); ++j)
    if (logits.at(row, j) > logits.at(row, best)) best = j;
  return best;
}

double accuracy(const Tensor& logits, const std::vector<int>& labels) {
  if (labels.size() != static_cast<size_t>(logits.rows()))
    throw Error("accuracy: label count does not match rows");
  if (labels.empty()) return 0.0;
  int hits = 0;
  for (int r = 0; r < logits.rows(); ++r)
    if (argmax_row(logits, r) == labels[static_cast<size_t>(r)]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

void sgd_step(ParamBlock& block, const BlockGrad& grad, double lr) {
  if (!grad.w.same_shape(block.w) || !grad.b.same_shape(block.b))
    throw Error("sgd_step: gradient shape mismatch at depth " + std::to_string(block.depth));
  for (size_t i = 0; i < block.w.data.size(); ++i) block.w.data[i] -= lr * grad.w.data[i];
  for (size_t i = 0; i < block.b.data.size(); ++i) block.b.data[i] -= lr * grad.b.data[i];
}

void sgd_step(std::vector<ParamBlock>& blocks, const std::map<int, BlockGrad>& grads, double lr) {
  for (const auto& [depth, grad] : grads) {
    auto it = std::find_if(blocks.begin(), blocks.end(),
                           [depth](const ParamBlock& b) { return b.depth == depth; });
    if (it == blocks.end())
      throw Error("sgd_step: no block at depth " + std::to_string(depth));
    sgd_step(*it, grad, lr);
  }
}

}  // namespace hsfl
