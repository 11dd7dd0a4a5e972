#pragma once

#include <map>
#include <utility>
#include <vector>

#include "hsfl/tape.hpp"

namespace hsfl {

enum class Activation { kReLU, kIdentity };

// One trainable layer pinned to a template depth: y = act(x*W + b).
// depth 0 is reserved for classifier heads (no activation).
struct ParamBlock {
  int depth = 0;
  Tensor w;  // (in_dim, out_dim)
  Tensor b;  // (out_dim)

  int in_dim() const { return w.rows(); }
  int out_dim() const { return w.cols(); }

  bool operator==(const ParamBlock& other) const = default;
};

// A multi-exit layer template shared by all parties. Blocks are 1-indexed by
// depth; exit_set lists depths where a client may cut and offload.
struct BackboneTemplate {
  int depth = 0;                                // D
  std::vector<std::pair<int, int>> block_dims;  // (in, out) per depth 1..D
  std::vector<int> exit_set;                    // sorted, subset of 1..D-1
  int num_classes = 0;                          // C
  Activation activation = Activation::kReLU;

  void validate() const;
  int min_split() const;
  int in_dim() const { return block_dims.front().first; }
  // Output width of the block at the given depth.
  int feature_dim(int depth_index) const;
};

// input_dim -> width -> ... -> width chain of the given depth.
BackboneTemplate make_chain_template(int input_dim, int width, int depth,
                                     std::vector<int> exit_set, int num_classes,
                                     Activation activation = Activation::kReLU);

// He-style init: W ~ N(0, 1/in_dim), b = 0.
ParamBlock init_block(const BackboneTemplate& tmpl, int depth, Rng& rng);
// Classifier head attached after `depth` (depth field stored as the exit it
// serves; 0 means the server head after the last block).
ParamBlock init_head(const BackboneTemplate& tmpl, int depth, Rng& rng);

// ---- Tape-bound building blocks ----

struct BoundBlock {
  int depth = 0;
  NodeId w = -1;
  NodeId b = -1;
};

BoundBlock bind_block(Tape& tape, const ParamBlock& block);
// act(x*W + b)
NodeId apply_block(Tape& tape, const BoundBlock& bound, NodeId x, Activation activation);
// x*W + b (heads)
NodeId apply_affine(Tape& tape, const BoundBlock& bound, NodeId x);

// A taped forward through a parameter prefix.
struct PrefixRun {
  Tape tape;
  NodeId input = -1;
  NodeId out = -1;
  std::vector<BoundBlock> bound;  // same order as the blocks passed in
};

// Runs blocks with depth <= upto_depth (in sequence order) on x.
PrefixRun run_prefix(const std::vector<ParamBlock>& blocks, const Tensor& x, int upto_depth,
                     Activation activation);

// ---- Value-only forwards (no tape) ----

Tensor block_value(const ParamBlock& block, const Tensor& x, Activation activation);
Tensor affine_value(const ParamBlock& block, const Tensor& x);
// Composition of blocks with depth <= upto_depth.
Tensor forward_prefix(const std::vector<ParamBlock>& blocks, const Tensor& x, int upto_depth,
                      Activation activation);

// ---- Losses / metrics on plain values ----

// Shannon entropy (nats) of the softmax of a length-C logits vector.
double softmax_entropy(const Tensor& logits);
// Per-row softmax entropy of a logits matrix.
Tensor softmax_entropy_rows(const Tensor& logits);
double cross_entropy_value(const Tensor& logits, const std::vector<int>& labels);
// Lowest class index wins ties.
int argmax_row(const Tensor& logits, int row);
double accuracy(const Tensor& logits, const std::vector<int>& labels);

// ---- SGD ----

struct BlockGrad {
  Tensor w;
  Tensor b;
};

void sgd_step(ParamBlock& block, const BlockGrad& grad, double lr);
// Steps each block by the gradient registered under its depth; a gradient
// keyed to a depth the list does not contain is an error.
void sgd_step(std::vector<ParamBlock>& blocks, const std::map<int, BlockGrad>& grads, double lr);

}  // namespace hsfl
