#pragma once

#include <cstdint>
#include <functional>
#include <unordered_map>
#include <vector>

#include "hsfl/tensor.hpp"

namespace hsfl {

using NodeId = int32_t;

// A backward seed: the gradient of the objective with respect to one node.
struct Seed {
  NodeId node;
  Tensor grad;
};

// Result of a backward pass: gradients keyed by node. Nodes the seeds cannot
// reach (including anything behind a stop) are simply absent.
class Gradients {
 public:
  bool has(NodeId id) const { return map_.count(id) != 0; }
  const Tensor& at(NodeId id) const;
  // Gradient if present, otherwise zeros shaped like `like`.
  Tensor or_zeros(NodeId id, const Tensor& like) const;

  void insert(NodeId id, Tensor grad) { map_.emplace(id, std::move(grad)); }
  size_t size() const { return map_.size(); }

 private:
  std::unordered_map<NodeId, Tensor> map_;
};

// Reverse-mode tape. A tape records one forward pass; backward replays it in
// reverse creation order. Tapes are built fresh for every pass (training
// step, probe, inference) rather than reused.
//
// Scalar-valued ops (losses) produce tensors of shape [1].
class Tape {
 public:
  // Leaves. `param` is semantically a trainable parameter, `input` is data;
  // both receive gradients identically.
  NodeId input(Tensor value);
  NodeId param(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  // Adds a rank-1 bias to every row of a matrix.
  NodeId add_row_bias(NodeId a, NodeId bias);
  NodeId relu(NodeId a);
  // ca*A + cb*B for same-shape nodes.
  NodeId weighted_sum(NodeId a, NodeId b, double ca, double cb);
  // Copies the value; gradient arriving here is dropped.
  NodeId stop_gradient(NodeId a);

  // Mean cross-entropy of row-wise softmax against integer labels.
  NodeId softmax_cross_entropy(NodeId logits, std::vector<int> labels);
  // 0.5 * sum((a - target)^2), target constant.
  NodeId half_sum_squared_diff(NodeId a, Tensor target);
  // Mean over rows p of I_p * 0.5*||a_p-b_p||^2
  //                 + (1-I_p) * 0.5*max(0, margin-||a_p-b_p||)^2.
  NodeId csa_pair_loss(NodeId a, NodeId b, std::vector<uint8_t> same_class, double margin);

  // Blocks gradient from flowing through the given node during backward; the
  // node still accumulates (and reports) the gradient arriving at it.
  void mark_stop(NodeId id);

  const Tensor& value(NodeId id) const;
  size_t node_count() const { return nodes_.size(); }

  // Multiply-accumulate count of the work recorded so far (forward ops at
  // creation, backward ops as executed). Simulated-time accounting.
  uint64_t work() const { return work_; }
  void add_work(uint64_t macs) { work_ += macs; }

  Gradients backward(NodeId root, double seed = 1.0);
  Gradients backward(const std::vector<Seed>& seeds);

  // Used by op backward closures to push gradient to their inputs.
  void accumulate_grad(NodeId id, const Tensor& g);

 private:
  struct Node {
    Tensor value;
    bool stop = false;
    uint64_t cost = 0;  // forward MACs; backward charges 2x when executed
    std::function<void(Tape&, const Tensor&)> back;
  };

  NodeId push(Tensor value, uint64_t cost, std::function<void(Tape&, const Tensor&)> back);
  const Node& node(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> grad_buf_;  // live only inside backward()
  uint64_t work_ = 0;
};

}  // namespace hsfl
