#include "hsfl/tape.hpp"

#include <cmath>
#include <utility>

namespace hsfl {

const Tensor& Gradients::at(NodeId id) const {
  auto it = map_.find(id);
  if (it == map_.end()) throw Error("Gradients::at: no gradient for node " + std::to_string(id));
  return it->second;
}

Tensor Gradients::or_zeros(NodeId id, const Tensor& like) const {
  auto it = map_.find(id);
  if (it != map_.end()) return it->second;
  return Tensor::zeros(like.shape);
}

NodeId Tape::push(Tensor value, uint64_t cost, std::function<void(Tape&, const Tensor&)> back) {
  nodes_.push_back(Node{std::move(value), false, cost, std::move(back)});
  work_ += cost;
  return static_cast<NodeId>(nodes_.size() - 1);
}

const Tape::Node& Tape::node(NodeId id) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw Error("Tape: node id out of range: " + std::to_string(id));
  return nodes_[static_cast<size_t>(id)];
}

const Tensor& Tape::value(NodeId id) const { return node(id).value; }

void Tape::mark_stop(NodeId id) {
  node(id);  // bounds check
  nodes_[static_cast<size_t>(id)].stop = true;
}

NodeId Tape::input(Tensor value) { return push(std::move(value), 0, nullptr); }

NodeId Tape::param(Tensor value) { return push(std::move(value), 0, nullptr); }

NodeId Tape::matmul(NodeId a, NodeId b) {
  Tensor out = matmul_value(value(a), value(b));
  const uint64_t macs = static_cast<uint64_t>(value(a).rows()) * value(a).cols() * value(b).cols();
  return push(std::move(out), macs, [a, b, macs](Tape& t, const Tensor& g) {
    t.accumulate_grad(a, matmul_nt(g, t.value(b)));
    t.accumulate_grad(b, matmul_tn(t.value(a), g));
    t.add_work(2 * macs);
  });
}

NodeId Tape::add_row_bias(NodeId a, NodeId bias) {
  const Tensor& x = value(a);
  const Tensor& v = value(bias);
  if (x.rank() != 2 || v.rank() != 1 || v.shape[0] != x.cols())
    throw Error("add_row_bias: shapes " + x.shape_str() + " and " + v.shape_str());
  Tensor out = x;
  for (int r = 0; r < x.rows(); ++r)
    for (int c = 0; c < x.cols(); ++c) out.at(r, c) += v.data[static_cast<size_t>(c)];
  const uint64_t cost = out.size();
  return push(std::move(out), cost, [a, bias, cost](Tape& t, const Tensor& g) {
    t.accumulate_grad(a, g);
    Tensor gb = Tensor::zeros(t.value(bias).shape);
    for (int r = 0; r < g.rows(); ++r)
      for (int c = 0; c < g.cols(); ++c) gb.data[static_cast<size_t>(c)] += g.at(r, c);
    t.accumulate_grad(bias, gb);
    t.add_work(2 * cost);
  });
}

NodeId Tape::relu(NodeId a) {
  Tensor out = value(a);
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const uint64_t cost = out.size();
  return push(std::move(out), cost, [a, cost](Tape& t, const Tensor& g) {
    const Tensor& x = t.value(a);
    Tensor gx = g;
    for (size_t i = 0; i < gx.data.size(); ++i)
      if (x.data[i] <= 0.0) gx.data[i] = 0.0;
    t.accumulate_grad(a, gx);
    t.add_work(2 * cost);
  });
}

NodeId Tape::weighted_sum(NodeId a, NodeId b, double ca, double cb) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (!x.same_shape(y))
    throw Error("weighted_sum: shapes " + x.shape_str() + " and " + y.shape_str());
  Tensor out = x;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] = ca * x.data[i] + cb * y.data[i];
  const uint64_t cost = out.size();
  return push(std::move(out), cost, [a, b, ca, cb, cost](Tape& t, const Tensor& g) {
    Tensor ga = g;
    for (double& v : ga.data) v *= ca;
    t.accumulate_grad(a, ga);
    Tensor gb = g;
    for (double& v : gb.data) v *= cb;
    t.accumulate_grad(b, gb);
    t.add_work(2 * cost);
  });
}

NodeId Tape::stop_gradient(NodeId a) {
  return push(value(a), 0, nullptr);
}

NodeId Tape::softmax_cross_entropy(NodeId logits, std::vector<int> labels) {
  const Tensor& z = value(logits);
  if (z.rank() != 2) throw Error("softmax_cross_entropy: logits must be a matrix");
  const int n = z.rows(), c = z.cols();
  if (labels.size() != static_cast<size_t>(n))
    throw Error("softmax_cross_entropy: label count does not match rows");
  for (int y : labels)
    if (y < 0 || y >= c) throw Error("softmax_cross_entropy: label out of range");

  // Stable row-wise log-sum-exp; loss is the mean negative log-likelihood.
  double total = 0.0;
  for (int r = 0; r < n; ++r) {
    double mx = z.at(r, 0);
    for (int j = 1; j < c; ++j) mx = std::max(mx, z.at(r, j));
    double se = 0.0;
    for (int j = 0; j < c; ++j) se += std::exp(z.at(r, j) - mx);
    total += std::log(se) + mx - z.at(r, labels[static_cast<size_t>(r)]);
  }
  Tensor out = Tensor::vec({total / n});
  const uint64_t cost = static_cast<uint64_t>(n) * c;
  return push(std::move(out), cost,
              [logits, labels = std::move(labels), cost](Tape& t, const Tensor& g) {
                const Tensor& z = t.value(logits);
                const int n = z.rows(), c = z.cols();
                const double scale = g.data[0] / n;
                Tensor gz = Tensor::zeros(z.shape);
                for (int r = 0; r < n; ++r) {
                  double mx = z.at(r, 0);
                  for (int j = 1; j < c; ++j) mx = std::max(mx, z.at(r, j));
                  double se = 0.0;
                  for (int j = 0; j < c; ++j) se += std::exp(z.at(r, j) - mx);
                  for (int j = 0; j < c; ++j) {
                    const double p = std::exp(z.at(r, j) - mx) / se;
                    gz.at(r, j) = scale * (p - (j == labels[static_cast<size_t>(r)] ? 1.0 : 0.0));
                  }
                }
                t.accumulate_grad(logits, gz);
                t.add_work(2 * cost);
              });
}

NodeId Tape::half_sum_squared_diff(NodeId a, Tensor target) {
  const Tensor& x = value(a);
  if (!x.same_shape(target))
    throw Error("half_sum_squared_diff: shapes " + x.shape_str() + " and " + target.shape_str());
  double total = 0.0;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double d = x.data[i] - target.data[i];
    total += 0.5 * d * d;
  }
  Tensor out = Tensor::vec({total});
  const uint64_t cost = x.size();
  return push(std::move(out), cost,
              [a, target = std::move(target), cost](Tape& t, const Tensor& g) {
                const Tensor& x = t.value(a);
                Tensor gx = Tensor::zeros(x.shape);
                for (size_t i = 0; i < x.data.size(); ++i)
                  gx.data[i] = g.data[0] * (x.data[i] - target.data[i]);
                t.accumulate_grad(a, gx);
                t.add_work(2 * cost);
              });
}

NodeId Tape::csa_pair_loss(NodeId a, NodeId b, std::vector<uint8_t> same_class, double margin) {
  const Tensor& x = value(a);
  const Tensor& y = value(b);
  if (x.rank() != 2 || !x.same_shape(y))
    throw Error("csa_pair_loss: shapes " + x.shape_str() + " and " + y.shape_str());
  const int p = x.rows(), d = x.cols();
  if (same_class.size() != static_cast<size_t>(p))
    throw Error("csa_pair_loss: indicator count does not match rows");
  if (margin < 0.0) throw Error("csa_pair_loss: margin must be non-negative");

  double total = 0.0;
  for (int r = 0; r < p; ++r) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const double diff = x.at(r, j) - y.at(r, j);
      sq += diff * diff;
    }
    if (same_class[static_cast<size_t>(r)]) {
      total += 0.5 * sq;
    } else {
      const double gap = margin - std::sqrt(sq);
      if (gap > 0.0) total += 0.5 * gap * gap;
    }
  }
  Tensor out = Tensor::vec({total / p});
  const uint64_t cost = static_cast<uint64_t>(p) * d;
  return push(std::move(out), cost,
              [a, b, same_class = std::move(same_class), margin, cost](Tape& t, const Tensor& g) {
                const Tensor& x = t.value(a);
                const Tensor& y = t.value(b);
                const int p = x.rows(), d = x.cols();
                const double scale = g.data[0] / p;
                Tensor ga = Tensor::zeros(x.shape);
                Tensor gb = Tensor::zeros(y.shape);
                for (int r = 0; r < p; ++r) {
                  double sq = 0.0;
                  for (int j = 0; j < d; ++j) {
                    const double diff = x.at(r, j) - y.at(r, j);
                    sq += diff * diff;
                  }
                  double coeff;  // d(loss_r)/d(diff) = coeff * diff
                  if (same_class[static_cast<size_t>(r)]) {
                    coeff = scale;
                  } else {
                    const double dist = std::sqrt(sq);
                    // Subgradient 0 at the dist==0 kink and beyond the margin.
                    coeff = (dist > 0.0 && dist < margin) ? -scale * (margin - dist) / dist : 0.0;
                  }
                  for (int j = 0; j < d; ++j) {
                    const double diff = x.at(r, j) - y.at(r, j);
                    ga.at(r, j) = coeff * diff;
                    gb.at(r, j) = -coeff * diff;
                  }
                }
                t.accumulate_grad(a, ga);
                t.accumulate_grad(b, gb);
                t.add_work(2 * cost);
              });
}

void Tape::accumulate_grad(NodeId id, const Tensor& g) {
  node(id);  // bounds check
  Tensor& slot = grad_buf_[static_cast<size_t>(id)];
  if (slot.empty() && !slot.same_shape(g)) {
    if (!g.same_shape(value(id)))
      throw Error("accumulate_grad: gradient shape " + g.shape_str() + " does not match value " +
                  value(id).shape_str());
    slot = g;
    return;
  }
  if (!slot.same_shape(g)) throw Error("accumulate_grad: conflicting gradient shapes");
  for (size_t i = 0; i < slot.data.size(); ++i) slot.data[i] += g.data[i];
}

Gradients Tape::backward(NodeId root, double seed) {
  Tensor g = Tensor::zeros(value(root).shape);
  for (double& v : g.data) v = seed;
  return backward(std::vector<Seed>{{root, std::move(g)}});
}

Gradients Tape::backward(const std::vector<Seed>& seeds) {
  grad_buf_.assign(nodes_.size(), Tensor{});
  for (const Seed& s : seeds) {
    if (!s.grad.same_shape(value(s.node)))
      throw Error("backward: seed shape " + s.grad.shape_str() + " does not match node value " +
                  value(s.node).shape_str());
    accumulate_grad(s.node, s.grad);
  }
  for (NodeId id = static_cast<NodeId>(nodes_.size()) - 1; id >= 0; --id) {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (grad_buf_[static_cast<size_t>(id)].empty()) continue;
    if (n.stop || !n.back) continue;
    n.back(*this, grad_buf_[static_cast<size_t>(id)]);
  }
  Gradients out;
  for (size_t id = 0; id < grad_buf_.size(); ++id)
    if (!grad_buf_[id].empty()) out.insert(static_cast<NodeId>(id), std::move(grad_buf_[id]));
  grad_buf_.clear();
  return out;
}

}  // namespace hsfl
