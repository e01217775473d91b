#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "voxseg/layers.hpp"
#include "voxseg/loss.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  relu,
  sum_all,
  conv3d,
  tconv3d,
  maxpool3d,
  batchnorm3d,
  softmax,
  concat,
  dice_class,
  weighted_mean,
};

using NodeId = std::int32_t;

namespace tapectx {

struct MaxPool {
  std::vector<std::int64_t> argmax;
};

struct BatchNorm {
  std::vector<double> mean, invstd;
  BNMode mode = BNMode::train;
};

struct DiceClass {
  std::int64_t class_id = 0;
  double eps = kDiceEps;
  double inter = 0.0, sum_p = 0.0, sum_r = 0.0;
};

struct WeightedMean {
  std::vector<double> weights;
};

using Any = std::variant<std::monostate, MaxPool, BatchNorm, DiceClass, WeightedMean>;

}  // namespace tapectx

/// Gradients of a scalar loss, keyed by tape node id. backward() fills an
/// entry for every leaf (zeros when the leaf does not influence the loss);
/// interior gradients are released as soon as they have been propagated.
template <class T>
class GradMap {
public:
  void put(NodeId id, Tensor<T> g) { grads_.emplace(id, std::move(g)); }
  bool contains(NodeId id) const { return grads_.count(id) != 0; }
  const Tensor<T>& at(NodeId id) const {
    auto it = grads_.find(id);
    if (it == grads_.end())
      throw std::out_of_range("GradMap: no gradient for node " + std::to_string(id));
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }

private:
  std::unordered_map<NodeId, Tensor<T>> grads_;
};

/// Reverse-mode tape. Recording an operation computes its forward value
/// immediately; backward() walks the nodes in reverse creation order and
/// accumulates gradients at fan-out, so one tape supports one forward pass.
/// Single-writer: concurrent recording onto one tape is not supported.
template <class T>
class Tape {
public:
  struct Node {
    OpKind kind = OpKind::leaf;
    std::vector<NodeId> inputs;
    Tensor<T> value;
    tapectx::Any ctx;
  };

  NodeId leaf(Tensor<T> value) {
    return push(OpKind::leaf, {}, std::move(value), std::monostate{});
  }

  /// Records a pure operation; forward value is computed here. Throws on an
  /// op kind that is not recordable through this entry point (batchnorm
  /// mutates external running stats and has its own overload).
  NodeId record(OpKind kind, std::span<const NodeId> inputs, tapectx::Any ctx = std::monostate{}) {
    for (NodeId id : inputs) check_id(id);
    switch (kind) {
      case OpKind::leaf:
        throw std::invalid_argument("record: use leaf() to add inputs");
      case OpKind::add:
        return push(kind, inputs, voxseg::add(value(inputs[0]), value(inputs[1])), {});
      case OpKind::sub:
        return push(kind, inputs, voxseg::sub(value(inputs[0]), value(inputs[1])), {});
      case OpKind::mul:
        return push(kind, inputs, voxseg::mul(value(inputs[0]), value(inputs[1])), {});
      case OpKind::relu:
        return push(kind, inputs, voxseg::relu(value(inputs[0])), {});
      case OpKind::sum_all:
        return push(kind, inputs,
                    Tensor<T>::filled({1, 1, 1, 1, 1}, sum_all(value(inputs[0]))), {});
      case OpKind::conv3d:
        return push(kind, inputs,
                    voxseg::conv3d(value(inputs[0]), value(inputs[1]), value(inputs[2])), {});
      case OpKind::tconv3d:
        return push(kind, inputs,
                    voxseg::tconv3d(value(inputs[0]), value(inputs[1]), value(inputs[2])), {});
      case OpKind::maxpool3d: {
        auto [pooled, argmax] = voxseg::maxpool3d(value(inputs[0]));
        return push(kind, inputs, std::move(pooled), tapectx::MaxPool{std::move(argmax)});
      }
      case OpKind::softmax:
        return push(kind, inputs, softmax_channels(value(inputs[0])), {});
      case OpKind::concat:
        return push(kind, inputs, concat_channels(value(inputs[0]), value(inputs[1])), {});
      case OpKind::dice_class: {
        auto* dc = std::get_if<tapectx::DiceClass>(&ctx);
        if (!dc) throw std::invalid_argument("record: dice_class needs a DiceClass context");
        const Tensor<T>& p = value(inputs[0]);
        const Tensor<T>& r = value(inputs[1]);
        if (!(p.shape() == r.shape()))
          throw std::invalid_argument("dice_class: shape mismatch");
        if (dc->class_id < 0 || dc->class_id >= p.shape().c)
          throw std::invalid_argument("dice_class: class id out of range");
        const auto sums = detail::dice_sums_channel(p, r, dc->class_id);
        dc->inter = sums.inter;
        dc->sum_p = sums.sum_p;
        dc->sum_r = sums.sum_r;
        const double loss = detail::dice_ratio(sums.inter, sums.sum_p, sums.sum_r, dc->eps);
        return push(kind, inputs, Tensor<T>::filled({1, 1, 1, 1, 1}, static_cast<T>(loss)),
                    std::move(ctx));
      }
      case OpKind::weighted_mean: {
        auto* wm = std::get_if<tapectx::WeightedMean>(&ctx);
        if (!wm) throw std::invalid_argument("record: weighted_mean needs weights");
        if (wm->weights.size() != inputs.size())
          throw std::invalid_argument("weighted_mean: weight count mismatch");
        double acc = 0.0;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
          const Tensor<T>& v = value(inputs[i]);
          if (v.size() != 1) throw std::invalid_argument("weighted_mean: inputs must be scalars");
          acc += wm->weights[i] * static_cast<double>(v[0]);
        }
        acc /= static_cast<double>(inputs.size());
        return push(kind, inputs, Tensor<T>::filled({1, 1, 1, 1, 1}, static_cast<T>(acc)),
                    std::move(ctx));
      }
      case OpKind::batchnorm3d:
        throw std::invalid_argument("record: batchnorm3d requires the stateful overload");
    }
    throw std::invalid_argument("record: unknown op kind " +
                                std::to_string(static_cast<int>(kind)));
  }

  NodeId add_op(NodeId a, NodeId b) { return record(OpKind::add, std::array{a, b}); }
  NodeId sub_op(NodeId a, NodeId b) { return record(OpKind::sub, std::array{a, b}); }
  NodeId mul_op(NodeId a, NodeId b) { return record(OpKind::mul, std::array{a, b}); }
  NodeId relu_op(NodeId x) { return record(OpKind::relu, std::array{x}); }
  NodeId sum_all_op(NodeId x) { return record(OpKind::sum_all, std::array{x}); }
  NodeId conv3d_op(NodeId x, NodeId w, NodeId b) {
    return record(OpKind::conv3d, std::array{x, w, b});
  }
  NodeId tconv3d_op(NodeId x, NodeId w, NodeId b) {
    return record(OpKind::tconv3d, std::array{x, w, b});
  }
  NodeId maxpool3d_op(NodeId x) { return record(OpKind::maxpool3d, std::array{x}); }
  NodeId softmax_op(NodeId x) { return record(OpKind::softmax, std::array{x}); }
  NodeId concat_op(NodeId a, NodeId b) { return record(OpKind::concat, std::array{a, b}); }
  NodeId dice_class_op(NodeId p, NodeId r, std::int64_t class_id, double eps = kDiceEps) {
    return record(OpKind::dice_class, std::array{p, r}, tapectx::DiceClass{class_id, eps});
  }
  NodeId weighted_mean_op(std::span<const NodeId> losses, std::vector<double> weights) {
    return record(OpKind::weighted_mean, losses, tapectx::WeightedMean{std::move(weights)});
  }

  /// Batch normalization; updates the caller's running stats in train mode
  /// at record time and saves the batch statistics for backward. The
  /// gradient of the target (r) input of dice_class is never produced; the
  /// target is a constant.
  NodeId batchnorm3d_op(NodeId x, NodeId gamma, NodeId beta, Tensor<T>& running_mean,
                        Tensor<T>& running_var, T momentum, T eps, BNMode mode) {
    check_id(x);
    check_id(gamma);
    check_id(beta);
    tapectx::BatchNorm ctx;
    ctx.mode = mode;
    Tensor<T> out = voxseg::batchnorm3d(value(x), value(gamma), value(beta), running_mean,
                                        running_var, momentum, eps, mode, &ctx.mean, &ctx.invstd);
    return push(OpKind::batchnorm3d, std::array{x, gamma, beta}, std::move(out), std::move(ctx));
  }

  const Tensor<T>& value(NodeId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].value;
  }
  OpKind kind(NodeId id) const {
    check_id(id);
    return nodes_[static_cast<std::size_t>(id)].kind;
  }
  std::size_t size() const { return nodes_.size(); }

  /// Reverse sweep from a scalar loss node. Returns gradients for every
  /// leaf; leaves that do not reach the loss get zeros. Does not mutate any
  /// forward value, so repeated calls return identical results.
  GradMap<T> backward(NodeId loss) const {
    check_id(loss);
    if (value(loss).size() != 1)
      throw std::invalid_argument("backward: loss node must be scalar, got " +
                                  value(loss).shape().str());
    std::vector<Tensor<T>> grads(nodes_.size());
    grads[static_cast<std::size_t>(loss)] = Tensor<T>::filled({1, 1, 1, 1, 1}, T(1));

    auto accum = [&](NodeId id, Tensor<T> g) {
      Tensor<T>& slot = grads[static_cast<std::size_t>(id)];
      if (slot.empty())
        slot = std::move(g);
      else
        slot = voxseg::add(slot, g);
    };

    for (NodeId id = loss; id >= 0; --id) {
      Tensor<T>& g = grads[static_cast<std::size_t>(id)];
      if (g.empty()) continue;
      const Node& node = nodes_[static_cast<std::size_t>(id)];
      const auto& in = node.inputs;
      switch (node.kind) {
        case OpKind::leaf:
          continue;  // keep the gradient
        case OpKind::add:
          accum(in[0], g);
          accum(in[1], std::move(g));
          break;
        case OpKind::sub: {
          accum(in[0], g);
          Tensor<T> neg = Tensor<T>::uninitialized(g.shape());
          for (std::int64_t i = 0; i < g.size(); ++i) neg[i] = -g[i];
          accum(in[1], std::move(neg));
          break;
        }
        case OpKind::mul:
          accum(in[0], voxseg::mul(g, value(in[1])));
          accum(in[1], voxseg::mul(g, value(in[0])));
          break;
        case OpKind::relu:
          accum(in[0], relu_backward(g, value(in[0])));
          break;
        case OpKind::sum_all:
          accum(in[0], Tensor<T>::filled(value(in[0]).shape(), g[0]));
          break;
        case OpKind::conv3d: {
          accum(in[0], conv3d_backward_input(g, value(in[1])));
          Tensor<T> gw = Tensor<T>::uninitialized(value(in[1]).shape());
          Tensor<T> gb = Tensor<T>::uninitialized(value(in[2]).shape());
          conv3d_backward_filter(g, value(in[0]), gw, gb);
          accum(in[1], std::move(gw));
          accum(in[2], std::move(gb));
          break;
        }
        case OpKind::tconv3d: {
          accum(in[0], tconv3d_backward_input(g, value(in[1])));
          Tensor<T> gw = Tensor<T>::uninitialized(value(in[1]).shape());
          Tensor<T> gb = Tensor<T>::uninitialized(value(in[2]).shape());
          tconv3d_backward_filter(g, value(in[0]), gw, gb);
          accum(in[1], std::move(gw));
          accum(in[2], std::move(gb));
          break;
        }
        case OpKind::maxpool3d: {
          const auto& ctx = std::get<tapectx::MaxPool>(node.ctx);
          accum(in[0], maxpool3d_backward(g, ctx.argmax, value(in[0]).shape()));
          break;
        }
        case OpKind::batchnorm3d: {
          const auto& ctx = std::get<tapectx::BatchNorm>(node.ctx);
          Tensor<T> gx = Tensor<T>::uninitialized(value(in[0]).shape());
          Tensor<T> ggamma = Tensor<T>::uninitialized(value(in[1]).shape());
          Tensor<T> gbeta = Tensor<T>::uninitialized(value(in[2]).shape());
          batchnorm3d_backward(g, value(in[0]), value(in[1]), ctx.mean, ctx.invstd, ctx.mode, gx,
                               ggamma, gbeta);
          accum(in[0], std::move(gx));
          accum(in[1], std::move(ggamma));
          accum(in[2], std::move(gbeta));
          break;
        }
        case OpKind::softmax:
          accum(in[0], softmax_channels_backward(g, node.value));
          break;
        case OpKind::concat: {
          const Shape5 sa = value(in[0]).shape();
          const Shape5 sb = value(in[1]).shape();
          Tensor<T> ga = Tensor<T>::uninitialized(sa);
          Tensor<T> gb = Tensor<T>::uninitialized(sb);
          const std::int64_t block = sa.spatial();
          for (std::int64_t n = 0; n < sa.n; ++n) {
            std::memcpy(ga.data() + n * sa.c * block, g.data() + n * (sa.c + sb.c) * block,
                        static_cast<std::size_t>(sa.c * block) * sizeof(T));
            std::memcpy(gb.data() + n * sb.c * block,
                        g.data() + (n * (sa.c + sb.c) + sa.c) * block,
                        static_cast<std::size_t>(sb.c * block) * sizeof(T));
          }
          accum(in[0], std::move(ga));
          accum(in[1], std::move(gb));
          break;
        }
        case OpKind::dice_class: {
          const auto& ctx = std::get<tapectx::DiceClass>(node.ctx);
          const Tensor<T>& p = value(in[0]);
          const Tensor<T>& r = value(in[1]);
          const double denom = ctx.sum_p + ctx.sum_r + ctx.eps;
          const double numer = 2.0 * ctx.inter + ctx.eps;
          const double gs = static_cast<double>(g[0]);
          Tensor<T> gp = Tensor<T>::zeros(p.shape());
          const Shape5 s = p.shape();
          const std::int64_t block = s.spatial();
          for (std::int64_t n = 0; n < s.n; ++n) {
            const T* rp = r.data() + (n * s.c + ctx.class_id) * block;
            T* out = gp.data() + (n * s.c + ctx.class_id) * block;
            for (std::int64_t i = 0; i < block; ++i)
              out[i] = static_cast<T>(
                  gs * (numer - 2.0 * static_cast<double>(rp[i]) * denom) / (denom * denom));
          }
          accum(in[0], std::move(gp));
          break;
        }
        case OpKind::weighted_mean: {
          const auto& ctx = std::get<tapectx::WeightedMean>(node.ctx);
          const double gs = static_cast<double>(g[0]);
          const double inv = 1.0 / static_cast<double>(in.size());
          for (std::size_t i = 0; i < in.size(); ++i)
            accum(in[i], Tensor<T>::filled({1, 1, 1, 1, 1},
                                           static_cast<T>(gs * ctx.weights[i] * inv)));
          break;
        }
      }
      g = Tensor<T>{};  // interior gradient fully propagated
    }

    GradMap<T> result;
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      if (nodes_[i].kind != OpKind::leaf) continue;
      const NodeId id = static_cast<NodeId>(i);
      Tensor<T>& g = grads[i];
      result.put(id, g.empty() ? Tensor<T>::zeros(nodes_[i].value.shape()) : std::move(g));
    }
    return result;
  }

private:
  void check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
      throw std::out_of_range("Tape: node id " + std::to_string(id) + " not on tape");
  }

  NodeId push(OpKind kind, std::span<const NodeId> inputs, Tensor<T> value, tapectx::Any ctx) {
    Node node;
    node.kind = kind;
    node.inputs.assign(inputs.begin(), inputs.end());
    node.value = std::move(value);
    node.ctx = std::move(ctx);
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

/// Central-difference gradient check in double precision. `build` receives a
/// fresh tape and the id of the leaf holding the checked tensor and returns
/// the scalar loss node. Returns the max over elements of
///   |analytic - central| / max(|analytic|, |central|, 1e-8).
template <class Builder>
double gradcheck(Builder&& build, const Tensor<double>& x, double eps) {
  auto eval = [&](const Tensor<double>& point) {
    Tape<double> tape;
    const NodeId loss = build(tape, tape.leaf(point));
    const Tensor<double>& v = tape.value(loss);
    if (v.size() != 1) throw std::invalid_argument("gradcheck: loss must be scalar");
    if (!std::isfinite(v[0])) throw std::runtime_error("gradcheck: non-finite loss value");
    return v[0];
  };

  Tape<double> tape;
  const NodeId xid = tape.leaf(x);
  const NodeId loss = build(tape, xid);
  if (tape.value(loss).size() != 1)
    throw std::invalid_argument("gradcheck: loss must be scalar");
  if (!std::isfinite(tape.value(loss)[0]))
    throw std::runtime_error("gradcheck: non-finite loss value");
  const GradMap<double> grads = tape.backward(loss);
  const Tensor<double>& analytic = grads.at(xid);

  Tensor<double> probe = x;
  double max_rel = 0.0;
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double f_plus = eval(probe);
    probe[i] = orig - eps;
    const double f_minus = eval(probe);
    probe[i] = orig;
    const double numeric = (f_plus - f_minus) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / denom);
  }
  return max_rel;
}

}  // namespace voxseg
