#pragma once

// Reverse-mode differentiation over the fixed op set.
//
// Forward values are computed eagerly as nodes are recorded. A value stays
// resident while the builder may still consume it (until release()) or while
// some backward step needs it; it is freed at the first moment neither holds.
// backward() walks nodes in reverse id order and frees every activation and
// activation gradient right after its last use. Each allocation and free of a
// tape-owned tensor is appended to trace(), which is the schedule the memory
// planner predicts.

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gigaseg/error.hpp"
#include "gigaseg/loss.hpp"
#include "gigaseg/ops.hpp"
#include "gigaseg/parallel.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

using NodeId = std::size_t;

enum class OpKind { Input, Param, Conv, TConv, Relu, Sigmoid, Add, Bce };

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::Input: return "input";
    case OpKind::Param: return "param";
    case OpKind::Conv: return "conv";
    case OpKind::TConv: return "tconv";
    case OpKind::Relu: return "relu";
    case OpKind::Sigmoid: return "sigmoid";
    case OpKind::Add: return "add";
    case OpKind::Bce: return "bce";
  }
  return "?";
}

struct MemoryEvent {
  enum class Kind { Alloc, Free };
  Kind kind;
  std::string label;  // "value:<node label>" or "grad:<node label>"
  std::size_t bytes;
  std::size_t live_bytes;  // after the event
  std::size_t live_count;

  friend bool operator==(const MemoryEvent&, const MemoryEvent&) = default;
};

template <typename T>
class Tape {
 public:
  struct Node {
    OpKind kind{};
    std::vector<NodeId> inputs;
    ConvSpec spec{};
    std::string label;
    Shape shape{};
    std::optional<Tensor<T>> owned;
    const Tensor<T>* external = nullptr;  // Param leaves
    Tensor<T>* grad_sink = nullptr;       // Param leaves
    bool requires_grad = false;
    bool released = false;
    std::size_t backward_uses = 0;
  };

  explicit Tape(ExecPolicy policy = {}, bool grad_enabled = true)
      : policy_(policy), grad_enabled_(grad_enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Constant (or differentiable, for tests) leaf owned by the tape.
  NodeId input(Tensor<T> value, std::string label = "input", bool requires_grad = false) {
    Node n;
    n.kind = OpKind::Input;
    n.label = std::move(label);
    n.shape = value.shape();
    n.requires_grad = grad_enabled_ && requires_grad;
    n.owned = std::move(value);
    const NodeId id = push(std::move(n));
    note_alloc("value:", id, nodes_[id].owned->bytes());
    return id;
  }

  // Parameter leaf referencing external storage. Gradients accumulate into
  // *grad_sink when given, otherwise they are returned by backward().
  NodeId param(const Tensor<T>& value, Tensor<T>* grad_sink = nullptr, std::string label = "param") {
    Node n;
    n.kind = OpKind::Param;
    n.label = std::move(label);
    n.shape = value.shape();
    n.external = &value;
    n.grad_sink = grad_sink;
    n.requires_grad = grad_enabled_;
    n.released = true;
    if (grad_sink && grad_sink->shape() != value.shape())
      throw ShapeError("gradient sink shape " + grad_sink->shape().str() + " != parameter " +
                       value.shape().str());
    return push(std::move(n));
  }

  // Generic entry point for computed ops.
  NodeId record(OpKind kind, std::span<const NodeId> inputs, const ConvSpec* spec = nullptr,
                std::string label = {}) {
    for (NodeId in : inputs) {
      if (in >= nodes_.size())
        throw TapeError("input id " + std::to_string(in) + " is not on the tape (size " +
                        std::to_string(nodes_.size()) + ")");
      if (!has_value(in))
        throw TapeError("value of node " + std::to_string(in) + " (" + nodes_[in].label +
                        ") was already freed");
    }
    auto arity = [&](std::size_t lo, std::size_t hi) {
      if (inputs.size() < lo || inputs.size() > hi)
        throw TapeError(std::string(op_name(kind)) + " takes " + std::to_string(lo) + ".." +
                        std::to_string(hi) + " inputs, got " + std::to_string(inputs.size()));
    };

    Node n;
    n.kind = kind;
    n.inputs.assign(inputs.begin(), inputs.end());
    n.label = label.empty() ? std::string(op_name(kind)) + std::to_string(nodes_.size()) : std::move(label);
    for (NodeId in : inputs) n.requires_grad = n.requires_grad || nodes_[in].requires_grad;

    switch (kind) {
      case OpKind::Conv:
      case OpKind::TConv: {
        arity(2, 3);
        if (!spec) throw TapeError("conv node needs a ConvSpec");
        n.spec = *spec;
        if (n.spec.transposed != (kind == OpKind::TConv))
          throw TapeError("conv spec transposed flag does not match op kind");
        if (n.spec.has_bias != (inputs.size() == 3))
          throw TapeError("conv bias input does not match spec.has_bias");
        const Tensor<T>& x = value(inputs[0]);
        const Tensor<T>& w = value(inputs[1]);
        std::span<const T> b;
        if (inputs.size() == 3) b = value(inputs[2]).span();
        n.owned = kind == OpKind::Conv ? conv2d_forward(x, w, b, n.spec, policy_)
                                       : tconv2d_forward(x, w, b, n.spec, policy_);
        if (grad_enabled_) {
          if (nodes_[inputs[1]].requires_grad) ++nodes_[inputs[0]].backward_uses;
          if (nodes_[inputs[0]].requires_grad) ++nodes_[inputs[1]].backward_uses;
        }
        break;
      }
      case OpKind::Relu:
        arity(1, 1);
        n.owned = relu_forward(value(inputs[0]));
        if (grad_enabled_ && n.requires_grad) n.backward_uses = 1;
        break;
      case OpKind::Sigmoid:
        arity(1, 1);
        n.owned = sigmoid_forward(value(inputs[0]));
        if (grad_enabled_ && n.requires_grad) n.backward_uses = 1;
        break;
      case OpKind::Add:
        arity(2, 2);
        n.owned = add_forward(value(inputs[0]), value(inputs[1]));
        break;
      case OpKind::Bce: {
        arity(2, 2);
        const double loss = bce_loss(value(inputs[0]), value(inputs[1]));
        n.owned = Tensor<T>(Shape{1, 1, 1, 1}, static_cast<T>(loss));
        if (grad_enabled_ && nodes_[inputs[0]].requires_grad) {
          ++nodes_[inputs[0]].backward_uses;
          ++nodes_[inputs[1]].backward_uses;
        }
        break;
      }
      default:
        throw TapeError("op kind " + std::to_string(static_cast<int>(kind)) +
                        " cannot be recorded as a computed node");
    }
    n.shape = n.owned->shape();
    const NodeId id = push(std::move(n));
    note_alloc("value:", id, nodes_[id].owned->bytes());
    return id;
  }

  NodeId conv(NodeId x, NodeId w, std::optional<NodeId> b, const ConvSpec& spec, std::string label = {}) {
    std::vector<NodeId> in{x, w};
    if (b) in.push_back(*b);
    return record(spec.transposed ? OpKind::TConv : OpKind::Conv, in, &spec, std::move(label));
  }
  NodeId relu(NodeId x, std::string label = {}) { return unary(OpKind::Relu, x, std::move(label)); }
  NodeId sigmoid(NodeId x, std::string label = {}) { return unary(OpKind::Sigmoid, x, std::move(label)); }
  NodeId add(NodeId a, NodeId b, std::string label = {}) {
    const NodeId in[2] = {a, b};
    return record(OpKind::Add, in, nullptr, std::move(label));
  }
  NodeId bce(NodeId pred, NodeId target, std::string label = "loss") {
    const NodeId in[2] = {pred, target};
    return record(OpKind::Bce, in, nullptr, std::move(label));
  }

  // The builder will record no further consumers of id.
  void release(NodeId id) {
    Node& n = at(id);
    n.released = true;
    maybe_free(id);
  }

  const Tensor<T>& value(NodeId id) const {
    const Node& n = nodes_.at(id);
    if (n.external) return *n.external;
    if (!n.owned) throw TapeError("value of node " + std::to_string(id) + " (" + n.label + ") was freed");
    return *n.owned;
  }
  bool has_value(NodeId id) const { return nodes_.at(id).external || nodes_.at(id).owned.has_value(); }

  // Gradients of leaves that requested them and have no sink.
  std::map<NodeId, Tensor<T>> backward(NodeId loss) {
    if (!grad_enabled_) throw TapeError("backward on a tape recorded without gradients");
    if (backward_done_) throw TapeError("backward already ran on this tape");
    const Node& ln = at(loss);
    if (ln.shape.numel() != 1) throw TapeError("loss node " + ln.label + " is not scalar: " + ln.shape.str());
    backward_done_ = true;

    for (NodeId id = 0; id < nodes_.size(); ++id)
      if (id != loss) release(id);

    grads_.assign(nodes_.size(), std::nullopt);
    grads_[loss] = Tensor<T>(ln.shape, T(1));
    note_alloc("grad:", loss, grads_[loss]->bytes());

    std::map<NodeId, Tensor<T>> leaf_grads;
    for (NodeId id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.kind == OpKind::Input || n.kind == OpKind::Param) {
        if (grads_[id]) leaf_grads.emplace(id, std::move(*grads_[id]));
        continue;
      }
      if (grads_[id]) step_back(id);
      for (NodeId in : used_by_backward(id)) {
        --nodes_[in].backward_uses;
        maybe_free(in);
      }
      if ((n.kind == OpKind::Relu || n.kind == OpKind::Sigmoid) && n.requires_grad)
        --n.backward_uses;
      if (id != loss) maybe_free(id);
    }
    return leaf_grads;
  }

  std::size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const std::vector<MemoryEvent>& trace() const { return trace_; }
  std::size_t live_bytes() const { return live_bytes_; }
  std::size_t live_count() const { return live_count_; }
  std::size_t peak_live_bytes() const { return peak_bytes_; }
  const ExecPolicy& policy() const { return policy_; }
  bool grad_enabled() const { return grad_enabled_; }

 private:
  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }

  Node& at(NodeId id) {
    if (id >= nodes_.size()) throw TapeError("node id " + std::to_string(id) + " is not on the tape");
    return nodes_[id];
  }

  NodeId unary(OpKind k, NodeId x, std::string label) {
    const NodeId in[1] = {x};
    return record(k, in, nullptr, std::move(label));
  }

  // Inputs whose values the backward step of id reads.
  std::vector<NodeId> used_by_backward(NodeId id) const {
    const Node& n = nodes_[id];
    std::vector<NodeId> used;
    switch (n.kind) {
      case OpKind::Conv:
      case OpKind::TConv:
        if (nodes_[n.inputs[1]].requires_grad) used.push_back(n.inputs[0]);
        if (nodes_[n.inputs[0]].requires_grad) used.push_back(n.inputs[1]);
        break;
      case OpKind::Bce:
        if (nodes_[n.inputs[0]].requires_grad) {
          used.push_back(n.inputs[0]);
          used.push_back(n.inputs[1]);
        }
        break;
      default:
        break;
    }
    return used;
  }

  void maybe_free(NodeId id) {
    Node& n = nodes_[id];
    if (n.released && n.backward_uses == 0 && n.owned) {
      const std::size_t bytes = n.owned->bytes();
      n.owned.reset();
      note_free("value:", id, bytes);
    }
  }

  void step_back(NodeId id) {
    Node& n = nodes_[id];
    const Tensor<T>& g = *grads_[id];
    switch (n.kind) {
      case OpKind::Conv:
      case OpKind::TConv: {
        const NodeId x = n.inputs[0];
        const NodeId w = n.inputs[1];
        const bool want_x = nodes_[x].requires_grad;
        const bool want_w = nodes_[w].requires_grad;
        const bool want_b = n.inputs.size() == 3 && nodes_[n.inputs[2]].requires_grad;
        if (!want_x && !want_w && !want_b) break;
        // Weight/bias gradients need the input value only when the weights train.
        static const Tensor<T> kNone;
        const Tensor<T>& xv = want_w ? value(x) : kNone;
        const Tensor<T>& wv = value(w);
        ConvGrads<T> cg;
        if (want_w) {
          cg = n.kind == OpKind::Conv ? conv2d_backward(g, xv, wv, n.spec, policy_, want_x)
                                      : tconv2d_backward(g, xv, wv, n.spec, policy_, want_x);
        } else {
          cg = input_only(g, wv, n);
        }
        if (want_x) deliver(x, std::move(cg.input));
        if (want_w) deliver_param(w, std::move(cg.weights));
        if (want_b) {
          const Shape bs = nodes_[n.inputs[2]].shape;
          deliver_param(n.inputs[2], Tensor<T>(bs, std::move(cg.bias)));
        }
        break;
      }
      case OpKind::Relu:
        if (nodes_[n.inputs[0]].requires_grad) deliver(n.inputs[0], relu_backward(g, *n.owned));
        break;
      case OpKind::Sigmoid:
        if (nodes_[n.inputs[0]].requires_grad) deliver(n.inputs[0], sigmoid_backward(g, *n.owned));
        break;
      case OpKind::Add:
        for (NodeId in : n.inputs)
          if (nodes_[in].requires_grad) deliver(in, Tensor<T>(g));
        break;
      case OpKind::Bce:
        if (nodes_[n.inputs[0]].requires_grad)
          deliver(n.inputs[0], bce_grad(value(n.inputs[0]), value(n.inputs[1]), kBceEpsilon,
                                        static_cast<double>(g[0])));
        break;
      default:
        break;
    }
    const std::size_t bytes = grads_[id]->bytes();
    grads_[id].reset();
    note_free("grad:", id, bytes);
  }

  // Input gradient when the weights are frozen.
  ConvGrads<T> input_only(const Tensor<T>& g, const Tensor<T>& w, const Node& n) const {
    ConvGrads<T> cg;
    const Shape xs = nodes_[n.inputs[0]].shape;
    cg.input = Tensor<T>(xs);
    if (n.kind == OpKind::Conv)
      detail::spread(g, w.data(), std::span<const T>{}, n.spec.kernel_h, n.spec.kernel_w,
                     n.spec.stride, cg.input, policy_);
    else
      detail::correlate(g, w.data(), std::span<const T>{}, n.spec.kernel_h, n.spec.kernel_w,
                        n.spec.stride, cg.input, policy_);
    return cg;
  }

  void deliver(NodeId to, Tensor<T> contrib) {
    Node& n = nodes_[to];
    if (n.kind == OpKind::Param) {
      deliver_param(to, std::move(contrib));
      return;
    }
    note_alloc("grad:", to, contrib.bytes());
    if (grads_[to]) {
      accumulate_into(*grads_[to], contrib);
      note_free("grad:", to, contrib.bytes());
    } else {
      grads_[to] = std::move(contrib);
    }
  }

  void deliver_param(NodeId to, Tensor<T> contrib) {
    Node& n = nodes_[to];
    if (n.grad_sink) {
      accumulate_into(*n.grad_sink, contrib);
    } else if (grads_[to]) {
      accumulate_into(*grads_[to], contrib);
    } else {
      grads_[to] = std::move(contrib);
    }
  }

  void note_alloc(const char* what, NodeId id, std::size_t bytes) {
    live_bytes_ += bytes;
    ++live_count_;
    peak_bytes_ = std::max(peak_bytes_, live_bytes_);
    trace_.push_back({MemoryEvent::Kind::Alloc, what + nodes_[id].label, bytes, live_bytes_, live_count_});
  }
  void note_free(const char* what, NodeId id, std::size_t bytes) {
    live_bytes_ -= bytes;
    --live_count_;
    trace_.push_back({MemoryEvent::Kind::Free, what + nodes_[id].label, bytes, live_bytes_, live_count_});
  }

  ExecPolicy policy_;
  bool grad_enabled_;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
  std::vector<std::optional<Tensor<T>>> grads_;
  std::vector<MemoryEvent> trace_;
  std::size_t live_bytes_ = 0;
  std::size_t live_count_ = 0;
  std::size_t peak_bytes_ = 0;
};

}  // namespace gigaseg
