#pragma once

// Peak-memory model of one training step.
//
// The tape's schedule is replayed on shapes alone: the same nodes, the same
// release points and the same backward-use counts, so the predicted event
// list is identical to Tape::trace() for the real step. On top of the tape's
// tensors the model adds what lives for the whole run (parameters, their
// gradients, two Adam moments) and the largest scratch buffer any single op
// allocates outside the tape.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gigaseg/arch.hpp"
#include "gigaseg/autodiff.hpp"
#include "gigaseg/error.hpp"
#include "gigaseg/tensor.hpp"

namespace gigaseg {

class BudgetError : public Error {
 public:
  using Error::Error;
};

struct MemoryRow {
  std::string name;      // "value:L3.relu", "grad:L3.relu", "param:L3.w", ...
  std::string category;  // activations | gradients | parameters | optimizer | workspace
  Shape shape;
  std::size_t bytes = 0;
  std::size_t birth = 0;              // event index; persistent rows use 0
  std::optional<std::size_t> death;   // event index of the free; none = lives past the step
};

struct MemoryBreakdown {
  std::size_t activations = 0;
  std::size_t gradients = 0;
  std::size_t parameters = 0;
  std::size_t optimizer = 0;
  std::size_t workspace = 0;
  std::size_t total() const { return activations + gradients + parameters + optimizer + workspace; }
};

struct MemoryEstimate {
  std::size_t height = 0, width = 0, element_bytes = 4;
  std::vector<MemoryRow> rows;
  std::vector<MemoryEvent> events;  // tape tensors only
  std::size_t peak_event = 0;       // index into events where tape bytes peak
  std::size_t tape_peak_bytes = 0;
  std::size_t persistent_bytes = 0;
  std::size_t workspace_bytes = 0;
  MemoryBreakdown breakdown;  // at the peak
  std::size_t peak_bytes = 0;

  const MemoryRow* row(const std::string& name) const {
    for (const auto& r : rows)
      if (r.name == name) return &r;
    return nullptr;
  }
};

namespace detail {

// Shapes-only stand-in for Tape<T>: same use counting, same free rules.
class LivenessSim {
 public:
  struct Node {
    OpKind kind;
    std::vector<std::size_t> inputs;
    std::string label;
    Shape shape;
    bool requires_grad = false;
    bool released = false;
    bool value_live = false;
    bool external = false;
    std::size_t uses = 0;
    std::size_t row = 0;
  };

  explicit LivenessSim(std::size_t width, std::vector<MemoryRow>& rows) : width_(width), rows_(rows) {}

  std::size_t leaf(const std::string& label, Shape s) {
    Node n{OpKind::Input, {}, label, s};
    return add_owned(std::move(n));
  }
  std::size_t param(const std::string& label, Shape s) {
    Node n{OpKind::Param, {}, label, s};
    n.requires_grad = true;
    n.released = true;
    n.external = true;
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }
  std::size_t op(OpKind k, std::vector<std::size_t> in, const std::string& label, Shape s) {
    Node n{k, in, label, s};
    for (auto i : in) n.requires_grad = n.requires_grad || nodes_[i].requires_grad;
    switch (k) {
      case OpKind::Conv:
      case OpKind::TConv:
        if (nodes_[in[1]].requires_grad) ++nodes_[in[0]].uses;
        if (nodes_[in[0]].requires_grad) ++nodes_[in[1]].uses;
        break;
      case OpKind::Relu:
      case OpKind::Sigmoid:
        if (n.requires_grad) n.uses = 1;
        break;
      case OpKind::Bce:
        if (nodes_[in[0]].requires_grad) {
          ++nodes_[in[0]].uses;
          ++nodes_[in[1]].uses;
        }
        break;
      default:
        break;
    }
    return add_owned(std::move(n));
  }
  void release(std::size_t id) {
    nodes_[id].released = true;
    maybe_free(id);
  }

  void backward(std::size_t loss) {
    for (std::size_t id = 0; id < nodes_.size(); ++id)
      if (id != loss) release(id);
    grad_row_.assign(nodes_.size(), kNone);
    grad_alloc(loss);
    for (std::size_t id = loss + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.kind == OpKind::Input || n.kind == OpKind::Param) continue;
      if (grad_row_[id] != kNone) {
        step(id);
        grad_free(id);
      }
      for (auto in : backward_reads(id)) {
        --nodes_[in].uses;
        maybe_free(in);
      }
      if ((n.kind == OpKind::Relu || n.kind == OpKind::Sigmoid) && n.requires_grad) --n.uses;
      if (id != loss) maybe_free(id);
    }
  }

  const std::vector<MemoryEvent>& events() const { return events_; }

 private:
  static constexpr std::size_t kNone = static_cast<std::size_t>(-1);

  std::size_t bytes(const Shape& s) const { return s.numel() * width_; }

  std::size_t add_owned(Node n) {
    n.value_live = true;
    nodes_.push_back(std::move(n));
    const std::size_t id = nodes_.size() - 1;
    nodes_[id].row = open_row("value:", "activations", id);
    return id;
  }

  std::size_t open_row(const char* prefix, const char* category, std::size_t id) {
    const Node& n = nodes_[id];
    live_ += bytes(n.shape);
    ++count_;
    events_.push_back({MemoryEvent::Kind::Alloc, prefix + n.label, bytes(n.shape), live_, count_});
    rows_.push_back({prefix + n.label, category, n.shape, bytes(n.shape), events_.size() - 1, std::nullopt});
    return rows_.size() - 1;
  }
  void close_row(const char* prefix, std::size_t id, std::size_t row) {
    const Node& n = nodes_[id];
    live_ -= bytes(n.shape);
    --count_;
    events_.push_back({MemoryEvent::Kind::Free, prefix + n.label, bytes(n.shape), live_, count_});
    rows_[row].death = events_.size() - 1;
  }

  void maybe_free(std::size_t id) {
    Node& n = nodes_[id];
    if (n.released && n.uses == 0 && n.value_live) {
      n.value_live = false;
      close_row("value:", id, n.row);
    }
  }

  void grad_alloc(std::size_t id) { grad_row_[id] = open_row("grad:", "gradients", id); }
  void grad_free(std::size_t id) {
    close_row("grad:", id, grad_row_[id]);
    grad_row_[id] = kNone;
  }

  // Parameter gradients go straight to their persistent buffers.
  void deliver(std::size_t to) {
    if (nodes_[to].kind == OpKind::Param) return;
    if (grad_row_[to] == kNone) {
      grad_alloc(to);
    } else {
      const std::size_t keep = grad_row_[to];
      grad_alloc(to);
      grad_free(to);
      grad_row_[to] = keep;
    }
  }

  void step(std::size_t id) {
    const Node& n = nodes_[id];
    switch (n.kind) {
      case OpKind::Conv:
      case OpKind::TConv:
      case OpKind::Relu:
      case OpKind::Sigmoid:
      case OpKind::Bce:
        if (nodes_[n.inputs[0]].requires_grad) deliver(n.inputs[0]);
        break;
      case OpKind::Add:
        for (auto in : n.inputs)
          if (nodes_[in].requires_grad) deliver(in);
        break;
      default:
        break;
    }
  }

  std::vector<std::size_t> backward_reads(std::size_t id) const {
    const Node& n = nodes_[id];
    std::vector<std::size_t> r;
    if (n.kind == OpKind::Conv || n.kind == OpKind::TConv) {
      if (nodes_[n.inputs[1]].requires_grad) r.push_back(n.inputs[0]);
      if (nodes_[n.inputs[0]].requires_grad) r.push_back(n.inputs[1]);
    } else if (n.kind == OpKind::Bce && nodes_[n.inputs[0]].requires_grad) {
      r = {n.inputs[0], n.inputs[1]};
    }
    return r;
  }

  std::size_t width_;
  std::vector<MemoryRow>& rows_;
  std::vector<Node> nodes_;
  std::vector<std::size_t> grad_row_;
  std::vector<MemoryEvent> events_;
  std::size_t live_ = 0;
  std::size_t count_ = 0;
};

// Largest buffer one op holds outside the tape: the weight and bias gradient
// before they are added into the persistent gradients, plus the column tap
// tables of the gather kernels (three size_t arrays bounded by the output
// width times the taps per column).
inline std::size_t op_workspace(const ConvSpec& c, const LayerDims& in, const LayerDims& out,
                                std::size_t width) {
  const std::size_t weight = c.weight_count() * width + (c.has_bias ? c.out_channels * width : 0);
  const std::size_t taps_w = (c.kernel_w + c.stride - 1) / c.stride;
  // Transposed forward gathers over the output width; conv backward gathers
  // over the input width.
  const std::size_t cols = std::max(in.w, out.w);
  const std::size_t tables = sizeof(std::size_t) * ((cols + 1) + 2 * cols * taps_w);
  return weight + tables;
}

}  // namespace detail

// Predicted memory for one training step of `arch` on a height x width image
// with elements of element_bytes (4 for float, 8 for double).
inline MemoryEstimate estimate_training_peak(const ArchSpec& arch, std::size_t height, std::size_t width,
                                             std::size_t element_bytes = 4) {
  if (element_bytes == 0) throw ConfigError("element width must be >= 1 byte");
  const auto dims = infer_dims(arch, height, width);
  MemoryEstimate est;
  est.height = height;
  est.width = width;
  est.element_bytes = element_bytes;

  detail::LivenessSim sim(element_bytes, est.rows);
  const Shape img{1, 1, height, width};
  const std::size_t in = sim.leaf("input", img);
  const std::size_t tgt = sim.leaf("target", img);

  const std::size_t L = arch.layers.size();
  std::vector<std::size_t> pending(L, 0), act(L);
  for (std::size_t i = 0; i + 1 < L; ++i) pending[i] = 1;
  for (const auto& s : arch.skips) ++pending[s.source];
  auto consume = [&](std::size_t layer) {
    if (--pending[layer] == 0) sim.release(act[layer]);
  };

  std::size_t h = in;
  for (std::size_t i = 0; i < L; ++i) {
    const std::string tag = "L" + std::to_string(i);
    const ConvSpec& c = arch.layers[i].conv;
    const Shape out{1, dims[i].c, dims[i].h, dims[i].w};
    std::vector<std::size_t> ins{h, sim.param(tag + ".w", c.weight_shape())};
    if (c.has_bias) ins.push_back(sim.param(tag + ".b", Shape{1, c.out_channels, 1, 1}));
    std::size_t z = sim.op(c.transposed ? OpKind::TConv : OpKind::Conv, ins, tag + ".conv", out);
    if (i == 0) sim.release(in);
    else consume(i - 1);
    for (auto src : arch.skip_sources_into(i)) {
      const std::size_t sum = sim.op(OpKind::Add, {z, act[src]}, tag + ".add", out);
      sim.release(z);
      consume(src);
      z = sum;
    }
    const bool relu = arch.layers[i].act == Activation::Relu;
    act[i] = sim.op(relu ? OpKind::Relu : OpKind::Sigmoid, {z}, tag + (relu ? ".relu" : ".sigmoid"), out);
    sim.release(z);
    h = act[i];
  }
  const std::size_t loss = sim.op(OpKind::Bce, {h, tgt}, "loss", Shape{1, 1, 1, 1});
  sim.release(tgt);
  sim.release(h);
  sim.backward(loss);
  est.events = sim.events();

  for (std::size_t e = 0; e < est.events.size(); ++e)
    if (est.events[e].live_bytes > est.tape_peak_bytes) {
      est.tape_peak_bytes = est.events[e].live_bytes;
      est.peak_event = e;
    }

  // Persistent state.
  for (std::size_t i = 0; i < L; ++i) {
    const std::string tag = "L" + std::to_string(i);
    const ConvSpec& c = arch.layers[i].conv;
    std::vector<std::pair<std::string, Shape>> ps{{tag + ".w", c.weight_shape()}};
    if (c.has_bias) ps.push_back({tag + ".b", Shape{1, c.out_channels, 1, 1}});
    for (const auto& [name, s] : ps) {
      const std::size_t b = s.numel() * element_bytes;
      est.rows.push_back({"param:" + name, "parameters", s, b, 0, std::nullopt});
      est.rows.push_back({"param_grad:" + name, "gradients", s, b, 0, std::nullopt});
      est.rows.push_back({"adam_m:" + name, "optimizer", s, b, 0, std::nullopt});
      est.rows.push_back({"adam_v:" + name, "optimizer", s, b, 0, std::nullopt});
      est.breakdown.parameters += b;
      est.breakdown.gradients += b;
      est.breakdown.optimizer += 2 * b;
      est.persistent_bytes += 4 * b;
    }
  }

  std::size_t ws = 0, ws_layer = 0;
  for (std::size_t i = 0; i < L; ++i) {
    const LayerDims prev = i == 0 ? LayerDims{1, height, width} : dims[i - 1];
    const std::size_t w = detail::op_workspace(arch.layers[i].conv, prev, dims[i], element_bytes);
    if (w > ws) {
      ws = w;
      ws_layer = i;
    }
  }
  est.workspace_bytes = ws;
  est.breakdown.workspace = ws;
  est.rows.push_back({"workspace:L" + std::to_string(ws_layer), "workspace", Shape{1, 1, 1, ws}, ws, 0,
                      std::nullopt});

  // Split the tape bytes live at the peak by kind.
  for (const auto& r : est.rows) {
    if (r.category != "activations" && !(r.category == "gradients" && r.name.rfind("grad:", 0) == 0)) continue;
    const bool live = r.birth <= est.peak_event && (!r.death || *r.death > est.peak_event);
    if (!live) continue;
    (r.category == "activations" ? est.breakdown.activations : est.breakdown.gradients) += r.bytes;
  }
  est.peak_bytes = est.tape_peak_bytes + est.persistent_bytes + est.workspace_bytes;
  return est;
}

inline std::string with_commas(std::size_t v) {
  std::string s = std::to_string(v);
  for (std::ptrdiff_t i = static_cast<std::ptrdiff_t>(s.size()) - 3; i > 0; i -= 3)
    s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

inline std::string format_report(const MemoryEstimate& e) {
  std::ostringstream os;
  os << "training step memory estimate for 1x1x" << e.height << "x" << e.width << ", " << e.element_bytes
     << "-byte elements\n\n";
  os << std::left << std::setw(26) << "tensor" << std::setw(13) << "category" << std::setw(22) << "shape"
     << std::right << std::setw(20) << "bytes" << std::setw(8) << "birth" << std::setw(8) << "death" << "\n";
  for (const auto& r : e.rows) {
    os << std::left << std::setw(26) << r.name << std::setw(13) << r.category << std::setw(22) << r.shape.str()
       << std::right << std::setw(20) << with_commas(r.bytes) << std::setw(8) << r.birth << std::setw(8)
       << (r.death ? std::to_string(*r.death) : std::string("end")) << "\n";
  }
  const auto& b = e.breakdown;
  os << "\nat peak (event " << e.peak_event << " of " << e.events.size() << ")\n";
  auto line = [&](const char* k, std::size_t v) {
    os << "  " << std::left << std::setw(14) << k << std::right << std::setw(22) << with_commas(v) << "\n";
  };
  line("activations", b.activations);
  line("gradients", b.gradients);
  line("parameters", b.parameters);
  line("optimizer", b.optimizer);
  line("workspace", b.workspace);
  line("peak_bytes", e.peak_bytes);
  return os.str();
}

// One row per tensor, tab separated, plain integers.
inline std::string format_table(const MemoryEstimate& e) {
  std::ostringstream os;
  os << "name\tcategory\tn\tc\th\tw\tbytes\tbirth\tdeath\n";
  for (const auto& r : e.rows)
    os << r.name << '\t' << r.category << '\t' << r.shape.n << '\t' << r.shape.c << '\t' << r.shape.h << '\t'
       << r.shape.w << '\t' << r.bytes << '\t' << r.birth << '\t' << (r.death ? std::to_string(*r.death) : "-")
       << '\n';
  return os.str();
}

struct Dims {
  std::size_t height = 0, width = 0;
  friend bool operator==(const Dims&, const Dims&) = default;
};

namespace detail {

// Scale step u such that (aspect_h * u, aspect_w * u) are both multiples of
// the composite stride.
inline std::size_t lattice_step(std::size_t stride, std::size_t ah, std::size_t aw) {
  const std::size_t sh = stride / std::gcd(stride, ah), sw = stride / std::gcd(stride, aw);
  return std::lcm(sh, sw);
}

}  // namespace detail

// Largest (aspect_h * u, aspect_w * u) input whose estimate plus `overhead`
// fits in budget. Sizes that the network cannot take are skipped. Binary
// search over the lattice; the estimate grows with u.
inline Dims max_trainable_dims(const ArchSpec& arch, std::size_t budget, std::size_t aspect_h,
                               std::size_t aspect_w, std::size_t element_bytes = 4, std::size_t overhead = 0) {
  if (aspect_h == 0 || aspect_w == 0) throw ConfigError("aspect ratio entries must be >= 1");
  const std::size_t step = detail::lattice_step(arch.composite_stride(), aspect_h, aspect_w);
  auto dims_of = [&](std::size_t m) { return Dims{aspect_h * step * m, aspect_w * step * m}; };
  auto valid = [&](std::size_t m) {
    const Dims d = dims_of(m);
    return round_trips(arch, d.height, d.width);
  };
  auto fits = [&](std::size_t m) {
    const Dims d = dims_of(m);
    return valid(m) && estimate_training_peak(arch, d.height, d.width, element_bytes).peak_bytes + overhead <= budget;
  };

  // Smallest valid multiple; valid conv chains stay valid as the size grows
  // along the lattice once they start to.
  std::size_t lo = 0;
  for (std::size_t m = 1; m <= 4096; ++m)
    if (valid(m)) {
      lo = m;
      break;
    }
  if (lo == 0) throw ShapeError("no input size with this aspect ratio fits the network");
  if (!fits(lo))
    throw BudgetError("budget " + with_commas(budget) + " bytes is below the smallest trainable input (" +
                      std::to_string(dims_of(lo).height) + "x" + std::to_string(dims_of(lo).width) + " needs " +
                      with_commas(estimate_training_peak(arch, dims_of(lo).height, dims_of(lo).width,
                                                         element_bytes).peak_bytes + overhead) +
                      ")");
  std::size_t hi = lo * 2;
  while (fits(hi)) {
    lo = hi;
    hi *= 2;
  }
  while (hi - lo > 1) {
    const std::size_t mid = lo + (hi - lo) / 2;
    (fits(mid) ? lo : hi) = mid;
  }
  return dims_of(lo);
}

}  // namespace gigaseg
