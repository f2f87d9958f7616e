// SPDX-License-Identifier: Apache-2.0
//
// Dense f64 tensor engine with shape-checked primitives and a reverse-mode
// tape. Tensors are immutable values (copies share storage); every operation
// returns a new Tensor. When a Tape is active on the current thread and any
// input requires grad, the op records a node whose closure produces the
// input gradients from the output gradient.

#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "srm/rng.hpp"

namespace srm {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error {
  using Error::Error;
};
struct ValueError : Error {
  using Error::Error;
};

using Shape = std::vector<std::int64_t>;
using TensorId = std::int64_t;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  if (s.empty()) return "scalar";
  std::ostringstream os;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << "x";
    os << s[i];
  }
  return os.str();
}

inline std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
  return st;
}

namespace detail {
inline TensorId fresh_id() {
  static std::atomic<TensorId> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : shape_(std::move(shape)),
        data_(std::make_shared<const std::vector<double>>(std::move(data))),
        id_(detail::fresh_id()),
        requires_grad_(requires_grad) {
    if (shape_.size() > 4) throw ShapeError("tensor rank > 4: " + shape_str(shape_));
    for (auto d : shape_)
      if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape_));
    if (numel_of(shape_) != static_cast<std::int64_t>(data_->size()))
      throw ShapeError("data length " + std::to_string(data_->size()) +
                       " does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(const Shape& s, bool requires_grad = false) {
    return Tensor(s, std::vector<double>(static_cast<std::size_t>(numel_of(s)), 0.0),
                  requires_grad);
  }
  static Tensor full(const Shape& s, double v, bool requires_grad = false) {
    return Tensor(s, std::vector<double>(static_cast<std::size_t>(numel_of(s)), v),
                  requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
  std::span<const double> data() const { return {data_->data(), data_->size()}; }
  const double* ptr() const { return data_->data(); }
  TensorId id() const { return id_; }
  bool requires_grad() const { return requires_grad_; }

  double value() const {
    if (numel() != 1) throw ShapeError("value(): tensor is not scalar: " + shape_str(shape_));
    return (*data_)[0];
  }

  double at(std::initializer_list<std::int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank()) throw ShapeError("at(): index rank mismatch");
    auto st = strides_of(shape_);
    std::int64_t off = 0;
    int i = 0;
    for (auto v : idx) off += v * st[static_cast<std::size_t>(i++)];
    return (*data_)[static_cast<std::size_t>(off)];
  }

  // Same values, no grad tracking.
  Tensor detach() const {
    return Tensor(shape_, std::vector<double>(data_->begin(), data_->end()), false);
  }

 private:
  Shape shape_;
  std::shared_ptr<const std::vector<double>> data_;
  TensorId id_ = -1;
  bool requires_grad_ = false;
};

inline Tensor zeros_like(const Tensor& t) { return Tensor::zeros(t.shape()); }
inline Tensor ones_like(const Tensor& t) { return Tensor::full(t.shape(), 1.0); }

inline Tensor randn(const Shape& s, Rng& rng, bool requires_grad = false) {
  std::vector<double> d(static_cast<std::size_t>(numel_of(s)));
  for (auto& v : d) v = rng.normal();
  return Tensor(s, std::move(d), requires_grad);
}

inline Tensor rand_uniform(const Shape& s, double lo, double hi, Rng& rng,
                           bool requires_grad = false) {
  std::vector<double> d(static_cast<std::size_t>(numel_of(s)));
  for (auto& v : d) v = rng.uniform(lo, hi);
  return Tensor(s, std::move(d), requires_grad);
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  double m = 0.0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a.ptr()[i] - b.ptr()[i]));
  return m;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::int64_t i = 0; i < a.numel(); ++i)
    if (a.ptr()[i] != b.ptr()[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Tape

// Given the output gradient, produce one gradient per recorded input (same
// order and shapes). An undefined slot means "no gradient for this input".
using BackwardFn = std::function<std::vector<Tensor>(const Tensor&)>;

struct TapeNode {
  TensorId out = -1;
  std::vector<TensorId> inputs;
  const char* rule = "";
  BackwardFn backward;
};

class Gradients {
 public:
  Tensor at(const Tensor& t) const {
    auto it = grads_.find(t.id());
    if (it != grads_.end()) return it->second;
    if (t.requires_grad()) return zeros_like(t);
    throw ValueError("Gradients::at: tensor does not require grad");
  }
  bool contains(const Tensor& t) const { return grads_.count(t.id()) > 0; }

  const Tensor* find(TensorId id) const {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
  }

  void accumulate(TensorId id, const Tensor& g) {
    auto it = grads_.find(id);
    if (it == grads_.end()) {
      grads_.emplace(id, g);
      return;
    }
    if (it->second.shape() != g.shape())
      throw ShapeError("gradient shape mismatch: " + shape_str(it->second.shape()) + " vs " +
                       shape_str(g.shape()));
    std::vector<double> d(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) d[i] = it->second.ptr()[i] + g.ptr()[i];
    it->second = Tensor(g.shape(), std::move(d));
  }

 private:
  std::unordered_map<TensorId, Tensor> grads_;
};

class Tape;

namespace detail {
inline Tape*& active_tape() {
  thread_local Tape* t = nullptr;
  return t;
}
inline bool& recording_enabled() {
  thread_local bool b = true;
  return b;
}
struct RecordingSuspend {
  RecordingSuspend() : prev(recording_enabled()) { recording_enabled() = false; }
  ~RecordingSuspend() { recording_enabled() = prev; }
  RecordingSuspend(const RecordingSuspend&) = delete;
  bool prev;
};
}  // namespace detail

class Tape {
 public:
  Tape() {
    if (detail::active_tape()) throw ValueError("a Tape is already active on this thread");
    detail::active_tape() = this;
  }
  ~Tape() { detail::active_tape() = nullptr; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  void push(TapeNode n) { nodes_.push_back(std::move(n)); }

  // Reverse sweep; visits each node exactly once.
  Gradients backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
      throw ValueError("backward: loss must be a scalar tensor, got " +
                       (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    if (!loss.requires_grad())
      throw ValueError("backward: loss is detached (not produced on the active tape)");
    detail::RecordingSuspend guard;
    Gradients grads;
    grads.accumulate(loss.id(), ones_like(loss));
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      const TapeNode& node = *it;
      const Tensor* gout = grads.find(node.out);
      if (!gout) continue;
      std::vector<Tensor> gins = node.backward(*gout);
      if (gins.size() != node.inputs.size())
        throw ValueError(std::string("backward rule '") + node.rule +
                         "' returned wrong gradient count");
      for (std::size_t i = 0; i < gins.size(); ++i)
        if (gins[i].defined()) grads.accumulate(node.inputs[i], gins[i]);
    }
    return grads;
  }

 private:
  std::vector<TapeNode> nodes_;
};

// Records a node when a tape is active, recording is enabled, and any input
// requires grad. Public so that tests can install custom (or deliberately
// broken) backward rules.
inline Tensor make_op(const char* rule, Shape shape, std::vector<double> data,
                      const std::vector<Tensor>& inputs, BackwardFn backward) {
  bool track = false;
  Tape* tape = detail::active_tape();
  if (tape && detail::recording_enabled())
    for (const auto& in : inputs)
      if (in.requires_grad()) {
        track = true;
        break;
      }
  Tensor out(std::move(shape), std::move(data), track);
  if (track) {
    TapeNode node;
    node.out = out.id();
    node.inputs.reserve(inputs.size());
    for (const auto& in : inputs) node.inputs.push_back(in.id());
    node.rule = rule;
    node.backward = std::move(backward);
    tape->push(std::move(node));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise and structural primitives

namespace detail {
inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}
}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> d(static_cast<std::size_t>(a.numel()));
  for (std::int64_t i = 0; i < a.numel(); ++i) d[i] = a.ptr()[i] + b.ptr()[i];
  return make_op("add", a.shape(), std::move(d), {a, b},
                 [](const Tensor& g) { return std::vector<Tensor>{g, g}; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> d(static_cast<std::size_t>(a.numel()));
  for (std::int64_t i = 0; i < a.numel(); ++i) d[i] = a.ptr()[i] - b.ptr()[i];
  return make_op("sub", a.shape(), std::move(d), {a, b}, [](const Tensor& g) {
    std::vector<double> n(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) n[i] = -g.ptr()[i];
    return std::vector<Tensor>{g, Tensor(g.shape(), std::move(n))};
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> d(static_cast<std::size_t>(a.numel()));
  for (std::int64_t i = 0; i < a.numel(); ++i) d[i] = a.ptr()[i] * b.ptr()[i];
  return make_op("mul", a.shape(), std::move(d), {a, b}, [a, b](const Tensor& g) {
    std::vector<double> ga(static_cast<std::size_t>(g.numel())),
        gb(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      ga[i] = g.ptr()[i] * b.ptr()[i];
      gb[i] = g.ptr()[i] * a.ptr()[i];
    }
    return std::vector<Tensor>{Tensor(g.shape(), std::move(ga)), Tensor(g.shape(), std::move(gb))};
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("div", a, b);
  std::vector<double> d(static_cast<std::size_t>(a.numel()));
  for (std::int64_t i = 0; i < a.numel(); ++i) d[i] = a.ptr()[i] / b.ptr()[i];
  return make_op("div", a.shape(), std::move(d), {a, b}, [a, b](const Tensor& g) {
    std::vector<double> ga(static_cast<std::size_t>(g.numel())),
        gb(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) {
      const double bi = b.ptr()[i];
      ga[i] = g.ptr()[i] / bi;
      gb[i] = -g.ptr()[i] * a.ptr()[i] / (bi * bi);
    }
    return std::vector<Tensor>{Tensor(g.shape(), std::move(ga)), Tensor(g.shape(), std::move(gb))};
  });
}

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) d[i] = x.ptr()[i] * c;
  return make_op("scale", x.shape(), std::move(d), {x}, [c](const Tensor& g) {
    std::vector<double> n(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) n[i] = g.ptr()[i] * c;
    return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
  });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) d[i] = x.ptr()[i] + c;
  return make_op("add_scalar", x.shape(), std::move(d), {x},
                 [](const Tensor& g) { return std::vector<Tensor>{g}; });
}

inline Tensor sqrt(const Tensor& x) {
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) d[i] = std::sqrt(x.ptr()[i]);
  return make_op("sqrt", x.shape(), std::move(d), {x}, [x](const Tensor& g) {
    std::vector<double> n(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) n[i] = g.ptr()[i] / (2.0 * std::sqrt(x.ptr()[i]));
    return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
  });
}

inline Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i) s += x.ptr()[i];
  return make_op("sum_all", {1}, {s}, {x}, [shape = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{Tensor::full(shape, g.value())};
  });
}

// ---------------------------------------------------------------------------
// Activations

enum class ActKind { relu, sigmoid, tanh };

inline Tensor relu(const Tensor& x) {
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) d[i] = x.ptr()[i] > 0.0 ? x.ptr()[i] : 0.0;
  return make_op("relu", x.shape(), std::move(d), {x}, [x](const Tensor& g) {
    std::vector<double> n(static_cast<std::size_t>(g.numel()));
    for (std::int64_t i = 0; i < g.numel(); ++i) n[i] = x.ptr()[i] > 0.0 ? g.ptr()[i] : 0.0;
    return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
  });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) {
    const double v = x.ptr()[i];
    d[i] = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  std::vector<double> saved = d;
  return make_op("sigmoid", x.shape(), std::move(d), {x},
                 [saved = std::move(saved)](const Tensor& g) {
                   std::vector<double> n(saved.size());
                   for (std::size_t i = 0; i < saved.size(); ++i)
                     n[i] = g.ptr()[i] * saved[i] * (1.0 - saved[i]);
                   return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
                 });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t i = 0; i < x.numel(); ++i) d[i] = std::tanh(x.ptr()[i]);
  std::vector<double> saved = d;
  return make_op("tanh", x.shape(), std::move(d), {x},
                 [saved = std::move(saved)](const Tensor& g) {
                   std::vector<double> n(saved.size());
                   for (std::size_t i = 0; i < saved.size(); ++i)
                     n[i] = g.ptr()[i] * (1.0 - saved[i] * saved[i]);
                   return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
                 });
}

inline Tensor activation(ActKind kind, const Tensor& x) {
  switch (kind) {
    case ActKind::relu: return relu(x);
    case ActKind::sigmoid: return sigmoid(x);
    case ActKind::tanh: return tanh(x);
  }
  throw ValueError("activation: unknown kind");
}

// Numerically stable (max-subtracted) softmax over the last axis.
inline Tensor softmax_lastaxis(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("softmax_lastaxis: rank must be >= 1");
  const std::int64_t cols = x.dim(x.rank() - 1);
  const std::int64_t rows = x.numel() / cols;
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* in = x.ptr() + r * cols;
    double* out = d.data() + r * cols;
    double mx = in[0];
    for (std::int64_t c = 1; c < cols; ++c) mx = std::max(mx, in[c]);
    double sum = 0.0;
    for (std::int64_t c = 0; c < cols; ++c) {
      out[c] = std::exp(in[c] - mx);
      sum += out[c];
    }
    for (std::int64_t c = 0; c < cols; ++c) out[c] /= sum;
  }
  std::vector<double> saved = d;
  return make_op("softmax_lastaxis", x.shape(), std::move(d), {x},
                 [saved = std::move(saved), cols](const Tensor& g) {
                   const std::int64_t rows = g.numel() / cols;
                   std::vector<double> n(saved.size());
                   for (std::int64_t r = 0; r < rows; ++r) {
                     const double* s = saved.data() + r * cols;
                     const double* gr = g.ptr() + r * cols;
                     double dot = 0.0;
                     for (std::int64_t c = 0; c < cols; ++c) dot += gr[c] * s[c];
                     for (std::int64_t c = 0; c < cols; ++c)
                       n[static_cast<std::size_t>(r * cols + c)] = s[c] * (gr[c] - dot);
                   }
                   return std::vector<Tensor>{Tensor(g.shape(), std::move(n))};
                 });
}

// ---------------------------------------------------------------------------
// Structural ops

inline Tensor permute(const Tensor& x, const std::vector<int>& order) {
  const int r = x.rank();
  if (static_cast<int>(order.size()) != r)
    throw ShapeError("permute: order length " + std::to_string(order.size()) +
                     " does not match rank " + std::to_string(r));
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (int a : order) {
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)])
      throw ShapeError("permute: invalid permutation for rank " + std::to_string(r));
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = x.dim(order[static_cast<std::size_t>(i)]);
  const auto in_strides = strides_of(x.shape());
  const auto out_strides = strides_of(out_shape);
  std::vector<double> d(static_cast<std::size_t>(x.numel()));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  for (std::int64_t o = 0; o < x.numel(); ++o) {
    std::int64_t rem = o, src = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t oi = rem / out_strides[static_cast<std::size_t>(i)];
      rem %= out_strides[static_cast<std::size_t>(i)];
      src += oi * in_strides[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])];
    }
    d[static_cast<std::size_t>(o)] = x.ptr()[src];
  }
  std::vector<int> inverse(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i;
  return make_op("permute", std::move(out_shape), std::move(d), {x},
                 [inverse](const Tensor& g) { return std::vector<Tensor>{permute(g, inverse)}; });
}

inline Tensor transpose2d(const Tensor& x) {
  if (x.rank() != 2) throw ShapeError("transpose2d: expected rank 2, got " + shape_str(x.shape()));
  return permute(x, {1, 0});
}

inline Tensor reshape(const Tensor& x, const Shape& shape) {
  if (numel_of(shape) != x.numel())
    throw ShapeError("reshape: cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<double> d(x.data().begin(), x.data().end());
  return make_op("reshape", shape, std::move(d), {x}, [old_shape = x.shape()](const Tensor& g) {
    return std::vector<Tensor>{reshape(g, old_shape)};
  });
}

inline Tensor slice(const Tensor& x, int axis, std::int64_t start, std::int64_t len) {
  const int r = x.rank();
  if (axis < 0 || axis >= r) throw ShapeError("slice: axis out of range");
  if (start < 0 || len <= 0 || start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                     ") out of bounds for axis size " + std::to_string(x.dim(axis)));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const std::int64_t in_axis = x.dim(axis);
  std::vector<double> d(static_cast<std::size_t>(outer * len * inner));
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.ptr() + (o * in_axis + start) * inner, len * inner, d.data() + o * len * inner);
  return make_op("slice", std::move(out_shape), std::move(d), {x},
                 [shape = x.shape(), axis, start, len, outer, inner, in_axis](const Tensor& g) {
                   std::vector<double> n(static_cast<std::size_t>(numel_of(shape)), 0.0);
                   for (std::int64_t o = 0; o < outer; ++o)
                     std::copy_n(g.ptr() + o * len * inner, len * inner,
                                 n.data() + (o * in_axis + start) * inner);
                   return std::vector<Tensor>{Tensor(shape, std::move(n))};
                 });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ValueError("concat: empty sequence");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: axis out of range");
  std::int64_t axis_total = 0;
  for (const auto& p : parts) {
    if (p.rank() != r)
      throw ShapeError("concat: rank mismatch: " + shape_str(parts[0].shape()) + " vs " +
                       shape_str(p.shape()));
    for (int i = 0; i < r; ++i)
      if (i != axis && p.dim(i) != parts[0].dim(i))
        throw ShapeError("concat: shape mismatch off axis: " + shape_str(parts[0].shape()) +
                         " vs " + shape_str(p.shape()));
    axis_total += p.dim(axis);
  }
  Shape out_shape = parts[0].shape();
  out_shape[static_cast<std::size_t>(axis)] = axis_total;
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= parts[0].dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= parts[0].dim(i);
  std::vector<double> d(static_cast<std::size_t>(outer * axis_total * inner));
  std::int64_t off = 0;
  for (const auto& p : parts) {
    const std::int64_t pa = p.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(p.ptr() + o * pa * inner, pa * inner, d.data() + (o * axis_total + off) * inner);
    off += pa;
  }
  std::vector<std::int64_t> sizes;
  for (const auto& p : parts) sizes.push_back(p.dim(axis));
  return make_op("concat", std::move(out_shape), std::move(d), parts,
                 [axis, sizes](const Tensor& g) {
                   std::vector<Tensor> gs;
                   std::int64_t start = 0;
                   for (auto sz : sizes) {
                     gs.push_back(slice(g, axis, start, sz));
                     start += sz;
                   }
                   return gs;
                 });
}

// Numpy-style broadcast of x (after left-padding its shape with 1s) to
// `shape`; every axis must match or be 1 in x.
inline Tensor broadcast_to(const Tensor& x, const Shape& shape) {
  const int rt = static_cast<int>(shape.size());
  const int rx = x.rank();
  if (rx > rt)
    throw ShapeError("broadcast_to: rank of " + shape_str(x.shape()) + " exceeds target " +
                     shape_str(shape));
  Shape padded(static_cast<std::size_t>(rt), 1);
  for (int i = 0; i < rx; ++i) padded[static_cast<std::size_t>(rt - rx + i)] = x.dim(i);
  for (int i = 0; i < rt; ++i)
    if (padded[static_cast<std::size_t>(i)] != shape[static_cast<std::size_t>(i)] &&
        padded[static_cast<std::size_t>(i)] != 1)
      throw ShapeError("broadcast_to: cannot broadcast " + shape_str(x.shape()) + " to " +
                       shape_str(shape));
  const auto tstr = strides_of(shape);
  const auto pstr = strides_of(padded);
  const std::int64_t n = numel_of(shape);
  std::vector<double> d(static_cast<std::size_t>(n));
  for (std::int64_t o = 0; o < n; ++o) {
    std::int64_t rem = o, src = 0;
    for (int i = 0; i < rt; ++i) {
      const std::int64_t oi = rem / tstr[static_cast<std::size_t>(i)];
      rem %= tstr[static_cast<std::size_t>(i)];
      if (padded[static_cast<std::size_t>(i)] != 1) src += oi * pstr[static_cast<std::size_t>(i)];
    }
    d[static_cast<std::size_t>(o)] = x.ptr()[src];
  }
  return make_op("broadcast_to", shape, std::move(d), {x},
                 [xshape = x.shape(), padded, shape](const Tensor& g) {
                   const auto tstr = strides_of(shape);
                   const auto pstr = strides_of(padded);
                   const int rt = static_cast<int>(shape.size());
                   std::vector<double> n(static_cast<std::size_t>(numel_of(xshape)), 0.0);
                   for (std::int64_t o = 0; o < g.numel(); ++o) {
                     std::int64_t rem = o, src = 0;
                     for (int i = 0; i < rt; ++i) {
                       const std::int64_t oi = rem / tstr[static_cast<std::size_t>(i)];
                       rem %= tstr[static_cast<std::size_t>(i)];
                       if (padded[static_cast<std::size_t>(i)] != 1)
                         src += oi * pstr[static_cast<std::size_t>(i)];
                     }
                     n[static_cast<std::size_t>(src)] += g.ptr()[o];
                   }
                   return std::vector<Tensor>{Tensor(xshape, std::move(n))};
                 });
}

// Arithmetic mean over `axes`; the pooled axes are removed from the shape
// (a fully pooled tensor collapses to shape [1]).
inline Tensor avg_pool(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  std::vector<bool> pooled(static_cast<std::size_t>(r), false);
  for (int a : axes) {
    if (a < 0 || a >= r) throw ShapeError("avg_pool: axis out of range");
    if (pooled[static_cast<std::size_t>(a)]) throw ShapeError("avg_pool: duplicate axis");
    pooled[static_cast<std::size_t>(a)] = true;
  }
  Shape out_shape;
  std::int64_t count = 1;
  for (int i = 0; i < r; ++i) {
    if (pooled[static_cast<std::size_t>(i)])
      count *= x.dim(i);
    else
      out_shape.push_back(x.dim(i));
  }
  if (out_shape.empty()) out_shape = {1};
  const auto in_str = strides_of(x.shape());
  const auto out_str = strides_of(out_shape);
  const std::int64_t n_out = numel_of(out_shape);
  std::vector<double> d(static_cast<std::size_t>(n_out), 0.0);
  for (std::int64_t o = 0; o < x.numel(); ++o) {
    std::int64_t rem = o, dst = 0;
    int k = 0;
    for (int i = 0; i < r; ++i) {
      const std::int64_t oi = rem / in_str[static_cast<std::size_t>(i)];
      rem %= in_str[static_cast<std::size_t>(i)];
      if (!pooled[static_cast<std::size_t>(i)]) {
        dst += oi * out_str[static_cast<std::size_t>(k)];
        ++k;
      }
    }
    d[static_cast<std::size_t>(dst)] += x.ptr()[o];
  }
  const double inv = 1.0 / static_cast<double>(count);
  for (auto& v : d) v *= inv;
  return make_op("avg_pool", out_shape, std::move(d), {x},
                 [xshape = x.shape(), pooled, inv, r](const Tensor& g) {
                   const auto in_str = strides_of(xshape);
                   Shape kept;
                   for (int i = 0; i < r; ++i)
                     if (!pooled[static_cast<std::size_t>(i)]) kept.push_back(xshape[static_cast<std::size_t>(i)]);
                   if (kept.empty()) kept = {1};
                   const auto out_str = strides_of(kept);
                   std::vector<double> n(static_cast<std::size_t>(numel_of(xshape)));
                   for (std::int64_t o = 0; o < numel_of(xshape); ++o) {
                     std::int64_t rem = o, dst = 0;
                     int k = 0;
                     for (int i = 0; i < r; ++i) {
                       const std::int64_t oi = rem / in_str[static_cast<std::size_t>(i)];
                       rem %= in_str[static_cast<std::size_t>(i)];
                       if (!pooled[static_cast<std::size_t>(i)]) {
                         dst += oi * out_str[static_cast<std::size_t>(k)];
                         ++k;
                       }
                     }
                     n[static_cast<std::size_t>(o)] = g.ptr()[dst] * inv;
                   }
                   return std::vector<Tensor>{Tensor(xshape, std::move(n))};
                 });
}

// ---------------------------------------------------------------------------
// Bilinear upsampling (half-pixel centers, i.e. align_corners = false)

namespace detail {
struct BilinearTap {
  std::int64_t lo, hi;
  double w_hi;  // weight of hi; lo gets (1 - w_hi)
};
inline std::vector<BilinearTap> bilinear_taps(std::int64_t in, std::int64_t out, int factor) {
  std::vector<BilinearTap> taps(static_cast<std::size_t>(out));
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = (static_cast<double>(o) + 0.5) / factor - 0.5;
    std::int64_t lo = static_cast<std::int64_t>(std::floor(src));
    const double w = src - static_cast<double>(lo);
    std::int64_t hi = lo + 1;
    lo = std::clamp<std::int64_t>(lo, 0, in - 1);
    hi = std::clamp<std::int64_t>(hi, 0, in - 1);
    taps[static_cast<std::size_t>(o)] = {lo, hi, w};
  }
  return taps;
}
}  // namespace detail

inline Tensor upsample_bilinear(const Tensor& x, int factor) {
  if (factor != 2 && factor != 4 && factor != 8)
    throw ValueError("upsample_bilinear: unsupported factor " + std::to_string(factor));
  if (x.rank() != 3) throw ShapeError("upsample_bilinear: expected HxWxC, got " + shape_str(x.shape()));
  const std::int64_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::int64_t oh = h * factor, ow = w * factor;
  const auto ty = detail::bilinear_taps(h, oh, factor);
  const auto tx = detail::bilinear_taps(w, ow, factor);
  std::vector<double> d(static_cast<std::size_t>(oh * ow * c));
  for (std::int64_t oy = 0; oy < oh; ++oy) {
    const auto& yt = ty[static_cast<std::size_t>(oy)];
    for (std::int64_t ox = 0; ox < ow; ++ox) {
      const auto& xt = tx[static_cast<std::size_t>(ox)];
      const double w00 = (1.0 - yt.w_hi) * (1.0 - xt.w_hi);
      const double w01 = (1.0 - yt.w_hi) * xt.w_hi;
      const double w10 = yt.w_hi * (1.0 - xt.w_hi);
      const double w11 = yt.w_hi * xt.w_hi;
      const double* p00 = x.ptr() + (yt.lo * w + xt.lo) * c;
      const double* p01 = x.ptr() + (yt.lo * w + xt.hi) * c;
      const double* p10 = x.ptr() + (yt.hi * w + xt.lo) * c;
      const double* p11 = x.ptr() + (yt.hi * w + xt.hi) * c;
      double* out = d.data() + (oy * ow + ox) * c;
      for (std::int64_t ch = 0; ch < c; ++ch)
        out[ch] = w00 * p00[ch] + w01 * p01[ch] + w10 * p10[ch] + w11 * p11[ch];
    }
  }
  return make_op("upsample_bilinear", {oh, ow, c}, std::move(d), {x},
                 [h, w, c, oh, ow, ty, tx](const Tensor& g) {
                   std::vector<double> n(static_cast<std::size_t>(h * w * c), 0.0);
                   for (std::int64_t oy = 0; oy < oh; ++oy) {
                     const auto& yt = ty[static_cast<std::size_t>(oy)];
                     for (std::int64_t ox = 0; ox < ow; ++ox) {
                       const auto& xt = tx[static_cast<std::size_t>(ox)];
                       const double w00 = (1.0 - yt.w_hi) * (1.0 - xt.w_hi);
                       const double w01 = (1.0 - yt.w_hi) * xt.w_hi;
                       const double w10 = yt.w_hi * (1.0 - xt.w_hi);
                       const double w11 = yt.w_hi * xt.w_hi;
                       const double* gp = g.ptr() + (oy * ow + ox) * c;
                       double* n00 = n.data() + (yt.lo * w + xt.lo) * c;
                       double* n01 = n.data() + (yt.lo * w + xt.hi) * c;
                       double* n10 = n.data() + (yt.hi * w + xt.lo) * c;
                       double* n11 = n.data() + (yt.hi * w + xt.hi) * c;
                       for (std::int64_t ch = 0; ch < c; ++ch) {
                         n00[ch] += w00 * gp[ch];
                         n01[ch] += w01 * gp[ch];
                         n10[ch] += w10 * gp[ch];
                         n11[ch] += w11 * gp[ch];
                       }
                     }
                   }
                   return std::vector<Tensor>{Tensor({h, w, c}, std::move(n))};
                 });
}

// ---------------------------------------------------------------------------
// Matrix multiplication (rank 2 or 3; a rank-2 side broadcasts over the
// other side's batch axis)

namespace detail {
inline void mm_kernel(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
                      std::int64_t p) {
  for (std::int64_t i = 0; i < m; ++i) {
    double* crow = c + i * p;
    std::fill_n(crow, p, 0.0);
    const double* arow = a + i * k;
    for (std::int64_t kk = 0; kk < k; ++kk) {
      const double av = arow[kk];
      const double* brow = b + kk * p;
      for (std::int64_t j = 0; j < p; ++j) crow[j] += av * brow[j];
    }
  }
}
inline Tensor sum_batch(const Tensor& x) {  // [B,M,P] -> [M,P]
  const std::int64_t b = x.dim(0), m = x.dim(1), p = x.dim(2);
  std::vector<double> d(static_cast<std::size_t>(m * p), 0.0);
  for (std::int64_t i = 0; i < b; ++i)
    for (std::int64_t j = 0; j < m * p; ++j) d[static_cast<std::size_t>(j)] += x.ptr()[i * m * p + j];
  return Tensor({m, p}, std::move(d));
}
}  // namespace detail

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const int ra = a.rank(), rb = b.rank();
  if ((ra != 2 && ra != 3) || (rb != 2 && rb != 3))
    throw ShapeError("matmul: ranks must be 2 or 3: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  const std::int64_t m = a.dim(ra - 2), ka = a.dim(ra - 1);
  const std::int64_t kb = b.dim(rb - 2), p = b.dim(rb - 1);
  if (ka != kb)
    throw ShapeError("matmul: inner dimensions mismatch: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::int64_t batch = 1;
  if (ra == 3 && rb == 3) {
    if (a.dim(0) != b.dim(0))
      throw ShapeError("matmul: batch mismatch: " + shape_str(a.shape()) + " vs " +
                       shape_str(b.shape()));
    batch = a.dim(0);
  } else if (ra == 3) {
    batch = a.dim(0);
  } else if (rb == 3) {
    batch = b.dim(0);
  }
  const bool batched_out = (ra == 3 || rb == 3);
  Shape out_shape = batched_out ? Shape{batch, m, p} : Shape{m, p};
  std::vector<double> d(static_cast<std::size_t>(batch * m * p));
  for (std::int64_t i = 0; i < batch; ++i) {
    const double* ap = a.ptr() + (ra == 3 ? i * m * ka : 0);
    const double* bp = b.ptr() + (rb == 3 ? i * ka * p : 0);
    detail::mm_kernel(ap, bp, d.data() + i * m * p, m, ka, p);
  }
  return make_op("matmul", std::move(out_shape), std::move(d), {a, b},
                 [a, b, ra, rb](const Tensor& g) {
                   Tensor ga, gb;
                   const Tensor bt = (rb == 3) ? permute(b, {0, 2, 1}) : permute(b, {1, 0});
                   const Tensor at = (ra == 3) ? permute(a, {0, 2, 1}) : permute(a, {1, 0});
                   if (ra == 2 && rb == 3) {
                     ga = detail::sum_batch(matmul(g, bt));
                     gb = matmul(at, g);
                   } else if (ra == 3 && rb == 2) {
                     ga = matmul(g, bt);
                     gb = detail::sum_batch(matmul(at, g));
                   } else {
                     ga = matmul(g, bt);
                     gb = matmul(at, g);
                   }
                   return std::vector<Tensor>{ga, gb};
                 });
}

}  // namespace srm

