#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// tensors of doubles.
//
// A Tensor is a shared handle to a graph node. Ops build new nodes that keep
// their operands alive (only when some operand requires a gradient), and
// backward() walks the recorded graph in reverse topological order.
//
// Gradient accumulation: leaf gradients are *added to* on every backward()
// call and are only cleared by zero_grad(). Intermediate (non-leaf) nodes are
// reset at the start of each backward() so repeated calls on the same loss
// accumulate exactly one extra copy of the gradient into the leaves.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "stagenet/error.hpp"
#include "stagenet/rng.hpp"

namespace stagenet {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until first written
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  std::span<double> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, std::vector<double> values = {}, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto d : shape) {
      if (d == 0) throw ShapeError("tensor shape " + shape_str(shape) + " has a zero-sized dimension");
    }
    const std::size_t n = shape_numel(shape);
    if (values.empty()) values.assign(n, 0.0);
    if (values.size() != n) {
      throw ShapeError("tensor shape " + shape_str(shape) + " needs " + std::to_string(n) + " values, got " +
                       std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({}, {v}, requires_grad); }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  // Result node of a differentiable op. `backward` is only attached (and
  // operands only retained) when at least one operand requires a gradient.
  static Tensor from_op(Shape shape, std::vector<double> values, std::vector<Tensor> operands,
                        std::function<void(detail::Node&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    const bool needs = detail::grad_mode() && std::any_of(operands.begin(), operands.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (needs) {
      out.node_->requires_grad = true;
      out.node_->parents.reserve(operands.size());
      for (auto& op : operands) out.node_->parents.push_back(op.node_);
      out.node_->backward = std::move(backward);
    }
    return out;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t numel() const { return node().value.size(); }
  // Spans alias the node; they are not available on temporaries, whose
  // node may die at the end of the full expression.
  std::span<const double> values() const& { return node().value; }
  std::span<const double> values() const&& = delete;

  // Direct write access; only allowed on leaves (parameters, inputs).
  std::span<double> mutable_values() && = delete;
  std::span<double> mutable_values() & {
    if (!node().is_leaf()) throw Error("cannot mutate the values of a non-leaf tensor");
    return node_->value;
  }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node().value[0];
  }

  double at(std::size_t i) const { return node().value.at(i); }

  bool requires_grad() const { return node().requires_grad; }
  bool is_leaf() const { return node().is_leaf(); }

  void set_requires_grad(bool on) {
    if (!node().is_leaf()) throw Error("requires_grad can only be toggled on leaf tensors");
    node_->requires_grad = on;
  }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const& { return node().grad; }
  std::span<const double> grad() const&& = delete;
  void zero_grad() { node().grad.clear(); }

  // New leaf holding a copy of the values; no graph history.
  Tensor detach() const { return Tensor(shape(), node().value, false); }

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  detail::Node& node() const {
    if (!node_) throw Error("use of an undefined tensor");
    return *node_;
  }

 private:
  friend class Tape;
  std::shared_ptr<detail::Node> node_;
};

// Seeded Gaussian(0, scale^2) tensor.
inline Tensor randn(const Shape& shape, std::uint64_t seed, double scale = 1.0, bool requires_grad = false) {
  if (shape.empty()) throw ShapeError("randn needs a non-empty shape");
  if (!(scale >= 0.0)) throw ConfigError("randn scale must be >= 0");
  Tensor t(shape, {}, requires_grad);
  Rng rng(seed);
  for (double& v : t.mutable_values()) v = scale * rng.normal();
  return t;
}

// ---------------------------------------------------------------------------
// Ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul shape mismatch: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  return Tensor::from_op({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const auto& g = self.grad;
    if (an.requires_grad) {
      auto ga = an.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double acc = 0.0;
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bn.value[p * n + j];
          ga[i * k + p] += acc;
        }
    }
    if (bn.requires_grad) {
      auto gb = bn.grad_buffer();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = an.value[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

// Stride-1, valid-padding cross-correlation.
// input [c_in,h,w], kernels [c_out,c_in,kh,kw], bias [c_out].
inline Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias) {
  if (input.rank() != 3 || kernels.rank() != 4 || kernels.shape()[1] != input.shape()[0]) {
    throw ShapeError("conv2d shape mismatch: input " + shape_str(input.shape()) + ", kernels " +
                     shape_str(kernels.shape()));
  }
  const std::size_t cin = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const std::size_t cout = kernels.shape()[0], kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kh > h || kw > w) {
    throw ShapeError("conv2d kernel " + shape_str(kernels.shape()) + " larger than input " + shape_str(input.shape()));
  }
  if (bias.numel() != cout) throw ShapeError("conv2d bias must have " + std::to_string(cout) + " values");
  const std::size_t oh = h - kh + 1, ow = w - kw + 1;

  std::vector<double> out(cout * oh * ow);
  const auto in = input.values();
  const auto ker = kernels.values();
  const auto bv = bias.values();
  for (std::size_t o = 0; o < cout; ++o) {
    double* dst = out.data() + o * oh * ow;
    std::fill(dst, dst + oh * ow, bv[o]);
    for (std::size_t c = 0; c < cin; ++c) {
      for (std::size_t i = 0; i < kh; ++i) {
        for (std::size_t j = 0; j < kw; ++j) {
          const double kv = ker[((o * cin + c) * kh + i) * kw + j];
          for (std::size_t y = 0; y < oh; ++y) {
            const double* src = in.data() + (c * h + y + i) * w + j;
            double* row = dst + y * ow;
            for (std::size_t x = 0; x < ow; ++x) row[x] += kv * src[x];
          }
        }
      }
    }
  }

  return Tensor::from_op(
      {cout, oh, ow}, std::move(out), {input, kernels, bias},
      [cin, h, w, cout, kh, kw, oh, ow](detail::Node& self) {
        auto& inn = *self.parents[0];
        auto& kn = *self.parents[1];
        auto& bn = *self.parents[2];
        const double* g = self.grad.data();
        if (bn.requires_grad) {
          auto gb = bn.grad_buffer();
          for (std::size_t o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (std::size_t t = 0; t < oh * ow; ++t) acc += g[o * oh * ow + t];
            gb[o] += acc;
          }
        }
        if (kn.requires_grad) {
          auto gk = kn.grad_buffer();
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j) {
                  double acc = 0.0;
                  for (std::size_t y = 0; y < oh; ++y) {
                    const double* src = inn.value.data() + (c * h + y + i) * w + j;
                    const double* gr = g + (o * oh + y) * ow;
                    for (std::size_t x = 0; x < ow; ++x) acc += gr[x] * src[x];
                  }
                  gk[((o * cin + c) * kh + i) * kw + j] += acc;
                }
        }
        if (inn.requires_grad) {
          auto gi = inn.grad_buffer();
          for (std::size_t o = 0; o < cout; ++o)
            for (std::size_t c = 0; c < cin; ++c)
              for (std::size_t i = 0; i < kh; ++i)
                for (std::size_t j = 0; j < kw; ++j) {
                  const double kv = kn.value[((o * cin + c) * kh + i) * kw + j];
                  for (std::size_t y = 0; y < oh; ++y) {
                    double* dst = gi.data() + (c * h + y + i) * w + j;
                    const double* gr = g + (o * oh + y) * ow;
                    for (std::size_t x = 0; x < ow; ++x) dst[x] += kv * gr[x];
                  }
                }
        }
      });
}

// Subgradient at exactly zero is zero.
inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& xn = *self.parents[0];
    auto gx = xn.grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (xn.value[i] > 0.0) gx[i] += self.grad[i];
    }
  });
}

// Elementwise a + b for equal shapes, or a[m,n] + b[n] (bias over rows).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  const bool bias_rows = !same && a.rank() == 2 && b.rank() == 1 && b.shape()[0] == a.shape()[1];
  if (!same && !bias_rows) {
    throw ShapeError("add shape mismatch: " + shape_str(a.shape()) + " + " + shape_str(b.shape()));
  }
  const std::size_t n = b.numel();
  std::vector<double> out(a.values().begin(), a.values().end());
  const auto bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [n](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) {
      auto ga = an.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (bn.requires_grad) {
      auto gb = bn.grad_buffer();
      for (std::size_t i = 0; i < self.grad.size(); ++i) gb[i % n] += self.grad[i];
    }
  });
}

// Elementwise product of equal shapes.
inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul shape mismatch: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  return Tensor::from_op(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    if (an.requires_grad) {
      auto ga = an.grad_buffer();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bn.value[i];
    }
    if (bn.requires_grad) {
      auto gb = bn.grad_buffer();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * an.value[i];
    }
  });
}

inline Tensor scale(const Tensor& x, double s) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v *= s;
  return Tensor::from_op(x.shape(), std::move(out), {x}, [s](detail::Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += s * self.grad[i];
  });
}

// Row vector [1, numel] view of any tensor (copying).
inline Tensor flatten(const Tensor& x) {
  std::vector<double> out(x.values().begin(), x.values().end());
  return Tensor::from_op({1, x.numel()}, std::move(out), {x}, [](detail::Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

// [c,h,w] -> [c], spatial mean per channel.
inline Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 3) throw ShapeError("global_avg_pool expects [c,h,w], got " + shape_str(x.shape()));
  const std::size_t c = x.shape()[0], area = x.shape()[1] * x.shape()[2];
  std::vector<double> out(c, 0.0);
  const auto xv = x.values();
  for (std::size_t k = 0; k < c; ++k) {
    double acc = 0.0;
    for (std::size_t t = 0; t < area; ++t) acc += xv[k * area + t];
    out[k] = acc / static_cast<double>(area);
  }
  return Tensor::from_op({c}, std::move(out), {x}, [c, area](detail::Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    const double inv = 1.0 / static_cast<double>(area);
    for (std::size_t k = 0; k < c; ++k)
      for (std::size_t t = 0; t < area; ++t) gx[k * area + t] += self.grad[k] * inv;
  });
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  return Tensor::from_op({}, {acc}, {x}, [](detail::Node& self) {
    auto gx = self.parents[0]->grad_buffer();
    for (double& g : gx) g += self.grad[0];
  });
}

// Scalar holding x[index] (flat, row-major).
inline Tensor element(const Tensor& x, std::size_t index) {
  if (index >= x.numel()) throw IndexError("element index " + std::to_string(index) + " out of range");
  return Tensor::from_op({}, {x.values()[index]}, {x}, [index](detail::Node& self) {
    self.parents[0]->grad_buffer()[index] += self.grad[0];
  });
}

// ---------------------------------------------------------------------------
// Tape: the reachable graph of a root in topological order (operands before
// results), restricted to nodes that participate in differentiation.

class Tape {
 public:
  static Tape record(const Tensor& root) {
    Tape tape;
    auto* start = root.node_.get();
    if (!start || !start->requires_grad) return tape;
    std::unordered_set<const detail::Node*> seen;
    // Iterative post-order DFS; parents are visited in operand order.
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{start, 0}};
    seen.insert(start);
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        detail::Node* parent = node->parents[next++].get();
        if (parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        tape.order_.push_back(node);
        stack.pop_back();
      }
    }
    return tape;
  }

  std::size_t size() const { return order_.size(); }

  // Position of t on the tape, or size() when absent.
  std::size_t position(const Tensor& t) const {
    const auto it = std::find(order_.begin(), order_.end(), t.node_.get());
    return static_cast<std::size_t>(it - order_.begin());
  }

  // Seeds d(root)/d(root) = 1 and propagates to every reachable leaf.
  void backward() {
    if (order_.empty()) return;
    for (auto* node : order_) {
      if (!node->is_leaf()) node->grad.assign(node->value.size(), 0.0);
    }
    detail::Node* root = order_.back();
    root->grad_buffer()[0] += 1.0;
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      if (!(*it)->is_leaf()) (*it)->backward(**it);
    }
  }

 private:
  std::vector<detail::Node*> order_;
};

// Populates .grad() of every requires_grad leaf reachable from `loss`.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw Error("backward on a loss that does not depend on any requires_grad tensor");
  Tape::record(loss).backward();
}

}  // namespace stagenet
