#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "speechchain/params.hpp"
#include "speechchain/tensor.hpp"

namespace speechchain {

struct NodeRef {
  std::uint32_t idx = 0;
};

// Reverse-mode tape. Ops append operation records; forward() evaluates the
// records appended since the last call, so a caller may interleave building
// and evaluation (greedy decoding reads values mid-construction). backward()
// walks the tape once in reverse and accumulates gradients additively, so
// fan-out is handled without any graph rewriting.
//
// The operation set is deliberately fixed to what the models need: matmul,
// add, mul, concat, stack_rows, slice/row (embedding lookup), sigmoid, tanh,
// lrelu, softmax, log_softmax, cross_entropy, squared_error.
class Graph {
  enum class Op : std::uint8_t {
    kConst,
    kLeaf,
    kMatMul,
    kAdd,
    kMul,
    kConcat,
    kStackRows,
    kSlice,
    kSigmoid,
    kTanh,
    kLRelu,
    kSoftmax,
    kLogSoftmax,
    kCrossEntropy,
    kSquaredError,
  };

  struct Node {
    Op op;
    bool needs_grad = false;
    std::uint32_t in0 = 0, in1 = 0;
    std::uint32_t pool_begin = 0, pool_count = 0;  // variadic inputs
    std::uint64_t aux0 = 0, aux1 = 0;              // slice offsets, CE target
    double auxd = 0.0;                             // lrelu slope
    Tensor val;
    std::vector<double> grad;
  };

 public:
  NodeRef constant(Tensor t) {
    Node n;
    n.op = Op::kConst;
    n.val = std::move(t);
    return push(std::move(n));
  }

  // Leaf bound to a parameter; its gradient is pushed back into the
  // parameter by accumulate_leaf_grads(). The value is snapshotted here.
  NodeRef leaf(Parameter& p) {
    Node n;
    n.op = Op::kLeaf;
    n.needs_grad = true;
    n.val = p.value;
    NodeRef r = push(std::move(n));
    leaves_.emplace_back(r.idx, &p);
    return r;
  }

  // Detach: copy an evaluated value back in as a constant.
  NodeRef constant_from(NodeRef x) {
    forward();
    return constant(nodes_[x.idx].val);
  }

  NodeRef matmul(NodeRef a, NodeRef b) {
    const Tensor& ta = nodes_[a.idx].val;
    const Tensor& tb = nodes_[b.idx].val;
    Shape out;
    if (ta.rank() == 2 && tb.rank() == 2) {
      if (ta.shape[1] != tb.shape[0]) matmul_error(ta, tb);
      out = {ta.shape[0], tb.shape[1]};
    } else if (ta.rank() == 2 && tb.rank() == 1) {
      if (ta.shape[1] != tb.shape[0]) matmul_error(ta, tb);
      out = {ta.shape[0]};
    } else if (ta.rank() == 1 && tb.rank() == 2) {
      if (ta.shape[0] != tb.shape[0]) matmul_error(ta, tb);
      out = {tb.shape[1]};
    } else {
      matmul_error(ta, tb);
    }
    return push(binary(Op::kMatMul, a, b, std::move(out)));
  }

  // Same shape, or matrix + row vector, or either side a scalar.
  NodeRef add(NodeRef a, NodeRef b) {
    const Tensor& ta = nodes_[a.idx].val;
    const Tensor& tb = nodes_[b.idx].val;
    if (!(ta.same_shape(tb) || broadcast_row(ta, tb) || ta.numel() == 1 ||
          tb.numel() == 1))
      throw ShapeError("add: cannot combine " + shape_str(ta.shape) + " with " +
                       shape_str(tb.shape));
    Shape out = ta.numel() >= tb.numel() ? ta.shape : tb.shape;
    return push(binary(Op::kAdd, a, b, std::move(out)));
  }

  // Elementwise product; either side may be a scalar.
  NodeRef mul(NodeRef a, NodeRef b) {
    const Tensor& ta = nodes_[a.idx].val;
    const Tensor& tb = nodes_[b.idx].val;
    if (!(ta.same_shape(tb) || ta.numel() == 1 || tb.numel() == 1))
      throw ShapeError("mul: cannot combine " + shape_str(ta.shape) + " with " +
                       shape_str(tb.shape));
    Shape out = ta.numel() >= tb.numel() ? ta.shape : tb.shape;
    return push(binary(Op::kMul, a, b, std::move(out)));
  }

  NodeRef scale(NodeRef x, double k) { return mul(x, constant(Tensor::scalar(k))); }

  NodeRef concat(std::span<const NodeRef> parts) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    std::size_t total = 0;
    for (NodeRef r : parts) {
      const Tensor& t = nodes_[r.idx].val;
      if (t.rank() != 1)
        throw ShapeError("concat: expects vectors, got " + shape_str(t.shape));
      total += t.numel();
    }
    Node n;
    n.op = Op::kConcat;
    n.val = Tensor({total});
    attach_pool(n, parts);
    return push(std::move(n));
  }

  NodeRef concat(std::initializer_list<NodeRef> parts) {
    return concat(std::span<const NodeRef>(parts.begin(), parts.size()));
  }

  // Stack equal-length vectors into a matrix, one row each.
  NodeRef stack_rows(std::span<const NodeRef> rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no inputs");
    std::size_t width = nodes_[rows[0].idx].val.numel();
    for (NodeRef r : rows) {
      const Tensor& t = nodes_[r.idx].val;
      if (t.rank() != 1 || t.numel() != width)
        throw ShapeError("stack_rows: row shape " + shape_str(t.shape) +
                         " does not match width " + std::to_string(width));
    }
    Node n;
    n.op = Op::kStackRows;
    n.val = Tensor({rows.size(), width});
    attach_pool(n, rows);
    return push(std::move(n));
  }

  // Contiguous slice of the flat data, returned as a vector.
  NodeRef slice(NodeRef x, std::size_t offset, std::size_t len) {
    const Tensor& t = nodes_[x.idx].val;
    if (offset + len > t.numel())
      throw ShapeError("slice: [" + std::to_string(offset) + ", " +
                       std::to_string(offset + len) + ") exceeds " +
                       shape_str(t.shape));
    Node n;
    n.op = Op::kSlice;
    n.in0 = x.idx;
    n.aux0 = offset;
    n.aux1 = len;
    n.needs_grad = nodes_[x.idx].needs_grad;
    n.val = Tensor({len});
    return push(std::move(n));
  }

  // Row of a matrix. With a parameter table input this is the embedding
  // lookup: gradients accumulate into just that row.
  NodeRef row(NodeRef m, std::size_t r) {
    const Tensor& t = nodes_[m.idx].val;
    if (t.rank() != 2 || r >= t.shape[0])
      throw ShapeError("row: index " + std::to_string(r) + " outside " +
                       shape_str(t.shape));
    return slice(m, r * t.shape[1], t.shape[1]);
  }

  NodeRef sigmoid(NodeRef x) { return push(unary(Op::kSigmoid, x)); }
  NodeRef tanh(NodeRef x) { return push(unary(Op::kTanh, x)); }

  NodeRef lrelu(NodeRef x, double slope = 0.01) {
    Node n = unary(Op::kLRelu, x);
    n.auxd = slope;
    return push(std::move(n));
  }

  // Rank-1: one distribution. Rank-2: softmax per row.
  NodeRef softmax(NodeRef x) { return push(unary(Op::kSoftmax, x)); }
  NodeRef log_softmax(NodeRef x) { return push(unary(Op::kLogSoftmax, x)); }

  // -log softmax(logits)[target], computed via log-sum-exp.
  NodeRef cross_entropy(NodeRef logits, std::size_t target) {
    const Tensor& t = nodes_[logits.idx].val;
    if (t.rank() != 1 || target >= t.numel())
      throw ShapeError("cross_entropy: target " + std::to_string(target) +
                       " outside logits " + shape_str(t.shape));
    Node n;
    n.op = Op::kCrossEntropy;
    n.in0 = logits.idx;
    n.aux0 = target;
    n.needs_grad = nodes_[logits.idx].needs_grad;
    n.val = Tensor({1});
    return push(std::move(n));
  }

  // Sum of squared differences, reduced to a scalar.
  NodeRef squared_error(NodeRef a, NodeRef b) {
    const Tensor& ta = nodes_[a.idx].val;
    const Tensor& tb = nodes_[b.idx].val;
    if (!ta.same_shape(tb))
      throw ShapeError("squared_error: " + shape_str(ta.shape) + " vs " +
                       shape_str(tb.shape));
    Node n = binary(Op::kSquaredError, a, b, Shape{1});
    return push(std::move(n));
  }

  // Evaluate all records appended since the last forward() call.
  void forward() {
    for (; eval_cursor_ < nodes_.size(); ++eval_cursor_) {
      Node& n = nodes_[eval_cursor_];
      eval(n);
      for (double v : n.val.data)
        if (!std::isfinite(v))
          throw NumericError(std::string("non-finite value out of ") +
                             op_name(n.op) + " node #" +
                             std::to_string(eval_cursor_));
    }
  }

  const Tensor& forward(NodeRef root) {
    forward();
    return nodes_[root.idx].val;
  }

  const Tensor& value(NodeRef r) const {
    if (r.idx >= eval_cursor_)
      throw StateError("value read before forward");
    return nodes_[r.idx].val;
  }

  void backward(NodeRef root) {
    backward(root, Tensor(nodes_[root.idx].val.shape, 1.0));
  }

  void backward(NodeRef root, const Tensor& seed) {
    if (nodes_.empty() || eval_cursor_ < nodes_.size())
      throw StateError("backward before forward");
    if (backward_done_)
      throw StateError("backward already run on this graph");
    if (seed.shape != nodes_[root.idx].val.shape)
      throw ShapeError("backward seed " + shape_str(seed.shape) +
                       " does not match output " +
                       shape_str(nodes_[root.idx].val.shape));
    backward_done_ = true;
    for (std::uint32_t i = 0; i <= root.idx; ++i)
      if (nodes_[i].needs_grad) nodes_[i].grad.assign(nodes_[i].val.numel(), 0.0);
    if (!nodes_[root.idx].needs_grad) return;
    nodes_[root.idx].grad = seed.data;
    for (std::uint32_t i = root.idx + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.needs_grad) propagate(n);
    }
  }

  Tensor grad(NodeRef r) const {
    const Node& n = nodes_[r.idx];
    if (!backward_done_) throw StateError("gradient read before backward");
    Tensor g(n.val.shape);
    if (!n.grad.empty()) g.data = n.grad;
    return g;
  }

  // Push every leaf gradient into its bound parameter (+=).
  void accumulate_leaf_grads() {
    if (!backward_done_) throw StateError("gradients not computed yet");
    for (auto& [idx, param] : leaves_) {
      const Node& n = nodes_[idx];
      if (n.grad.empty()) continue;
      for (std::size_t i = 0; i < n.grad.size(); ++i)
        param->grad.data[i] += n.grad[i];
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  static bool broadcast_row(const Tensor& a, const Tensor& b) {
    return a.rank() == 2 && b.rank() == 1 && a.shape[1] == b.shape[0];
  }

  [[noreturn]] static void matmul_error(const Tensor& a, const Tensor& b) {
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape) + " by " +
                     shape_str(b.shape));
  }

  static const char* op_name(Op op) {
    switch (op) {
      case Op::kConst: return "const";
      case Op::kLeaf: return "leaf";
      case Op::kMatMul: return "matmul";
      case Op::kAdd: return "add";
      case Op::kMul: return "mul";
      case Op::kConcat: return "concat";
      case Op::kStackRows: return "stack_rows";
      case Op::kSlice: return "slice";
      case Op::kSigmoid: return "sigmoid";
      case Op::kTanh: return "tanh";
      case Op::kLRelu: return "lrelu";
      case Op::kSoftmax: return "softmax";
      case Op::kLogSoftmax: return "log_softmax";
      case Op::kCrossEntropy: return "cross_entropy";
      case Op::kSquaredError: return "squared_error";
    }
    return "?";
  }

  Node unary(Op op, NodeRef x) {
    Node n;
    n.op = op;
    n.in0 = x.idx;
    n.needs_grad = nodes_[x.idx].needs_grad;
    n.val = Tensor(nodes_[x.idx].val.shape);
    return n;
  }

  Node binary(Op op, NodeRef a, NodeRef b, Shape out) {
    Node n;
    n.op = op;
    n.in0 = a.idx;
    n.in1 = b.idx;
    n.needs_grad = nodes_[a.idx].needs_grad || nodes_[b.idx].needs_grad;
    n.val = Tensor(std::move(out));
    return n;
  }

  void attach_pool(Node& n, std::span<const NodeRef> parts) {
    n.pool_begin = static_cast<std::uint32_t>(pool_.size());
    n.pool_count = static_cast<std::uint32_t>(parts.size());
    for (NodeRef r : parts) {
      pool_.push_back(r.idx);
      n.needs_grad = n.needs_grad || nodes_[r.idx].needs_grad;
    }
  }

  NodeRef push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeRef{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }

  void eval(Node& n) {
    switch (n.op) {
      case Op::kConst:
      case Op::kLeaf:
        break;
      case Op::kMatMul: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        if (a.rank() == 2 && b.rank() == 2) {
          const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
          std::fill(n.val.data.begin(), n.val.data.end(), 0.0);
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double av = a.data[i * k + p];
              const double* brow = b.data.data() + p * c;
              double* orow = n.val.data.data() + i * c;
              for (std::size_t j = 0; j < c; ++j) orow[j] += av * brow[j];
            }
        } else if (a.rank() == 2) {  // mat * vec
          const std::size_t m = a.shape[0], k = a.shape[1];
          for (std::size_t i = 0; i < m; ++i) {
            double acc = 0.0;
            const double* arow = a.data.data() + i * k;
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * b.data[p];
            n.val.data[i] = acc;
          }
        } else {  // vec * mat
          const std::size_t k = b.shape[0], c = b.shape[1];
          std::fill(n.val.data.begin(), n.val.data.end(), 0.0);
          for (std::size_t p = 0; p < k; ++p) {
            const double av = a.data[p];
            const double* brow = b.data.data() + p * c;
            for (std::size_t j = 0; j < c; ++j) n.val.data[j] += av * brow[j];
          }
        }
        break;
      }
      case Op::kAdd: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        if (a.same_shape(b)) {
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[i] + b.data[i];
        } else if (broadcast_row(a, b)) {
          const std::size_t c = b.numel();
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[i] + b.data[i % c];
        } else if (b.numel() == 1) {
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[i] + b.data[0];
        } else {  // a is scalar
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[0] + b.data[i];
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        if (a.same_shape(b)) {
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[i] * b.data[i];
        } else if (b.numel() == 1) {
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[i] * b.data[0];
        } else {
          for (std::size_t i = 0; i < n.val.numel(); ++i)
            n.val.data[i] = a.data[0] * b.data[i];
        }
        break;
      }
      case Op::kConcat: {
        std::size_t off = 0;
        for (std::uint32_t p = 0; p < n.pool_count; ++p) {
          const Tensor& t = nodes_[pool_[n.pool_begin + p]].val;
          std::copy(t.data.begin(), t.data.end(), n.val.data.begin() + off);
          off += t.numel();
        }
        break;
      }
      case Op::kStackRows: {
        const std::size_t w = n.val.shape[1];
        for (std::uint32_t p = 0; p < n.pool_count; ++p) {
          const Tensor& t = nodes_[pool_[n.pool_begin + p]].val;
          std::copy(t.data.begin(), t.data.end(), n.val.data.begin() + p * w);
        }
        break;
      }
      case Op::kSlice: {
        const Tensor& a = nodes_[n.in0].val;
        std::copy(a.data.begin() + n.aux0, a.data.begin() + n.aux0 + n.aux1,
                  n.val.data.begin());
        break;
      }
      case Op::kSigmoid: {
        const Tensor& a = nodes_[n.in0].val;
        for (std::size_t i = 0; i < n.val.numel(); ++i)
          n.val.data[i] = 1.0 / (1.0 + std::exp(-a.data[i]));
        break;
      }
      case Op::kTanh: {
        const Tensor& a = nodes_[n.in0].val;
        for (std::size_t i = 0; i < n.val.numel(); ++i)
          n.val.data[i] = std::tanh(a.data[i]);
        break;
      }
      case Op::kLRelu: {
        const Tensor& a = nodes_[n.in0].val;
        for (std::size_t i = 0; i < n.val.numel(); ++i)
          n.val.data[i] = a.data[i] > 0.0 ? a.data[i] : n.auxd * a.data[i];
        break;
      }
      case Op::kSoftmax:
      case Op::kLogSoftmax: {
        const Tensor& a = nodes_[n.in0].val;
        const std::size_t c = a.rank() == 2 ? a.shape[1] : a.numel();
        const std::size_t r = a.numel() / c;
        for (std::size_t i = 0; i < r; ++i) {
          const double* in = a.data.data() + i * c;
          double* out = n.val.data.data() + i * c;
          double mx = in[0];
          for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
          double z = 0.0;
          for (std::size_t j = 0; j < c; ++j) z += std::exp(in[j] - mx);
          if (n.op == Op::kSoftmax) {
            for (std::size_t j = 0; j < c; ++j) out[j] = std::exp(in[j] - mx) / z;
          } else {
            const double lz = std::log(z);
            for (std::size_t j = 0; j < c; ++j) out[j] = in[j] - mx - lz;
          }
        }
        break;
      }
      case Op::kCrossEntropy: {
        const Tensor& a = nodes_[n.in0].val;
        double mx = a.data[0];
        for (double v : a.data) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : a.data) z += std::exp(v - mx);
        n.val.data[0] = std::log(z) + mx - a.data[n.aux0];
        break;
      }
      case Op::kSquaredError: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        double acc = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) {
          const double d = a.data[i] - b.data[i];
          acc += d * d;
        }
        n.val.data[0] = acc;
        break;
      }
    }
  }

  std::vector<double>* grad_of(std::uint32_t idx) {
    Node& n = nodes_[idx];
    return n.needs_grad ? &n.grad : nullptr;
  }

  void propagate(Node& n) {
    const std::vector<double>& g = n.grad;
    switch (n.op) {
      case Op::kConst:
      case Op::kLeaf:
        break;
      case Op::kMatMul: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        auto* ga = grad_of(n.in0);
        auto* gb = grad_of(n.in1);
        if (a.rank() == 2 && b.rank() == 2) {
          const std::size_t m = a.shape[0], k = a.shape[1], c = b.shape[1];
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
              const double* grow = g.data() + i * c;
              const double* brow = b.data.data() + p * c;
              if (ga) {
                double acc = 0.0;
                for (std::size_t j = 0; j < c; ++j) acc += grow[j] * brow[j];
                (*ga)[i * k + p] += acc;
              }
              if (gb) {
                const double av = a.data[i * k + p];
                double* gbrow = gb->data() + p * c;
                for (std::size_t j = 0; j < c; ++j) gbrow[j] += av * grow[j];
              }
            }
        } else if (a.rank() == 2) {  // out[m] = A[m,k] x[k]
          const std::size_t m = a.shape[0], k = a.shape[1];
          for (std::size_t i = 0; i < m; ++i) {
            const double gi = g[i];
            if (ga)
              for (std::size_t p = 0; p < k; ++p)
                (*ga)[i * k + p] += gi * b.data[p];
            if (gb) {
              const double* arow = a.data.data() + i * k;
              for (std::size_t p = 0; p < k; ++p) (*gb)[p] += gi * arow[p];
            }
          }
        } else {  // out[c] = x[k] B[k,c]
          const std::size_t k = b.shape[0], c = b.shape[1];
          for (std::size_t p = 0; p < k; ++p) {
            const double* brow = b.data.data() + p * c;
            if (ga) {
              double acc = 0.0;
              for (std::size_t j = 0; j < c; ++j) acc += g[j] * brow[j];
              (*ga)[p] += acc;
            }
            if (gb) {
              const double av = a.data[p];
              double* gbrow = gb->data() + p * c;
              for (std::size_t j = 0; j < c; ++j) gbrow[j] += av * g[j];
            }
          }
        }
        break;
      }
      case Op::kAdd: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        auto* ga = grad_of(n.in0);
        auto* gb = grad_of(n.in1);
        if (a.same_shape(b)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[i] += g[i];
            if (gb) (*gb)[i] += g[i];
          }
        } else if (broadcast_row(a, b)) {
          const std::size_t c = b.numel();
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[i] += g[i];
            if (gb) (*gb)[i % c] += g[i];
          }
        } else if (b.numel() == 1) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[i] += g[i];
            if (gb) (*gb)[0] += g[i];
          }
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[0] += g[i];
            if (gb) (*gb)[i] += g[i];
          }
        }
        break;
      }
      case Op::kMul: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        auto* ga = grad_of(n.in0);
        auto* gb = grad_of(n.in1);
        if (a.same_shape(b)) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[i] += g[i] * b.data[i];
            if (gb) (*gb)[i] += g[i] * a.data[i];
          }
        } else if (b.numel() == 1) {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[i] += g[i] * b.data[0];
            if (gb) (*gb)[0] += g[i] * a.data[i];
          }
        } else {
          for (std::size_t i = 0; i < g.size(); ++i) {
            if (ga) (*ga)[0] += g[i] * b.data[i];
            if (gb) (*gb)[i] += g[i] * a.data[0];
          }
        }
        break;
      }
      case Op::kConcat: {
        std::size_t off = 0;
        for (std::uint32_t p = 0; p < n.pool_count; ++p) {
          const std::uint32_t in = pool_[n.pool_begin + p];
          const std::size_t len = nodes_[in].val.numel();
          if (auto* gi = grad_of(in))
            for (std::size_t i = 0; i < len; ++i) (*gi)[i] += g[off + i];
          off += len;
        }
        break;
      }
      case Op::kStackRows: {
        const std::size_t w = n.val.shape[1];
        for (std::uint32_t p = 0; p < n.pool_count; ++p) {
          const std::uint32_t in = pool_[n.pool_begin + p];
          if (auto* gi = grad_of(in))
            for (std::size_t i = 0; i < w; ++i) (*gi)[i] += g[p * w + i];
        }
        break;
      }
      case Op::kSlice: {
        if (auto* ga = grad_of(n.in0))
          for (std::size_t i = 0; i < n.aux1; ++i) (*ga)[n.aux0 + i] += g[i];
        break;
      }
      case Op::kSigmoid: {
        if (auto* ga = grad_of(n.in0))
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = n.val.data[i];
            (*ga)[i] += g[i] * y * (1.0 - y);
          }
        break;
      }
      case Op::kTanh: {
        if (auto* ga = grad_of(n.in0))
          for (std::size_t i = 0; i < g.size(); ++i) {
            const double y = n.val.data[i];
            (*ga)[i] += g[i] * (1.0 - y * y);
          }
        break;
      }
      case Op::kLRelu: {
        const Tensor& a = nodes_[n.in0].val;
        if (auto* ga = grad_of(n.in0))
          for (std::size_t i = 0; i < g.size(); ++i)
            (*ga)[i] += g[i] * (a.data[i] > 0.0 ? 1.0 : n.auxd);
        break;
      }
      case Op::kSoftmax: {
        auto* ga = grad_of(n.in0);
        if (!ga) break;
        const Tensor& y = n.val;
        const std::size_t c = y.rank() == 2 ? y.shape[1] : y.numel();
        const std::size_t r = y.numel() / c;
        for (std::size_t i = 0; i < r; ++i) {
          const double* yrow = y.data.data() + i * c;
          const double* grow = g.data() + i * c;
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += grow[j] * yrow[j];
          for (std::size_t j = 0; j < c; ++j)
            (*ga)[i * c + j] += yrow[j] * (grow[j] - dot);
        }
        break;
      }
      case Op::kLogSoftmax: {
        auto* ga = grad_of(n.in0);
        if (!ga) break;
        const Tensor& y = n.val;
        const std::size_t c = y.rank() == 2 ? y.shape[1] : y.numel();
        const std::size_t r = y.numel() / c;
        for (std::size_t i = 0; i < r; ++i) {
          const double* yrow = y.data.data() + i * c;
          const double* grow = g.data() + i * c;
          double gsum = 0.0;
          for (std::size_t j = 0; j < c; ++j) gsum += grow[j];
          for (std::size_t j = 0; j < c; ++j)
            (*ga)[i * c + j] += grow[j] - std::exp(yrow[j]) * gsum;
        }
        break;
      }
      case Op::kCrossEntropy: {
        auto* ga = grad_of(n.in0);
        if (!ga) break;
        const Tensor& a = nodes_[n.in0].val;
        double mx = a.data[0];
        for (double v : a.data) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : a.data) z += std::exp(v - mx);
        const double g0 = g[0];
        for (std::size_t i = 0; i < a.numel(); ++i) {
          const double p = std::exp(a.data[i] - mx) / z;
          (*ga)[i] += g0 * (p - (i == n.aux0 ? 1.0 : 0.0));
        }
        break;
      }
      case Op::kSquaredError: {
        const Tensor& a = nodes_[n.in0].val;
        const Tensor& b = nodes_[n.in1].val;
        auto* ga = grad_of(n.in0);
        auto* gb = grad_of(n.in1);
        const double g0 = g[0];
        for (std::size_t i = 0; i < a.numel(); ++i) {
          const double d = 2.0 * (a.data[i] - b.data[i]) * g0;
          if (ga) (*ga)[i] += d;
          if (gb) (*gb)[i] -= d;
        }
        break;
      }
    }
  }

  std::vector<Node> nodes_;
  std::vector<std::uint32_t> pool_;
  std::vector<std::pair<std::uint32_t, Parameter*>> leaves_;
  std::size_t eval_cursor_ = 0;
  bool backward_done_ = false;
};

}  // namespace speechchain
