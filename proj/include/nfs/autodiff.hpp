// Copyright 2026 The nfspeech Authors.
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Minimal reverse-mode automatic differentiation over dense f64 tensors.
//
// A Graph is an append-only list of op records; node ids are topologically
// ordered by construction. Leaves are named inputs, named parameters, or
// constants. forward() binds every named leaf from a TensorMap; backward()
// returns gradients of a scalar node for every parameter leaf.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "nfs/core.hpp"

namespace nfs::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)), values_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), values_(std::move(values)) {
    NFS_CHECK(values_.size() == shape_size(shape_), "tensor value count ", values_.size(), " does not match shape ",
              shape_str(shape_));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) { return Tensor({rows, cols}, fill); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const {
    NFS_CHECK(size() == 1, "item() on tensor of shape ", shape_str(shape_));
    return values_[0];
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && values_ == o.values_; }

 private:
  Shape shape_;
  std::vector<double> values_;
};

using TensorMap = std::map<std::string, Tensor>;
using NodeId = std::size_t;

enum class Op {
  kInput,
  kParameter,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kMul,
  kSin,
  kCos,
  kExp,
  kLog,
  kSoftplus,
  kSigmoid,
  kLeakyRelu,
  kSum,
  kMean,
  kSquare,
  kConcat,
  kSlice,
  kBroadcast,
  kGather,
  kScale,
};

inline const char* op_name(Op op) {
  switch (op) {
    case Op::kInput: return "input";
    case Op::kParameter: return "parameter";
    case Op::kConstant: return "constant";
    case Op::kMatMul: return "matmul";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSoftplus: return "softplus";
    case Op::kSigmoid: return "sigmoid";
    case Op::kLeakyRelu: return "leaky_relu";
    case Op::kSum: return "sum";
    case Op::kMean: return "mean";
    case Op::kSquare: return "square";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kBroadcast: return "broadcast";
    case Op::kGather: return "gather";
    case Op::kScale: return "scale";
  }
  return "?";
}

struct Node {
  Op op = Op::kInput;
  std::vector<NodeId> inputs;
  Shape shape;
  std::string name;                  // leaves only
  double attr = 0.0;                 // leaky slope, scale factor
  std::size_t axis = 0;              // concat / slice / sum axis
  std::size_t begin = 0, end = 0;    // slice range
  bool reduce_all = true;            // sum / mean
  std::vector<std::size_t> indices;  // gather
  Tensor constant;
};

class Graph {
 public:
  NodeId input(std::string name, Shape shape) { return leaf(Op::kInput, std::move(name), std::move(shape)); }
  NodeId parameter(std::string name, Shape shape) { return leaf(Op::kParameter, std::move(name), std::move(shape)); }
  NodeId constant(Tensor value) {
    Node n;
    n.op = Op::kConstant;
    n.shape = value.shape();
    n.constant = std::move(value);
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    if (sa.size() != 2 || sb.size() != 2 || sa[1] != sb[0])
      fail("matmul node ", nodes_.size(), ": incompatible shapes ", shape_str(sa), " x ", shape_str(sb));
    return binary(Op::kMatMul, a, b, {sa[0], sb[1]});
  }
  NodeId add(NodeId a, NodeId b) { return same_shape(Op::kAdd, a, b); }
  NodeId sub(NodeId a, NodeId b) { return same_shape(Op::kSub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return same_shape(Op::kMul, a, b); }
  NodeId sin(NodeId a) { return unary(Op::kSin, a); }
  NodeId cos(NodeId a) { return unary(Op::kCos, a); }
  NodeId exp(NodeId a) { return unary(Op::kExp, a); }
  NodeId log(NodeId a) { return unary(Op::kLog, a); }
  NodeId softplus(NodeId a) { return unary(Op::kSoftplus, a); }
  NodeId sigmoid(NodeId a) { return unary(Op::kSigmoid, a); }
  NodeId square(NodeId a) { return unary(Op::kSquare, a); }
  NodeId leaky_relu(NodeId a, double slope = 0.2) {
    NodeId id = unary(Op::kLeakyRelu, a);
    nodes_[id].attr = slope;
    return id;
  }
  NodeId scale(NodeId a, double factor) {
    NodeId id = unary(Op::kScale, a);
    nodes_[id].attr = factor;
    return id;
  }

  /// Sum of all entries (scalar result).
  NodeId sum(NodeId a) { return reduce(Op::kSum, a); }
  NodeId mean(NodeId a) { return reduce(Op::kMean, a); }
  /// Sum over one axis of a rank-2 tensor, keeping that axis with extent 1.
  NodeId sum(NodeId a, std::size_t axis) {
    const Shape& s = shape(a);
    NFS_CHECK(s.size() == 2 && axis < 2, "sum node ", nodes_.size(), ": axis ", axis, " invalid for shape ",
              shape_str(s));
    Shape out = s;
    out[axis] = 1;
    Node n;
    n.op = Op::kSum;
    n.inputs = {a};
    n.shape = out;
    n.axis = axis;
    n.reduce_all = false;
    return push(std::move(n));
  }

  NodeId concat(NodeId a, NodeId b, std::size_t axis) {
    const Shape& sa = shape(a);
    const Shape& sb = shape(b);
    bool ok = sa.size() == 2 && sb.size() == 2 && axis < 2 && sa[1 - axis] == sb[1 - axis];
    if (!ok)
      fail("concat node ", nodes_.size(), ": incompatible shapes ", shape_str(sa), " and ", shape_str(sb), " on axis ",
           axis);
    Shape out = sa;
    out[axis] += sb[axis];
    Node n;
    n.op = Op::kConcat;
    n.inputs = {a, b};
    n.shape = out;
    n.axis = axis;
    return push(std::move(n));
  }

  NodeId slice(NodeId a, std::size_t axis, std::size_t begin, std::size_t end) {
    const Shape& s = shape(a);
    bool ok = s.size() == 2 && axis < 2 && begin < end && end <= s[axis];
    if (!ok) fail("slice node ", nodes_.size(), ": range [", begin, ",", end, ") invalid for ", shape_str(s));
    Shape out = s;
    out[axis] = end - begin;
    Node n;
    n.op = Op::kSlice;
    n.inputs = {a};
    n.shape = out;
    n.axis = axis;
    n.begin = begin;
    n.end = end;
    return push(std::move(n));
  }

  /// Numpy-style broadcast of a to `target` (same rank, or a scalar source).
  NodeId broadcast(NodeId a, Shape target) {
    const Shape& s = shape(a);
    bool ok = s.empty() || shape_size(s) == 1;
    if (!ok && s.size() == target.size()) {
      ok = true;
      for (std::size_t i = 0; i < s.size(); ++i) ok = ok && (s[i] == target[i] || s[i] == 1);
    }
    if (!ok) fail("broadcast node ", nodes_.size(), ": cannot broadcast ", shape_str(s), " to ", shape_str(target));
    Node n;
    n.op = Op::kBroadcast;
    n.inputs = {a};
    n.shape = std::move(target);
    return push(std::move(n));
  }

  /// out.flat[i] = a.flat[indices[i]]; the adjoint scatters.
  NodeId gather(NodeId a, std::vector<std::size_t> indices, Shape out_shape) {
    NFS_CHECK(indices.size() == shape_size(out_shape), "gather node ", nodes_.size(), ": ", indices.size(),
              " indices for output shape ", shape_str(out_shape));
    const std::size_t n_in = shape_size(shape(a));
    for (std::size_t idx : indices)
      NFS_CHECK(idx < n_in, "gather node ", nodes_.size(), ": index ", idx, " out of range ", n_in);
    Node n;
    n.op = Op::kGather;
    n.inputs = {a};
    n.shape = std::move(out_shape);
    n.indices = std::move(indices);
    return push(std::move(n));
  }

  /// y = x W + b for a row-batch x, with parameters "<prefix>.weight" and "<prefix>.bias".
  NodeId linear(NodeId x, const std::string& prefix, std::size_t in, std::size_t out) {
    NodeId w = parameter(prefix + ".weight", {in, out});
    NodeId b = parameter(prefix + ".bias", {1, out});
    NodeId xw = matmul(x, w);
    return add(xw, broadcast(b, shape(xw)));
  }

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const { return nodes_.at(id); }
  const Shape& shape(NodeId id) const {
    NFS_CHECK(id < nodes_.size(), "unknown node id ", id);
    return nodes_[id].shape;
  }
  std::size_t size() const { return nodes_.size(); }

  std::vector<NodeId> parameters() const {
    std::vector<NodeId> out;
    for (NodeId i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].op == Op::kParameter) out.push_back(i);
    return out;
  }

 private:
  NodeId push(Node n) {
    for (NodeId in : n.inputs) NFS_CHECK(in < nodes_.size(), "node input ", in, " does not precede node");
    nodes_.push_back(std::move(n));
    return nodes_.size() - 1;
  }
  NodeId leaf(Op op, std::string name, Shape shape) {
    for (const Node& n : nodes_)
      if ((n.op == Op::kInput || n.op == Op::kParameter) && n.name == name) fail("duplicate leaf name \"", name, "\"");
    Node n;
    n.op = op;
    n.name = std::move(name);
    n.shape = std::move(shape);
    return push(std::move(n));
  }
  NodeId unary(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.inputs = {a};
    n.shape = shape(a);
    return push(std::move(n));
  }
  NodeId binary(Op op, NodeId a, NodeId b, Shape out) {
    Node n;
    n.op = op;
    n.inputs = {a, b};
    n.shape = std::move(out);
    return push(std::move(n));
  }
  NodeId same_shape(Op op, NodeId a, NodeId b) {
    if (shape(a) != shape(b))
      fail(op_name(op), " node ", nodes_.size(), ": shape mismatch ", shape_str(shape(a)), " vs ",
           shape_str(shape(b)));
    return binary(op, a, b, shape(a));
  }
  NodeId reduce(Op op, NodeId a) {
    Node n;
    n.op = op;
    n.inputs = {a};
    n.shape = {};
    return push(std::move(n));
  }

  std::vector<Node> nodes_;
};

/// Values of every node after a forward pass.
struct Evaluation {
  std::vector<Tensor> values;
  const Tensor& operator[](NodeId id) const { return values.at(id); }
};

namespace detail {

// Maps a flat index of `out` to the flat index of the broadcast source.
inline std::size_t broadcast_source(const Shape& src, const Shape& out, std::size_t flat) {
  if (src.empty() || shape_size(src) == 1) return 0;
  std::size_t idx = 0, stride = 1;
  for (std::size_t d = out.size(); d-- > 0;) {
    const std::size_t coord = flat % out[d];
    flat /= out[d];
    if (src[d] != 1) idx += coord * stride;
    stride *= src[d];
  }
  return idx;
}

}  // namespace detail

inline Evaluation forward(const Graph& g, const TensorMap& bindings) {
  Evaluation ev;
  ev.values.resize(g.size());
  for (NodeId id = 0; id < g.size(); ++id) {
    const Node& n = g.node(id);
    Tensor out(n.shape);
    auto in = [&](std::size_t k) -> const Tensor& { return ev.values[n.inputs[k]]; };
    switch (n.op) {
      case Op::kInput:
      case Op::kParameter: {
        auto it = bindings.find(n.name);
        if (it == bindings.end()) fail(op_name(n.op), " node ", id, " \"", n.name, "\" is not bound");
        if (it->second.shape() != n.shape)
          fail(op_name(n.op), " node ", id, " \"", n.name, "\": bound shape ", shape_str(it->second.shape()),
               " but declared ", shape_str(n.shape));
        out = it->second;
        break;
      }
      case Op::kConstant: out = n.constant; break;
      case Op::kMatMul: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            for (std::size_t j = 0; j < p; ++j) out[i * p + j] += av * b[kk * p + j];
          }
        break;
      }
      case Op::kAdd:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] + in(1)[i];
        break;
      case Op::kSub:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] - in(1)[i];
        break;
      case Op::kMul:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] * in(1)[i];
        break;
      case Op::kSin:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::sin(in(0)[i]);
        break;
      case Op::kCos:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::cos(in(0)[i]);
        break;
      case Op::kExp:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(in(0)[i]);
        break;
      case Op::kLog:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(in(0)[i]);
        break;
      case Op::kSoftplus:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = nfs::softplus(in(0)[i]);
        break;
      case Op::kSigmoid:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = nfs::sigmoid(in(0)[i]);
        break;
      case Op::kLeakyRelu:
        for (std::size_t i = 0; i < out.size(); ++i) {
          const double x = in(0)[i];
          out[i] = x > 0 ? x : n.attr * x;
        }
        break;
      case Op::kScale:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = n.attr * in(0)[i];
        break;
      case Op::kSquare:
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = in(0)[i] * in(0)[i];
        break;
      case Op::kSum:
      case Op::kMean: {
        const Tensor& a = in(0);
        if (n.reduce_all) {
          double s = 0.0;
          for (double v : a.values()) s += v;
          out[0] = n.op == Op::kMean ? s / static_cast<double>(a.size()) : s;
        } else {
          const std::size_t r = a.rows(), c = a.cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out[n.axis == 0 ? j : i] += a[i * c + j];
        }
        break;
      }
      case Op::kConcat: {
        const Tensor& a = in(0);
        const Tensor& b = in(1);
        const std::size_t cols = out.cols();
        if (n.axis == 0) {
          std::copy(a.values().begin(), a.values().end(), out.values().begin());
          std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<long>(a.size()));
        } else {
          for (std::size_t i = 0; i < out.rows(); ++i) {
            for (std::size_t j = 0; j < a.cols(); ++j) out[i * cols + j] = a[i * a.cols() + j];
            for (std::size_t j = 0; j < b.cols(); ++j) out[i * cols + a.cols() + j] = b[i * b.cols() + j];
          }
        }
        break;
      }
      case Op::kSlice: {
        const Tensor& a = in(0);
        for (std::size_t i = 0; i < out.rows(); ++i)
          for (std::size_t j = 0; j < out.cols(); ++j) {
            const std::size_t si = n.axis == 0 ? i + n.begin : i;
            const std::size_t sj = n.axis == 1 ? j + n.begin : j;
            out[i * out.cols() + j] = a[si * a.cols() + sj];
          }
        break;
      }
      case Op::kBroadcast: {
        const Tensor& a = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[detail::broadcast_source(a.shape(), n.shape, i)];
        break;
      }
      case Op::kGather: {
        const Tensor& a = in(0);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[n.indices[i]];
        break;
      }
    }
    if (!all_finite(out.data(), out.size()))
      fail("non-finite value produced by ", op_name(n.op), " node ", id, n.name.empty() ? "" : " \"" + n.name + "\"");
    ev.values[id] = std::move(out);
  }
  return ev;
}

/// Reverse-mode gradients of the scalar node `output` for every parameter.
inline TensorMap backward(const Graph& g, const Evaluation& ev, NodeId output) {
  NFS_CHECK(output < g.size(), "unknown output node ", output);
  if (shape_size(g.shape(output)) != 1)
    fail("backward requires a scalar output, node ", output, " has shape ", shape_str(g.shape(output)));
  std::vector<Tensor> grad(g.size());
  std::vector<bool> live(g.size(), false);
  grad[output] = Tensor(g.shape(output), 1.0);
  live[output] = true;

  auto acc = [&](NodeId id) -> Tensor& {
    if (!live[id]) {
      grad[id] = Tensor(g.shape(id));
      live[id] = true;
    }
    return grad[id];
  };

  for (NodeId id = output + 1; id-- > 0;) {
    if (!live[id]) continue;
    const Node& n = g.node(id);
    const Tensor& gy = grad[id];
    const Tensor& y = ev[id];
    auto x = [&](std::size_t k) -> const Tensor& { return ev[n.inputs[k]]; };
    switch (n.op) {
      case Op::kInput:
      case Op::kParameter:
      case Op::kConstant: break;
      case Op::kMatMul: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        const std::size_t m = a.rows(), k = a.cols(), p = b.cols();
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            double s = 0.0;
            for (std::size_t j = 0; j < p; ++j) s += gy[i * p + j] * b[kk * p + j];
            ga[i * k + kk] += s;
          }
        Tensor& gb = acc(n.inputs[1]);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t kk = 0; kk < k; ++kk) {
            const double av = a[i * k + kk];
            for (std::size_t j = 0; j < p; ++j) gb[kk * p + j] += av * gy[i * p + j];
          }
        break;
      }
      case Op::kAdd: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        Tensor& gb = acc(n.inputs[1]);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
        break;
      }
      case Op::kSub: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
        Tensor& gb = acc(n.inputs[1]);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
        break;
      }
      case Op::kMul: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b[i];
        Tensor& gb = acc(n.inputs[1]);
        for (std::size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a[i];
        break;
      }
      case Op::kSin: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * std::cos(x(0)[i]);
        break;
      }
      case Op::kCos: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] -= gy[i] * std::sin(x(0)[i]);
        break;
      }
      case Op::kExp: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y[i];
        break;
      }
      case Op::kLog: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / x(0)[i];
        break;
      }
      case Op::kSoftplus: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * nfs::sigmoid(x(0)[i]);
        break;
      }
      case Op::kSigmoid: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y[i] * (1.0 - y[i]);
        break;
      }
      case Op::kLeakyRelu: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * (x(0)[i] > 0 ? 1.0 : n.attr);
        break;
      }
      case Op::kScale: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * n.attr;
        break;
      }
      case Op::kSquare: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[i] += 2.0 * gy[i] * x(0)[i];
        break;
      }
      case Op::kSum:
      case Op::kMean: {
        const Tensor& a = x(0);
        Tensor& ga = acc(n.inputs[0]);
        if (n.reduce_all) {
          const double s = n.op == Op::kMean ? gy[0] / static_cast<double>(a.size()) : gy[0];
          for (std::size_t i = 0; i < a.size(); ++i) ga[i] += s;
        } else {
          const std::size_t r = a.rows(), c = a.cols();
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += gy[n.axis == 0 ? j : i];
        }
        break;
      }
      case Op::kConcat: {
        const Tensor& a = x(0);
        const Tensor& b = x(1);
        Tensor& ga = acc(n.inputs[0]);
        Tensor& gb = acc(n.inputs[1]);
        const std::size_t cols = gy.cols();
        if (n.axis == 0) {
          for (std::size_t i = 0; i < a.size(); ++i) ga[i] += gy[i];
          for (std::size_t i = 0; i < b.size(); ++i) gb[i] += gy[a.size() + i];
        } else {
          for (std::size_t i = 0; i < gy.rows(); ++i) {
            for (std::size_t j = 0; j < a.cols(); ++j) ga[i * a.cols() + j] += gy[i * cols + j];
            for (std::size_t j = 0; j < b.cols(); ++j) gb[i * b.cols() + j] += gy[i * cols + a.cols() + j];
          }
        }
        break;
      }
      case Op::kSlice: {
        const Tensor& a = x(0);
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.rows(); ++i)
          for (std::size_t j = 0; j < gy.cols(); ++j) {
            const std::size_t si = n.axis == 0 ? i + n.begin : i;
            const std::size_t sj = n.axis == 1 ? j + n.begin : j;
            ga[si * a.cols() + sj] += gy[i * gy.cols() + j];
          }
        break;
      }
      case Op::kBroadcast: {
        const Tensor& a = x(0);
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[detail::broadcast_source(a.shape(), n.shape, i)] += gy[i];
        break;
      }
      case Op::kGather: {
        Tensor& ga = acc(n.inputs[0]);
        for (std::size_t i = 0; i < gy.size(); ++i) ga[n.indices[i]] += gy[i];
        break;
      }
    }
  }

  TensorMap out;
  for (NodeId id : g.parameters()) {
    const Node& n = g.node(id);
    out[n.name] = live[id] ? grad[id] : Tensor(n.shape);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  /// Applies one bias-corrected step to every parameter that has a gradient.
  void step(TensorMap& params, const TensorMap& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      auto g = grads.find(name);
      if (g == grads.end()) continue;
      NFS_CHECK(g->second.shape() == p.shape(), "adam: gradient shape ", shape_str(g->second.shape()),
                " does not match parameter \"", name, "\" ", shape_str(p.shape()));
      auto& st = state_[name];
      if (st.m.size() != p.size()) {
        st.m.assign(p.size(), 0.0);
        st.v.assign(p.size(), 0.0);
      }
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = g->second[i];
        st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * gi;
        st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * gi * gi;
        const double mh = st.m[i] / c1;
        const double vh = st.v[i] / c2;
        p[i] -= config_.lr * mh / (std::sqrt(vh) + config_.eps);
      }
    }
  }

  /// Same update for a raw parameter vector, keyed by `name`.
  void step(const std::string& name, std::vector<double>& p, const std::vector<double>& g, bool advance = true) {
    if (advance) ++t_;
    NFS_CHECK(p.size() == g.size(), "adam: size mismatch for \"", name, "\"");
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    auto& st = state_[name];
    if (st.m.size() != p.size()) {
      st.m.assign(p.size(), 0.0);
      st.v.assign(p.size(), 0.0);
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      st.m[i] = config_.beta1 * st.m[i] + (1.0 - config_.beta1) * g[i];
      st.v[i] = config_.beta2 * st.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      p[i] -= config_.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + config_.eps);
    }
  }

  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m, v;
  };
  AdamConfig config_;
  long t_ = 0;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// "NFSP" checkpoints: magic, u32 version, u32 count, then per tensor
// u32 name length, name bytes, u32 rank, u32 dims, f64 data (little-endian).

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(const std::string& path, const TensorMap& tensors) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    NFS_CHECK(os, "cannot open \"", tmp, "\" for writing");
    io::write_magic(os, "NFSP");
    io::write_u32(os, kCheckpointVersion);
    io::write_u32(os, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, t] : tensors) {
      io::write_u32(os, static_cast<std::uint32_t>(name.size()));
      os.write(name.data(), static_cast<std::streamsize>(name.size()));
      io::write_u32(os, static_cast<std::uint32_t>(t.rank()));
      for (std::size_t d : t.shape()) io::write_u32(os, static_cast<std::uint32_t>(d));
      for (double v : t.values()) io::write_f64(os, v);
    }
    NFS_CHECK(os.good(), "write failed for \"", tmp, "\"");
  }
  std::filesystem::rename(tmp, path);
}

inline TensorMap load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  NFS_CHECK(is, "cannot open checkpoint \"", path, "\"");
  io::expect_magic(is, "NFSP");
  const auto version = io::read_u32(is, "version");
  NFS_CHECK(version == kCheckpointVersion, "unsupported checkpoint version ", version);
  const auto count = io::read_u32(is, "tensor count");
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = io::read_u32(is, "name length");
    NFS_CHECK(len < (1u << 16), "implausible tensor name length ", len);
    std::string name(len, '\0');
    NFS_CHECK(is.read(name.data(), len), "truncated tensor name");
    const auto rank = io::read_u32(is, "rank");
    NFS_CHECK(rank <= 8, "implausible rank ", rank, " for \"", name, "\"");
    Shape shape(rank);
    for (auto& d : shape) d = io::read_u32(is, "dims");
    Tensor t(shape);
    for (auto& v : t.values()) v = io::read_f64(is, "tensor data");
    out.emplace(std::move(name), std::move(t));
  }
  return out;
}

}  // namespace nfs::ad
