// Copyright (c) 2026, LPN contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "lpn/error.hpp"
#include "lpn/kernels.hpp"
#include "lpn/tensor.hpp"

namespace lpn::ad {

/// Closed operator set of the tape. Everything the model needs is composed
/// from these.
enum class Op : std::uint8_t {
    Parameter,
    Constant,
    MatMul,
    Transpose,
    Tanh,
    Softmax,
    Add,
    Mul,
    Scale,
    Concat,
    Sum,
    Mean,
    SqDist,
    Log,
    Exp,
    Slice,
};

inline const char* op_name(Op op) {
    switch (op) {
    case Op::Parameter: return "parameter";
    case Op::Constant: return "constant";
    case Op::MatMul: return "matmul";
    case Op::Transpose: return "transpose";
    case Op::Tanh: return "tanh";
    case Op::Softmax: return "softmax";
    case Op::Add: return "add";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::Concat: return "concat";
    case Op::Sum: return "sum";
    case Op::Mean: return "mean";
    case Op::SqDist: return "sqdist";
    case Op::Log: return "log";
    case Op::Exp: return "exp";
    case Op::Slice: return "slice";
    }
    return "?";
}

inline std::optional<Op> op_from_name(const std::string& name) {
    for (int i = 0; i <= static_cast<int>(Op::Slice); ++i) {
        const auto op = static_cast<Op>(i);
        if (name == op_name(op)) return op;
    }
    return std::nullopt;
}

class Graph;

/// Handle to a node of a Graph. Cheap to copy; valid while the graph lives.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::size_t id) : graph_(graph), id_(id) {}

    std::size_t id() const noexcept { return id_; }
    Graph* graph() const noexcept { return graph_; }
    const Tensor& value() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }

private:
    Graph* graph_ = nullptr;
    std::size_t id_ = 0;
};

/// Result of Graph::backward: one gradient per trainable leaf, keyed by name.
using Gradients = std::map<std::string, Tensor>;

/// Append-only computation tape with reverse-mode differentiation.
///
/// Nodes are stored in creation order, so inputs always precede their
/// consumers. Backward walks the tape once in reverse creation order, which
/// fixes the accumulation order and makes gradients bit-reproducible.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self, const Tensor& grad_out)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var parameter(const std::string& name, Tensor value) {
        if (params_.count(name)) throw Error("duplicate parameter name '" + name + "'");
        Var v = push(Op::Parameter, {}, std::move(value), nullptr, true);
        nodes_[v.id()].name = name;
        params_.emplace(name, v.id());
        return v;
    }

    Var constant(Tensor value) { return push(Op::Constant, {}, std::move(value), nullptr, false); }

    /// Generic node insertion used by the operator functions below.
    Var push(Op op, std::vector<std::size_t> inputs, Tensor value, BackwardFn backward,
             bool leaf_requires_grad = false) {
        if (!value.all_finite()) {
            throw NonFiniteError("non-finite value produced by node #" + std::to_string(nodes_.size()) + " (" +
                                 op_name(op) + ")");
        }
        bool needs = leaf_requires_grad;
        for (std::size_t in : inputs) needs = needs || nodes_[in].needs_grad;
        nodes_.push_back(Node{op, std::move(inputs), std::move(value), std::move(backward), needs, {}});
        return Var(this, nodes_.size() - 1);
    }

    const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
    Op op(std::size_t id) const { return nodes_.at(id).op; }
    const std::vector<std::size_t>& inputs(std::size_t id) const { return nodes_.at(id).inputs; }
    bool needs_grad(std::size_t id) const { return nodes_.at(id).needs_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    std::optional<Var> find_parameter(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) return std::nullopt;
        return Var(this, it->second);
    }

    /// Gradient buffer of a node, created as zeros on first use.
    Tensor& grad_buffer(std::size_t id) {
        if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
        auto& g = grads_[id];
        if (!g) g = Tensor(nodes_[id].value.shape());
        return *g;
    }

    void accumulate(std::size_t id, const Tensor& contribution) {
        if (!nodes_[id].needs_grad) return;
        grad_buffer(id) += contribution;
    }

    /// Gradient of the last backward pass at `v` (zeros if unreached).
    Tensor grad(Var v) const {
        if (v.id() < grads_.size() && grads_[v.id()]) return *grads_[v.id()];
        return Tensor(nodes_.at(v.id()).value.shape());
    }

    /// True when the last backward pass propagated any gradient into `v`.
    bool reached(Var v) const { return v.id() < grads_.size() && grads_[v.id()].has_value(); }

    /// Negates the backward rule of one operator. Used only as a negative
    /// control for gradient checking.
    void corrupt_backward(std::optional<Op> op) { corrupted_ = op; }

    /// Reverse-mode pass from a scalar node. Returns d loss / d parameter for
    /// every parameter leaf of the graph.
    Gradients backward(Var loss) {
        if (loss.graph() != this) throw Error("backward: loss belongs to another graph");
        if (nodes_.at(loss.id()).value.size() != 1)
            throw ShapeError("backward: loss must be scalar, got shape " +
                             shape_string(nodes_[loss.id()].value.shape()));
        grads_.assign(nodes_.size(), std::nullopt);
        grads_[loss.id()] = Tensor(nodes_[loss.id()].value.shape(), 1.0);
        for (std::size_t i = loss.id() + 1; i-- > 0;) {
            Node& node = nodes_[i];
            if (!node.needs_grad || !grads_[i] || !node.backward) continue;
            if (!grads_[i]->all_finite())
                throw NonFiniteError("non-finite gradient at node #" + std::to_string(i) + " (" +
                                     op_name(node.op) + ")");
            if (corrupted_ && *corrupted_ == node.op) {
                Tensor flipped = *grads_[i];
                for (double& x : flipped.data()) x = -x;
                node.backward(*this, i, flipped);
            } else {
                // Copy: the callback may grow grads_ and invalidate references.
                const Tensor g = *grads_[i];
                node.backward(*this, i, g);
            }
        }
        Gradients out;
        for (const auto& [name, id] : params_) {
            out.emplace(name, grads_[id] ? *grads_[id] : Tensor(nodes_[id].value.shape()));
            if (!out.at(name).all_finite()) throw NonFiniteError("non-finite gradient for parameter " + name);
        }
        return out;
    }

private:
    struct Node {
        Op op;
        std::vector<std::size_t> inputs;
        Tensor value;
        BackwardFn backward;
        bool needs_grad;
        std::string name;
    };

    std::vector<Node> nodes_;
    std::vector<std::optional<Tensor>> grads_;
    std::map<std::string, std::size_t> params_;
    std::optional<Op> corrupted_;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

namespace detail {

inline Graph& same_graph(Var a, Var b) {
    if (a.graph() != b.graph() || a.graph() == nullptr) throw Error("operands belong to different graphs");
    return *a.graph();
}

inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
    kernels::require_rank2(a, op);
    kernels::require_rank2(b, op);
    Shape out(2);
    for (int k = 0; k < 2; ++k) {
        const auto da = a.shape()[k], db = b.shape()[k];
        if (da == db || db == 1)
            out[k] = da;
        else if (da == 1)
            out[k] = db;
        else
            throw ShapeError(std::string(op) + ": cannot broadcast " + shape_string(a.shape()) + " with " +
                             shape_string(b.shape()));
    }
    return out;
}

inline double bcast_at(const Tensor& t, std::size_t r, std::size_t c) {
    return t(t.shape()[0] == 1 ? 0 : r, t.shape()[1] == 1 ? 0 : c);
}

/// Sums `g` down to `target` shape (inverse of broadcasting).
inline Tensor reduce_to(const Tensor& g, const Shape& target) {
    if (g.shape() == target) return g;
    Tensor out(target);
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c)
            out(target[0] == 1 ? 0 : r, target[1] == 1 ? 0 : c) += g(r, c);
    return out;
}

} // namespace detail

inline Var matmul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    Tensor out = kernels::matmul(a.value(), b.value());
    return g.push(Op::MatMul, {a.id(), b.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const auto& in = gr.inputs(self);
        const Tensor& av = gr.value(in[0]);
        const Tensor& bv = gr.value(in[1]);
        if (gr.needs_grad(in[0])) gr.accumulate(in[0], kernels::matmul(go, bv.transposed()));
        if (gr.needs_grad(in[1])) gr.accumulate(in[1], kernels::matmul(av.transposed(), go));
    });
}

inline Var transpose(Var a) {
    Graph& g = *a.graph();
    return g.push(Op::Transpose, {a.id()}, kernels::transpose(a.value()),
                  [](Graph& gr, std::size_t self, const Tensor& go) {
                      gr.accumulate(gr.inputs(self)[0], go.transposed());
                  });
}

inline Var tanh(Var a) {
    Graph& g = *a.graph();
    Tensor out = a.value();
    for (double& x : out.data()) x = std::tanh(x);
    return g.push(Op::Tanh, {a.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const Tensor& y = gr.value(self);
        Tensor ga = go;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= 1.0 - y[i] * y[i];
        gr.accumulate(gr.inputs(self)[0], ga);
    });
}

/// Softmax along `axis`; 1 normalizes each row, 0 each column.
inline Var softmax(Var a, int axis = 1) {
    Graph& g = *a.graph();
    return g.push(Op::Softmax, {a.id()}, kernels::softmax(a.value(), axis),
                  [axis](Graph& gr, std::size_t self, const Tensor& go) {
                      const Tensor& y = gr.value(self);
                      const std::size_t rows = y.rows(), cols = y.cols();
                      Tensor ga(y.shape());
                      if (axis == 1) {
                          for (std::size_t r = 0; r < rows; ++r) {
                              double s = 0.0;
                              for (std::size_t c = 0; c < cols; ++c) s += go(r, c) * y(r, c);
                              for (std::size_t c = 0; c < cols; ++c) ga(r, c) = y(r, c) * (go(r, c) - s);
                          }
                      } else {
                          for (std::size_t c = 0; c < cols; ++c) {
                              double s = 0.0;
                              for (std::size_t r = 0; r < rows; ++r) s += go(r, c) * y(r, c);
                              for (std::size_t r = 0; r < rows; ++r) ga(r, c) = y(r, c) * (go(r, c) - s);
                          }
                      }
                      gr.accumulate(gr.inputs(self)[0], ga);
                  });
}

/// Elementwise sum with rank-2 broadcasting of size-1 dimensions.
inline Var add(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(detail::broadcast_shape(av, bv, "add"));
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
            out(r, c) = detail::bcast_at(av, r, c) + detail::bcast_at(bv, r, c);
    return g.push(Op::Add, {a.id(), b.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const auto& in = gr.inputs(self);
        if (gr.needs_grad(in[0])) gr.accumulate(in[0], detail::reduce_to(go, gr.value(in[0]).shape()));
        if (gr.needs_grad(in[1])) gr.accumulate(in[1], detail::reduce_to(go, gr.value(in[1]).shape()));
    });
}

/// Elementwise (Hadamard) product with rank-2 broadcasting.
inline Var mul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out(detail::broadcast_shape(av, bv, "mul"));
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
            out(r, c) = detail::bcast_at(av, r, c) * detail::bcast_at(bv, r, c);
    return g.push(Op::Mul, {a.id(), b.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const auto& in = gr.inputs(self);
        const Tensor& av = gr.value(in[0]);
        const Tensor& bv = gr.value(in[1]);
        if (gr.needs_grad(in[0])) {
            Tensor t(go.shape());
            for (std::size_t r = 0; r < go.rows(); ++r)
                for (std::size_t c = 0; c < go.cols(); ++c) t(r, c) = go(r, c) * detail::bcast_at(bv, r, c);
            gr.accumulate(in[0], detail::reduce_to(t, av.shape()));
        }
        if (gr.needs_grad(in[1])) {
            Tensor t(go.shape());
            for (std::size_t r = 0; r < go.rows(); ++r)
                for (std::size_t c = 0; c < go.cols(); ++c) t(r, c) = go(r, c) * detail::bcast_at(av, r, c);
            gr.accumulate(in[1], detail::reduce_to(t, bv.shape()));
        }
    });
}

inline Var scale(Var a, double factor) {
    Graph& g = *a.graph();
    Tensor out = a.value();
    for (double& x : out.data()) x *= factor;
    return g.push(Op::Scale, {a.id()}, std::move(out), [factor](Graph& gr, std::size_t self, const Tensor& go) {
        Tensor ga = go;
        for (double& x : ga.data()) x *= factor;
        gr.accumulate(gr.inputs(self)[0], ga);
    });
}

/// Concatenation along `axis` (0 stacks rows, 1 joins columns).
inline Var concat(std::span<const Var> parts, int axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    if (axis != 0 && axis != 1) throw ShapeError("concat: axis must be 0 or 1");
    Graph& g = *parts.front().graph();
    const std::size_t fixed = axis == 0 ? parts.front().cols() : parts.front().rows();
    std::size_t total = 0;
    std::vector<std::size_t> ids;
    std::vector<std::size_t> offsets;
    for (const Var& p : parts) {
        if (p.graph() != &g) throw Error("concat: operands belong to different graphs");
        const std::size_t other = axis == 0 ? p.cols() : p.rows();
        if (other != fixed) throw ShapeError("concat: mismatched extent along the fixed axis");
        ids.push_back(p.id());
        offsets.push_back(total);
        total += axis == 0 ? p.rows() : p.cols();
    }
    Tensor out(axis == 0 ? Shape{total, fixed} : Shape{fixed, total});
    for (std::size_t n = 0; n < parts.size(); ++n) {
        const Tensor& v = parts[n].value();
        for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) {
                if (axis == 0)
                    out(offsets[n] + r, c) = v(r, c);
                else
                    out(r, offsets[n] + c) = v(r, c);
            }
    }
    return g.push(Op::Concat, ids, std::move(out),
                  [axis, offsets](Graph& gr, std::size_t self, const Tensor& go) {
                      const auto& in = gr.inputs(self);
                      for (std::size_t n = 0; n < in.size(); ++n) {
                          if (!gr.needs_grad(in[n])) continue;
                          Tensor& buf = gr.grad_buffer(in[n]);
                          for (std::size_t r = 0; r < buf.rows(); ++r)
                              for (std::size_t c = 0; c < buf.cols(); ++c)
                                  buf(r, c) += axis == 0 ? go(offsets[n] + r, c) : go(r, offsets[n] + c);
                      }
                  });
}

inline Var concat(std::initializer_list<Var> parts, int axis) {
    return concat(std::span<const Var>(parts.begin(), parts.size()), axis);
}

/// Sum reduction. axis -1 reduces everything to 1x1; 0 gives a 1xC row of
/// column sums; 1 gives an Rx1 column of row sums.
inline Var sum(Var a, int axis = -1) {
    Graph& g = *a.graph();
    const Tensor& v = a.value();
    kernels::require_rank2(v, "sum");
    Tensor out;
    if (axis == -1) {
        double s = 0.0;
        for (double x : v.data()) s += x;
        out = Tensor({1, 1}, s);
    } else if (axis == 0) {
        out = Tensor({1, v.cols()});
        for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(0, c) += v(r, c);
    } else if (axis == 1) {
        out = Tensor({v.rows(), 1});
        for (std::size_t r = 0; r < v.rows(); ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, 0) += v(r, c);
    } else {
        throw ShapeError("sum: axis must be -1, 0 or 1");
    }
    return g.push(Op::Sum, {a.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const std::size_t in = gr.inputs(self)[0];
        Tensor& buf = gr.grad_buffer(in);
        for (std::size_t r = 0; r < buf.rows(); ++r)
            for (std::size_t c = 0; c < buf.cols(); ++c) buf(r, c) += detail::bcast_at(go, r, c);
    });
}

/// Mean over all elements, 1x1.
inline Var mean(Var a) {
    Graph& g = *a.graph();
    const Tensor& v = a.value();
    if (v.size() == 0) throw ShapeError("mean: degenerate shape");
    double s = 0.0;
    for (double x : v.data()) s += x;
    const double n = static_cast<double>(v.size());
    return g.push(Op::Mean, {a.id()}, Tensor({1, 1}, s / n), [n](Graph& gr, std::size_t self, const Tensor& go) {
        const std::size_t in = gr.inputs(self)[0];
        Tensor& buf = gr.grad_buffer(in);
        const double share = go[0] / n;
        for (double& x : buf.data()) x += share;
    });
}

/// Pairwise squared Euclidean distance between rows: (n x d, m x d) -> n x m.
inline Var sqdist(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    return g.push(Op::SqDist, {a.id(), b.id()}, kernels::sqdist(a.value(), b.value()),
                  [](Graph& gr, std::size_t self, const Tensor& go) {
                      const auto& in = gr.inputs(self);
                      const Tensor& av = gr.value(in[0]);
                      const Tensor& bv = gr.value(in[1]);
                      const bool need_a = gr.needs_grad(in[0]);
                      const bool need_b = gr.needs_grad(in[1]);
                      Tensor ga(av.shape()), gb(bv.shape());
                      for (std::size_t i = 0; i < av.rows(); ++i)
                          for (std::size_t j = 0; j < bv.rows(); ++j) {
                              const double w = 2.0 * go(i, j);
                              for (std::size_t k = 0; k < av.cols(); ++k) {
                                  const double diff = av(i, k) - bv(j, k);
                                  ga(i, k) += w * diff;
                                  gb(j, k) -= w * diff;
                              }
                          }
                      if (need_a) gr.accumulate(in[0], ga);
                      if (need_b) gr.accumulate(in[1], gb);
                  });
}

inline Var log(Var a) {
    Graph& g = *a.graph();
    Tensor out = a.value();
    for (double& x : out.data()) {
        if (!(x > 0.0)) throw NonFiniteError("log of non-positive value at node #" + std::to_string(a.id()));
        x = std::log(x);
    }
    return g.push(Op::Log, {a.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const std::size_t in = gr.inputs(self)[0];
        const Tensor& x = gr.value(in);
        Tensor ga = go;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] /= x[i];
        gr.accumulate(in, ga);
    });
}

inline Var exp(Var a) {
    Graph& g = *a.graph();
    Tensor out = a.value();
    for (double& x : out.data()) x = std::exp(x);
    return g.push(Op::Exp, {a.id()}, std::move(out), [](Graph& gr, std::size_t self, const Tensor& go) {
        const Tensor& y = gr.value(self);
        Tensor ga = go;
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] *= y[i];
        gr.accumulate(gr.inputs(self)[0], ga);
    });
}

/// Half-open range [begin, end) along `axis`.
inline Var slice(Var a, int axis, std::size_t begin, std::size_t end) {
    Graph& g = *a.graph();
    const Tensor& v = a.value();
    kernels::require_rank2(v, "slice");
    if (axis != 0 && axis != 1) throw ShapeError("slice: axis must be 0 or 1");
    const std::size_t extent = axis == 0 ? v.rows() : v.cols();
    if (begin >= end || end > extent)
        throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of bounds for " + shape_string(v.shape()));
    Tensor out(axis == 0 ? Shape{end - begin, v.cols()} : Shape{v.rows(), end - begin});
    for (std::size_t r = 0; r < out.rows(); ++r)
        for (std::size_t c = 0; c < out.cols(); ++c)
            out(r, c) = axis == 0 ? v(begin + r, c) : v(r, begin + c);
    return g.push(Op::Slice, {a.id()}, std::move(out),
                  [axis, begin](Graph& gr, std::size_t self, const Tensor& go) {
                      Tensor& buf = gr.grad_buffer(gr.inputs(self)[0]);
                      for (std::size_t r = 0; r < go.rows(); ++r)
                          for (std::size_t c = 0; c < go.cols(); ++c) {
                              if (axis == 0)
                                  buf(begin + r, c) += go(r, c);
                              else
                                  buf(r, begin + c) += go(r, c);
                          }
                  });
}

// ---- composites built only from the primitives above ----

inline Var row(Var a, std::size_t r) { return slice(a, 0, r, r + 1); }

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var sub(Var a, Var b) { return add(a, neg(b)); }

/// Row-wise (axis 1) or column-wise (axis 0) maxima as a constant node.
/// Used as a shift inside log-sum-exp, where the gradient of the shift
/// cancels exactly.
inline Var detached_max(Var a, int axis) {
    const Tensor& v = a.value();
    Tensor m(axis == 1 ? Shape{v.rows(), 1} : Shape{1, v.cols()}, -std::numeric_limits<double>::infinity());
    for (std::size_t r = 0; r < v.rows(); ++r)
        for (std::size_t c = 0; c < v.cols(); ++c) {
            double& slot = axis == 1 ? m(r, 0) : m(0, c);
            slot = std::max(slot, v(r, c));
        }
    return a.graph()->constant(std::move(m));
}

/// Numerically stable log-softmax along rows: x - max - log(sum(exp(x - max))).
inline Var log_softmax_rows(Var x) {
    Var shifted = sub(x, detached_max(x, 1));
    Var lse = log(sum(exp(shifted), 1));
    return sub(shifted, lse);
}

} // namespace lpn::ad
