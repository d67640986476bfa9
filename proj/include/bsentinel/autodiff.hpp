#pragma once

#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "errors.hpp"
#include "tensor.hpp"

namespace bsentinel {

template <typename T>
class Tape;

/// Handle to a value recorded on a tape.
template <typename T>
class Var {
public:
    Var() = default;

    const Tensor<T>& value() const { return tape_->value(id_); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape_->requires_grad(id_); }
    Tape<T>& tape() const { return *tape_; }
    std::size_t id() const noexcept { return id_; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
template <typename T>
class Gradients {
public:
    bool has(const Var<T>& v) const { return grads_.count(v.id()) != 0; }

    const Tensor<T>& of(const Var<T>& v) const {
        auto it = grads_.find(v.id());
        if (it == grads_.end()) throw ConfigError("no gradient recorded for tape node " + std::to_string(v.id()));
        return it->second;
    }

    std::size_t size() const noexcept { return grads_.size(); }

private:
    friend class Tape<T>;
    std::map<std::size_t, Tensor<T>> grads_;
};

/// Define-by-run record of tensor operations. Nodes are appended in
/// evaluation order, so every node's inputs precede it. A tape is owned by a
/// single computation and is discarded once gradients have been read.
template <typename T>
class Tape {
public:
    /// Computes input gradients from the output gradient. `needs[i]` is false
    /// for inputs that do not require gradients; their entry may be left empty.
    using BackwardFn = std::function<std::vector<Tensor<T>>(const Tensor<T>& grad_out, const std::vector<bool>& needs)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Leaf whose trainability follows the tensor's requires_grad flag.
    Var<T> input(Tensor<T> value) {
        const bool rg = value.requires_grad();
        return push(std::move(value), rg, {}, nullptr, true);
    }

    Var<T> parameter(Tensor<T> value) { return input(std::move(value.set_requires_grad(true))); }
    Var<T> constant(Tensor<T> value) { return input(std::move(value.set_requires_grad(false))); }

    /// Records the result of an operation. The node requires gradients when
    /// any input does; otherwise the backward function is dropped.
    Var<T> record(Tensor<T> value, const std::vector<Var<T>>& inputs, BackwardFn backward) {
        std::vector<std::size_t> ids;
        bool rg = false;
        for (const auto& in : inputs) {
            if (in.tape_ != this) throw ConfigError("operation mixes values from different tapes");
            ids.push_back(in.id_);
            rg = rg || nodes_[in.id_].requires_grad;
        }
        value.set_requires_grad(rg);
        if (!rg) return push(std::move(value), false, {}, nullptr, false);
        return push(std::move(value), true, std::move(ids), std::move(backward), false);
    }

    const Tensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }

    /// Reverse sweep from a scalar loss. Every trainable leaf gets a gradient
    /// of its own shape, zero when the loss does not depend on it. Frozen
    /// leaves get no entry.
    Gradients<T> backward(const Var<T>& loss) const {
        if (loss.tape_ != this) throw ConfigError("loss belongs to a different tape");
        const Tensor<T>& lv = value(loss.id_);
        if (lv.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_string(lv.shape()));

        std::vector<Tensor<T>> grads(nodes_.size());
        std::vector<bool> has(nodes_.size(), false);
        if (nodes_[loss.id_].requires_grad) {
            grads[loss.id_] = Tensor<T>::full(lv.shape(), T{1});
            has[loss.id_] = true;
        }
        for (std::size_t i = loss.id_ + 1; i-- > 0;) {
            const Node& node = nodes_[i];
            if (!has[i] || !node.backward) continue;
            std::vector<bool> needs(node.inputs.size());
            for (std::size_t k = 0; k < node.inputs.size(); ++k) needs[k] = nodes_[node.inputs[k]].requires_grad;
            std::vector<Tensor<T>> in_grads = node.backward(grads[i], needs);
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                if (!needs[k]) continue;
                const std::size_t j = node.inputs[k];
                if (!has[j]) {
                    grads[j] = std::move(in_grads[k]);
                    has[j] = true;
                } else {
                    auto dst = grads[j].data();
                    auto src = in_grads[k].data();
                    for (std::size_t e = 0; e < dst.size(); ++e) dst[e] += src[e];
                }
            }
        }

        Gradients<T> out;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& node = nodes_[i];
            if (!node.leaf || !node.requires_grad) continue;
            out.grads_.emplace(i, has[i] ? std::move(grads[i]) : Tensor<T>::zeros(node.value.shape()));
        }
        return out;
    }

private:
    struct Node {
        Tensor<T> value;
        bool requires_grad = false;
        bool leaf = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    Var<T> push(Tensor<T> value, bool rg, std::vector<std::size_t> inputs, BackwardFn fn, bool leaf) {
        nodes_.push_back(Node{std::move(value), rg, leaf, std::move(inputs), std::move(fn)});
        return Var<T>(this, nodes_.size() - 1);
    }

    std::deque<Node> nodes_;
};

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + " shape mismatch: " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

template <typename T>
Tensor<T> map_pair(const Tensor<T>& a, const Tensor<T>& b, auto f) {
    Tensor<T> out = a;
    auto o = out.data();
    auto bd = b.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(o[i], bd[i]);
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
    Tensor<T> out = kernels::matmul(a.value(), b.value());
    Tensor<T> av = a.value(), bv = b.value();
    return a.tape().record(std::move(out), {a, b}, [av, bv](const Tensor<T>& g, const std::vector<bool>& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = kernels::matmul(g, kernels::transpose(bv));
        if (needs[1]) r[1] = kernels::matmul(kernels::transpose(av), g);
        return r;
    });
}

template <typename T>
Var<T> transpose(const Var<T>& a) {
    return a.tape().record(kernels::transpose(a.value()), {a}, [](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{kernels::transpose(g)};
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    Shape original = a.shape();
    return a.tape().record(a.value().reshaped(std::move(shape)), {a},
                           [original](const Tensor<T>& g, const std::vector<bool>&) {
                               return std::vector<Tensor<T>>{g.reshaped(original)};
                           });
}

/// Adds a length-d vector to every row of an n x d matrix.
template <typename T>
Var<T> add_bias(const Var<T>& x, const Var<T>& bias) {
    Shape bshape = bias.shape();
    return x.tape().record(kernels::add_bias(x.value(), bias.value()), {x, bias},
                           [bshape](const Tensor<T>& g, const std::vector<bool>& needs) {
                               std::vector<Tensor<T>> r(2);
                               if (needs[0]) r[0] = g;
                               if (needs[1]) {
                                   Tensor<T> gb = Tensor<T>::zeros(bshape);
                                   for (std::size_t i = 0; i < g.rows(); ++i) {
                                       auto row = g.row(i);
                                       for (std::size_t j = 0; j < row.size(); ++j) gb[j] += row[j];
                                   }
                                   r[1] = std::move(gb);
                               }
                               return r;
                           });
}

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { add, sub, mul, scale, gelu, relu };

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b);

namespace detail {

/// Broadcasts a size-1 operand against the other one; all other shape
/// combinations must match exactly.
template <typename T>
std::pair<Var<T>, Var<T>> broadcast_pair(const Var<T>& a, const Var<T>& b, const char* op);

template <typename T>
Var<T> expand_scalar(const Var<T>& s, const Shape& shape) {
    Tensor<T> out = Tensor<T>::full(shape, s.value()[0]);
    Shape sshape = s.shape();
    return s.tape().record(std::move(out), {s}, [sshape](const Tensor<T>& g, const std::vector<bool>&) {
        T total{0};
        for (T v : g.data()) total += v;
        return std::vector<Tensor<T>>{Tensor<T>::full(sshape, total)};
    });
}

template <typename T>
std::pair<Var<T>, Var<T>> broadcast_pair(const Var<T>& a, const Var<T>& b, const char* op) {
    if (a.shape() == b.shape()) return {a, b};
    if (b.value().size() == 1) return {a, expand_scalar(b, a.shape())};
    if (a.value().size() == 1) return {expand_scalar(a, b.shape()), b};
    require_same_shape(a.value(), b.value(), op);
    return {a, b};
}

}  // namespace detail

template <typename T>
Var<T> add(const Var<T>& a0, const Var<T>& b0) {
    auto [a, b] = detail::broadcast_pair(a0, b0, "add");
    Tensor<T> out = detail::map_pair(a.value(), b.value(), [](T x, T y) { return x + y; });
    return a.tape().record(std::move(out), {a, b}, [](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{g, g};
    });
}

template <typename T>
Var<T> sub(const Var<T>& a0, const Var<T>& b0) {
    auto [a, b] = detail::broadcast_pair(a0, b0, "sub");
    Tensor<T> out = detail::map_pair(a.value(), b.value(), [](T x, T y) { return x - y; });
    return a.tape().record(std::move(out), {a, b}, [](const Tensor<T>& g, const std::vector<bool>& needs) {
        std::vector<Tensor<T>> r{g, Tensor<T>{}};
        if (needs[1]) {
            r[1] = g;
            for (auto& v : r[1].data()) v = -v;
        }
        return r;
    });
}

template <typename T>
Var<T> mul(const Var<T>& a0, const Var<T>& b0) {
    auto [a, b] = detail::broadcast_pair(a0, b0, "mul");
    Tensor<T> av = a.value(), bv = b.value();
    Tensor<T> out = detail::map_pair(av, bv, [](T x, T y) { return x * y; });
    return a.tape().record(std::move(out), {a, b}, [av, bv](const Tensor<T>& g, const std::vector<bool>& needs) {
        std::vector<Tensor<T>> r(2);
        if (needs[0]) r[0] = detail::map_pair(g, bv, [](T x, T y) { return x * y; });
        if (needs[1]) r[1] = detail::map_pair(g, av, [](T x, T y) { return x * y; });
        return r;
    });
}

/// Multiplies by a fixed (non-trainable) scalar.
template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v *= factor;
    return a.tape().record(std::move(out), {a}, [factor](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> r = g;
        for (auto& v : r.data()) v *= factor;
        return std::vector<Tensor<T>>{std::move(r)};
    });
}

template <typename T>
Var<T> add(const Var<T>& a, T value) {
    Tensor<T> out = a.value();
    for (auto& v : out.data()) v += value;
    return a.tape().record(std::move(out), {a}, [](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{g};
    });
}

template <typename T>
Var<T> relu(const Var<T>& a) {
    Tensor<T> av = a.value();
    return a.tape().record(kernels::relu(av), {a}, [av](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{detail::map_pair(g, av, [](T x, T y) { return y > T{0} ? x : T{0}; })};
    });
}

/// GELU with the tanh approximation.
template <typename T>
Var<T> gelu(const Var<T>& a) {
    Tensor<T> av = a.value();
    return a.tape().record(kernels::gelu(av), {a}, [av](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{
            detail::map_pair(g, av, [](T x, T y) { return x * kernels::gelu_derivative(y); })};
    });
}

/// Binary form: `b` is ignored by the unary kinds and must be size 1 for scale.
template <typename T>
Var<T> elementwise(ElementwiseOp op, const Var<T>& a, const Var<T>& b) {
    switch (op) {
        case ElementwiseOp::add: return add(a, b);
        case ElementwiseOp::sub: return sub(a, b);
        case ElementwiseOp::mul: return mul(a, b);
        case ElementwiseOp::scale:
            if (b.value().size() != 1) throw ShapeError("scale expects a scalar factor, got " + shape_string(b.shape()));
            return mul(a, b);
        case ElementwiseOp::gelu: return gelu(a);
        case ElementwiseOp::relu: return relu(a);
    }
    throw ConfigError("unknown elementwise op");
}

template <typename T>
Var<T> elementwise(ElementwiseOp op, const Var<T>& a, T b) {
    switch (op) {
        case ElementwiseOp::add: return add(a, b);
        case ElementwiseOp::sub: return add(a, -b);
        case ElementwiseOp::mul:
        case ElementwiseOp::scale: return scale(a, b);
        case ElementwiseOp::gelu: return gelu(a);
        case ElementwiseOp::relu: return relu(a);
    }
    throw ConfigError("unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Reductions and structural ops

template <typename T>
Var<T> sum(const Var<T>& a) {
    T total{0};
    for (T v : a.value().data()) total += v;
    Shape shape = a.shape();
    return a.tape().record(Tensor<T>::scalar(total), {a}, [shape](const Tensor<T>& g, const std::vector<bool>&) {
        return std::vector<Tensor<T>>{Tensor<T>::full(shape, g[0])};
    });
}

template <typename T>
Var<T> dot(const Var<T>& a, const Var<T>& b) {
    detail::require_same_shape(a.value(), b.value(), "dot");
    return sum(mul(a, b));
}

/// Mean over the rows of an n x d matrix, returned as 1 x d.
template <typename T>
Var<T> mean_rows(const Var<T>& x) {
    kernels::require_matrix(x.value(), "mean_rows");
    const std::size_t n = x.value().rows(), d = x.value().cols();
    Tensor<T> out = Tensor<T>::zeros({1, d});
    for (std::size_t i = 0; i < n; ++i) {
        auto r = x.value().row(i);
        for (std::size_t j = 0; j < d; ++j) out[j] += r[j];
    }
    for (auto& v : out.data()) v /= static_cast<T>(n);
    return x.tape().record(std::move(out), {x}, [n, d](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> r = Tensor<T>::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) r(i, j) = g[j] / static_cast<T>(n);
        return std::vector<Tensor<T>>{std::move(r)};
    });
}

/// Stacks matrices (or vectors, treated as single rows) vertically.
template <typename T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows of nothing");
    const std::size_t d = parts[0].value().cols();
    std::vector<std::size_t> counts;
    std::vector<T> data;
    for (const auto& p : parts) {
        const Tensor<T>& v = p.value();
        if (v.rank() > 2 || v.cols() != d) {
            throw ShapeError("concat_rows width mismatch: " + shape_string(v.shape()) + " vs width " +
                             std::to_string(d));
        }
        counts.push_back(v.rows());
        data.insert(data.end(), v.data().begin(), v.data().end());
    }
    const std::size_t n = data.size() / d;
    std::vector<Shape> shapes;
    for (const auto& p : parts) shapes.push_back(p.shape());
    return parts[0].tape().record(
        Tensor<T>({n, d}, std::move(data)), parts,
        [counts, shapes, d](const Tensor<T>& g, const std::vector<bool>& needs) {
            std::vector<Tensor<T>> r(counts.size());
            std::size_t offset = 0;
            for (std::size_t k = 0; k < counts.size(); ++k) {
                const std::size_t len = counts[k] * d;
                if (needs[k]) {
                    std::vector<T> chunk(g.data().begin() + offset, g.data().begin() + offset + len);
                    r[k] = Tensor<T>(shapes[k], std::move(chunk));
                }
                offset += len;
            }
            return r;
        });
}

/// Columns [begin, end) of a matrix.
template <typename T>
Var<T> slice_cols(const Var<T>& x, std::size_t begin, std::size_t end) {
    kernels::require_matrix(x.value(), "slice_cols");
    const std::size_t n = x.value().rows(), d = x.value().cols();
    if (begin >= end || end > d) throw ShapeError("slice_cols range out of bounds for " + shape_string(x.shape()));
    const std::size_t w = end - begin;
    Tensor<T> out = Tensor<T>::zeros({n, w});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < w; ++j) out(i, j) = x.value()(i, begin + j);
    return x.tape().record(std::move(out), {x}, [n, d, w, begin](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> r = Tensor<T>::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < w; ++j) r(i, begin + j) = g(i, j);
        return std::vector<Tensor<T>>{std::move(r)};
    });
}

template <typename T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols of nothing");
    const std::size_t n = parts[0].value().rows();
    std::vector<std::size_t> widths;
    std::size_t total = 0;
    for (const auto& p : parts) {
        kernels::require_matrix(p.value(), "concat_cols");
        if (p.value().rows() != n) throw ShapeError("concat_cols row mismatch: " + shape_string(p.shape()));
        widths.push_back(p.value().cols());
        total += p.value().cols();
    }
    Tensor<T> out = Tensor<T>::zeros({n, total});
    std::size_t offset = 0;
    for (const auto& p : parts) {
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < p.value().cols(); ++j) out(i, offset + j) = p.value()(i, j);
        offset += p.value().cols();
    }
    return parts[0].tape().record(std::move(out), parts, [n, widths](const Tensor<T>& g, const std::vector<bool>& needs) {
        std::vector<Tensor<T>> r(widths.size());
        std::size_t off = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
            if (needs[k]) {
                Tensor<T> part = Tensor<T>::zeros({n, widths[k]});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) part(i, j) = g(i, off + j);
                r[k] = std::move(part);
            }
            off += widths[k];
        }
        return r;
    });
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Per-row layer normalization of an n x d matrix with affine gamma/beta.
template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps) {
    if (!(eps > T{0})) throw ConfigError("layer_norm eps must be positive");
    kernels::require_matrix(x.value(), "layer_norm");
    const std::size_t n = x.value().rows(), d = x.value().cols();
    if (gamma.value().size() != d || beta.value().size() != d) {
        throw ShapeError("layer_norm affine parameters must have width " + std::to_string(d));
    }
    Tensor<T> xhat = Tensor<T>::zeros({n, d});
    std::vector<T> inv_std(n);
    Tensor<T> out = Tensor<T>::zeros({n, d});
    const Tensor<T>& gv = gamma.value();
    const Tensor<T>& bv = beta.value();
    for (std::size_t i = 0; i < n; ++i) {
        auto r = x.value().row(i);
        T mean{0};
        for (T v : r) mean += v;
        mean /= static_cast<T>(d);
        T var{0};
        for (T v : r) var += (v - mean) * (v - mean);
        var /= static_cast<T>(d);
        inv_std[i] = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat(i, j) = (r[j] - mean) * inv_std[i];
            out(i, j) = xhat(i, j) * gv[j] + bv[j];
        }
    }
    Tensor<T> gcopy = gv;
    return x.tape().record(
        std::move(out), {x, gamma, beta},
        [xhat, inv_std, gcopy, n, d](const Tensor<T>& g, const std::vector<bool>& needs) {
            std::vector<Tensor<T>> r(3);
            if (needs[0]) {
                Tensor<T> gx = Tensor<T>::zeros({n, d});
                for (std::size_t i = 0; i < n; ++i) {
                    T sum_gy{0}, sum_gy_xhat{0};
                    for (std::size_t j = 0; j < d; ++j) {
                        const T gy = g(i, j) * gcopy[j];
                        sum_gy += gy;
                        sum_gy_xhat += gy * xhat(i, j);
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const T gy = g(i, j) * gcopy[j];
                        gx(i, j) = inv_std[i] / static_cast<T>(d) *
                                   (static_cast<T>(d) * gy - sum_gy - xhat(i, j) * sum_gy_xhat);
                    }
                }
                r[0] = std::move(gx);
            }
            if (needs[1] || needs[2]) {
                Tensor<T> gg = Tensor<T>::zeros({d}), gb = Tensor<T>::zeros({d});
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t j = 0; j < d; ++j) {
                        gg[j] += g(i, j) * xhat(i, j);
                        gb[j] += g(i, j);
                    }
                r[1] = std::move(gg);
                r[2] = std::move(gb);
            }
            return r;
        });
}

template <typename T>
Var<T> softmax_rows(const Var<T>& x) {
    Tensor<T> y = kernels::softmax_rows(x.value());
    Tensor<T> yc = y;
    return x.tape().record(std::move(y), {x}, [yc](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> r = g;
        for (std::size_t i = 0; i < yc.rows(); ++i) {
            auto yr = yc.row(i);
            auto gr = r.row(i);
            const T inner = kernels::dot<T>(gr, yr);
            for (std::size_t j = 0; j < yr.size(); ++j) gr[j] = yr[j] * (gr[j] - inner);
        }
        return std::vector<Tensor<T>>{std::move(r)};
    });
}

inline constexpr double kMinNorm = 1e-12;

/// Scales a vector (or every row of a matrix) to unit L2 norm.
template <typename T>
Var<T> l2_normalize(const Var<T>& v) {
    const Tensor<T>& x = v.value();
    const std::size_t rows = x.rank() == 2 ? x.rows() : 1;
    const std::size_t d = x.rank() == 2 ? x.cols() : x.size();
    Tensor<T> y = x;
    std::vector<T> norms(rows);
    for (std::size_t i = 0; i < rows; ++i) {
        auto r = y.data().subspan(i * d, d);
        norms[i] = kernels::l2_norm<T>(r);
        if (!(norms[i] > static_cast<T>(kMinNorm))) throw NumericError("l2_normalize: vector norm is near zero");
        for (auto& e : r) e /= norms[i];
    }
    Tensor<T> yc = y;
    return v.tape().record(std::move(y), {v}, [yc, norms, rows, d](const Tensor<T>& g, const std::vector<bool>&) {
        Tensor<T> r = g;
        for (std::size_t i = 0; i < rows; ++i) {
            auto yr = yc.data().subspan(i * d, d);
            auto gr = r.data().subspan(i * d, d);
            const T inner = kernels::dot<T>(gr, yr);
            for (std::size_t j = 0; j < d; ++j) gr[j] = (gr[j] - yr[j] * inner) / norms[i];
        }
        return std::vector<Tensor<T>>{std::move(r)};
    });
}

/// Mean negative log-softmax of the labelled logit, evaluated with
/// log-sum-exp so large logits cannot overflow.
template <typename T>
Var<T> cross_entropy_from_logits(const Var<T>& logits, const std::vector<std::size_t>& labels) {
    const Tensor<T>& s = logits.value();
    kernels::require_matrix(s, "cross_entropy_from_logits");
    const std::size_t n = s.rows(), k = s.cols();
    if (n == 0 || labels.size() != n) {
        throw ShapeError("cross_entropy_from_logits: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    }
    for (std::size_t lbl : labels) {
        if (lbl >= k) throw ConfigError("label " + std::to_string(lbl) + " out of range for " + std::to_string(k) + " classes");
    }
    T total{0};
    Tensor<T> probs = Tensor<T>::zeros({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        auto r = s.row(i);
        const auto top = std::max_element(r.begin(), r.end());
        const T mx = *top;
        // exp(0) of the max term is the 1 in log1p
        T rest{0};
        for (auto it = r.begin(); it != r.end(); ++it)
            if (it != top) rest += std::exp(*it - mx);
        const T lse = mx + std::log1p(rest);
        total += (mx - r[labels[i]]) + std::log1p(rest);
        for (std::size_t j = 0; j < k; ++j) probs(i, j) = std::exp(r[j] - lse);
    }
    total /= static_cast<T>(n);
    return logits.tape().record(Tensor<T>::scalar(total), {logits},
                                [probs, labels, n](const Tensor<T>& g, const std::vector<bool>&) {
                                    Tensor<T> r = probs;
                                    for (std::size_t i = 0; i < n; ++i) r(i, labels[i]) -= T{1};
                                    const T factor = g[0] / static_cast<T>(n);
                                    for (auto& v : r.data()) v *= factor;
                                    return std::vector<Tensor<T>>{std::move(r)};
                                });
}

// ---------------------------------------------------------------------------
// Verification

/// Largest |analytic - central difference| / max(1, |analytic|) over the
/// coordinates of `at`. `f` must build a scalar on the tape it is given.
template <typename T>
T grad_check(const std::function<Var<T>(Tape<T>&, const Var<T>&)>& f, const Tensor<T>& at, T step) {
    if (!(step > T{0}) || !std::isfinite(step)) throw ConfigError("grad_check: step must be positive and finite");
    Gradients<T> grads;
    Tensor<T> analytic;
    {
        Tape<T> tape;
        Var<T> x = tape.parameter(at);
        Var<T> y = f(tape, x);
        grads = tape.backward(y);
        analytic = grads.of(x);
    }
    auto eval = [&](const Tensor<T>& point) {
        Tape<T> tape;
        Var<T> x = tape.constant(point);
        return f(tape, x).value().item();
    };
    T worst{0};
    Tensor<T> probe = at;
    for (std::size_t i = 0; i < at.size(); ++i) {
        const T orig = probe[i];
        probe[i] = orig + step;
        const T up = eval(probe);
        probe[i] = orig - step;
        const T down = eval(probe);
        probe[i] = orig;
        const T numeric = (up - down) / (T{2} * step);
        const T err = std::abs(analytic[i] - numeric) / std::max(T{1}, std::abs(analytic[i]));
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace bsentinel
