// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mhim/errors.hpp"
#include "mhim/matrix.hpp"

namespace mhim {

/// A learnable tensor with its gradient buffer. Non-trainable parameters
/// enter a tape as constants and never receive gradients.
struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;
    bool trainable = true;

    void zero_grad() { grad = Matrix(); }
    bool has_nonzero_grad() const {
        for (double g : grad.values())
            if (g != 0.0) return true;
        return false;
    }
};

class Tape;

/// Handle to a node on a tape.
struct Var {
    Tape* tape = nullptr;
    std::size_t id = 0;

    const Matrix& value() const;
    const Matrix& grad() const;
    std::size_t rows() const { return value().rows(); }
    std::size_t cols() const { return value().cols(); }
};

/**
 * Reverse-mode gradient tape over a fixed kernel set.
 *
 * Nodes are recorded in execution order; backward() walks them in exact
 * reverse order. Only nodes that depend on a trainable leaf carry gradient.
 * A tape is single-owner and must not be shared between threads.
 */
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    /// A tape built with gradients disabled records every parameter as a constant.
    explicit Tape(bool gradients) : gradients_(gradients) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value) { return push(std::move(value), false, nullptr, {}); }

    /// Leaf bound to a parameter. Gradients flush into p.grad on backward().
    Var param(Parameter& p) {
        if (!p.trainable || !gradients_) return constant(p.value);
        return push(p.value, true, &p, {});
    }

    /// Free leaf whose gradient is readable through Var::grad() after backward().
    Var input(Matrix value) { return push(std::move(value), true, nullptr, {}); }

    /// Records a derived node. `fn` runs only when the node requires grad.
    Var record(Matrix value, std::span<const Var> inputs, BackwardFn fn) {
        bool rg = false;
        for (const Var& v : inputs) rg = rg || nodes_[v.id].requires_grad;
        return push(std::move(value), rg, nullptr, rg ? std::move(fn) : BackwardFn{});
    }

    const Matrix& value(std::size_t id) const { return nodes_[id].value; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Gradient buffer; empty (0x0) if no gradient reached the node.
    const Matrix& grad(std::size_t id) const { return nodes_[id].grad; }

    /// Zero-initialized gradient buffer of a node, allocated on first use.
    Matrix& grad_buffer(std::size_t id) {
        Node& n = nodes_[id];
        if (n.grad.empty() && n.value.size() != 0) n.grad = Matrix(n.value.rows(), n.value.cols());
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    void backward(Var loss) {
        const Node& l = nodes_[loss.id];
        if (l.value.rows() != 1 || l.value.cols() != 1) {
            throw ContractError("backward requires a scalar loss, got " + shape_str(l.value));
        }
        if (!l.requires_grad) return;
        grad_buffer(loss.id)(0, 0) = 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            Node& n = nodes_[i];
            if (!n.requires_grad || n.grad.empty()) continue;
            if (n.backward) n.backward(*this, i);
            if (n.param != nullptr) {
                Parameter& p = *n.param;
                if (p.grad.empty()) p.grad = Matrix(p.value.rows(), p.value.cols());
                for (std::size_t k = 0; k < p.grad.size(); ++k) p.grad[k] += n.grad[k];
            }
        }
    }

private:
    struct Node {
        Matrix value;
        Matrix grad;
        bool requires_grad = false;
        Parameter* param = nullptr;
        BackwardFn backward;
    };

    Var push(Matrix value, bool rg, Parameter* p, BackwardFn fn) {
        nodes_.push_back(Node{std::move(value), Matrix(), rg, p, std::move(fn)});
        return Var{this, nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool gradients_ = true;
};

inline const Matrix& Var::value() const { return tape->value(id); }
inline const Matrix& Var::grad() const { return tape->grad(id); }

namespace detail {

inline void check_finite(const Matrix& m, const char* op) {
    if (!all_finite(m)) throw NumericError(std::string(op) + " produced a non-finite value");
}

// Broadcast output shape under the rule: equal shape, scalar, or row/column
// vector matching the other operand.
inline std::pair<std::size_t, std::size_t> broadcast_shape(const Matrix& a, const Matrix& b,
                                                           const char* op) {
    auto fits = [](const Matrix& small, const Matrix& big) {
        return (small.rows() == big.rows() || small.rows() == 1) &&
               (small.cols() == big.cols() || small.cols() == 1);
    };
    if (a.same_shape(b)) return {a.rows(), a.cols()};
    if (fits(b, a)) return {a.rows(), a.cols()};
    if (fits(a, b)) return {b.rows(), b.cols()};
    throw DimensionError(std::string(op) + " cannot broadcast " + shape_str(a) + " with " +
                         shape_str(b));
}

inline double at_broadcast(const Matrix& m, std::size_t i, std::size_t j) {
    return m(m.rows() == 1 ? 0 : i, m.cols() == 1 ? 0 : j);
}

// Adds g (output-shaped) into target, summing over broadcast axes.
inline void accumulate_reduced(Matrix& target, const Matrix& g) {
    for (std::size_t i = 0; i < g.rows(); ++i)
        for (std::size_t j = 0; j < g.cols(); ++j)
            target(target.rows() == 1 ? 0 : i, target.cols() == 1 ? 0 : j) += g(i, j);
}

template <class Fwd, class Deriv>
Var unary(Var x, const char* op, Fwd fwd, Deriv deriv) {
    const Matrix& xv = x.value();
    Matrix y(xv.rows(), xv.cols());
    for (std::size_t k = 0; k < xv.size(); ++k) y[k] = fwd(xv[k]);
    check_finite(y, op);
    const Var in[] = {x};
    return x.tape->record(std::move(y), in, [x, deriv](Tape& t, std::size_t self) {
        if (!t.requires_grad(x.id)) return;
        const Matrix& g = t.grad(self);
        const Matrix& xv = t.value(x.id);
        const Matrix& yv = t.value(self);
        Matrix& gx = t.grad_buffer(x.id);
        for (std::size_t k = 0; k < g.size(); ++k) gx[k] += g[k] * deriv(xv[k], yv[k]);
    });
}

}  // namespace detail

// --- kernels ---------------------------------------------------------------

inline Var matmul(Var a, Var b) {
    Matrix c = kernel::matmul(a.value(), b.value());
    const Var in[] = {a, b};
    return a.tape->record(std::move(c), in, [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(a.id)) {
            Matrix ga = kernel::matmul_nt(g, t.value(b.id));
            Matrix& buf = t.grad_buffer(a.id);
            for (std::size_t k = 0; k < ga.size(); ++k) buf[k] += ga[k];
        }
        if (t.requires_grad(b.id)) {
            Matrix gb = kernel::matmul_tn(t.value(a.id), g);
            Matrix& buf = t.grad_buffer(b.id);
            for (std::size_t k = 0; k < gb.size(); ++k) buf[k] += gb[k];
        }
    });
}

inline Var transpose(Var a) {
    const Var in[] = {a};
    return a.tape->record(kernel::transpose(a.value()), in, [a](Tape& t, std::size_t self) {
        Matrix gt = kernel::transpose(t.grad(self));
        Matrix& buf = t.grad_buffer(a.id);
        for (std::size_t k = 0; k < gt.size(); ++k) buf[k] += gt[k];
    });
}

/// Broadcasting elementwise sum.
inline Var add(Var a, Var b) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    auto [r, c] = detail::broadcast_shape(av, bv, "add");
    Matrix y(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            y(i, j) = detail::at_broadcast(av, i, j) + detail::at_broadcast(bv, i, j);
    const Var in[] = {a, b};
    return a.tape->record(std::move(y), in, [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.requires_grad(a.id)) detail::accumulate_reduced(t.grad_buffer(a.id), g);
        if (t.requires_grad(b.id)) detail::accumulate_reduced(t.grad_buffer(b.id), g);
    });
}

/// Broadcasting elementwise product.
inline Var mul(Var a, Var b) {
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    auto [r, c] = detail::broadcast_shape(av, bv, "mul");
    Matrix y(r, c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
            y(i, j) = detail::at_broadcast(av, i, j) * detail::at_broadcast(bv, i, j);
    const Var in[] = {a, b};
    return a.tape->record(std::move(y), in, [a, b](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& av = t.value(a.id);
        const Matrix& bv = t.value(b.id);
        auto side = [&](Var target, const Matrix& other) {
            Matrix prod(g.rows(), g.cols());
            for (std::size_t i = 0; i < g.rows(); ++i)
                for (std::size_t j = 0; j < g.cols(); ++j)
                    prod(i, j) = g(i, j) * detail::at_broadcast(other, i, j);
            detail::accumulate_reduced(t.grad_buffer(target.id), prod);
        };
        if (t.requires_grad(a.id)) side(a, bv);
        if (t.requires_grad(b.id)) side(b, av);
    });
}

inline Var scale(Var x, double s) {
    return detail::unary(
        x, "scale", [s](double v) { return s * v; }, [s](double, double) { return s; });
}

inline Var sigmoid(Var x) {
    return detail::unary(
        x, "sigmoid",
        [](double v) {
            if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var x) {
    return detail::unary(
        x, "tanh", [](double v) { return std::tanh(v); },
        [](double, double y) { return 1.0 - y * y; });
}

inline Var relu(Var x) {
    return detail::unary(
        x, "relu", [](double v) { return v < 0.0 ? 0.0 : v; },  // NaN passes through
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Var log(Var x) {
    for (double v : x.value().values())
        if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
    return detail::unary(
        x, "log", [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

inline Var exp(Var x) {
    return detail::unary(
        x, "exp", [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

/// Row-wise softmax of x / temperature.
inline Var softmax(Var x, double temperature = 1.0) {
    Matrix y = kernel::softmax_rows(x.value(), temperature);
    const Var in[] = {x};
    return x.tape->record(std::move(y), in, [x, temperature](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& y = t.value(self);
        Matrix& gx = t.grad_buffer(x.id);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double dot = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) dot += g(r, j) * y(r, j);
            for (std::size_t j = 0; j < y.cols(); ++j)
                gx(r, j) += y(r, j) * (g(r, j) - dot) / temperature;
        }
    });
}

/// Row-wise log-softmax.
inline Var log_softmax(Var x) {
    Matrix y = kernel::log_softmax_rows(x.value());
    const Var in[] = {x};
    return x.tape->record(std::move(y), in, [x](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& y = t.value(self);
        Matrix& gx = t.grad_buffer(x.id);
        for (std::size_t r = 0; r < y.rows(); ++r) {
            double gs = 0.0;
            for (std::size_t j = 0; j < y.cols(); ++j) gs += g(r, j);
            for (std::size_t j = 0; j < y.cols(); ++j)
                gx(r, j) += g(r, j) - std::exp(y(r, j)) * gs;
        }
    });
}

/// Sum of all entries as a 1x1 node.
inline Var sum(Var x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    const Var in[] = {x};
    return x.tape->record(Matrix(1, 1, s), in, [x](Tape& t, std::size_t self) {
        const double g = t.grad(self)(0, 0);
        Matrix& gx = t.grad_buffer(x.id);
        for (std::size_t k = 0; k < gx.size(); ++k) gx[k] += g;
    });
}

/// Column-wise mean over rows: NxD -> 1xD.
inline Var mean_rows(Var x) {
    const Matrix& xv = x.value();
    Matrix y(1, xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < xv.cols(); ++j) y(0, j) += xv(i, j);
    const double inv = xv.rows() == 0 ? 0.0 : 1.0 / static_cast<double>(xv.rows());
    for (double& v : y.values()) v *= inv;
    const Var in[] = {x};
    return x.tape->record(std::move(y), in, [x, inv](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& gx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < gx.rows(); ++i)
            for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += g(0, j) * inv;
    });
}

/// Vertical concatenation. Zero-row parts are allowed.
inline Var concat_rows(std::span<const Var> parts) {
    std::size_t rows = 0, cols = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        if (v.rows() == 0) continue;
        if (cols != 0 && v.cols() != cols) {
            throw DimensionError("concat_rows column mismatch: " + std::to_string(cols) + " vs " +
                                 shape_str(v));
        }
        cols = v.cols();
        rows += v.rows();
    }
    if (cols == 0 && !parts.empty()) cols = parts.front().value().cols();
    Matrix y(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        std::copy(v.values().begin(), v.values().end(), y.data() + off * cols);
        off += v.rows();
    }
    std::vector<Var> captured(parts.begin(), parts.end());
    return parts.front().tape->record(std::move(y), parts, [captured](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        std::size_t off = 0;
        for (const Var& p : captured) {
            const std::size_t n = t.value(p.id).size();
            if (n != 0 && t.requires_grad(p.id)) {
                Matrix& gp = t.grad_buffer(p.id);
                for (std::size_t k = 0; k < n; ++k) gp[k] += g[off + k];
            }
            off += n;
        }
    });
}

inline Var concat_rows(Var top, Var bottom) {
    const Var parts[] = {top, bottom};
    return concat_rows(std::span<const Var>(parts));
}

/// Horizontal concatenation of equal-height parts.
inline Var concat_cols(std::span<const Var> parts) {
    const std::size_t rows = parts.front().value().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        if (p.value().rows() != rows) {
            throw DimensionError("concat_cols row mismatch: " + shape_str(p.value()));
        }
        cols += p.value().cols();
    }
    Matrix y(rows, cols);
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Matrix& v = p.value();
        for (std::size_t i = 0; i < rows; ++i)
            std::copy(v.row(i).begin(), v.row(i).end(), y.data() + i * cols + off);
        off += v.cols();
    }
    std::vector<Var> captured(parts.begin(), parts.end());
    return parts.front().tape->record(std::move(y), parts, [captured](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        std::size_t off = 0;
        for (const Var& p : captured) {
            const std::size_t c = t.value(p.id).cols();
            if (t.requires_grad(p.id)) {
                Matrix& gp = t.grad_buffer(p.id);
                for (std::size_t i = 0; i < g.rows(); ++i)
                    for (std::size_t j = 0; j < c; ++j) gp(i, j) += g(i, off + j);
            }
            off += c;
        }
    });
}

/// Columns [begin, begin + count).
inline Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Matrix& xv = x.value();
    if (begin + count > xv.cols()) {
        throw DimensionError("slice_cols [" + std::to_string(begin) + ", " +
                             std::to_string(begin + count) + ") out of range for " +
                             shape_str(xv));
    }
    Matrix y(xv.rows(), count);
    for (std::size_t i = 0; i < xv.rows(); ++i)
        for (std::size_t j = 0; j < count; ++j) y(i, j) = xv(i, begin + j);
    const Var in[] = {x};
    return x.tape->record(std::move(y), in, [x, begin, count](Tape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        Matrix& gx = t.grad_buffer(x.id);
        for (std::size_t i = 0; i < g.rows(); ++i)
            for (std::size_t j = 0; j < count; ++j) gx(i, begin + j) += g(i, j);
    });
}

/// Row gather. Gradients scatter back to gathered rows, zero elsewhere.
inline Var gather_rows(Var x, std::vector<std::size_t> idx) {
    Matrix y = kernel::gather_rows(x.value(), idx);
    const Var in[] = {x};
    return x.tape->record(std::move(y), in,
                          [x, idx = std::move(idx)](Tape& t, std::size_t self) {
                              const Matrix& g = t.grad(self);
                              Matrix& gx = t.grad_buffer(x.id);
                              const std::size_t c = g.cols();
                              for (std::size_t r = 0; r < idx.size(); ++r)
                                  for (std::size_t j = 0; j < c; ++j) gx(idx[r], j) += g(r, j);
                          });
}

/// Binary cross-entropy on a 1x1 logit against a {0,1} target, in the
/// numerically stable softplus form.
inline Var bce_with_logits(Var logit, double target) {
    const Matrix& lv = logit.value();
    if (lv.size() != 1) throw DimensionError("bce_with_logits expects a 1x1 logit");
    const double l = lv[0];
    const double loss = std::max(l, 0.0) - l * target + std::log1p(std::exp(-std::abs(l)));
    const Var in[] = {logit};
    return logit.tape->record(Matrix(1, 1, loss), in, [logit, target](Tape& t, std::size_t self) {
        const double l = t.value(logit.id)[0];
        const double p = l >= 0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
        t.grad_buffer(logit.id)[0] += t.grad(self)(0, 0) * (p - target);
    });
}

/// Softmax cross-entropy on a 1xC logit row against a class index.
inline Var cross_entropy_logits(Var logits, std::size_t label) {
    const Matrix& lv = logits.value();
    if (lv.rows() != 1 || label >= lv.cols()) {
        throw DimensionError("cross_entropy_logits: label " + std::to_string(label) +
                             " invalid for " + shape_str(lv));
    }
    Matrix ls = kernel::log_softmax_rows(lv);
    const Var in[] = {logits};
    return logits.tape->record(
        Matrix(1, 1, -ls[label]), in, [logits, label](Tape& t, std::size_t self) {
            Matrix p = kernel::softmax_rows(t.value(logits.id));
            const double g = t.grad(self)(0, 0);
            Matrix& gl = t.grad_buffer(logits.id);
            for (std::size_t j = 0; j < p.cols(); ++j)
                gl[j] += g * (p[j] - (j == label ? 1.0 : 0.0));
        });
}

}  // namespace mhim
