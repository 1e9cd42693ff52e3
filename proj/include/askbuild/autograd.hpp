#pragma once

// Tape-based reverse-mode differentiation over Tensor values.
//
// A Graph owns an append-only list of nodes. Every op reads its inputs'
// values, appends one node holding the result and a closure that pushes the
// node's gradient back into its inputs. Since inputs always exist before the
// op that consumes them, node order is a topological order and backward is a
// single reverse sweep.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <deque>
#include <vector>

#include "askbuild/error.hpp"
#include "askbuild/tensor.hpp"

namespace askbuild {

class Graph;

struct Var {
    Graph* graph = nullptr;
    std::size_t id = 0;

    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
};

class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::size_t self)>;

    explicit Graph(bool training = false, std::uint64_t seed = 0) : training_(training), rng_(seed) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor t) { return push(std::move(t), nullptr, false, {}, nullptr); }

    /// Leaf owning its value; receives a gradient.
    Var variable(Tensor t) { return push(std::move(t), nullptr, true, {}, nullptr); }

    /// Leaf that reads external storage without copying. The storage must
    /// outlive the graph and stay unmodified until backward completes.
    Var parameter(const Tensor& external, bool requires_grad = true) {
        return push(Tensor(), &external, requires_grad, {}, nullptr);
    }

    const Tensor& value(std::size_t id) const {
        const auto& n = nodes_.at(id);
        return n.external ? *n.external : n.value;
    }
    const Tensor& value(Var v) const { return value(v.id); }

    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    bool requires_grad(Var v) const { return requires_grad(v.id); }

    /// Gradient accumulated so far. Zero-filled if nothing reached the node.
    const Tensor& grad(Var v) {
        return grad_mut(v.id);
    }

    Tensor& grad_mut(std::size_t id) {
        auto& n = nodes_.at(id);
        if (!n.has_grad) {
            n.grad = Tensor(value(id).shape(), 0.0);
            n.has_grad = true;
        }
        return n.grad;
    }

    bool has_grad(std::size_t id) const { return nodes_.at(id).has_grad; }

    /// Appends an op node. `inputs` must all exist already.
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
        bool needs = false;
        for (auto in : inputs) {
            if (in >= nodes_.size()) throw InternalError("op input refers to a node that does not exist yet");
            needs = needs || nodes_[in].requires_grad;
        }
        if (!needs) fn = nullptr;
        return push(std::move(value), nullptr, needs, std::move(inputs), std::move(fn));
    }

    void backward(Var loss) {
        if (loss.graph != this) throw InternalError("loss belongs to a different graph");
        if (value(loss).size() != 1) {
            throw DimensionError("backward needs a scalar loss, got " + shape_str(value(loss).shape()));
        }
        if (!requires_grad(loss)) return;
        grad_mut(loss.id)[0] += 1.0;
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& n = nodes_[i];
            if (!n.has_grad || !n.backward) continue;
            for (auto in : n.inputs) {
                if (in >= i) throw InternalError("cycle detected in autograd tape");
            }
            n.backward(*this, i);
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (nodes_[i].requires_grad && nodes_[i].inputs.empty()) grad_mut(i);
        }
    }

    bool training() const { return training_; }
    std::mt19937_64& rng() { return rng_; }
    std::size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        const Tensor* external = nullptr;
        Tensor grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    Var push(Tensor value, const Tensor* external, bool requires_grad, std::vector<std::size_t> inputs,
             BackwardFn fn) {
        Node n;
        n.value = std::move(value);
        n.external = external;
        n.requires_grad = requires_grad;
        n.inputs = std::move(inputs);
        n.backward = std::move(fn);
        nodes_.push_back(std::move(n));
        return Var{this, nodes_.size() - 1};
    }

    bool training_;
    std::mt19937_64 rng_;
    std::deque<Node> nodes_;  // stable references across push_back
};

inline const Tensor& Var::value() const { return graph->value(id); }

/// Boolean keep-mask; 1 marks a position that participates.
using KeepMask = std::vector<std::uint8_t>;

namespace ag {

namespace detail {

inline Graph& same_graph(Var a, Var b) {
    if (a.graph != b.graph) throw InternalError("operands live on different graphs");
    return *a.graph;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_matrix(const char* op, const Tensor& a) {
    if (a.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
}

// c[m×n] += a[m×k] · b[k×n]
inline void gemm_nn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[i * k + p];
            if (av == 0.0) continue;
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

// c[m×k] += a[m×n] · b[k×n]ᵀ
inline void gemm_nt(const double* a, const double* b, double* c, std::size_t m, std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double* bp = b + p * n;
            double s = 0.0;
            for (std::size_t j = 0; j < n; ++j) s += ai[j] * bp[j];
            c[i * k + p] += s;
        }
    }
}

// c[k×n] += a[m×k]ᵀ · b[m×n]
inline void gemm_tn(const double* a, const double* b, double* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* bi = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = a[i * k + p];
            if (av == 0.0) continue;
            double* cp = c + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
}

template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    return g.record(std::move(out), {x.id}, [x, deriv](Graph& gr, std::size_t self) {
        if (!gr.requires_grad(x)) return;
        const Tensor& y = gr.value(self);
        const Tensor& xv = gr.value(x);
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * deriv(xv[i], y[i]);
    });
}

}  // namespace detail

/// a[m×k] · b[k×n]
inline Var matmul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix("matmul", av);
    detail::require_matrix("matmul", bv);
    if (av.dim(1) != bv.dim(0)) {
        throw DimensionError("matmul: inner dimensions disagree for " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()));
    }
    std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
    Tensor out({m, n});
    detail::gemm_nn(av.ptr(), bv.ptr(), out.ptr(), m, k, n);
    return g.record(std::move(out), {a.id, b.id}, [a, b, m, k, n](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        if (gr.requires_grad(a)) detail::gemm_nt(gy.ptr(), gr.value(b).ptr(), gr.grad_mut(a.id).ptr(), m, n, k);
        if (gr.requires_grad(b)) detail::gemm_tn(gr.value(a).ptr(), gy.ptr(), gr.grad_mut(b.id).ptr(), m, k, n);
    });
}

/// a[m×n] · b[k×n]ᵀ
inline Var matmul_nt(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    detail::require_matrix("matmul_nt", av);
    detail::require_matrix("matmul_nt", bv);
    if (av.dim(1) != bv.dim(1)) {
        throw DimensionError("matmul_nt: row widths disagree for " + shape_str(av.shape()) + " and " +
                             shape_str(bv.shape()));
    }
    std::size_t m = av.dim(0), n = av.dim(1), k = bv.dim(0);
    Tensor out({m, k});
    detail::gemm_nt(av.ptr(), bv.ptr(), out.ptr(), m, n, k);
    return g.record(std::move(out), {a.id, b.id}, [a, b, m, n, k](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);  // m×k
        if (gr.requires_grad(a)) detail::gemm_nn(gy.ptr(), gr.value(b).ptr(), gr.grad_mut(a.id).ptr(), m, k, n);
        if (gr.requires_grad(b)) detail::gemm_tn(gy.ptr(), gr.value(a).ptr(), gr.grad_mut(b.id).ptr(), m, k, n);
    });
}

/// A[m×n] · v[n] -> [m]
inline Var matvec(Var a, Var v) {
    Graph& g = detail::same_graph(a, v);
    const Tensor& av = a.value();
    const Tensor& vv = v.value();
    detail::require_matrix("matvec", av);
    if (vv.rank() != 1 || vv.dim(0) != av.dim(1)) {
        throw DimensionError("matvec: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(vv.shape()));
    }
    std::size_t m = av.dim(0), n = av.dim(1);
    Tensor out({m});
    detail::gemm_nn(av.ptr(), vv.ptr(), out.ptr(), m, n, 1);
    return g.record(std::move(out), {a.id, v.id}, [a, v, m, n](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        if (gr.requires_grad(a)) detail::gemm_nt(gy.ptr(), gr.value(v).ptr(), gr.grad_mut(a.id).ptr(), m, 1, n);
        if (gr.requires_grad(v)) detail::gemm_tn(gr.value(a).ptr(), gy.ptr(), gr.grad_mut(v.id).ptr(), m, n, 1);
    });
}

inline Var transpose(Var x) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    detail::require_matrix("transpose", xv);
    std::size_t m = xv.dim(0), n = xv.dim(1);
    Tensor out({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
    return g.record(std::move(out), {x.id}, [x, m, n](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += gy[j * m + i];
    });
}

inline Var reshape(Var x, Shape shape) {
    Graph& g = *x.graph;
    Tensor out = x.value().reshaped(std::move(shape));
    return g.record(std::move(out), {x.id}, [x](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
}

inline Var add(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return g.record(std::move(out), {a.id, b.id}, [a, b](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        for (Var v : {a, b}) {
            if (!gr.requires_grad(v)) continue;
            Tensor& gv = gr.grad_mut(v.id);
            for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += gy[i];
        }
    });
}

inline Var sub(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return g.record(std::move(out), {a.id, b.id}, [a, b](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        if (gr.requires_grad(a)) {
            Tensor& ga = gr.grad_mut(a.id);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad_mut(b.id);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
        }
    });
}

/// Elementwise product.
inline Var mul(Var a, Var b) {
    Graph& g = detail::same_graph(a, b);
    detail::require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    const Tensor& bv = b.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return g.record(std::move(out), {a.id, b.id}, [a, b](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        if (gr.requires_grad(a)) {
            const Tensor& bv = gr.value(b);
            Tensor& ga = gr.grad_mut(a.id);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bv[i];
        }
        if (gr.requires_grad(b)) {
            const Tensor& av = gr.value(a);
            Tensor& gb = gr.grad_mut(b.id);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * av[i];
        }
    });
}

inline Var scale(Var x, double c) {
    Graph& g = *x.graph;
    Tensor out = x.value();
    for (auto& v : out.data()) v *= c;
    return g.record(std::move(out), {x.id}, [x, c](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * gy[i];
    });
}

/// x[m×n] + b[n] broadcast over rows.
inline Var add_bias(Var x, Var b) {
    Graph& g = detail::same_graph(x, b);
    const Tensor& xv = x.value();
    const Tensor& bv = b.value();
    if (bv.rank() != 1 || bv.dim(0) != xv.cols()) {
        throw DimensionError("add_bias: bias " + shape_str(bv.shape()) + " does not fit " + shape_str(xv.shape()));
    }
    Tensor out = xv;
    std::size_t n = xv.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i % n];
    return g.record(std::move(out), {x.id, b.id}, [x, b, n](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        if (gr.requires_grad(x)) {
            Tensor& gx = gr.grad_mut(x.id);
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
        }
        if (gr.requires_grad(b)) {
            Tensor& gb = gr.grad_mut(b.id);
            for (std::size_t i = 0; i < gy.size(); ++i) gb[i % n] += gy[i];
        }
    });
}

/// v[n] repeated as the rows of an [m×n] matrix.
inline Var broadcast_rows(Var v, std::size_t m) {
    Graph& g = *v.graph;
    const Tensor& vv = v.value();
    if (vv.rank() != 1) throw DimensionError("broadcast_rows: expected a vector, got " + shape_str(vv.shape()));
    std::size_t n = vv.dim(0);
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) std::copy(vv.ptr(), vv.ptr() + n, out.ptr() + i * n);
    return g.record(std::move(out), {v.id}, [v, m, n](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gv = gr.grad_mut(v.id);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gv[j] += gy[i * n + j];
    });
}

/// Scales row i of x[m×n] by the constant factors[i].
inline Var scale_rows(Var x, std::vector<double> factors) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    if (factors.size() != xv.rows()) throw DimensionError("scale_rows: factor count does not match row count");
    Tensor out = xv;
    std::size_t n = xv.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= factors[i / n];
    return g.record(std::move(out), {x.id}, [x, n, factors = std::move(factors)](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * factors[i / n];
    });
}

inline Var relu(Var x) {
    return detail::unary(
        x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

inline Var tanh(Var x) {
    return detail::unary(
        x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sigmoid(Var x) {
    return detail::unary(
        x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

/// Bias added to masked logits before normalization.
inline constexpr double kMaskBias = -1e9;

/// Softmax over the last axis. `keep` is either empty, one flag per element,
/// or one flag per column (shared by every row). Masked entries receive an
/// additive kMaskBias before normalization.
inline Var softmax(Var x, const KeepMask& keep = {}) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    std::size_t n = xv.cols(), rows = xv.rows();
    if (!keep.empty() && keep.size() != xv.size() && keep.size() != n) {
        throw DimensionError("softmax: mask of length " + std::to_string(keep.size()) + " does not fit " +
                             shape_str(xv.shape()));
    }
    auto kept = [&](std::size_t r, std::size_t c) {
        if (keep.empty()) return true;
        return keep.size() == n ? keep[c] != 0 : keep[r * n + c] != 0;
    };
    Tensor out(xv.shape());
    std::vector<double> row(n);
    for (std::size_t r = 0; r < rows; ++r) {
        bool any = false;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t c = 0; c < n; ++c) {
            bool k = kept(r, c);
            any = any || k;
            row[c] = xv[r * n + c] + (k ? 0.0 : kMaskBias);
            mx = std::max(mx, row[c]);
        }
        if (!any) throw DimensionError("softmax: row " + std::to_string(r) + " is fully masked");
        double sum = 0.0;
        for (std::size_t c = 0; c < n; ++c) {
            row[c] = std::exp(row[c] - mx);
            sum += row[c];
        }
        for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] / sum;
    }
    return g.record(std::move(out), {x.id}, [x, n, rows](Graph& gr, std::size_t self) {
        const Tensor& y = gr.value(self);
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (std::size_t c = 0; c < n; ++c) dot += gy[r * n + c] * y[r * n + c];
            for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (gy[r * n + c] - dot);
        }
    });
}

/// Probability floor applied before taking the log.
inline constexpr double kProbFloor = 1e-12;

/// −log p[target] for a probability vector.
inline Var cross_entropy(Var probs, std::size_t target) {
    Graph& g = *probs.graph;
    const Tensor& pv = probs.value();
    if (pv.rank() != 1) throw DimensionError("cross_entropy: expected a vector, got " + shape_str(pv.shape()));
    if (target >= pv.size()) {
        throw DimensionError("cross_entropy: target " + std::to_string(target) + " outside [0, " +
                             std::to_string(pv.size()) + ")");
    }
    double p = pv[target];
    bool clamped = p < kProbFloor;
    Tensor out = Tensor::scalar(-std::log(clamped ? kProbFloor : p));
    return g.record(std::move(out), {probs.id}, [probs, target, clamped](Graph& gr, std::size_t self) {
        if (clamped) return;
        double gy = gr.grad_mut(self)[0];
        gr.grad_mut(probs.id)[target] += -gy / gr.value(probs)[target];
    });
}

inline Var sum(Var x) {
    Graph& g = *x.graph;
    double s = 0.0;
    for (double v : x.value().data()) s += v;
    return g.record(Tensor::scalar(s), {x.id}, [x](Graph& gr, std::size_t self) {
        double gy = gr.grad_mut(self)[0];
        for (auto& v : gr.grad_mut(x.id).data()) v += gy;
    });
}

/// Mean of the rows of x[m×n] -> [n]. With `keep`, only flagged rows count;
/// a mask that keeps nothing falls back to all rows.
inline Var mean_rows(Var x, const KeepMask& keep = {}) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    detail::require_matrix("mean_rows", xv);
    std::size_t m = xv.dim(0), n = xv.dim(1);
    if (!keep.empty() && keep.size() != m) throw DimensionError("mean_rows: mask length does not match rows");
    std::vector<double> w(m, 1.0);
    if (!keep.empty() && std::any_of(keep.begin(), keep.end(), [](auto k) { return k != 0; })) {
        for (std::size_t i = 0; i < m; ++i) w[i] = keep[i] ? 1.0 : 0.0;
    }
    double count = 0.0;
    for (double v : w) count += v;
    for (double& v : w) v /= count;
    Tensor out({n});
    for (std::size_t i = 0; i < m; ++i) {
        if (w[i] == 0.0) continue;
        for (std::size_t j = 0; j < n; ++j) out[j] += w[i] * xv[i * n + j];
    }
    return g.record(std::move(out), {x.id}, [x, n, w = std::move(w)](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < w.size(); ++i) {
            if (w[i] == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += w[i] * gy[j];
        }
    });
}

/// Columns [begin, end) of a matrix.
inline Var slice_cols(Var x, std::size_t begin, std::size_t end) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    detail::require_matrix("slice_cols", xv);
    std::size_t m = xv.dim(0), n = xv.dim(1);
    if (begin >= end || end > n) throw DimensionError("slice_cols: bad range for " + shape_str(xv.shape()));
    std::size_t w = end - begin;
    Tensor out({m, w});
    for (std::size_t i = 0; i < m; ++i) std::copy_n(xv.ptr() + i * n + begin, w, out.ptr() + i * w);
    return g.record(std::move(out), {x.id}, [x, m, n, w, begin](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) gx[i * n + begin + j] += gy[i * w + j];
    });
}

inline Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: nothing to concatenate");
    Graph& g = *parts.front().graph;
    std::size_t m = parts.front().value().dim(0), total = 0;
    std::vector<std::size_t> widths, ids;
    for (Var p : parts) {
        detail::same_graph(parts.front(), p);
        const Tensor& pv = p.value();
        detail::require_matrix("concat_cols", pv);
        if (pv.dim(0) != m) throw DimensionError("concat_cols: row counts disagree");
        widths.push_back(pv.dim(1));
        ids.push_back(p.id);
        total += pv.dim(1);
    }
    Tensor out({m, total});
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const Tensor& pv = parts[k].value();
        for (std::size_t i = 0; i < m; ++i) std::copy_n(pv.ptr() + i * widths[k], widths[k], out.ptr() + i * total + off);
        off += widths[k];
    }
    return g.record(std::move(out), ids, [ids, widths, m, total](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (gr.requires_grad(ids[k])) {
                Tensor& gp = gr.grad_mut(ids[k]);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gp[i * widths[k] + j] += gy[i * total + off + j];
            }
            off += widths[k];
        }
    });
}

inline Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: nothing to concatenate");
    Graph& g = *parts.front().graph;
    std::size_t n = parts.front().value().cols(), total = 0;
    std::vector<std::size_t> ids, sizes;
    for (Var p : parts) {
        detail::same_graph(parts.front(), p);
        const Tensor& pv = p.value();
        detail::require_matrix("concat_rows", pv);
        if (pv.dim(1) != n) throw DimensionError("concat_rows: column counts disagree");
        ids.push_back(p.id);
        sizes.push_back(pv.size());
        total += pv.dim(0);
    }
    Tensor out({total, n});
    std::size_t off = 0;
    for (Var p : parts) {
        const Tensor& pv = p.value();
        std::copy(pv.data().begin(), pv.data().end(), out.ptr() + off);
        off += pv.size();
    }
    return g.record(std::move(out), ids, [ids, sizes](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (gr.requires_grad(ids[k])) {
                Tensor& gp = gr.grad_mut(ids[k]);
                for (std::size_t i = 0; i < sizes[k]; ++i) gp[i] += gy[off + i];
            }
            off += sizes[k];
        }
    });
}

/// Selected rows of x, in the given order.
inline Var gather_rows(Var x, std::vector<std::size_t> index) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    detail::require_matrix("gather_rows", xv);
    std::size_t n = xv.dim(1);
    if (index.empty()) throw DimensionError("gather_rows: empty index");
    Tensor out({index.size(), n});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= xv.dim(0)) throw DimensionError("gather_rows: row index out of range");
        std::copy_n(xv.ptr() + index[i] * n, n, out.ptr() + i * n);
    }
    return g.record(std::move(out), {x.id}, [x, n, index = std::move(index)](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) gx[index[i] * n + j] += gy[i * n + j];
    });
}

/// Inverse of gather_rows: row i of x lands at row index[i] of a zero [total×n] matrix.
inline Var scatter_rows(Var x, std::vector<std::size_t> index, std::size_t total) {
    Graph& g = *x.graph;
    const Tensor& xv = x.value();
    detail::require_matrix("scatter_rows", xv);
    if (index.size() != xv.dim(0)) throw DimensionError("scatter_rows: index length does not match rows");
    std::size_t n = xv.dim(1);
    Tensor out({total, n});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= total) throw DimensionError("scatter_rows: row index out of range");
        std::copy_n(xv.ptr() + i * n, n, out.ptr() + index[i] * n);
    }
    return g.record(std::move(out), {x.id}, [x, n, index = std::move(index)](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < index.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += gy[index[i] * n + j];
    });
}

/// Rows of table[V×d] selected by id -> [ids×d].
inline Var embedding(Var table, std::span<const int> ids) {
    Graph& g = *table.graph;
    const Tensor& tv = table.value();
    detail::require_matrix("embedding", tv);
    std::size_t vocab = tv.dim(0), d = tv.dim(1);
    if (ids.empty()) throw DimensionError("embedding: empty id sequence");
    std::vector<std::size_t> rows;
    rows.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
            throw DimensionError("embedding: id " + std::to_string(id) + " outside vocabulary of size " +
                                 std::to_string(vocab));
        }
        rows.push_back(static_cast<std::size_t>(id));
    }
    Tensor out({ids.size(), d});
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(tv.ptr() + rows[i] * d, d, out.ptr() + i * d);
    return g.record(std::move(out), {table.id}, [table, d, rows = std::move(rows)](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gt = gr.grad_mut(table.id);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt[rows[i] * d + j] += gy[i * d + j];
    });
}

/// Row-wise layer normalization: (x − mean) / sqrt(var + eps) · gain + bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    Graph& g = detail::same_graph(x, gain);
    detail::same_graph(x, bias);
    const Tensor& xv = x.value();
    std::size_t n = xv.cols(), rows = xv.rows();
    if (gain.value().size() != n || bias.value().size() != n) {
        throw DimensionError("layer_norm: gain/bias width does not match " + shape_str(xv.shape()));
    }
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    Tensor out(xv.shape());
    Tensor xhat(xv.shape());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = xv.ptr() + r * n;
        double mean = 0.0;
        for (std::size_t c = 0; c < n; ++c) mean += xr[c];
        mean /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t c = 0; c < n; ++c) var += (xr[c] - mean) * (xr[c] - mean);
        var /= static_cast<double>(n);
        inv_std[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t c = 0; c < n; ++c) {
            double h = (xr[c] - mean) * inv_std[r];
            xhat[r * n + c] = h;
            out[r * n + c] = h * gv[c] + bv[c];
        }
    }
    return g.record(std::move(out), {x.id, gain.id, bias.id},
                    [x, gain, bias, n, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                        Graph& gr, std::size_t self) {
                        const Tensor& gy = gr.grad_mut(self);
                        const Tensor& gv = gr.value(gain);
                        if (gr.requires_grad(gain) || gr.requires_grad(bias)) {
                            for (std::size_t r = 0; r < rows; ++r) {
                                for (std::size_t c = 0; c < n; ++c) {
                                    if (gr.requires_grad(gain)) gr.grad_mut(gain.id)[c] += gy[r * n + c] * xhat[r * n + c];
                                    if (gr.requires_grad(bias)) gr.grad_mut(bias.id)[c] += gy[r * n + c];
                                }
                            }
                        }
                        if (!gr.requires_grad(x)) return;
                        Tensor& gx = gr.grad_mut(x.id);
                        std::vector<double> dh(n);
                        for (std::size_t r = 0; r < rows; ++r) {
                            double mean_dh = 0.0, mean_dh_h = 0.0;
                            for (std::size_t c = 0; c < n; ++c) {
                                dh[c] = gy[r * n + c] * gv[c];
                                mean_dh += dh[c];
                                mean_dh_h += dh[c] * xhat[r * n + c];
                            }
                            mean_dh /= static_cast<double>(n);
                            mean_dh_h /= static_cast<double>(n);
                            for (std::size_t c = 0; c < n; ++c) {
                                gx[r * n + c] += inv_std[r] * (dh[c] - mean_dh - xhat[r * n + c] * mean_dh_h);
                            }
                        }
                    });
}

/// Inverted dropout. Identity outside training mode.
inline Var dropout(Var x, double rate) {
    Graph& g = *x.graph;
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    if (!g.training() || rate == 0.0) return x;
    const Tensor& xv = x.value();
    std::bernoulli_distribution keep(1.0 - rate);
    double s = 1.0 / (1.0 - rate);
    std::vector<double> factor(xv.size());
    Tensor out(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        factor[i] = keep(g.rng()) ? s : 0.0;
        out[i] = xv[i] * factor[i];
    }
    return g.record(std::move(out), {x.id}, [x, factor = std::move(factor)](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        Tensor& gx = gr.grad_mut(x.id);
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * factor[i];
    });
}

/// 3D cross-correlation, stride 1.
/// input [C_in×X×Y×Z], kernels [C_out×C_in×k×k×k], optional bias [C_out].
/// Supported: k ∈ {1, 3}, padding ∈ {0, 1}.
inline Var conv3d(Var input, Var kernels, std::optional<Var> bias, std::size_t padding) {
    Graph& g = detail::same_graph(input, kernels);
    const Tensor& in = input.value();
    const Tensor& w = kernels.value();
    if (in.rank() != 4) throw DimensionError("conv3d: input must be C×X×Y×Z, got " + shape_str(in.shape()));
    if (w.rank() != 5) throw DimensionError("conv3d: kernels must be Cout×Cin×k×k×k, got " + shape_str(w.shape()));
    std::size_t k = w.dim(2);
    if (w.dim(3) != k || w.dim(4) != k) throw DimensionError("conv3d: kernels must be cubic");
    if ((k != 1 && k != 3) || padding > 1) {
        throw ConfigError("conv3d: unsupported kernel " + std::to_string(k) + " with padding " +
                          std::to_string(padding));
    }
    if (w.dim(1) != in.dim(0)) {
        throw DimensionError("conv3d: kernel channels " + shape_str(w.shape()) + " do not match input " +
                             shape_str(in.shape()));
    }
    const std::size_t cin = in.dim(0), X = in.dim(1), Y = in.dim(2), Z = in.dim(3), cout = w.dim(0);
    const long p = static_cast<long>(padding), kk = static_cast<long>(k);
    const long ox_n = static_cast<long>(X) + 2 * p - kk + 1, oy_n = static_cast<long>(Y) + 2 * p - kk + 1,
               oz_n = static_cast<long>(Z) + 2 * p - kk + 1;
    if (ox_n <= 0 || oy_n <= 0 || oz_n <= 0) throw DimensionError("conv3d: kernel larger than padded input");
    const std::size_t OX = static_cast<std::size_t>(ox_n), OY = static_cast<std::size_t>(oy_n),
                      OZ = static_cast<std::size_t>(oz_n);
    if (bias && (bias->value().rank() != 1 || bias->value().dim(0) != cout)) {
        throw DimensionError("conv3d: bias must have one entry per output channel");
    }

    // Visits every (output cell, input cell, weight) triple as contiguous z-runs.
    auto sweep = [=](auto&& body) {
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t ci = 0; ci < cin; ++ci)
                for (long kx = 0; kx < kk; ++kx) {
                    long x0 = std::max(0L, p - kx), x1 = std::min(ox_n, static_cast<long>(X) + p - kx);
                    for (long ky = 0; ky < kk; ++ky) {
                        long y0 = std::max(0L, p - ky), y1 = std::min(oy_n, static_cast<long>(Y) + p - ky);
                        for (long kz = 0; kz < kk; ++kz) {
                            long z0 = std::max(0L, p - kz), z1 = std::min(oz_n, static_cast<long>(Z) + p - kz);
                            if (z0 >= z1) continue;
                            std::size_t widx = (((co * cin + ci) * k + kx) * k + ky) * k + kz;
                            for (long ox = x0; ox < x1; ++ox)
                                for (long oy = y0; oy < y1; ++oy) {
                                    std::size_t out_row = ((co * OX + ox) * OY + oy) * OZ;
                                    std::size_t in_row = ((ci * X + (ox + kx - p)) * Y + (oy + ky - p)) * Z;
                                    body(widx, out_row + z0, in_row + (z0 + kz - p), static_cast<std::size_t>(z1 - z0));
                                }
                        }
                    }
                }
    };

    Tensor out({cout, OX, OY, OZ});
    if (bias) {
        const Tensor& b = bias->value();
        std::size_t per = OX * OY * OZ;
        for (std::size_t co = 0; co < cout; ++co) std::fill_n(out.ptr() + co * per, per, b[co]);
    }
    {
        const double* ip = in.ptr();
        const double* wp = w.ptr();
        double* op = out.ptr();
        sweep([&](std::size_t widx, std::size_t o, std::size_t i, std::size_t len) {
            double wv = wp[widx];
            if (wv == 0.0) return;
            for (std::size_t t = 0; t < len; ++t) op[o + t] += wv * ip[i + t];
        });
    }

    std::vector<std::size_t> inputs{input.id, kernels.id};
    if (bias) inputs.push_back(bias->id);
    return g.record(std::move(out), inputs, [input, kernels, bias, sweep, cout, OX, OY, OZ](Graph& gr, std::size_t self) {
        const Tensor& gy = gr.grad_mut(self);
        const double* gp = gy.ptr();
        if (gr.requires_grad(input)) {
            const double* wp = gr.value(kernels).ptr();
            double* gi = gr.grad_mut(input.id).ptr();
            sweep([&](std::size_t widx, std::size_t o, std::size_t i, std::size_t len) {
                double wv = wp[widx];
                if (wv == 0.0) return;
                for (std::size_t t = 0; t < len; ++t) gi[i + t] += wv * gp[o + t];
            });
        }
        if (gr.requires_grad(kernels)) {
            const double* ip = gr.value(input).ptr();
            double* gw = gr.grad_mut(kernels.id).ptr();
            sweep([&](std::size_t widx, std::size_t o, std::size_t i, std::size_t len) {
                double s = 0.0;
                for (std::size_t t = 0; t < len; ++t) s += gp[o + t] * ip[i + t];
                gw[widx] += s;
            });
        }
        if (bias && gr.requires_grad(*bias)) {
            Tensor& gb = gr.grad_mut(bias->id);
            std::size_t per = OX * OY * OZ;
            for (std::size_t co = 0; co < cout; ++co)
                for (std::size_t t = 0; t < per; ++t) gb[co] += gp[co * per + t];
        }
    });
}

}  // namespace ag
}  // namespace askbuild
