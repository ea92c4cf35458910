#include "ltp/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <string>

#include "ltp/error.hpp"

namespace ltp {

// ---------------------------------------------------------------------------
// Var / Tape

const Tensor& Var::value() const { return tape_->value(id_); }

bool Var::requires_grad() const { return tape_->requires_grad(id_); }

void Tape::check_open() const {
    if (consumed_) {
        throw Error("tape: already consumed by backward()");
    }
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    check_open();
    Node node;
    node.owned = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::reference(const Tensor& value, bool requires_grad) {
    check_open();
    Node node;
    node.external = &value;
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Var Tape::parameter(const std::string& name, const Tensor& value) {
    Var v = reference(value, true);
    named_.emplace_back(name, v.id());
    return v;
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn) {
    check_open();
    Node node;
    node.owned = std::move(value);
    node.requires_grad = static_cast<bool>(fn);
    node.inputs = std::move(inputs);
    node.backward = std::move(fn);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

const Tensor& Tape::value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external != nullptr ? *n.external : n.owned;
}

bool Tape::any_requires_grad(std::span<const Var> inputs) const {
    for (const Var& v : inputs) {
        if (nodes_[v.id()].requires_grad) {
            return true;
        }
    }
    return false;
}

const Tensor* Tape::grad(Var v) const {
    const Node& n = nodes_[v.id()];
    return n.grad.empty() ? nullptr : &n.grad;
}

Tensor& Tape::grad_buffer(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) {
        n.grad = Tensor(value(id).shape(), 0.0);
    }
    return n.grad;
}

GradientMap Tape::backward(Var loss) {
    if (loss.tape() != this) {
        throw Error("backward: loss does not belong to this tape");
    }
    check_open();
    if (value(loss.id()).size() != 1) {
        throw ShapeError("backward: loss must be scalar, got shape " + shape_str(value(loss.id()).shape()));
    }
    if (!requires_grad(loss.id())) {
        throw Error("backward: loss is detached (no path to a trainable leaf)");
    }
    consumed_ = true;
    grad_buffer(loss.id())[0] = 1.0;
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& n = nodes_[i];
        if (n.backward && !n.grad.empty()) {
            n.backward(*this, i);
        }
    }
    GradientMap out;
    for (const auto& [name, id] : named_) {
        const Node& n = nodes_[id];
        out.emplace(name, n.grad.empty() ? Tensor(value(id).shape(), 0.0) : n.grad);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Primitives

const char* primitive_name(Primitive kind) {
    switch (kind) {
        case Primitive::MatMul: return "matmul";
        case Primitive::MatMulNT: return "matmul_nt";
        case Primitive::Add: return "add";
        case Primitive::Sub: return "sub";
        case Primitive::Mul: return "mul";
        case Primitive::Scale: return "scale";
        case Primitive::SoftmaxRows: return "softmax_rows";
        case Primitive::LayerNorm: return "layer_norm";
        case Primitive::Gather: return "gather_rows";
        case Primitive::Gelu: return "gelu";
        case Primitive::Tanh: return "tanh";
        case Primitive::Sigmoid: return "sigmoid";
        case Primitive::ConcatRows: return "concat_rows";
        case Primitive::ConcatCols: return "concat_cols";
        case Primitive::SliceRows: return "slice_rows";
        case Primitive::SliceCols: return "slice_cols";
        case Primitive::CrossEntropy: return "cross_entropy";
        case Primitive::AbsSum: return "abs_sum";
        case Primitive::Sum: return "sum";
    }
    return "unknown";
}

namespace {

Tape& common_tape(std::initializer_list<Var> vars, const char* op) {
    Tape* tape = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) {
            throw Error(std::string(op) + ": invalid (unbound) input");
        }
        if (tape == nullptr) {
            tape = v.tape();
        } else if (tape != v.tape()) {
            throw Error(std::string(op) + ": inputs recorded on different tapes");
        }
    }
    return *tape;
}

Tape& common_tape(std::span<const Var> vars, const char* op) {
    if (vars.empty()) {
        throw Error(std::string(op) + ": no inputs");
    }
    Tape* tape = nullptr;
    for (const Var& v : vars) {
        if (!v.valid()) {
            throw Error(std::string(op) + ": invalid (unbound) input");
        }
        if (tape == nullptr) {
            tape = v.tape();
        } else if (tape != v.tape()) {
            throw Error(std::string(op) + ": inputs recorded on different tapes");
        }
    }
    return *tape;
}

[[noreturn]] void mismatch(const char* op, const Tensor& a, const Tensor& b, const std::string& detail) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()) +
                     " (" + detail + ")");
}

Shape matrix_shape(std::size_t rows, std::size_t cols) { return {rows, cols}; }

enum class Broadcast { Same, Row };

Broadcast broadcast_kind(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        return Broadcast::Same;
    }
    if (b.rows() == 1 && b.cols() == a.cols()) {
        return Broadcast::Row;
    }
    mismatch(op, a, b, "expected equal shapes or a row vector of width " + std::to_string(a.cols()));
}

// Reduces an output gradient onto a broadcast operand.
void accumulate_broadcast(Tensor& dst, const Tensor& g, Broadcast kind, double sign) {
    if (kind == Broadcast::Same) {
        for (std::size_t i = 0; i < g.size(); ++i) {
            dst[i] += sign * g[i];
        }
        return;
    }
    const std::size_t rows = g.rows();
    const std::size_t cols = g.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            dst[c] += sign * g[r * cols + c];
        }
    }
}

Var add_or_sub(Var a, Var b, double sign, const char* op) {
    Tape& t = common_tape({a, b}, op);
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const Broadcast kind = broadcast_kind(op, A, B);
    Tensor out = A;
    const std::size_t cols = A.cols();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] += sign * (kind == Broadcast::Same ? B[i] : B[i % cols]);
    }
    Tape::BackwardFn fn;
    if (a.requires_grad() || b.requires_grad()) {
        fn = [ia = a.id(), ib = b.id(), kind, sign](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            if (tp.requires_grad(ia)) {
                accumulate_broadcast(tp.grad_buffer(ia), g, Broadcast::Same, 1.0);
            }
            if (tp.requires_grad(ib)) {
                accumulate_broadcast(tp.grad_buffer(ib), g, kind, sign);
            }
        };
    }
    return t.record(std::move(out), {a.id(), b.id()}, std::move(fn));
}

template <class F, class DF>
Var unary_map(Var a, F f, DF df_from_xy) {
    Tape& t = common_tape({a}, "unary");
    const Tensor& A = a.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) {
        out[i] = f(A[i]);
    }
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id(), df_from_xy](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            const Tensor& x = tp.value(ia);
            const Tensor& y = tp.value(self);
            Tensor& dx = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                dx[i] += g[i] * df_from_xy(x[i], y[i]);
            }
        };
    }
    return t.record(std::move(out), {a.id()}, std::move(fn));
}

}  // namespace

Var matmul(Var a, Var b) {
    Tape& t = common_tape({a, b}, "matmul");
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const std::size_t m = A.rows();
    const std::size_t k = A.cols();
    const std::size_t n = B.cols();
    if (B.rows() != k) {
        mismatch("matmul", A, B, "inner dimensions " + std::to_string(k) + " and " + std::to_string(B.rows()));
    }
    Tensor C(matrix_shape(m, n));
    const double* pa = A.data();
    const double* pb = B.data();
    double* pc = C.data();
    for (std::size_t i = 0; i < m; ++i) {
        double* crow = pc + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = pa[i * k + p];
            const double* brow = pb + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                crow[j] += aip * brow[j];
            }
        }
    }
    Tape::BackwardFn fn;
    if (a.requires_grad() || b.requires_grad()) {
        fn = [ia = a.id(), ib = b.id(), m, k, n](Tape& tp, std::size_t self) {
            const double* g = tp.grad_buffer(self).data();
            if (tp.requires_grad(ia)) {
                const double* pb = tp.value(ib).data();
                double* da = tp.grad_buffer(ia).data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        double acc = 0.0;
                        for (std::size_t j = 0; j < n; ++j) {
                            acc += g[i * n + j] * pb[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if (tp.requires_grad(ib)) {
                const double* pa = tp.value(ia).data();
                double* db = tp.grad_buffer(ib).data();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = pa[i * k + p];
                        double* dbrow = db + p * n;
                        const double* grow = g + i * n;
                        for (std::size_t j = 0; j < n; ++j) {
                            dbrow[j] += aip * grow[j];
                        }
                    }
                }
            }
        };
    }
    return t.record(std::move(C), {a.id(), b.id()}, std::move(fn));
}

Var matmul_nt(Var a, Var b) {
    Tape& t = common_tape({a, b}, "matmul_nt");
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const std::size_t m = A.rows();
    const std::size_t k = A.cols();
    const std::size_t n = B.rows();
    if (B.cols() != k) {
        mismatch("matmul_nt", A, B, "inner dimensions " + std::to_string(k) + " and " + std::to_string(B.cols()));
    }
    Tensor C(matrix_shape(m, n));
    const double* pa = A.data();
    const double* pb = B.data();
    double* pc = C.data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = pa + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = pb + j * k;
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) {
                acc += arow[p] * brow[p];
            }
            pc[i * n + j] = acc;
        }
    }
    Tape::BackwardFn fn;
    if (a.requires_grad() || b.requires_grad()) {
        fn = [ia = a.id(), ib = b.id(), m, k, n](Tape& tp, std::size_t self) {
            const double* g = tp.grad_buffer(self).data();
            if (tp.requires_grad(ia)) {
                const double* pb = tp.value(ib).data();
                double* da = tp.grad_buffer(ia).data();
                for (std::size_t i = 0; i < m; ++i) {
                    double* darow = da + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        const double* brow = pb + j * k;
                        for (std::size_t p = 0; p < k; ++p) {
                            darow[p] += gij * brow[p];
                        }
                    }
                }
            }
            if (tp.requires_grad(ib)) {
                const double* pa = tp.value(ia).data();
                double* db = tp.grad_buffer(ib).data();
                for (std::size_t i = 0; i < m; ++i) {
                    const double* arow = pa + i * k;
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = g[i * n + j];
                        double* dbrow = db + j * k;
                        for (std::size_t p = 0; p < k; ++p) {
                            dbrow[p] += gij * arow[p];
                        }
                    }
                }
            }
        };
    }
    return t.record(std::move(C), {a.id(), b.id()}, std::move(fn));
}

Var add(Var a, Var b) { return add_or_sub(a, b, 1.0, "add"); }

Var sub(Var a, Var b) { return add_or_sub(a, b, -1.0, "sub"); }

Var mul(Var a, Var b) {
    Tape& t = common_tape({a, b}, "mul");
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    const Broadcast kind = broadcast_kind("mul", A, B);
    const std::size_t cols = A.cols();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = A[i] * (kind == Broadcast::Same ? B[i] : B[i % cols]);
    }
    Tape::BackwardFn fn;
    if (a.requires_grad() || b.requires_grad()) {
        fn = [ia = a.id(), ib = b.id(), kind, cols](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            const Tensor& A = tp.value(ia);
            const Tensor& B = tp.value(ib);
            if (tp.requires_grad(ia)) {
                Tensor& da = tp.grad_buffer(ia);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    da[i] += g[i] * (kind == Broadcast::Same ? B[i] : B[i % cols]);
                }
            }
            if (tp.requires_grad(ib)) {
                Tensor& db = tp.grad_buffer(ib);
                for (std::size_t i = 0; i < g.size(); ++i) {
                    db[kind == Broadcast::Same ? i : i % cols] += g[i] * A[i];
                }
            }
        };
    }
    return t.record(std::move(out), {a.id(), b.id()}, std::move(fn));
}

Var scale(Var a, double s) {
    Tape& t = common_tape({a}, "scale");
    const Tensor& A = a.value();
    Tensor out(A.shape());
    for (std::size_t i = 0; i < A.size(); ++i) {
        out[i] = s * A[i];
    }
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id(), s](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            Tensor& da = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                da[i] += s * g[i];
            }
        };
    }
    return t.record(std::move(out), {a.id()}, std::move(fn));
}

Var softmax_rows(Var a) {
    Tape& t = common_tape({a}, "softmax_rows");
    const Tensor& A = a.value();
    const std::size_t rows = A.rows();
    const std::size_t cols = A.cols();
    Tensor out(A.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const double* x = A.data() + r * cols;
        double* y = out.data() + r * cols;
        double mx = x[0];
        for (std::size_t c = 1; c < cols; ++c) {
            mx = std::max(mx, x[c]);
        }
        double total = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] = std::exp(x[c] - mx);
            total += y[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            y[c] /= total;
        }
    }
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id(), rows, cols](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            const Tensor& y = tp.value(self);
            Tensor& da = tp.grad_buffer(ia);
            for (std::size_t r = 0; r < rows; ++r) {
                const std::size_t off = r * cols;
                double dot = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    dot += g[off + c] * y[off + c];
                }
                for (std::size_t c = 0; c < cols; ++c) {
                    da[off + c] += y[off + c] * (g[off + c] - dot);
                }
            }
        };
    }
    return t.record(std::move(out), {a.id()}, std::move(fn));
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
    Tape& t = common_tape({x, gamma, beta}, "layer_norm");
    const Tensor& X = x.value();
    const Tensor& G = gamma.value();
    const Tensor& B = beta.value();
    const std::size_t rows = X.rows();
    const std::size_t cols = X.cols();
    if (G.size() != cols || G.rows() != 1) {
        mismatch("layer_norm", X, G, "gamma must be a row of width " + std::to_string(cols));
    }
    if (B.size() != cols || B.rows() != 1) {
        mismatch("layer_norm", X, B, "beta must be a row of width " + std::to_string(cols));
    }
    Tensor out(X.shape());
    Tensor xhat(X.shape());
    std::vector<double> inv_std(rows);
    const double n = static_cast<double>(cols);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = X.data() + r * cols;
        double mean = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            mean += xr[c];
        }
        mean /= n;
        double var = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = xr[c] - mean;
            var += d * d;
        }
        var /= n;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (xr[c] - mean) * is;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * G[c] + B[c];
        }
    }
    Tape::BackwardFn fn;
    if (x.requires_grad() || gamma.requires_grad() || beta.requires_grad()) {
        fn = [ix = x.id(), ig = gamma.id(), ib = beta.id(), rows, cols, xhat = std::move(xhat),
              inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            const Tensor& G = tp.value(ig);
            if (tp.requires_grad(ig)) {
                Tensor& dg = tp.grad_buffer(ig);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        dg[c] += g[r * cols + c] * xhat[r * cols + c];
                    }
                }
            }
            if (tp.requires_grad(ib)) {
                Tensor& db = tp.grad_buffer(ib);
                for (std::size_t r = 0; r < rows; ++r) {
                    for (std::size_t c = 0; c < cols; ++c) {
                        db[c] += g[r * cols + c];
                    }
                }
            }
            if (tp.requires_grad(ix)) {
                Tensor& dx = tp.grad_buffer(ix);
                const double n = static_cast<double>(cols);
                std::vector<double> dh(cols);
                for (std::size_t r = 0; r < rows; ++r) {
                    const std::size_t off = r * cols;
                    double mean_dh = 0.0;
                    double mean_dh_h = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dh[c] = g[off + c] * G[c];
                        mean_dh += dh[c];
                        mean_dh_h += dh[c] * xhat[off + c];
                    }
                    mean_dh /= n;
                    mean_dh_h /= n;
                    for (std::size_t c = 0; c < cols; ++c) {
                        dx[off + c] += inv_std[r] * (dh[c] - mean_dh - xhat[off + c] * mean_dh_h);
                    }
                }
            }
        };
    }
    return t.record(std::move(out), {x.id(), gamma.id(), beta.id()}, std::move(fn));
}

Var gather_rows(Var table, std::span<const std::size_t> indices) {
    Tape& t = common_tape({table}, "gather_rows");
    const Tensor& T = table.value();
    const std::size_t rows = T.rows();
    const std::size_t cols = T.cols();
    if (indices.empty()) {
        throw ShapeError("gather_rows: empty index list");
    }
    Tensor out(matrix_shape(indices.size(), cols));
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) {
            throw DomainError("gather_rows: index " + std::to_string(indices[i]) + " out of range for table " +
                              shape_str(T.shape()));
        }
        const double* src = T.data() + indices[i] * cols;
        std::copy(src, src + cols, out.data() + i * cols);
    }
    Tape::BackwardFn fn;
    if (table.requires_grad()) {
        fn = [it = table.id(), idx = std::vector<std::size_t>(indices.begin(), indices.end()), cols](
                 Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            Tensor& dt = tp.grad_buffer(it);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                double* dst = dt.data() + idx[i] * cols;
                const double* src = g.data() + i * cols;
                for (std::size_t c = 0; c < cols; ++c) {
                    dst[c] += src[c];
                }
            }
        };
    }
    return t.record(std::move(out), {table.id()}, std::move(fn));
}

Var gelu(Var a) {
    constexpr double kInvSqrt2 = 0.70710678118654752440;
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    return unary_map(
        a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
        [](double x, double) {
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            return cdf + x * pdf;
        });
}

Var tanh(Var a) {
    return unary_map(
        a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
    return unary_map(
        a,
        [](double x) {
            if (x >= 0.0) {
                return 1.0 / (1.0 + std::exp(-x));
            }
            const double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Var concat_rows(std::span<const Var> parts) {
    Tape& t = common_tape(parts, "concat_rows");
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        if (p.value().cols() != cols) {
            mismatch("concat_rows", parts[0].value(), p.value(), "column counts differ");
        }
        rows += p.value().rows();
    }
    Tensor out(matrix_shape(rows, cols));
    std::vector<std::size_t> ids;
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        std::copy(v.data(), v.data() + v.size(), out.data() + off);
        off += v.size();
        ids.push_back(p.id());
    }
    Tape::BackwardFn fn;
    if (t.any_requires_grad(parts)) {
        fn = [ids](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            std::size_t off = 0;
            for (std::size_t id : ids) {
                const std::size_t n = tp.value(id).size();
                if (tp.requires_grad(id)) {
                    Tensor& d = tp.grad_buffer(id);
                    for (std::size_t i = 0; i < n; ++i) {
                        d[i] += g[off + i];
                    }
                }
                off += n;
            }
        };
    }
    return t.record(std::move(out), std::move(ids), std::move(fn));
}

Var concat_cols(std::span<const Var> parts) {
    Tape& t = common_tape(parts, "concat_cols");
    const std::size_t rows = parts[0].value().rows();
    std::size_t cols = 0;
    for (const Var& p : parts) {
        if (p.value().rows() != rows) {
            mismatch("concat_cols", parts[0].value(), p.value(), "row counts differ");
        }
        cols += p.value().cols();
    }
    Tensor out(matrix_shape(rows, cols));
    std::vector<std::size_t> ids;
    std::size_t col_off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        const std::size_t w = v.cols();
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy(v.data() + r * w, v.data() + (r + 1) * w, out.data() + r * cols + col_off);
        }
        col_off += w;
        ids.push_back(p.id());
    }
    Tape::BackwardFn fn;
    if (t.any_requires_grad(parts)) {
        fn = [ids, rows, cols](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            std::size_t col_off = 0;
            for (std::size_t id : ids) {
                const std::size_t w = tp.value(id).cols();
                if (tp.requires_grad(id)) {
                    Tensor& d = tp.grad_buffer(id);
                    for (std::size_t r = 0; r < rows; ++r) {
                        for (std::size_t c = 0; c < w; ++c) {
                            d[r * w + c] += g[r * cols + col_off + c];
                        }
                    }
                }
                col_off += w;
            }
        };
    }
    return t.record(std::move(out), std::move(ids), std::move(fn));
}

Var slice_rows(Var a, std::size_t start, std::size_t length) {
    Tape& t = common_tape({a}, "slice_rows");
    const Tensor& A = a.value();
    if (length == 0 || start + length > A.rows()) {
        throw ShapeError("slice_rows: rows [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + shape_str(A.shape()));
    }
    const std::size_t cols = A.cols();
    Tensor out(matrix_shape(length, cols));
    std::copy(A.data() + start * cols, A.data() + (start + length) * cols, out.data());
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id(), start, cols](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            Tensor& d = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) {
                d[start * cols + i] += g[i];
            }
        };
    }
    return t.record(std::move(out), {a.id()}, std::move(fn));
}

Var slice_cols(Var a, std::size_t start, std::size_t length) {
    Tape& t = common_tape({a}, "slice_cols");
    const Tensor& A = a.value();
    if (length == 0 || start + length > A.cols()) {
        throw ShapeError("slice_cols: cols [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") out of range for " + shape_str(A.shape()));
    }
    const std::size_t rows = A.rows();
    const std::size_t cols = A.cols();
    Tensor out(matrix_shape(rows, length));
    for (std::size_t r = 0; r < rows; ++r) {
        std::copy(A.data() + r * cols + start, A.data() + r * cols + start + length, out.data() + r * length);
    }
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id(), start, rows, cols, length](Tape& tp, std::size_t self) {
            const Tensor& g = tp.grad_buffer(self);
            Tensor& d = tp.grad_buffer(ia);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < length; ++c) {
                    d[r * cols + start + c] += g[r * length + c];
                }
            }
        };
    }
    return t.record(std::move(out), {a.id()}, std::move(fn));
}

Var cross_entropy(Var logits, std::span<const std::size_t> targets) {
    Tape& t = common_tape({logits}, "cross_entropy");
    const Tensor& L = logits.value();
    const std::size_t rows = L.rows();
    const std::size_t cols = L.cols();
    if (targets.size() != rows) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                         shape_str(L.shape()));
    }
    Tensor probs(matrix_shape(rows, cols));
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) {
            throw DomainError("cross_entropy: target " + std::to_string(targets[r]) + " out of range for " +
                              std::to_string(cols) + " classes");
        }
        const double* x = L.data() + r * cols;
        double* p = probs.data() + r * cols;
        double mx = x[0];
        for (std::size_t c = 1; c < cols; ++c) {
            mx = std::max(mx, x[c]);
        }
        double z = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] = std::exp(x[c] - mx);
            z += p[c];
        }
        for (std::size_t c = 0; c < cols; ++c) {
            p[c] /= z;
        }
        total += (mx + std::log(z)) - x[targets[r]];
    }
    const double inv_rows = 1.0 / static_cast<double>(rows);
    Tape::BackwardFn fn;
    if (logits.requires_grad()) {
        fn = [il = logits.id(), probs = std::move(probs), tg = std::vector<std::size_t>(targets.begin(), targets.end()),
              rows, cols, inv_rows](Tape& tp, std::size_t self) {
            const double g = tp.grad_buffer(self)[0] * inv_rows;
            Tensor& d = tp.grad_buffer(il);
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    d[r * cols + c] += g * (probs[r * cols + c] - (c == tg[r] ? 1.0 : 0.0));
                }
            }
        };
    }
    return t.record(Tensor::scalar(total * inv_rows), {logits.id()}, std::move(fn));
}

Var abs_sum(Var a) {
    Tape& t = common_tape({a}, "abs_sum");
    const Tensor& A = a.value();
    double total = 0.0;
    for (double x : A.values()) {
        total += std::fabs(x);
    }
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id()](Tape& tp, std::size_t self) {
            const double g = tp.grad_buffer(self)[0];
            const Tensor& x = tp.value(ia);
            Tensor& d = tp.grad_buffer(ia);
            for (std::size_t i = 0; i < x.size(); ++i) {
                // subgradient at exactly zero is zero
                d[i] += x[i] > 0.0 ? g : (x[i] < 0.0 ? -g : 0.0);
            }
        };
    }
    return t.record(Tensor::scalar(total), {a.id()}, std::move(fn));
}

Var sum(Var a) {
    Tape& t = common_tape({a}, "sum");
    double total = 0.0;
    for (double x : a.value().values()) {
        total += x;
    }
    Tape::BackwardFn fn;
    if (a.requires_grad()) {
        fn = [ia = a.id()](Tape& tp, std::size_t self) {
            const double g = tp.grad_buffer(self)[0];
            for (double& d : tp.grad_buffer(ia).values()) {
                d += g;
            }
        };
    }
    return t.record(Tensor::scalar(total), {a.id()}, std::move(fn));
}

// ---------------------------------------------------------------------------

namespace {

void require_arity(Primitive kind, std::span<const Var> inputs, std::size_t n) {
    if (inputs.size() != n) {
        throw DomainError(std::string(primitive_name(kind)) + ": expects " + std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
    }
}

}  // namespace

Var apply_primitive(Primitive kind, std::span<const Var> in, const PrimitiveAttrs& attrs) {
    switch (kind) {
        case Primitive::MatMul: require_arity(kind, in, 2); return matmul(in[0], in[1]);
        case Primitive::MatMulNT: require_arity(kind, in, 2); return matmul_nt(in[0], in[1]);
        case Primitive::Add: require_arity(kind, in, 2); return add(in[0], in[1]);
        case Primitive::Sub: require_arity(kind, in, 2); return sub(in[0], in[1]);
        case Primitive::Mul: require_arity(kind, in, 2); return mul(in[0], in[1]);
        case Primitive::Scale: require_arity(kind, in, 1); return scale(in[0], attrs.scalar);
        case Primitive::SoftmaxRows: require_arity(kind, in, 1); return softmax_rows(in[0]);
        case Primitive::LayerNorm: require_arity(kind, in, 3); return layer_norm(in[0], in[1], in[2], attrs.eps);
        case Primitive::Gather: require_arity(kind, in, 1); return gather_rows(in[0], attrs.indices);
        case Primitive::Gelu: require_arity(kind, in, 1); return gelu(in[0]);
        case Primitive::Tanh: require_arity(kind, in, 1); return tanh(in[0]);
        case Primitive::Sigmoid: require_arity(kind, in, 1); return sigmoid(in[0]);
        case Primitive::ConcatRows: return concat_rows(in);
        case Primitive::ConcatCols: return concat_cols(in);
        case Primitive::SliceRows: require_arity(kind, in, 1); return slice_rows(in[0], attrs.start, attrs.length);
        case Primitive::SliceCols: require_arity(kind, in, 1); return slice_cols(in[0], attrs.start, attrs.length);
        case Primitive::CrossEntropy: require_arity(kind, in, 1); return cross_entropy(in[0], attrs.indices);
        case Primitive::AbsSum: require_arity(kind, in, 1); return abs_sum(in[0]);
        case Primitive::Sum: require_arity(kind, in, 1); return sum(in[0]);
    }
    throw DomainError("apply_primitive: unknown primitive kind " + std::to_string(static_cast<int>(kind)));
}

}  // namespace ltp
