#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "ltp/tensor.hpp"

namespace ltp {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the tape lives.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    bool requires_grad() const;
    bool valid() const { return tape_ != nullptr; }
    Tape* tape() const { return tape_; }
    std::size_t id() const { return id_; }

private:
    friend class Tape;
    Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape* tape_ = nullptr;
    std::size_t id_ = 0;
};

using GradientMap = std::map<std::string, Tensor>;

// Records primitive applications in topological order and replays them backwards.
// Node storage is a deque so references to recorded values stay valid while recording.
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Owned leaf; requires_grad leaves receive gradients but are not reported by name.
    Var leaf(Tensor value, bool requires_grad = false);

    // Leaf referring to caller-owned storage, which must outlive the tape.
    Var reference(const Tensor& value, bool requires_grad = false);

    // Named trainable leaf over caller-owned storage; reported in backward()'s map.
    Var parameter(const std::string& name, const Tensor& value);

    // Records a primitive output. Inputs are node ids; fn may be empty when no input
    // requires a gradient.
    Var record(Tensor value, std::vector<std::size_t> inputs, BackwardFn fn);

    // Reverse sweep from a scalar loss. Each recorded entry is visited at most once; the
    // tape is consumed afterwards and refuses further recording.
    GradientMap backward(Var loss);

    const Tensor& value(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }
    bool any_requires_grad(std::span<const Var> inputs) const;

    // Gradient accumulated for a node, or nullptr if none flowed to it.
    const Tensor* grad(Var v) const;

    // Lazily zero-initialised gradient buffer; used by backward functions.
    Tensor& grad_buffer(std::size_t id);
    bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        Tensor owned;
        const Tensor* external = nullptr;
        Tensor grad;
        bool requires_grad = false;
        std::vector<std::size_t> inputs;
        BackwardFn backward;
    };

    void check_open() const;

    std::deque<Node> nodes_;
    std::vector<std::pair<std::string, std::size_t>> named_;
    bool consumed_ = false;
};

enum class Primitive {
    MatMul,        // a[m,k] x b[k,n]
    MatMulNT,      // a[m,k] x b[n,k]^T
    Add,           // same shape, or row-broadcast of a length-n vector over a[m,n]
    Sub,
    Mul,           // elementwise, same broadcast rule as Add
    Scale,         // attrs.scalar * a
    SoftmaxRows,
    LayerNorm,     // inputs x, gamma, beta; attrs.eps
    Gather,        // rows of a table at attrs.indices
    Gelu,
    Tanh,
    Sigmoid,
    ConcatRows,    // variadic
    ConcatCols,    // variadic
    SliceRows,     // attrs.start, attrs.length
    SliceCols,
    CrossEntropy,  // mean over rows of -log softmax(logits)[target]; targets in attrs.indices
    AbsSum,
    Sum,
};

const char* primitive_name(Primitive kind);

struct PrimitiveAttrs {
    double scalar = 1.0;
    double eps = 1e-5;
    std::size_t start = 0;
    std::size_t length = 0;
    std::vector<std::size_t> indices;
};

// Generic entry point; validates arity and dispatches to the typed functions below.
Var apply_primitive(Primitive kind, std::span<const Var> inputs, const PrimitiveAttrs& attrs = {});

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var softmax_rows(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gather_rows(Var table, std::span<const std::size_t> indices);
Var gelu(Var a);
Var tanh(Var a);
Var sigmoid(Var a);
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, std::size_t start, std::size_t length);
Var slice_cols(Var a, std::size_t start, std::size_t length);
Var cross_entropy(Var logits, std::span<const std::size_t> targets);
Var abs_sum(Var a);
Var sum(Var a);

}  // namespace ltp
