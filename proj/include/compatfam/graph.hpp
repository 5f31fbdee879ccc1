#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "compatfam/tensor.hpp"

namespace compatfam {

using NodeId = int;

enum class Op : std::uint8_t {
    Input,
    Param,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    MatMul,
    Transpose,
    Exp,
    Log,
    Sqrt,
    Square,
    Sigmoid,
    LeakyRelu,
    LreluMask,   // piecewise-constant slope of LeakyRelu; own derivative is 0
    MaxConst,    // max(x, c); subgradient 0 exactly at x == c
    GtMask,      // 1 where x > c, else 0; derivative 0
    Sum,         // full reduction to [1,1]
    RowSum,      // [r,c] -> [r,1]
    RowMin,      // [r,c] -> [r,1], detached (no gradient by contract)
    Expand,      // broadcast [1,1]/[r,1]/[1,c] -> [r,c]
    ReduceTo,    // sum back over broadcast axes; adjoint of Expand
    ConcatCols,
    SliceCols,
    Detach,
    Scale,     // x * p0
    AddConst,  // x + p0
};

const char* op_name(Op op);

struct Shape2 {
    std::int64_t r = 1;
    std::int64_t c = 1;
    bool operator==(const Shape2&) const = default;
    std::int64_t numel() const { return r * c; }
};

struct Node {
    Op op;
    NodeId a = -1;
    NodeId b = -1;
    Shape2 shape;
    double p0 = 0.0;       // op-specific scalar (alpha, clamp bound, scale)
    std::int64_t i0 = 0;   // op-specific (slice lo)
    std::int64_t i1 = 0;   // op-specific (slice hi)
    std::string name;      // leaves only
    Tensor cval;           // Const only
};

/// Static computation graph over rank-2 tensors. Nodes are appended in
/// topological order; gradients() appends adjoint nodes built from the same
/// primitives, so gradient expressions are themselves differentiable
/// (needed for the gradient-norm penalty).
class Graph {
public:
    NodeId input(const std::string& name, std::int64_t r, std::int64_t c);
    NodeId param(const std::string& name, std::int64_t r, std::int64_t c);
    NodeId constant(Tensor v);
    NodeId constant_scalar(double v) { return constant(Tensor::scalar(v)); }

    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);
    NodeId div(NodeId a, NodeId b);
    NodeId neg(NodeId a);
    NodeId matmul(NodeId a, NodeId b);
    NodeId transpose(NodeId a);
    NodeId exp(NodeId a);
    NodeId log(NodeId a);
    NodeId sqrt(NodeId a);
    NodeId square(NodeId a);
    NodeId sigmoid(NodeId a);
    NodeId leaky_relu(NodeId a, double alpha);
    NodeId max_const(NodeId a, double c);
    NodeId sum(NodeId a);
    NodeId row_sum(NodeId a);
    NodeId row_min_detached(NodeId a);
    NodeId expand(NodeId a, std::int64_t r, std::int64_t c);
    NodeId reduce_to(NodeId a, std::int64_t r, std::int64_t c);
    NodeId concat_cols(NodeId a, NodeId b);
    NodeId slice_cols(NodeId a, std::int64_t lo, std::int64_t hi);
    NodeId detach(NodeId a);
    NodeId scale(NodeId a, double s);
    NodeId add_const(NodeId a, double c);

    // Composites.
    NodeId mean(NodeId a);
    NodeId min_const(NodeId a, double c);
    NodeId clamp(NodeId a, double lo, double hi);
    NodeId row_norm(NodeId a);  // [r,c] -> [r,1], Euclidean norm per row
    /// Softmin weights exp(-d_k)/sum_j exp(-d_j) per row, computed with
    /// min-subtraction so large distances cannot overflow. The subtracted
    /// row minimum is detached; the weights are algebraically independent
    /// of it, so gradients are exact.
    NodeId softmin_weights(NodeId d);

    /// Appends adjoint nodes for d(output)/d(node) and returns one gradient
    /// node per entry of `wrt` (a zero constant when output does not depend
    /// on it). `output` must be scalar.
    std::vector<NodeId> gradients(NodeId output, const std::vector<NodeId>& wrt);

    const Node& node(NodeId id) const { return nodes_[static_cast<std::size_t>(id)]; }
    std::size_t size() const { return nodes_.size(); }
    Shape2 shape_of(NodeId id) const { return node(id).shape; }

    NodeId leaf(const std::string& name) const;
    const std::vector<std::string>& param_names() const { return param_names_; }
    const std::vector<std::string>& input_names() const { return input_names_; }

private:
    friend class Session;

    NodeId push(Node n);
    NodeId unary(Op op, NodeId a, Shape2 shape, double p0 = 0.0);
    NodeId binary(Op op, NodeId a, NodeId b, Shape2 shape);
    void check_id(NodeId id) const;

    std::vector<Node> nodes_;
    std::unordered_map<std::string, NodeId> leaves_;
    std::vector<std::string> param_names_;
    std::vector<std::string> input_names_;
};

/// Evaluates a graph against bound leaf tensors. Buffers persist across
/// runs; reset() + bind() starts a new run with reused storage.
class Session {
public:
    explicit Session(const Graph& g) : g_(g) {}

    void reset();
    void bind(const std::string& name, const Tensor& t);
    const Tensor& value(NodeId id);

    /// Toggle the per-node finite check (on by default).
    void check_finite(bool on) { check_finite_ = on; }

private:
    void compute(NodeId id);

    const Graph& g_;
    std::vector<Tensor> vals_;
    std::vector<char> ready_;
    std::unordered_map<std::string, const Tensor*> binds_;
    bool check_finite_ = true;
};

/// Evaluate the given output nodes under one set of bindings.
std::vector<Tensor> forward(const Graph& g, const std::unordered_map<std::string, Tensor>& bindings,
                            const std::vector<NodeId>& outputs);

/// Gradients of a scalar output with respect to every parameter leaf,
/// keyed by parameter name.
std::unordered_map<std::string, Tensor> backward(Graph& g, NodeId output,
                                                 const std::unordered_map<std::string, Tensor>& bindings);

/// Central-difference check of backward() over every parameter element.
/// Returns max over elements of |analytic - numeric| / max(1, |numeric|).
double finite_diff_check(Graph& g, NodeId output,
                         const std::unordered_map<std::string, Tensor>& bindings, double epsilon);

/// Same check restricted to the named parameters (e.g. only the
/// discriminator side of a graph with intentionally detached branches).
double finite_diff_check_params(Graph& g, NodeId output,
                                const std::unordered_map<std::string, Tensor>& bindings,
                                double epsilon, const std::vector<std::string>& params);

}  // namespace compatfam
