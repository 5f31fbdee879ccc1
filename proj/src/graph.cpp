#include "compatfam/graph.hpp"

#include <algorithm>
#include <cmath>

namespace compatfam {

const char* op_name(Op op) {
    switch (op) {
        case Op::Input: return "input";
        case Op::Param: return "param";
        case Op::Const: return "const";
        case Op::Add: return "add";
        case Op::Sub: return "sub";
        case Op::Mul: return "mul";
        case Op::Div: return "div";
        case Op::Neg: return "neg";
        case Op::MatMul: return "matmul";
        case Op::Transpose: return "transpose";
        case Op::Exp: return "exp";
        case Op::Log: return "log";
        case Op::Sqrt: return "sqrt";
        case Op::Square: return "square";
        case Op::Sigmoid: return "sigmoid";
        case Op::LeakyRelu: return "leaky_relu";
        case Op::LreluMask: return "lrelu_mask";
        case Op::MaxConst: return "max_const";
        case Op::GtMask: return "gt_mask";
        case Op::Sum: return "sum";
        case Op::RowSum: return "row_sum";
        case Op::RowMin: return "row_min";
        case Op::Expand: return "expand";
        case Op::ReduceTo: return "reduce_to";
        case Op::ConcatCols: return "concat_cols";
        case Op::SliceCols: return "slice_cols";
        case Op::Detach: return "detach";
        case Op::Scale: return "scale";
        case Op::AddConst: return "add_const";
    }
    return "?";
}

void Graph::check_id(NodeId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
        throw ShapeError("node id out of range");
}

NodeId Graph::push(Node n) {
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Graph::input(const std::string& name, std::int64_t r, std::int64_t c) {
    if (leaves_.count(name)) throw ShapeError("duplicate leaf name: " + name);
    Node n;
    n.op = Op::Input;
    n.shape = {r, c};
    n.name = name;
    NodeId id = push(std::move(n));
    leaves_[name] = id;
    input_names_.push_back(name);
    return id;
}

NodeId Graph::param(const std::string& name, std::int64_t r, std::int64_t c) {
    if (leaves_.count(name)) throw ShapeError("duplicate leaf name: " + name);
    Node n;
    n.op = Op::Param;
    n.shape = {r, c};
    n.name = name;
    NodeId id = push(std::move(n));
    leaves_[name] = id;
    param_names_.push_back(name);
    return id;
}

NodeId Graph::constant(Tensor v) {
    Node n;
    n.op = Op::Const;
    n.shape = {v.rows(), v.cols()};
    n.cval = std::move(v);
    return push(std::move(n));
}

NodeId Graph::leaf(const std::string& name) const {
    auto it = leaves_.find(name);
    if (it == leaves_.end()) throw BindError("unknown leaf: " + name);
    return it->second;
}

NodeId Graph::unary(Op op, NodeId a, Shape2 shape, double p0) {
    check_id(a);
    Node n;
    n.op = op;
    n.a = a;
    n.shape = shape;
    n.p0 = p0;
    return push(std::move(n));
}

NodeId Graph::binary(Op op, NodeId a, NodeId b, Shape2 shape) {
    check_id(a);
    check_id(b);
    Node n;
    n.op = op;
    n.a = a;
    n.b = b;
    n.shape = shape;
    return push(std::move(n));
}

static void require_same(const Graph& g, NodeId a, NodeId b, const char* what) {
    if (!(g.shape_of(a) == g.shape_of(b)))
        throw ShapeError(std::string(what) + ": shape mismatch " +
                         shape_str({g.shape_of(a).r, g.shape_of(a).c}) + " vs " +
                         shape_str({g.shape_of(b).r, g.shape_of(b).c}));
}

NodeId Graph::add(NodeId a, NodeId b) {
    require_same(*this, a, b, "add");
    return binary(Op::Add, a, b, shape_of(a));
}
NodeId Graph::sub(NodeId a, NodeId b) {
    require_same(*this, a, b, "sub");
    return binary(Op::Sub, a, b, shape_of(a));
}
NodeId Graph::mul(NodeId a, NodeId b) {
    require_same(*this, a, b, "mul");
    return binary(Op::Mul, a, b, shape_of(a));
}
NodeId Graph::div(NodeId a, NodeId b) {
    require_same(*this, a, b, "div");
    return binary(Op::Div, a, b, shape_of(a));
}
NodeId Graph::neg(NodeId a) { return unary(Op::Neg, a, shape_of(a)); }

NodeId Graph::matmul(NodeId a, NodeId b) {
    auto sa = shape_of(a), sb = shape_of(b);
    if (sa.c != sb.r) throw ShapeError("matmul: inner dimensions differ");
    return binary(Op::MatMul, a, b, {sa.r, sb.c});
}

NodeId Graph::transpose(NodeId a) {
    auto s = shape_of(a);
    return unary(Op::Transpose, a, {s.c, s.r});
}

NodeId Graph::exp(NodeId a) { return unary(Op::Exp, a, shape_of(a)); }
NodeId Graph::log(NodeId a) { return unary(Op::Log, a, shape_of(a)); }
NodeId Graph::sqrt(NodeId a) { return unary(Op::Sqrt, a, shape_of(a)); }
NodeId Graph::square(NodeId a) { return unary(Op::Square, a, shape_of(a)); }
NodeId Graph::sigmoid(NodeId a) { return unary(Op::Sigmoid, a, shape_of(a)); }
NodeId Graph::leaky_relu(NodeId a, double alpha) { return unary(Op::LeakyRelu, a, shape_of(a), alpha); }
NodeId Graph::max_const(NodeId a, double c) { return unary(Op::MaxConst, a, shape_of(a), c); }
NodeId Graph::sum(NodeId a) { return unary(Op::Sum, a, {1, 1}); }
NodeId Graph::row_sum(NodeId a) { return unary(Op::RowSum, a, {shape_of(a).r, 1}); }
NodeId Graph::row_min_detached(NodeId a) { return unary(Op::RowMin, a, {shape_of(a).r, 1}); }

NodeId Graph::expand(NodeId a, std::int64_t r, std::int64_t c) {
    auto s = shape_of(a);
    bool ok = (s.r == r || s.r == 1) && (s.c == c || s.c == 1);
    if (!ok) throw ShapeError("expand: incompatible broadcast");
    auto n = unary(Op::Expand, a, {r, c});
    return n;
}

NodeId Graph::reduce_to(NodeId a, std::int64_t r, std::int64_t c) {
    auto s = shape_of(a);
    bool ok = (r == s.r || r == 1) && (c == s.c || c == 1);
    if (!ok) throw ShapeError("reduce_to: incompatible reduction");
    return unary(Op::ReduceTo, a, {r, c});
}

NodeId Graph::concat_cols(NodeId a, NodeId b) {
    auto sa = shape_of(a), sb = shape_of(b);
    if (sa.r != sb.r) throw ShapeError("concat_cols: row counts differ");
    return binary(Op::ConcatCols, a, b, {sa.r, sa.c + sb.c});
}

NodeId Graph::slice_cols(NodeId a, std::int64_t lo, std::int64_t hi) {
    auto s = shape_of(a);
    if (lo < 0 || hi <= lo || hi > s.c) throw ShapeError("slice_cols: bad range");
    auto n = unary(Op::SliceCols, a, {s.r, hi - lo});
    nodes_.back().i0 = lo;
    nodes_.back().i1 = hi;
    return n;
}

NodeId Graph::detach(NodeId a) { return unary(Op::Detach, a, shape_of(a)); }
NodeId Graph::scale(NodeId a, double s) { return unary(Op::Scale, a, shape_of(a), s); }
NodeId Graph::add_const(NodeId a, double c) { return unary(Op::AddConst, a, shape_of(a), c); }

NodeId Graph::mean(NodeId a) {
    auto s = shape_of(a);
    return scale(sum(a), 1.0 / static_cast<double>(s.numel()));
}

NodeId Graph::min_const(NodeId a, double c) { return neg(max_const(neg(a), -c)); }

NodeId Graph::clamp(NodeId a, double lo, double hi) { return min_const(max_const(a, lo), hi); }

NodeId Graph::row_norm(NodeId a) { return sqrt(row_sum(square(a))); }

NodeId Graph::softmin_weights(NodeId d) {
    auto s = shape_of(d);
    NodeId m = row_min_detached(d);
    NodeId shifted = sub(d, expand(m, s.r, s.c));
    NodeId w = exp(neg(shifted));
    NodeId z = row_sum(w);
    return div(w, expand(z, s.r, s.c));
}

std::vector<NodeId> Graph::gradients(NodeId output, const std::vector<NodeId>& wrt) {
    check_id(output);
    for (NodeId w : wrt) check_id(w);
    if (!(shape_of(output) == Shape2{1, 1}))
        throw ShapeError("gradients: output must be scalar");

    const int n = output + 1;
    // Active set: nodes the output depends on.
    std::vector<char> active(static_cast<std::size_t>(n), 0);
    {
        std::vector<NodeId> stack{output};
        active[static_cast<std::size_t>(output)] = 1;
        while (!stack.empty()) {
            NodeId id = stack.back();
            stack.pop_back();
            const Node& nd = nodes_[static_cast<std::size_t>(id)];
            // Detached ops cut the dependency for gradient purposes.
            if (nd.op == Op::Detach || nd.op == Op::RowMin || nd.op == Op::GtMask ||
                nd.op == Op::LreluMask)
                continue;
            for (NodeId in : {nd.a, nd.b}) {
                if (in >= 0 && !active[static_cast<std::size_t>(in)]) {
                    active[static_cast<std::size_t>(in)] = 1;
                    stack.push_back(in);
                }
            }
        }
    }

    std::vector<NodeId> adj(static_cast<std::size_t>(n), -1);
    adj[static_cast<std::size_t>(output)] = constant_scalar(1.0);

    auto accum = [&](NodeId target, NodeId g) {
        if (target < 0 || target >= n || !active[static_cast<std::size_t>(target)]) return;
        NodeId& slot = adj[static_cast<std::size_t>(target)];
        slot = (slot == -1) ? g : add(slot, g);
    };

    for (NodeId id = output; id >= 0; --id) {
        if (!active[static_cast<std::size_t>(id)]) continue;
        NodeId g = adj[static_cast<std::size_t>(id)];
        if (g == -1) continue;
        const Node nd = nodes_[static_cast<std::size_t>(id)];  // copy: push() may realloc
        switch (nd.op) {
            case Op::Input:
            case Op::Param:
            case Op::Const:
                break;
            case Op::Add:
                accum(nd.a, g);
                accum(nd.b, g);
                break;
            case Op::Sub:
                accum(nd.a, g);
                accum(nd.b, neg(g));
                break;
            case Op::Mul:
                accum(nd.a, mul(g, nd.b));
                accum(nd.b, mul(g, nd.a));
                break;
            case Op::Div:
                accum(nd.a, div(g, nd.b));
                accum(nd.b, neg(div(mul(g, nd.a), square(nd.b))));
                break;
            case Op::Neg:
                accum(nd.a, neg(g));
                break;
            case Op::MatMul:
                accum(nd.a, matmul(g, transpose(nd.b)));
                accum(nd.b, matmul(transpose(nd.a), g));
                break;
            case Op::Transpose:
                accum(nd.a, transpose(g));
                break;
            case Op::Exp:
                accum(nd.a, mul(g, id));
                break;
            case Op::Log:
                accum(nd.a, div(g, nd.a));
                break;
            case Op::Sqrt:
                accum(nd.a, div(g, scale(id, 2.0)));
                break;
            case Op::Square:
                accum(nd.a, mul(g, scale(nd.a, 2.0)));
                break;
            case Op::Sigmoid: {
                NodeId one_minus = add_const(neg(id), 1.0);
                accum(nd.a, mul(g, mul(id, one_minus)));
                break;
            }
            case Op::LeakyRelu:
                accum(nd.a, mul(g, unary(Op::LreluMask, nd.a, nd.shape, nd.p0)));
                break;
            case Op::MaxConst:
                accum(nd.a, mul(g, unary(Op::GtMask, nd.a, nd.shape, nd.p0)));
                break;
            case Op::LreluMask:
            case Op::GtMask:
            case Op::RowMin:
            case Op::Detach:
                break;
            case Op::Sum: {
                auto s = shape_of(nd.a);
                accum(nd.a, expand(g, s.r, s.c));
                break;
            }
            case Op::RowSum: {
                auto s = shape_of(nd.a);
                accum(nd.a, expand(g, s.r, s.c));
                break;
            }
            case Op::Expand: {
                auto s = shape_of(nd.a);
                accum(nd.a, reduce_to(g, s.r, s.c));
                break;
            }
            case Op::ReduceTo: {
                auto s = shape_of(nd.a);
                accum(nd.a, expand(g, s.r, s.c));
                break;
            }
            case Op::ConcatCols: {
                auto sa = shape_of(nd.a);
                auto sb = shape_of(nd.b);
                accum(nd.a, slice_cols(g, 0, sa.c));
                accum(nd.b, slice_cols(g, sa.c, sa.c + sb.c));
                break;
            }
            case Op::SliceCols: {
                auto s = shape_of(nd.a);
                NodeId padded = g;
                if (nd.i0 > 0) {
                    NodeId zl = constant(Tensor::zeros(s.r, nd.i0));
                    padded = concat_cols(zl, padded);
                }
                if (nd.i1 < s.c) {
                    NodeId zr = constant(Tensor::zeros(s.r, s.c - nd.i1));
                    padded = concat_cols(padded, zr);
                }
                accum(nd.a, padded);
                break;
            }
            case Op::Scale:
                accum(nd.a, scale(g, nd.p0));
                break;
            case Op::AddConst:
                accum(nd.a, g);
                break;
        }
    }

    std::vector<NodeId> out;
    out.reserve(wrt.size());
    for (NodeId w : wrt) {
        NodeId gw = (w < n) ? adj[static_cast<std::size_t>(w)] : -1;
        if (gw == -1) {
            auto s = shape_of(w);
            gw = constant(Tensor::zeros(s.r, s.c));
        }
        out.push_back(gw);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Session

void Session::reset() {
    std::fill(ready_.begin(), ready_.end(), 0);
}

// Bindings take effect on the next run: call reset() before rebinding.
void Session::bind(const std::string& name, const Tensor& t) {
    NodeId id = g_.leaf(name);
    auto s = g_.shape_of(id);
    if (t.rank() != 2 || t.rows() != s.r || t.cols() != s.c)
        throw ShapeError("bind '" + name + "': expected " + shape_str({s.r, s.c}) + " got " +
                         shape_str(t.shape()));
    binds_[name] = &t;
}

const Tensor& Session::value(NodeId id) {
    if (id < 0 || static_cast<std::size_t>(id) >= g_.nodes_.size())
        throw ShapeError("value: node id out of range");
    if (vals_.size() < g_.nodes_.size()) {
        vals_.resize(g_.nodes_.size());
        ready_.resize(g_.nodes_.size(), 0);
    }
    if (ready_[static_cast<std::size_t>(id)]) return vals_[static_cast<std::size_t>(id)];

    // Collect the needed subgraph, then evaluate in id (= topological) order.
    std::vector<NodeId> need;
    std::vector<NodeId> stack{id};
    std::vector<char> seen(g_.nodes_.size(), 0);
    seen[static_cast<std::size_t>(id)] = 1;
    while (!stack.empty()) {
        NodeId cur = stack.back();
        stack.pop_back();
        if (ready_[static_cast<std::size_t>(cur)]) continue;
        need.push_back(cur);
        const Node& nd = g_.nodes_[static_cast<std::size_t>(cur)];
        for (NodeId in : {nd.a, nd.b}) {
            if (in >= 0 && !seen[static_cast<std::size_t>(in)] &&
                !ready_[static_cast<std::size_t>(in)]) {
                seen[static_cast<std::size_t>(in)] = 1;
                stack.push_back(in);
            }
        }
    }
    std::sort(need.begin(), need.end());
    for (NodeId cur : need) compute(cur);
    return vals_[static_cast<std::size_t>(id)];
}

void Session::compute(NodeId id) {
    const Node& nd = g_.nodes_[static_cast<std::size_t>(id)];
    Tensor& out = vals_[static_cast<std::size_t>(id)];
    auto ensure = [&](Shape2 s) {
        if (out.rank() != 2 || out.rows() != s.r || out.cols() != s.c)
            out = Tensor::zeros(s.r, s.c);
    };
    const Tensor* A = nd.a >= 0 ? &vals_[static_cast<std::size_t>(nd.a)] : nullptr;
    const Tensor* B = nd.b >= 0 ? &vals_[static_cast<std::size_t>(nd.b)] : nullptr;

    switch (nd.op) {
        case Op::Input:
        case Op::Param: {
            auto it = binds_.find(nd.name);
            if (it == binds_.end()) throw BindError("unbound leaf: " + nd.name);
            out = *it->second;
            break;
        }
        case Op::Const:
            out = nd.cval;
            break;
        case Op::Add: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] + (*B)[i];
            break;
        }
        case Op::Sub: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] - (*B)[i];
            break;
        }
        case Op::Mul: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] * (*B)[i];
            break;
        }
        case Op::Div: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] / (*B)[i];
            break;
        }
        case Op::Neg: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = -(*A)[i];
            break;
        }
        case Op::MatMul: {
            ensure(nd.shape);
            const std::int64_t m = A->rows(), k = A->cols(), p = B->cols();
            std::fill(out.data(), out.data() + m * p, 0.0);
            const double* a = A->data();
            const double* b = B->data();
            double* o = out.data();
            for (std::int64_t i = 0; i < m; ++i) {
                for (std::int64_t kk = 0; kk < k; ++kk) {
                    const double av = a[i * k + kk];
                    if (av == 0.0) continue;
                    const double* brow = b + kk * p;
                    double* orow = o + i * p;
                    for (std::int64_t j = 0; j < p; ++j) orow[j] += av * brow[j];
                }
            }
            break;
        }
        case Op::Transpose: {
            ensure(nd.shape);
            const std::int64_t r = A->rows(), c = A->cols();
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j) out.at(j, i) = A->at(i, j);
            break;
        }
        case Op::Exp: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = std::exp((*A)[i]);
            break;
        }
        case Op::Log: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = std::log((*A)[i]);
            break;
        }
        case Op::Sqrt: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = std::sqrt((*A)[i]);
            break;
        }
        case Op::Square: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] * (*A)[i];
            break;
        }
        case Op::Sigmoid: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                const double x = (*A)[i];
                // Branch keeps exp() argument non-positive for stability.
                out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                                : std::exp(x) / (1.0 + std::exp(x));
            }
            break;
        }
        case Op::LeakyRelu: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) {
                const double x = (*A)[i];
                out[i] = x > 0 ? x : nd.p0 * x;
            }
            break;
        }
        case Op::LreluMask: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] > 0 ? 1.0 : nd.p0;
            break;
        }
        case Op::MaxConst: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = std::max((*A)[i], nd.p0);
            break;
        }
        case Op::GtMask: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] > nd.p0 ? 1.0 : 0.0;
            break;
        }
        case Op::Sum: {
            ensure(nd.shape);
            double s = 0.0;
            const std::int64_t n = A->numel();
            for (std::int64_t i = 0; i < n; ++i) s += (*A)[i];
            out[0] = s;
            break;
        }
        case Op::RowSum: {
            ensure(nd.shape);
            const std::int64_t r = A->rows(), c = A->cols();
            for (std::int64_t i = 0; i < r; ++i) {
                double s = 0.0;
                for (std::int64_t j = 0; j < c; ++j) s += A->at(i, j);
                out[i] = s;
            }
            break;
        }
        case Op::RowMin: {
            ensure(nd.shape);
            const std::int64_t r = A->rows(), c = A->cols();
            for (std::int64_t i = 0; i < r; ++i) {
                double m = A->at(i, 0);
                for (std::int64_t j = 1; j < c; ++j) m = std::min(m, A->at(i, j));
                out[i] = m;
            }
            break;
        }
        case Op::Expand: {
            ensure(nd.shape);
            const std::int64_t r = nd.shape.r, c = nd.shape.c;
            const std::int64_t ar = A->rows(), ac = A->cols();
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < c; ++j)
                    out.at(i, j) = A->at(ar == 1 ? 0 : i, ac == 1 ? 0 : j);
            break;
        }
        case Op::ReduceTo: {
            ensure(nd.shape);
            std::fill(out.data(), out.data() + nd.shape.numel(), 0.0);
            const std::int64_t ar = A->rows(), ac = A->cols();
            const std::int64_t r = nd.shape.r, c = nd.shape.c;
            for (std::int64_t i = 0; i < ar; ++i)
                for (std::int64_t j = 0; j < ac; ++j)
                    out.at(r == 1 ? 0 : i, c == 1 ? 0 : j) += A->at(i, j);
            break;
        }
        case Op::ConcatCols: {
            ensure(nd.shape);
            const std::int64_t r = nd.shape.r, ca = A->cols(), cb = B->cols();
            for (std::int64_t i = 0; i < r; ++i) {
                for (std::int64_t j = 0; j < ca; ++j) out.at(i, j) = A->at(i, j);
                for (std::int64_t j = 0; j < cb; ++j) out.at(i, ca + j) = B->at(i, j);
            }
            break;
        }
        case Op::SliceCols: {
            ensure(nd.shape);
            const std::int64_t r = nd.shape.r, w = nd.i1 - nd.i0;
            for (std::int64_t i = 0; i < r; ++i)
                for (std::int64_t j = 0; j < w; ++j) out.at(i, j) = A->at(i, nd.i0 + j);
            break;
        }
        case Op::Detach: {
            out = *A;
            break;
        }
        case Op::Scale: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] * nd.p0;
            break;
        }
        case Op::AddConst: {
            ensure(nd.shape);
            const std::int64_t n = nd.shape.numel();
            for (std::int64_t i = 0; i < n; ++i) out[i] = (*A)[i] + nd.p0;
            break;
        }
    }

    if (check_finite_ && !out.all_finite())
        throw NonFiniteError("non-finite value at node " + std::to_string(id) + " (" +
                                 op_name(nd.op) + ")",
                             id);
    ready_[static_cast<std::size_t>(id)] = 1;
}

// ---------------------------------------------------------------------------
// Free-function conveniences

std::vector<Tensor> forward(const Graph& g, const std::unordered_map<std::string, Tensor>& bindings,
                            const std::vector<NodeId>& outputs) {
    Session s(g);
    for (const auto& [k, v] : bindings) s.bind(k, v);
    std::vector<Tensor> out;
    out.reserve(outputs.size());
    for (NodeId id : outputs) out.push_back(s.value(id));
    return out;
}

std::unordered_map<std::string, Tensor> backward(
    Graph& g, NodeId output, const std::unordered_map<std::string, Tensor>& bindings) {
    std::vector<NodeId> wrt;
    for (const auto& name : g.param_names()) wrt.push_back(g.leaf(name));
    auto grad_ids = g.gradients(output, wrt);
    Session s(g);
    for (const auto& [k, v] : bindings) s.bind(k, v);
    std::unordered_map<std::string, Tensor> out;
    for (std::size_t i = 0; i < wrt.size(); ++i) out[g.param_names()[i]] = s.value(grad_ids[i]);
    return out;
}

double finite_diff_check_params(Graph& g, NodeId output,
                                const std::unordered_map<std::string, Tensor>& bindings,
                                double epsilon, const std::vector<std::string>& params) {
    if (!(epsilon > 0.0 && epsilon <= 1e-2))
        throw ConfigError("finite_diff_check: epsilon must be in (0, 1e-2]");
    std::vector<NodeId> wrt;
    for (const auto& name : params) wrt.push_back(g.leaf(name));
    auto grad_ids = g.gradients(output, wrt);

    std::unordered_map<std::string, Tensor> local = bindings;
    std::unordered_map<std::string, Tensor> analytic;
    {
        Session s(g);
        for (const auto& [k, v] : local) s.bind(k, v);
        for (std::size_t i = 0; i < params.size(); ++i) analytic[params[i]] = s.value(grad_ids[i]);
    }

    Session s(g);
    auto eval = [&]() {
        s.reset();
        for (const auto& [k, v] : local) s.bind(k, v);
        return s.value(output)[0];
    };

    double max_err = 0.0;
    for (const auto& name : params) {
        Tensor& p = local.at(name);
        const Tensor& a = analytic.at(name);
        for (std::int64_t i = 0; i < p.numel(); ++i) {
            const double orig = p[i];
            p[i] = orig + epsilon;
            const double fp = eval();
            p[i] = orig - epsilon;
            const double fm = eval();
            p[i] = orig;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double err = std::abs(a[i] - numeric) / std::max(1.0, std::abs(numeric));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

double finite_diff_check(Graph& g, NodeId output,
                         const std::unordered_map<std::string, Tensor>& bindings, double epsilon) {
    return finite_diff_check_params(g, output, bindings, epsilon, g.param_names());
}

}  // namespace compatfam
