#include "karma/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace karma::nd {

namespace {

using detail::Node;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

std::string g_corrupt_op;
double g_corrupt_factor = 1.0;

std::shared_ptr<Node> make_node(Shape shape, const char* op) {
    auto n = std::make_shared<Node>();
    n->data.resize(static_cast<std::size_t>(numel(shape)));
    n->shape = std::move(shape);
    n->op = op;
    return n;
}

// Attaches parents/rule only when some input needs gradients.
void finalize(const std::shared_ptr<Node>& out, std::vector<std::shared_ptr<Node>> parents,
              std::function<void(Node&)> rule) {
    bool needs = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) needs = true;
    if (!needs) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_rule = std::move(rule);
}

index_t last_extent(const Shape& s) { return s.empty() ? 1 : s.back(); }

index_t row_count(const Shape& s) {
    index_t n = numel(s);
    index_t d = last_extent(s);
    return d == 0 ? 0 : n / d;
}

Shape drop_last(const Shape& s) {
    if (s.empty()) return {};
    Shape r(s.begin(), s.end() - 1);
    return r;
}

// Broadcast classification for binary elementwise ops.
enum class Bc { kSame, kRowB, kRowA, kScalarB, kScalarA };

Bc classify(const Shape& a, const Shape& b, const char* op) {
    if (a == b) return Bc::kSame;
    if (numel(b) == 1) return Bc::kScalarB;
    if (numel(a) == 1) return Bc::kScalarA;
    if (b.size() == 1 && a.size() >= 2 && b[0] == a.back()) return Bc::kRowB;
    if (a.size() == 1 && b.size() >= 2 && a[0] == b.back()) return Bc::kRowA;
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " vs " +
                     shape_str(b));
}

// For output element i, index into the smaller operand.
struct IndexMap {
    index_t mod = 0;  // 0: identity, 1: scalar, else: i % mod
    index_t operator()(index_t i) const {
        if (mod == 0) return i;
        if (mod == 1) return 0;
        return i % mod;
    }
};

}  // namespace

index_t numel(const Shape& shape) {
    index_t n = 1;
    for (index_t e : shape) n *= e;
    return n;
}

std::string shape_str(const Shape& shape) {
    if (shape.empty()) return "scalar";
    std::ostringstream os;
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    return os.str();
}

// ---- Tensor ----

Tensor Tensor::wrap(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    auto n = make_node(std::move(shape), "leaf");
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    Tensor t = zeros(std::move(shape), requires_grad);
    std::fill(t.values().begin(), t.values().end(), value);
    return t;
}

Tensor Tensor::from_vector(Shape shape, std::vector<double> values, bool requires_grad) {
    if (numel(shape) != static_cast<index_t>(values.size()))
        throw ShapeError("from_vector: " + shape_str(shape) + " needs " +
                         std::to_string(numel(shape)) + " values, got " +
                         std::to_string(values.size()));
    auto n = make_node(std::move(shape), "leaf");
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return wrap(n);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
    return from_vector({}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
index_t Tensor::size() const { return static_cast<index_t>(node_->data.size()); }
index_t Tensor::rank() const { return static_cast<index_t>(node_->shape.size()); }
index_t Tensor::rows() const { return row_count(node_->shape); }
index_t Tensor::cols() const { return last_extent(node_->shape); }

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
    if (node_->backward_rule) throw UsageError("set_requires_grad: only valid on leaf tensors");
    node_->requires_grad = rg;
}

double* Tensor::data() { return node_->data.data(); }
const double* Tensor::data() const { return node_->data.data(); }
std::vector<double>& Tensor::values() { return node_->data; }
const std::vector<double>& Tensor::values() const { return node_->data; }

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
std::vector<double>& Tensor::grad() { return node_->ensure_grad(); }
const std::vector<double>& Tensor::grad() const { return node_->grad; }
void Tensor::zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

double Tensor::item() const {
    if (size() != 1) throw UsageError("item: tensor is " + shape_str(shape()) + ", not scalar");
    return node_->data[0];
}

double Tensor::at(index_t r, index_t c) const {
    return node_->data[static_cast<std::size_t>(r * cols() + c)];
}

// ---- Graph ----

Graph Graph::from_root(const Tensor& root) {
    if (!root.defined()) throw UsageError("backward: undefined tensor");
    Graph g;
    g.root_ = root.impl();
    if (!g.root_->requires_grad) return g;

    // Iterative post-order DFS over grad-requiring nodes: dependencies first.
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(g.root_.get(), 0);
    visited.insert(g.root_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            g.topo_.push_back(node);
            stack.pop_back();
        }
    }
    return g;
}

void Graph::backward() {
    if (!root_) return;
    if (root_->data.size() != 1)
        throw UsageError("backward: root must be scalar, got " + shape_str(root_->shape));
    if (topo_.empty()) {  // constant root
        return;
    }
    // Interior gradients are recomputed per pass; leaves accumulate.
    for (Node* n : topo_)
        if (n->backward_rule) n->grad.assign(n->data.size(), 0.0);
    root_->ensure_grad();
    root_->grad[0] += 1.0;
    for (auto it = topo_.rbegin(); it != topo_.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_rule) continue;
        if (!g_corrupt_op.empty() && g_corrupt_op == n->op)
            for (double& g : n->grad) g *= g_corrupt_factor;
        n->backward_rule(*n);
    }
}

void backward(const Tensor& root) { Graph::from_root(root).backward(); }

namespace testing {
void corrupt_backward(const std::string& op_name, double factor) {
    g_corrupt_op = op_name;
    g_corrupt_factor = factor;
}
}  // namespace testing

Tensor detach(const Tensor& t, bool requires_grad) {
    return Tensor::from_vector(t.shape(), t.values(), requires_grad);
}

// ---- structural ops ----

Tensor reshape(const Tensor& t, Shape shape) {
    if (numel(shape) != t.size())
        throw ShapeError("reshape: cannot view " + shape_str(t.shape()) + " as " +
                         shape_str(shape));
    auto out = make_node(std::move(shape), "reshape");
    out->data = t.values();
    auto p = t.impl();
    finalize(out, {p}, [p](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    return Tensor::wrap(out);
}

Tensor transpose(const Tensor& t) {
    if (t.rank() != 2) throw ShapeError("transpose: expected rank-2, got " + shape_str(t.shape()));
    index_t r = t.rows(), c = t.cols();
    auto out = make_node({c, r}, "transpose");
    const double* src = t.data();
    for (index_t i = 0; i < r; ++i)
        for (index_t j = 0; j < c; ++j) out->data[static_cast<std::size_t>(j * r + i)] = src[i * c + j];
    auto p = t.impl();
    finalize(out, {p}, [p, r, c](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (index_t i = 0; i < r; ++i)
            for (index_t j = 0; j < c; ++j)
                g[static_cast<std::size_t>(i * c + j)] += self.grad[static_cast<std::size_t>(j * r + i)];
    });
    return Tensor::wrap(out);
}

Tensor slice_cols(const Tensor& t, index_t c0, index_t c1) {
    if (t.rank() != 2) throw ShapeError("slice_cols: expected rank-2, got " + shape_str(t.shape()));
    index_t r = t.rows(), c = t.cols();
    if (c0 < 0 || c1 > c || c0 >= c1)
        throw UsageError("slice_cols: invalid range [" + std::to_string(c0) + ", " +
                         std::to_string(c1) + ") for " + shape_str(t.shape()));
    index_t w = c1 - c0;
    auto out = make_node({r, w}, "slice_cols");
    const double* src = t.data();
    for (index_t i = 0; i < r; ++i)
        for (index_t j = 0; j < w; ++j)
            out->data[static_cast<std::size_t>(i * w + j)] = src[i * c + c0 + j];
    auto p = t.impl();
    finalize(out, {p}, [p, r, c, c0, w](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (index_t i = 0; i < r; ++i)
            for (index_t j = 0; j < w; ++j)
                g[static_cast<std::size_t>(i * c + c0 + j)] += self.grad[static_cast<std::size_t>(i * w + j)];
    });
    return Tensor::wrap(out);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_cols: empty input");
    index_t r = parts[0].rows(), total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.rows() != r)
            throw ShapeError("concat_cols: incompatible part " + shape_str(p.shape()));
        total += p.cols();
    }
    auto out = make_node({r, total}, "concat_cols");
    index_t off = 0;
    for (const auto& p : parts) {
        index_t w = p.cols();
        const double* src = p.data();
        for (index_t i = 0; i < r; ++i)
            for (index_t j = 0; j < w; ++j)
                out->data[static_cast<std::size_t>(i * total + off + j)] = src[i * w + j];
        off += w;
    }
    std::vector<std::shared_ptr<Node>> ps;
    for (const auto& p : parts) ps.push_back(p.impl());
    finalize(out, ps, [ps, r, total](Node& self) {
        index_t off2 = 0;
        for (const auto& p : ps) {
            index_t w = last_extent(p->shape);
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (index_t i = 0; i < r; ++i)
                    for (index_t j = 0; j < w; ++j)
                        g[static_cast<std::size_t>(i * w + j)] +=
                            self.grad[static_cast<std::size_t>(i * total + off2 + j)];
            }
            off2 += w;
        }
    });
    return Tensor::wrap(out);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw UsageError("concat_rows: empty input");
    index_t c = parts[0].cols(), total = 0;
    for (const auto& p : parts) {
        if (p.rank() != 2 || p.cols() != c)
            throw ShapeError("concat_rows: incompatible part " + shape_str(p.shape()));
        total += p.rows();
    }
    auto out = make_node({total, c}, "concat_rows");
    index_t off = 0;
    for (const auto& p : parts) {
        std::copy(p.values().begin(), p.values().end(),
                  out->data.begin() + static_cast<std::ptrdiff_t>(off * c));
        off += p.rows();
    }
    std::vector<std::shared_ptr<Node>> ps;
    for (const auto& p : parts) ps.push_back(p.impl());
    finalize(out, ps, [ps, c](Node& self) {
        index_t off2 = 0;
        for (const auto& p : ps) {
            index_t r = row_count(p->shape);
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (index_t i = 0; i < r * c; ++i)
                    g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(off2 * c + i)];
            }
            off2 += r;
        }
    });
    return Tensor::wrap(out);
}

Tensor gather_rows(const Tensor& t, std::vector<index_t> idx) {
    if (t.rank() != 2) throw ShapeError("gather_rows: expected rank-2, got " + shape_str(t.shape()));
    index_t r = t.rows(), c = t.cols();
    if (idx.empty()) throw UsageError("gather_rows: empty index list");
    for (index_t i : idx)
        if (i < 0 || i >= r) throw UsageError("gather_rows: index " + std::to_string(i) +
                                              " out of range for " + shape_str(t.shape()));
    auto out = make_node({static_cast<index_t>(idx.size()), c}, "gather_rows");
    const double* src = t.data();
    for (std::size_t k = 0; k < idx.size(); ++k)
        std::copy(src + idx[k] * c, src + (idx[k] + 1) * c,
                  out->data.begin() + static_cast<std::ptrdiff_t>(k * static_cast<std::size_t>(c)));
    auto p = t.impl();
    finalize(out, {p}, [p, idx = std::move(idx), c](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (index_t j = 0; j < c; ++j)
                g[static_cast<std::size_t>(idx[k] * c + j)] +=
                    self.grad[k * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)];
    });
    return Tensor::wrap(out);
}

Tensor scatter_rows(index_t total_rows, std::vector<index_t> idx, const Tensor& rows) {
    if (rows.rank() != 2) throw ShapeError("scatter_rows: expected rank-2 rows");
    index_t c = rows.cols();
    if (static_cast<index_t>(idx.size()) != rows.rows())
        throw ShapeError("scatter_rows: " + std::to_string(idx.size()) + " indices vs " +
                         shape_str(rows.shape()));
    for (index_t i : idx)
        if (i < 0 || i >= total_rows)
            throw UsageError("scatter_rows: index " + std::to_string(i) + " out of range");
    auto out = make_node({total_rows, c}, "scatter_rows");
    const double* src = rows.data();
    for (std::size_t k = 0; k < idx.size(); ++k)
        for (index_t j = 0; j < c; ++j)
            out->data[static_cast<std::size_t>(idx[k] * c + j)] += src[static_cast<index_t>(k) * c + j];
    auto p = rows.impl();
    finalize(out, {p}, [p, idx = std::move(idx), c](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (std::size_t k = 0; k < idx.size(); ++k)
            for (index_t j = 0; j < c; ++j)
                g[k * static_cast<std::size_t>(c) + static_cast<std::size_t>(j)] +=
                    self.grad[static_cast<std::size_t>(idx[k] * c + j)];
    });
    return Tensor::wrap(out);
}

Tensor repeat_rows(const Tensor& row, index_t n) {
    if (row.size() != row.cols())
        throw ShapeError("repeat_rows: expected a single row, got " + shape_str(row.shape()));
    if (n < 1) throw UsageError("repeat_rows: n must be positive");
    index_t c = row.cols();
    auto out = make_node({n, c}, "repeat_rows");
    const double* src = row.data();
    for (index_t i = 0; i < n; ++i)
        std::copy(src, src + c, out->data.begin() + static_cast<std::ptrdiff_t>(i * c));
    auto p = row.impl();
    finalize(out, {p}, [p, n, c](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        for (index_t i = 0; i < n; ++i)
            for (index_t j = 0; j < c; ++j)
                g[static_cast<std::size_t>(j)] += self.grad[static_cast<std::size_t>(i * c + j)];
    });
    return Tensor::wrap(out);
}

// ---- binary elementwise ----

namespace {

// f(a, b) with partials dfa, dfb evaluated per element.
template <class F, class DFa, class DFb>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, F f, DFa dfa, DFb dfb) {
    Bc bc = classify(a.shape(), b.shape(), name);
    const bool a_small = (bc == Bc::kScalarA || bc == Bc::kRowA);
    const Shape& out_shape = a_small ? b.shape() : a.shape();
    IndexMap ia, ib;
    switch (bc) {
        case Bc::kSame: break;
        case Bc::kScalarB: ib.mod = 1; break;
        case Bc::kScalarA: ia.mod = 1; break;
        case Bc::kRowB: ib.mod = b.size(); break;
        case Bc::kRowA: ia.mod = a.size(); break;
    }
    auto out = make_node(out_shape, name);
    const double* ad = a.data();
    const double* bd = b.data();
    index_t n = numel(out_shape);
    for (index_t i = 0; i < n; ++i)
        out->data[static_cast<std::size_t>(i)] = f(ad[ia(i)], bd[ib(i)]);
    auto pa = a.impl();
    auto pb = b.impl();
    finalize(out, {pa, pb}, [pa, pb, ia, ib, n, dfa, dfb](Node& self) {
        const double* av = pa->data.data();
        const double* bv = pb->data.data();
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (index_t i = 0; i < n; ++i)
                g[static_cast<std::size_t>(ia(i))] +=
                    self.grad[static_cast<std::size_t>(i)] * dfa(av[ia(i)], bv[ib(i)]);
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (index_t i = 0; i < n; ++i)
                g[static_cast<std::size_t>(ib(i))] +=
                    self.grad[static_cast<std::size_t>(i)] * dfb(av[ia(i)], bv[ib(i)]);
        }
    });
    return Tensor::wrap(out);
}

template <class F, class DF>
Tensor unary_op(const char* name, const Tensor& t, F f, DF df) {
    auto out = make_node(t.shape(), name);
    const double* src = t.data();
    index_t n = t.size();
    for (index_t i = 0; i < n; ++i) out->data[static_cast<std::size_t>(i)] = f(src[i]);
    auto p = t.impl();
    finalize(out, {p}, [p, n, df](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        const double* v = p->data.data();
        for (index_t i = 0; i < n; ++i)
            g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i)] * df(v[i]);
    });
    return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    for (double v : b.values())
        if (v == 0.0) throw NumericError("div: zero denominator (add a guard epsilon)");
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](double, double y) { return 1.0 / y; },
        [](double x, double y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, double c) {
    return unary_op(
        "add_scalar", a, [c](double x) { return x + c; }, [](double) { return 1.0; });
}

Tensor mul(const Tensor& a, double c) {
    return unary_op(
        "mul_scalar", a, [c](double x) { return x * c; }, [c](double) { return c; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 operands, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    if (a.cols() != b.rows())
        throw ShapeError("matmul: inner extents mismatch: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    index_t m = a.rows(), k = a.cols(), n = b.cols();
    auto out = make_node({m, n}, "matmul");
    {
        ConstMap A(a.data(), m, k);
        ConstMap B(b.data(), k, n);
        MutMap C(out->data.data(), m, n);
        C.noalias() = A * B;
    }
    auto pa = a.impl();
    auto pb = b.impl();
    finalize(out, {pa, pb}, [pa, pb, m, k, n](Node& self) {
        ConstMap G(self.grad.data(), m, n);
        if (pa->requires_grad) {
            ConstMap B(pb->data.data(), k, n);
            MutMap Ga(pa->ensure_grad().data(), m, k);
            Ga.noalias() += G * B.transpose();
        }
        if (pb->requires_grad) {
            ConstMap A(pa->data.data(), m, k);
            MutMap Gb(pb->ensure_grad().data(), k, n);
            Gb.noalias() += A.transpose() * G;
        }
    });
    return Tensor::wrap(out);
}

// ---- elementwise ----

Tensor sqrt(const Tensor& t) {
    return unary_op(
        "sqrt", t, [](double x) { return std::sqrt(x); },
        [](double x) { return 0.5 / std::sqrt(x); });
}

Tensor square(const Tensor& t) {
    return unary_op(
        "square", t, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor abs(const Tensor& t) {
    return unary_op(
        "abs", t, [](double x) { return std::fabs(x); },
        [](double x) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp(const Tensor& t, double lo, double hi) {
    if (!(lo <= hi)) throw UsageError("clamp: lo > hi");
    return unary_op(
        "clamp", t,
        [lo, hi](double x) { return x < lo ? lo : (x > hi ? hi : x); },
        [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor arccos(const Tensor& t) {
    constexpr double lo = -1.0 + kArccosClamp;
    constexpr double hi = 1.0 - kArccosClamp;
    return unary_op(
        "arccos", t,
        [](double x) {
            double c = x < lo ? lo : (x > hi ? hi : x);
            return std::acos(c);
        },
        [](double x) {
            if (x < lo || x > hi) return 0.0;  // clamped region is flat
            return -1.0 / std::sqrt(1.0 - x * x);
        });
}

Tensor gelu(const Tensor& t) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    return unary_op(
        "gelu", t,
        [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
        [](double x) {
            double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            return cdf + x * inv_sqrt2pi * std::exp(-0.5 * x * x);
        });
}

// ---- reductions / normalization ----

Tensor sum(const Tensor& t) {
    auto out = make_node({}, "sum");
    double acc = 0.0;
    for (double v : t.values()) acc += v;
    out->data[0] = acc;
    auto p = t.impl();
    finalize(out, {p}, [p](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        double gv = self.grad[0];
        for (double& x : g) x += gv;
    });
    return Tensor::wrap(out);
}

Tensor mean(const Tensor& t) {
    index_t n = t.size();
    auto out = make_node({}, "mean");
    double acc = 0.0;
    for (double v : t.values()) acc += v;
    out->data[0] = acc / static_cast<double>(n);
    auto p = t.impl();
    finalize(out, {p}, [p, n](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        double gv = self.grad[0] / static_cast<double>(n);
        for (double& x : g) x += gv;
    });
    return Tensor::wrap(out);
}

Tensor l2norm_rows(const Tensor& t) {
    index_t r = t.rows(), d = t.cols();
    auto out = make_node(drop_last(t.shape()), "l2norm");
    const double* src = t.data();
    for (index_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (index_t j = 0; j < d; ++j) acc += src[i * d + j] * src[i * d + j];
        out->data[static_cast<std::size_t>(i)] = std::sqrt(acc);
    }
    auto p = t.impl();
    finalize(out, {p}, [p, r, d](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        const double* v = p->data.data();
        for (index_t i = 0; i < r; ++i) {
            double norm = self.data[static_cast<std::size_t>(i)];
            if (norm == 0.0) continue;  // subgradient convention at the origin
            double gv = self.grad[static_cast<std::size_t>(i)] / norm;
            for (index_t j = 0; j < d; ++j)
                g[static_cast<std::size_t>(i * d + j)] += gv * v[i * d + j];
        }
    });
    return Tensor::wrap(out);
}

Tensor dot_rows(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError("dot_rows: shapes differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    index_t r = a.rows(), d = a.cols();
    auto out = make_node(drop_last(a.shape()), "dot");
    const double* av = a.data();
    const double* bv = b.data();
    for (index_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (index_t j = 0; j < d; ++j) acc += av[i * d + j] * bv[i * d + j];
        out->data[static_cast<std::size_t>(i)] = acc;
    }
    auto pa = a.impl();
    auto pb = b.impl();
    finalize(out, {pa, pb}, [pa, pb, r, d](Node& self) {
        const double* x = pa->data.data();
        const double* y = pb->data.data();
        if (pa->requires_grad) {
            auto& g = pa->ensure_grad();
            for (index_t i = 0; i < r; ++i) {
                double gv = self.grad[static_cast<std::size_t>(i)];
                for (index_t j = 0; j < d; ++j) g[static_cast<std::size_t>(i * d + j)] += gv * y[i * d + j];
            }
        }
        if (pb->requires_grad) {
            auto& g = pb->ensure_grad();
            for (index_t i = 0; i < r; ++i) {
                double gv = self.grad[static_cast<std::size_t>(i)];
                for (index_t j = 0; j < d; ++j) g[static_cast<std::size_t>(i * d + j)] += gv * x[i * d + j];
            }
        }
    });
    return Tensor::wrap(out);
}

Tensor softmax(const Tensor& t) {
    index_t r = t.rows(), d = t.cols();
    if (d < 1) throw ShapeError("softmax: empty last axis");
    auto out = make_node(t.shape(), "softmax");
    const double* src = t.data();
    for (index_t i = 0; i < r * d; ++i)
        if (!std::isfinite(src[i])) throw NumericError("softmax: non-finite input");
    for (index_t i = 0; i < r; ++i) {
        double mx = src[i * d];
        for (index_t j = 1; j < d; ++j) mx = std::max(mx, src[i * d + j]);
        double total = 0.0;
        for (index_t j = 0; j < d; ++j) {
            double e = std::exp(src[i * d + j] - mx);
            out->data[static_cast<std::size_t>(i * d + j)] = e;
            total += e;
        }
        for (index_t j = 0; j < d; ++j) out->data[static_cast<std::size_t>(i * d + j)] /= total;
    }
    auto p = t.impl();
    finalize(out, {p}, [p, r, d](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        const double* y = self.data.data();
        for (index_t i = 0; i < r; ++i) {
            double dot = 0.0;
            for (index_t j = 0; j < d; ++j)
                dot += self.grad[static_cast<std::size_t>(i * d + j)] * y[i * d + j];
            for (index_t j = 0; j < d; ++j)
                g[static_cast<std::size_t>(i * d + j)] +=
                    y[i * d + j] * (self.grad[static_cast<std::size_t>(i * d + j)] - dot);
        }
    });
    return Tensor::wrap(out);
}

Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps) {
    index_t r = x.rows(), d = x.cols();
    if (gain.size() != d || shift.size() != d)
        throw ShapeError("layernorm: gain/shift must have " + std::to_string(d) + " elements");
    auto out = make_node(x.shape(), "layernorm");
    std::vector<double> xhat(static_cast<std::size_t>(r * d));
    std::vector<double> rstd(static_cast<std::size_t>(r));
    const double* src = x.data();
    const double* gv = gain.data();
    const double* sv = shift.data();
    for (index_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (index_t j = 0; j < d; ++j) mu += src[i * d + j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (index_t j = 0; j < d; ++j) {
            double c = src[i * d + j] - mu;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double rs = 1.0 / std::sqrt(var + eps);
        rstd[static_cast<std::size_t>(i)] = rs;
        for (index_t j = 0; j < d; ++j) {
            double h = (src[i * d + j] - mu) * rs;
            xhat[static_cast<std::size_t>(i * d + j)] = h;
            out->data[static_cast<std::size_t>(i * d + j)] = gv[j] * h + sv[j];
        }
    }
    auto px = x.impl();
    auto pg = gain.impl();
    auto ps = shift.impl();
    finalize(out, {px, pg, ps},
             [px, pg, ps, r, d, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
                 const double* gw = pg->data.data();
                 for (index_t i = 0; i < r; ++i) {
                     const double* grow = self.grad.data() + i * d;
                     const double* hrow = xhat.data() + i * d;
                     if (px->requires_grad) {
                         auto& gx = px->ensure_grad();
                         double m1 = 0.0, m2 = 0.0;
                         for (index_t j = 0; j < d; ++j) {
                             double dh = grow[j] * gw[j];
                             m1 += dh;
                             m2 += dh * hrow[j];
                         }
                         m1 /= static_cast<double>(d);
                         m2 /= static_cast<double>(d);
                         double rs = rstd[static_cast<std::size_t>(i)];
                         for (index_t j = 0; j < d; ++j) {
                             double dh = grow[j] * gw[j];
                             gx[static_cast<std::size_t>(i * d + j)] += rs * (dh - m1 - hrow[j] * m2);
                         }
                     }
                     if (pg->requires_grad) {
                         auto& gg = pg->ensure_grad();
                         for (index_t j = 0; j < d; ++j)
                             gg[static_cast<std::size_t>(j)] += grow[j] * hrow[j];
                     }
                     if (ps->requires_grad) {
                         auto& gs = ps->ensure_grad();
                         for (index_t j = 0; j < d; ++j) gs[static_cast<std::size_t>(j)] += grow[j];
                     }
                 }
             });
    return Tensor::wrap(out);
}

Tensor cross_entropy(const Tensor& logits, const std::vector<index_t>& labels) {
    if (logits.rank() != 2)
        throw ShapeError("cross_entropy: expected rank-2 logits, got " + shape_str(logits.shape()));
    index_t n = logits.rows(), k = logits.cols();
    if (static_cast<index_t>(labels.size()) != n)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(n) + " rows");
    for (index_t lab : labels)
        if (lab < 0 || lab >= k)
            throw UsageError("cross_entropy: label " + std::to_string(lab) + " out of range [0, " +
                             std::to_string(k) + ")");
    auto out = make_node({}, "cross_entropy");
    std::vector<double> probs(static_cast<std::size_t>(n * k));
    const double* src = logits.data();
    double total = 0.0;
    for (index_t i = 0; i < n; ++i) {
        double mx = src[i * k];
        for (index_t j = 1; j < k; ++j) mx = std::max(mx, src[i * k + j]);
        double z = 0.0;
        for (index_t j = 0; j < k; ++j) z += std::exp(src[i * k + j] - mx);
        double lse = mx + std::log(z);
        total += lse - src[i * k + labels[static_cast<std::size_t>(i)]];
        for (index_t j = 0; j < k; ++j)
            probs[static_cast<std::size_t>(i * k + j)] = std::exp(src[i * k + j] - lse);
    }
    out->data[0] = total / static_cast<double>(n);
    auto p = logits.impl();
    finalize(out, {p}, [p, n, k, labels, probs = std::move(probs)](Node& self) {
        if (!p->requires_grad) return;
        auto& g = p->ensure_grad();
        double gv = self.grad[0] / static_cast<double>(n);
        for (index_t i = 0; i < n; ++i) {
            for (index_t j = 0; j < k; ++j)
                g[static_cast<std::size_t>(i * k + j)] += gv * probs[static_cast<std::size_t>(i * k + j)];
            g[static_cast<std::size_t>(i * k + labels[static_cast<std::size_t>(i)])] -= gv;
        }
    });
    return Tensor::wrap(out);
}

}  // namespace karma::nd
