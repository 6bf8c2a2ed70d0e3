#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "karma/error.hpp"

// Dense double-precision tensors with reverse-mode automatic differentiation.
// The operator set is exactly what the network and losses need; everything is
// 64-bit so analytic gradients can be validated against central finite
// differences.

namespace karma::nd {

using index_t = std::int64_t;
using Shape = std::vector<index_t>;

index_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // sized lazily on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this->grad and accumulates into parents' grads.
    std::function<void(Node&)> backward_rule;

    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_vector(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const;
    index_t size() const;
    index_t rank() const;
    // 2-d helpers; rank-1 tensors count as a single row.
    index_t rows() const;
    index_t cols() const;

    bool requires_grad() const;
    void set_requires_grad(bool rg);  // leaves only

    double* data();
    const double* data() const;
    std::vector<double>& values();
    const std::vector<double>& values() const;

    bool has_grad() const;
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    void zero_grad();

    double item() const;                      // scalar tensors
    double at(index_t r, index_t c) const;    // 2-d convenience
    double flat(index_t i) const { return values()[static_cast<std::size_t>(i)]; }

    // Internal node handle; needed by the graph machinery and ops.
    const std::shared_ptr<detail::Node>& impl() const { return node_; }
    static Tensor wrap(std::shared_ptr<detail::Node> node);

  private:
    std::shared_ptr<detail::Node> node_;
};

// Topologically ordered linearization of the operations reachable from a
// root. backward() walks the order in reverse exactly once, seeding the
// scalar root with gradient 1. Leaf gradients accumulate across calls;
// interior gradients are recomputed per call.
class Graph {
  public:
    static Graph from_root(const Tensor& root);
    std::size_t node_count() const { return topo_.size(); }
    void backward();

  private:
    std::shared_ptr<detail::Node> root_;
    std::vector<detail::Node*> topo_;  // dependencies first, root last
};

void backward(const Tensor& root);

// Copy of the data with no graph attached.
Tensor detach(const Tensor& t, bool requires_grad = false);

// ---- structural ops ----
Tensor reshape(const Tensor& t, Shape shape);
Tensor transpose(const Tensor& t);  // 2-d
Tensor slice_cols(const Tensor& t, index_t c0, index_t c1);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& t, std::vector<index_t> idx);
Tensor scatter_rows(index_t total_rows, std::vector<index_t> idx, const Tensor& rows);
Tensor repeat_rows(const Tensor& row, index_t n);

// ---- arithmetic ----
// Broadcasting: equal shapes, rank-1 row vectors against the last axis,
// or a single-element tensor against anything.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- elementwise ----
Tensor sqrt(const Tensor& t);
Tensor square(const Tensor& t);
Tensor abs(const Tensor& t);
Tensor clamp(const Tensor& t, double lo, double hi);
Tensor arccos(const Tensor& t);  // input clamped to [-1+eps, 1-eps]
Tensor gelu(const Tensor& t);

// Guard width for the arccos input clamp; the derivative is evaluated at the
// clamped argument, so it stays finite at the boundary.
constexpr double kArccosClamp = 1e-7;

// ---- reductions and normalization (last axis where applicable) ----
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
Tensor l2norm_rows(const Tensor& t);
Tensor dot_rows(const Tensor& a, const Tensor& b);
Tensor softmax(const Tensor& t);
Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& shift, double eps = 1e-6);
Tensor cross_entropy(const Tensor& logits, const std::vector<index_t>& labels);

namespace testing {
// Fault-injection hook: scales the upstream gradient of every node whose op
// name matches before its backward rule runs. Empty name disables.
void corrupt_backward(const std::string& op_name, double factor);
}  // namespace testing

}  // namespace karma::nd
