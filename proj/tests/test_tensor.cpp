#include <cmath>

#include "doctest.h"
#include "karma/gradcheck.hpp"
#include "karma/tensor.hpp"
#include "support.hpp"

namespace nd = karma::nd;
using nd::Tensor;

TEST_CASE("matmul identity and product values") {
    auto eye = Tensor::from_vector({2, 2}, {1, 0, 0, 1});
    auto x = Tensor::from_vector({2, 1}, {0.3, 0.7});
    auto y = nd::matmul(eye, x);
    CHECK(y.at(0, 0) == doctest::Approx(0.3));
    CHECK(y.at(1, 0) == doctest::Approx(0.7));
}

TEST_CASE("matmul backward follows the product rule") {
    auto a = Tensor::from_vector({1, 1}, {2.0}, true);
    auto b = Tensor::from_vector({1, 1}, {3.0}, true);
    auto y = nd::matmul(a, b);
    CHECK(y.item() == doctest::Approx(6.0));
    nd::backward(nd::sum(y));
    CHECK(a.grad()[0] == doctest::Approx(3.0));
    CHECK(b.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("matmul gradient matches finite differences tightly") {
    auto a = testsupport::random_tensor({4, 3}, 101, -2.0, 2.0, true);
    auto b = testsupport::random_tensor({3, 2}, 102, -2.0, 2.0, true);
    auto w = testsupport::random_tensor({4, 2}, 103, -1.0, 1.0);
    auto fn = [&] { return nd::sum(nd::mul(nd::matmul(a, b), w)); };
    double err = karma::gradcheck::check_scalar_fn(fn, {a, b});
    CHECK(err < 1e-6);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor::zeros({4, 3});
    auto b = Tensor::zeros({2, 5});
    try {
        nd::matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const karma::ShapeError& e) {
        std::string msg = e.what();
        CHECK(msg.find("4x3") != std::string::npos);
        CHECK(msg.find("2x5") != std::string::npos);
    }
}

TEST_CASE("softmax of zeros is uniform") {
    auto y = nd::softmax(Tensor::zeros({4}));
    for (int i = 0; i < 4; ++i) CHECK(y.flat(i) == doctest::Approx(0.25).epsilon(1e-12));
}

TEST_CASE("softmax is stable against huge logits") {
    auto y = nd::softmax(Tensor::from_vector({2}, {1000.0, 0.0}));
    CHECK(std::fabs(y.flat(0) - 1.0) < 1e-12);
    CHECK(std::fabs(y.flat(1)) < 1e-12);
}

TEST_CASE("softmax rejects non-finite input") {
    auto bad = Tensor::from_vector({2}, {std::nan(""), 0.0});
    CHECK_THROWS_AS(nd::softmax(bad), karma::NumericError);
}

TEST_CASE("softmax rows stay on the simplex for random inputs") {
    for (std::uint64_t trial = 0; trial < 50; ++trial) {
        auto x = testsupport::random_tensor({8, 5}, 200 + trial, -30.0, 30.0);
        auto y = nd::softmax(x);
        for (nd::index_t r = 0; r < 8; ++r) {
            double total = 0.0;
            for (nd::index_t c = 0; c < 5; ++c) {
                CHECK(y.at(r, c) >= 0.0);
                total += y.at(r, c);
            }
            CHECK(std::fabs(total - 1.0) <= 1e-6);
        }
    }
}

TEST_CASE("softmax gradient matches finite differences") {
    auto x = testsupport::random_tensor({3, 5}, 300, -2.0, 2.0, true);
    auto w = testsupport::random_tensor({3, 5}, 301, -1.0, 1.0);
    auto fn = [&] { return nd::sum(nd::mul(nd::softmax(x), w)); };
    CHECK(karma::gradcheck::check_scalar_fn(fn, {x}) < 1e-6);
}

TEST_CASE("l2norm of a 3-4-5 triangle") {
    auto v = Tensor::from_vector({2}, {3.0, 4.0});
    CHECK(nd::l2norm_rows(v).item() == doctest::Approx(5.0));
}

TEST_CASE("arccos at the clamp boundary stays finite") {
    auto x = Tensor::from_vector({1}, {1.0 - nd::kArccosClamp}, true);
    auto y = nd::arccos(x);
    CHECK(std::isfinite(y.item()));
    nd::backward(nd::sum(y));
    CHECK(std::isfinite(x.grad()[0]));
    CHECK(x.grad()[0] != 0.0);

    // Past the boundary the clamp is flat.
    auto far = Tensor::from_vector({1}, {1.5}, true);
    auto y2 = nd::arccos(far);
    CHECK(std::isfinite(y2.item()));
    nd::backward(nd::sum(y2));
    CHECK(far.grad()[0] == 0.0);
}

TEST_CASE("division by exact zero raises a numeric error") {
    auto a = Tensor::from_vector({2}, {1.0, 2.0});
    auto b = Tensor::from_vector({2}, {1.0, 0.0});
    CHECK_THROWS_AS(nd::div(a, b), karma::NumericError);
}

TEST_CASE("every differentiable op passes the finite-difference suite") {
    auto report = karma::gradcheck::run_suite(7);
    for (const auto& op : report.ops) {
        INFO(op.op);
        CHECK(op.max_rel_err < 1e-6);
    }
    CHECK(report.end_to_end < 1e-4);
    CHECK(report.pass());
}

TEST_CASE("backward of a plain sum is all ones") {
    auto x = Tensor::from_vector({3}, {5.0, -1.0, 2.0}, true);
    nd::backward(nd::sum(x));
    for (int i = 0; i < 3; ++i) CHECK(x.grad()[static_cast<std::size_t>(i)] == doctest::Approx(1.0));
}

TEST_CASE("backward through an elementwise square") {
    auto x = Tensor::from_vector({2}, {1.0, 2.0}, true);
    nd::backward(nd::sum(nd::mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
    CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward requires a scalar root") {
    auto x = Tensor::from_vector({2}, {1.0, 2.0}, true);
    auto y = nd::mul(x, 2.0);
    CHECK_THROWS_AS(nd::backward(y), karma::UsageError);
}

TEST_CASE("repeated backward accumulates leaf gradients") {
    auto x = Tensor::from_vector({2}, {1.0, 2.0}, true);
    auto root = nd::sum(nd::mul(x, x));
    auto graph = nd::Graph::from_root(root);
    graph.backward();
    graph.backward();
    CHECK(x.grad()[0] == doctest::Approx(4.0));
    CHECK(x.grad()[1] == doctest::Approx(8.0));
}

TEST_CASE("diamond-shaped graphs count each path once") {
    // y = x + x: gradient is exactly 2 only if the add node runs once.
    auto x = Tensor::from_vector({1}, {3.0}, true);
    nd::backward(nd::sum(nd::add(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(2.0));
}

TEST_CASE("backward is linear in the root") {
    const double alpha = 0.37, beta = -1.21;
    auto x = testsupport::random_tensor({6}, 401, -2.0, 2.0, true);

    auto make_f = [&] { return nd::sum(nd::mul(x, x)); };
    auto make_g = [&] { return nd::sum(nd::gelu(x)); };

    x.zero_grad();
    nd::backward(make_f());
    std::vector<double> gf = x.grad();
    x.zero_grad();
    nd::backward(make_g());
    std::vector<double> gg = x.grad();
    x.zero_grad();
    nd::backward(nd::add(nd::mul(make_f(), alpha), nd::mul(make_g(), beta)));
    for (std::size_t i = 0; i < gf.size(); ++i)
        CHECK(std::fabs(x.grad()[i] - (alpha * gf[i] + beta * gg[i])) <= 1e-10);
}

TEST_CASE("graph linearization visits each node exactly once") {
    auto x = Tensor::from_vector({2}, {1.0, 2.0}, true);
    auto shared = nd::mul(x, x);
    auto root = nd::sum(nd::add(shared, shared));
    auto graph = nd::Graph::from_root(root);
    // leaf + mul + add + sum: the shared node appears once.
    CHECK(graph.node_count() == 4);
}

TEST_CASE("broadcasting covers rows and scalars") {
    auto m = Tensor::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    auto row = Tensor::from_vector({3}, {10, 20, 30}, true);
    auto y = nd::add(m, row);
    CHECK(y.at(1, 2) == doctest::Approx(36.0));
    nd::backward(nd::sum(y));
    CHECK(row.grad()[0] == doctest::Approx(2.0));  // reduced over both rows

    auto z = nd::mul(m, Tensor::scalar(2.0));
    CHECK(z.at(0, 1) == doctest::Approx(4.0));
}

TEST_CASE("gather and scatter move whole rows") {
    auto m = testsupport::random_tensor({5, 3}, 500, -1.0, 1.0);
    auto picked = nd::gather_rows(m, {4, 2, 0});
    CHECK(picked.at(0, 1) == doctest::Approx(m.at(4, 1)));
    auto spread = nd::scatter_rows(5, {4, 2, 0}, picked);
    CHECK(spread.at(2, 2) == doctest::Approx(m.at(2, 2)));
    CHECK(spread.at(1, 0) == 0.0);
}

TEST_CASE("reshape rejects element-count changes") {
    CHECK_THROWS_AS(nd::reshape(Tensor::zeros({2, 3}), {4, 2}), karma::ShapeError);
}

TEST_CASE("clamp passes gradient only inside the bounds") {
    auto x = Tensor::from_vector({3}, {-2.0, 0.5, 2.0}, true);
    nd::backward(nd::sum(nd::clamp(x, -1.0, 1.0)));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 1.0);
    CHECK(x.grad()[2] == 0.0);
}

TEST_CASE("detach cuts the graph") {
    auto x = Tensor::from_vector({2}, {1.0, 2.0}, true);
    auto y = nd::detach(nd::mul(x, 3.0));
    CHECK_FALSE(y.requires_grad());
    CHECK(y.flat(1) == doctest::Approx(6.0));
}
