#include <cmath>

#include "doctest.h"
#include "karma/gradcheck.hpp"
#include "karma/model.hpp"
#include "karma/objective.hpp"
#include "support.hpp"

using namespace karma;
namespace nd = karma::nd;
using nd::Tensor;

namespace {

// One row with a chosen residual norm against a zero target.
Tensor row_with_norm(double rho, std::int64_t d = 4) {
    std::vector<double> v(static_cast<std::size_t>(d), 0.0);
    v[0] = rho;
    return Tensor::from_vector({1, d}, std::move(v));
}

}  // namespace

TEST_CASE("huber quadratic branch") {
    auto loss = objective::huber_loss(row_with_norm(0.5), Tensor::zeros({1, 4}), 1.0);
    CHECK(loss.item() == doctest::Approx(0.125).epsilon(1e-12));
}

TEST_CASE("huber linear branch") {
    auto loss = objective::huber_loss(row_with_norm(3.0), Tensor::zeros({1, 4}), 1.0);
    CHECK(loss.item() == doctest::Approx(2.5).epsilon(1e-12));
}

TEST_CASE("huber branches agree at the threshold") {
    const double delta = 0.7;
    double at = objective::huber_loss(row_with_norm(delta), Tensor::zeros({1, 4}), delta).item();
    CHECK(at == doctest::Approx(0.5 * delta * delta).epsilon(1e-12));
    // approach from both sides
    double lo = objective::huber_loss(row_with_norm(delta - 1e-9), Tensor::zeros({1, 4}), delta).item();
    double hi = objective::huber_loss(row_with_norm(delta + 1e-9), Tensor::zeros({1, 4}), delta).item();
    CHECK(std::fabs(lo - at) < 1e-8);
    CHECK(std::fabs(hi - at) < 1e-8);
}

TEST_CASE("huber is zero only at equality and never negative") {
    auto p = testsupport::random_tensor({5, 3}, 11, -1.0, 1.0);
    auto q = testsupport::random_tensor({5, 3}, 12, -1.0, 1.0);
    CHECK(objective::huber_loss(p, q, 1.0).item() > 0.0);
    CHECK(objective::huber_loss(p, nd::detach(p), 1.0).item() == 0.0);
}

TEST_CASE("elementwise huber variant matches the per-component formula") {
    auto pred = Tensor::from_vector({1, 2}, {0.5, 3.0});
    auto target = Tensor::zeros({1, 2});
    // per element: 0.5*0.25 and 3 - 0.5; mean of the two
    double expected = (0.125 + 2.5) / 2.0;
    CHECK(objective::huber_loss(pred, target, 1.0, true).item() ==
          doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("sam of identical spectra is nearly zero") {
    auto p = testsupport::random_tensor({4, 6}, 21, 0.2, 1.0);
    double v = objective::sam_loss(p, nd::detach(p), 1e-8).item();
    CHECK(v >= 0.0);
    CHECK(v <= 1e-3);
}

TEST_CASE("sam is invariant to positive rescaling") {
    auto p = testsupport::random_tensor({4, 6}, 22, 0.2, 1.0);
    auto t = testsupport::random_tensor({4, 6}, 23, 0.2, 1.0);
    double a = objective::sam_loss(p, t, 1e-8).item();
    double b = objective::sam_loss(nd::mul(p, 2.0), t, 1e-8).item();
    CHECK(std::fabs(a - b) < 1e-6);
}

TEST_CASE("sam of orthogonal spectra is pi/2") {
    auto p = Tensor::from_vector({1, 2}, {1.0, 0.0});
    auto t = Tensor::from_vector({1, 2}, {0.0, 1.0});
    CHECK(std::fabs(objective::sam_loss(p, t, 1e-8).item() - M_PI / 2.0) < 1e-6);
}

TEST_CASE("phys loss vanishes on an exact one-hot mixture") {
    auto em = synth::sample_endmembers(6, 3, 31);
    auto A = Tensor::from_vector({6, 3}, em.values);
    auto abund = Tensor::from_vector({1, 3}, {0.0, 1.0, 0.0});
    auto target = Tensor::from_vector({1, 6}, em.column(1));
    CHECK(objective::phys_loss(target, abund, A).item() == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("phys loss with a zero basis is the mean squared spectrum norm") {
    auto target = testsupport::random_tensor({3, 4}, 32, -1.0, 1.0);
    auto abund = Tensor::from_vector({3, 2}, {0.5, 0.5, 1.0, 0.0, 0.25, 0.75});
    auto A = Tensor::zeros({4, 2});
    double expected = 0.0;
    for (nd::index_t t = 0; t < 3; ++t)
        for (nd::index_t c = 0; c < 4; ++c) expected += target.at(t, c) * target.at(t, c);
    expected /= 3.0;
    CHECK(objective::phys_loss(target, abund, A).item() == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("phys loss evaluated against generator ground truth") {
    auto em = synth::sample_endmembers(6, 3, 33);
    auto A = Tensor::from_vector({6, 3}, em.values);
    std::vector<double> x{0.6, 0.3, 0.1};
    std::vector<double> r(6, 0.0);
    for (int c = 0; c < 6; ++c)
        for (int m = 0; m < 3; ++m)
            r[static_cast<std::size_t>(c)] += em.at(c, m) * x[static_cast<std::size_t>(m)];
    auto target = Tensor::from_vector({1, 6}, r);

    // at the true abundances the loss is zero
    CHECK(objective::phys_loss(target, Tensor::from_vector({1, 3}, x), A).item() ==
          doctest::Approx(0.0).epsilon(1e-12));

    // at the uniform mixture it equals the hand-computed distance
    std::vector<double> u{1.0 / 3, 1.0 / 3, 1.0 / 3};
    double expected = 0.0;
    for (int c = 0; c < 6; ++c) {
        double v = 0.0;
        for (int m = 0; m < 3; ++m) v += em.at(c, m) / 3.0;
        expected += (r[static_cast<std::size_t>(c)] - v) * (r[static_cast<std::size_t>(c)] - v);
    }
    CHECK(objective::phys_loss(target, Tensor::from_vector({1, 3}, u), A).item() ==
          doctest::Approx(expected).epsilon(1e-9));
}

namespace {

struct TotalLossFixture {
    model::ModelConfig cfg;
    model::ParamStore params;
    Tensor tokens;
    model::MaskPlan plan;
    objective::LossTargets targets;

    TotalLossFixture() {
        cfg.image_size = 4;
        cfg.patch_size = 2;
        cfg.bands = 3;
        cfg.embed_dim = 16;
        cfg.decoder_dim = 8;
        cfg.heads = 2;
        cfg.encoder_depth = 1;
        cfg.decoder_depth = 1;
        cfg.mask_ratio = 0.5;
        cfg.endmember_count = 3;
        cfg.mlp_ratio = 2.0;
        params = model::init_params(cfg, 44);
        auto cube = testsupport::random_cube(4, 4, 3, 45);
        tokens = model::patchify(cube, 2);
        plan = model::make_mask(cfg.token_count(), cfg.mask_ratio, 44, 0);
        targets.token_pixels = tokens;
        targets.token_spectra = model::token_mean_spectra(tokens, cfg.bands);
    }

    objective::LossReport run(objective::LossWeights w,
                              objective::LossScope scope = objective::LossScope{}) {
        auto fwd = model::forward(tokens, plan, params, cfg);
        return objective::total_loss(fwd, targets, w, scope, plan);
    }
};

}  // namespace

TEST_CASE("total loss with only huber reproduces the plain baseline") {
    TotalLossFixture fx;
    objective::LossWeights w;
    w.lambda1 = 1.0;
    w.lambda2 = 0.0;
    w.lambda3 = 0.0;
    auto rep = fx.run(w);
    CHECK(rep.total_value == doctest::Approx(rep.huber).epsilon(1e-12));
    CHECK(rep.sam_weighted == 0.0);
    CHECK(rep.phys_weighted == 0.0);
}

TEST_CASE("all-zero weights give a zero loss with zero gradients") {
    TotalLossFixture fx;
    objective::LossWeights w;
    w.lambda1 = 0.0;
    w.lambda2 = 0.0;
    w.lambda3 = 0.0;
    auto rep = fx.run(w);
    CHECK(rep.total_value == 0.0);
    fx.params.zero_grads();
    nd::backward(rep.total);
    for (const auto& name : fx.params.trainable_names())
        for (double g : fx.params.at(name).grad()) CHECK(g == 0.0);
}

TEST_CASE("total equals the weighted sum of the terms") {
    TotalLossFixture fx;
    objective::LossWeights w;
    w.lambda1 = 1.0;
    w.lambda2 = 1.0;
    w.lambda3 = 1.0;
    auto rep = fx.run(w);
    CHECK(std::fabs(rep.total_value - (rep.huber + rep.sam + rep.phys)) <= 1e-12);

    w.lambda1 = 0.3;
    w.lambda2 = 1.7;
    w.lambda3 = 0.9;
    auto rep2 = fx.run(w);
    CHECK(std::fabs(rep2.total_value -
                    (0.3 * rep2.huber + 1.7 * rep2.sam + 0.9 * rep2.phys)) <= 1e-12);
}

TEST_CASE("increasing lambda3 never shrinks the weighted phys contribution") {
    TotalLossFixture fx;
    objective::LossWeights w;
    double prev = -1.0;
    for (double l3 : {0.0, 0.1, 0.5, 2.0}) {
        w.lambda3 = l3;
        auto rep = fx.run(w);
        CHECK(rep.phys_weighted >= prev);
        prev = rep.phys_weighted;
    }
}

TEST_CASE("scope flags change which rows are supervised") {
    TotalLossFixture fx;
    objective::LossWeights w;
    objective::LossScope masked_only;
    objective::LossScope everything;
    everything.pixel_masked_only = false;
    everything.phys_all_tokens = true;
    auto a = fx.run(w, masked_only);
    auto b = fx.run(w, everything);
    // different row sets give different losses for a random model
    CHECK(a.huber != b.huber);
}

TEST_CASE("the joint objective passes a finite-difference check") {
    TotalLossFixture fx;
    objective::LossWeights w;
    w.lambda1 = 1.0;
    w.lambda2 = 1.0;
    w.lambda3 = 1.0;
    std::vector<Tensor> leaves;
    for (const auto& name : fx.params.trainable_names()) leaves.push_back(fx.params.at(name));
    auto fn = [&] { return fx.run(w).total; };
    CHECK(karma::gradcheck::check_scalar_fn(fn, leaves) < 1e-4);
}
