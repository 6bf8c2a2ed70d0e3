#include <cmath>

#include "doctest.h"
#include "karma/trainer.hpp"
#include "support.hpp"

using namespace karma;
namespace nd = karma::nd;

namespace {

synth::GenParams tiny_gen(std::int64_t tiles = 8) {
    synth::GenParams p;
    p.tiles = tiles;
    p.height = 8;
    p.width = 8;
    p.bands = 6;
    p.endmembers = 3;
    p.concentration = 0.5;
    p.noise_sigma = 0.0;
    p.seed = 404;
    return p;
}

train::TrainConfig tiny_train(std::int64_t epochs) {
    train::TrainConfig cfg;
    cfg.base_lr = 2e-3;
    cfg.epochs = epochs;
    cfg.batch_size = 4;
    cfg.seed = 5;
    cfg.weight_decay = 0.0;
    cfg.val_fraction = 0.0;
    cfg.model.image_size = 8;
    cfg.model.patch_size = 2;
    cfg.model.bands = 6;
    cfg.model.embed_dim = 16;
    cfg.model.decoder_dim = 8;
    cfg.model.heads = 2;
    cfg.model.encoder_depth = 1;
    cfg.model.decoder_depth = 1;
    cfg.model.mask_ratio = 0.75;
    cfg.model.endmember_count = 3;
    cfg.model.mlp_ratio = 2.0;
    return cfg;
}

model::ParamStore single_param_store(double value) {
    model::ParamStore ps;
    ps.add("w", nd::Tensor::from_vector({1}, {value}, true));
    return ps;
}

}  // namespace

TEST_CASE("adamw leaves parameters alone with zero gradients and no decay") {
    auto ps = single_param_store(1.5);
    ps.at("w").zero_grad();
    train::adamw_step(ps, 0.1, 0.9, 0.95, 1e-8, 0.0);
    CHECK(ps.at("w").values()[0] == doctest::Approx(1.5));
    CHECK(ps.step == 1);
}

TEST_CASE("the first adamw step moves by exactly the learning rate") {
    auto ps = single_param_store(0.0);
    ps.at("w").grad()[0] = 1.0;
    train::adamw_step(ps, 0.01, 0.9, 0.95, 1e-12, 0.0);
    CHECK(ps.at("w").values()[0] == doctest::Approx(-0.01).epsilon(1e-9));
}

TEST_CASE("decoupled decay scales parameters by 1 - lr*wd") {
    auto ps = single_param_store(1.0);
    for (int s = 0; s < 3; ++s) {
        ps.at("w").zero_grad();
        train::adamw_step(ps, 0.01, 0.9, 0.95, 1e-8, 0.1);
    }
    CHECK(ps.at("w").values()[0] == doctest::Approx(std::pow(0.999, 3)).epsilon(1e-12));
}

TEST_CASE("adamw aborts on a non-finite gradient naming the parameter") {
    auto ps = single_param_store(1.0);
    ps.at("w").grad()[0] = std::nan("");
    try {
        train::adamw_step(ps, 0.01, 0.9, 0.95, 1e-8, 0.0);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("'w'") != std::string::npos);
    }
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    CHECK(train::cosine_lr(10, 110, 1e-3, 10) == doctest::Approx(1e-3));
    CHECK(train::cosine_lr(110, 110, 1e-3, 10) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(train::cosine_lr(60, 110, 1e-3, 10) == doctest::Approx(0.5e-3).epsilon(1e-12));
    CHECK(train::cosine_lr(0, 110, 1e-3, 10) == doctest::Approx(0.0));
    CHECK(train::cosine_lr(5, 110, 1e-3, 10) == doctest::Approx(0.5e-3));
}

TEST_CASE("gradient clipping rescales to the requested norm") {
    auto ps = single_param_store(0.0);
    ps.add("v", nd::Tensor::from_vector({2}, {0.0, 0.0}, true));
    ps.at("w").grad()[0] = 3.0;
    ps.at("v").grad()[0] = 4.0;
    double norm = train::clip_global_norm(ps, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(ps.at("w").grad()[0] == doctest::Approx(0.6));
    CHECK(ps.at("v").grad()[0] == doctest::Approx(0.8));
}

TEST_CASE("a short pretrain run halves its huber loss") {
    auto data = synth::generate_dataset(tiny_gen());
    auto cfg = tiny_train(30);
    cfg.loss.lambda1 = 1.0;
    cfg.loss.lambda2 = 0.0;
    cfg.loss.lambda3 = 0.0;
    auto result = train::pretrain(cfg, data);

    const auto& steps = result.log.steps;
    double first_epoch = 0.0, last_epoch = 0.0;
    int nf = 0, nl = 0;
    for (const auto& s : steps) {
        if (s.epoch == 0) {
            first_epoch += s.total;
            ++nf;
        }
        if (s.epoch == cfg.epochs - 1) {
            last_epoch += s.total;
            ++nl;
        }
    }
    first_epoch /= nf;
    last_epoch /= nl;
    CHECK(last_epoch < 0.5 * first_epoch);
}

TEST_CASE("identical configs give identical logs and checkpoints") {
    auto data = synth::generate_dataset(tiny_gen());
    auto cfg = tiny_train(4);
    auto a = train::pretrain(cfg, data);
    auto b = train::pretrain(cfg, data);
    REQUIRE(a.log.steps.size() == b.log.steps.size());
    for (std::size_t i = 0; i < a.log.steps.size(); ++i) {
        CHECK(a.log.steps[i].total == b.log.steps[i].total);
        CHECK(a.log.steps[i].lr == b.log.steps[i].lr);
    }
    CHECK(a.params.checksum() == b.params.checksum());
    for (const auto& name : a.params.names)
        CHECK(a.params.at(name).values() == b.params.at(name).values());
}

TEST_CASE("logged learning rates reproduce the schedule bit for bit") {
    auto data = synth::generate_dataset(tiny_gen());
    auto cfg = tiny_train(6);
    auto result = train::pretrain(cfg, data);
    std::int64_t spe = (8 + cfg.batch_size - 1) / cfg.batch_size;
    std::int64_t total = cfg.epochs * spe;
    std::int64_t warmup = static_cast<std::int64_t>(
        std::llround(cfg.resolved_warmup_epochs() * static_cast<double>(spe)));
    for (const auto& s : result.log.steps)
        CHECK(s.lr == train::cosine_lr(s.step, total, cfg.base_lr, warmup));
}

TEST_CASE("every logged total is the weighted sum of its terms") {
    auto data = synth::generate_dataset(tiny_gen());
    auto cfg = tiny_train(4);
    cfg.loss.lambda1 = 1.0;
    cfg.loss.lambda2 = 0.4;
    cfg.loss.lambda3 = 0.2;
    auto result = train::pretrain(cfg, data);
    for (const auto& s : result.log.steps) {
        CHECK(std::fabs(s.total - (cfg.loss.lambda1 * s.huber + cfg.loss.lambda2 * s.sam +
                                   cfg.loss.lambda3 * s.phys)) <= 1e-12);
        CHECK(std::fabs(s.huber_weighted - cfg.loss.lambda1 * s.huber) <= 1e-15);
    }
}

TEST_CASE("resume reproduces the uninterrupted run bit-exactly") {
    testsupport::TempDir dir("resume");
    auto data = synth::generate_dataset(tiny_gen());
    auto cfg = tiny_train(6);
    cfg.checkpoint_every = 3;

    auto full = train::pretrain(cfg, data, dir / "full");
    auto resumed = train::pretrain(cfg, data, dir / "resumed",
                                   dir.path() / "full" / "ckpt_epoch_00003.kckp");

    CHECK(testsupport::read_bytes(dir.path() / "full" / "final.kckp") ==
          testsupport::read_bytes(dir.path() / "resumed" / "final.kckp"));

    // the resumed log's first step matches the corresponding full-run step
    REQUIRE(!resumed.log.steps.empty());
    const auto& first_resumed = resumed.log.steps.front();
    bool found = false;
    for (const auto& s : full.log.steps) {
        if (s.step == first_resumed.step) {
            CHECK(s.total == first_resumed.total);
            CHECK(s.lr == first_resumed.lr);
            found = true;
        }
    }
    CHECK(found);
}

TEST_CASE("training aborts on divergence instead of limping on") {
    auto data = synth::generate_dataset(tiny_gen());
    auto cfg = tiny_train(30);
    cfg.base_lr = 1e6;
    cfg.clip_norm = 0.0;  // let it blow up
    CHECK_THROWS_AS(train::pretrain(cfg, data), NumericError);
}

TEST_CASE("patch labels take the pixel majority with low-index ties") {
    // 4x4 image, patch 2 -> four patches
    std::vector<int> labels{0, 0, 1, 1,   //
                            0, 1, 1, 1,   //
                            2, 2, 0, 1,   //
                            2, 0, 1, 0};
    auto patches = train::patch_labels(labels, 4, 4, 2);
    CHECK(patches.size() == 4);
    CHECK(patches[0] == 0);  // 3 zeros, 1 one
    CHECK(patches[1] == 1);  // 4 ones
    CHECK(patches[2] == 2);  // 3 twos, 1 zero
    CHECK(patches[3] == 0);  // 2-2 tie, lowest index wins
}

TEST_CASE("the downstream pass keeps the encoder frozen") {
    auto data = synth::generate_dataset(tiny_gen(8));
    auto cfg = tiny_train(2);
    cfg.downstream.epochs = 3;
    cfg.downstream.val_fraction = 0.25;
    auto encoder = model::init_params(cfg.model, 77);
    auto before = encoder.checksum();
    auto result = train::train_downstream(encoder, cfg, data);
    CHECK(result.encoder_checksum_before == before);
    CHECK(result.encoder_checksum_after == before);
    CHECK(result.overall_top1 >= 0.0);
    CHECK(result.majority_top1 > 0.0);
}
