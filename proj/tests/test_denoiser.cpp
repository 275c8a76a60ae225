#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ddmec/denoiser.hpp"
#include "ddmec/diffusion.hpp"

using namespace ddmec;

TEST_CASE("time embedding basics") {
    auto e0 = time_embedding(0, 8, 1000);
    for (int k = 0; k < 4; ++k) {
        CHECK(e0[k] == 0.0);
        CHECK(e0[4 + k] == 1.0);
    }
    auto e1 = time_embedding(1, 2, 1000);
    CHECK(e1[0] == doctest::Approx(0.8414709848078965).epsilon(1e-15));
    CHECK(e1[1] == doctest::Approx(0.5403023058681398).epsilon(1e-15));

    for (int t : {1, 17, 500, 1000}) {
        auto e = time_embedding(t, 16, 1000);
        for (int k = 0; k < 8; ++k) {
            CHECK(e[k] * e[k] + e[8 + k] * e[8 + k] == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
    CHECK_THROWS_AS(time_embedding(1, 7, 1000), DataError);
    CHECK_THROWS_AS(time_embedding(-1, 8, 1000), DataError);
    CHECK_THROWS_AS(time_embedding(1001, 8, 1000), DataError);
}

TEST_CASE("denoise output shape and determinism") {
    Rng rng(3);
    DenoiserConfig cfg;
    cfg.data_dim = 3;
    cfg.hidden_dims = {16, 16};
    cfg.time_embed_dim = 8;
    Denoiser net(cfg, rng);
    Tensor x = rng.normal_tensor({5, 3});
    Tensor out1 = net.predict_value(x, 10, 1000);
    Tensor out2 = net.predict_value(x, 10, 1000);
    CHECK(out1.shape == std::vector<std::size_t>{5, 3});
    CHECK(out1.data == out2.data);

    Tensor bad = rng.normal_tensor({5, 4});
    CHECK_THROWS_AS(net.predict_value(bad, 10, 1000), DataError);
}

TEST_CASE("config validation") {
    Rng rng(1);
    DenoiserConfig cfg;
    cfg.time_embed_dim = 7;
    CHECK_THROWS_AS(Denoiser(cfg, rng), DataError);
    cfg.time_embed_dim = 8;
    cfg.hidden_dims = {};
    CHECK_THROWS_AS(Denoiser(cfg, rng), DataError);
    cfg.hidden_dims = {8};
    cfg.cond_drop_prob = 1.5;
    CHECK_THROWS_AS(Denoiser(cfg, rng), DataError);
}

TEST_CASE("conditioning neutrality at init is bitwise") {
    Rng rng(21);
    DenoiserConfig cfg;
    cfg.data_dim = 2;
    cfg.hidden_dims = {24, 24};
    cfg.time_embed_dim = 8;
    Denoiser uncond(cfg, rng);
    Denoiser cond = Denoiser::init_conditional_from_unconditional(uncond, 2);

    Tensor x = rng.normal_tensor({6, 2});
    for (int trial = 0; trial < 3; ++trial) {
        Tensor y = rng.normal_tensor({6, 2});
        Tensor with_cond = cond.predict_value(x, 37, 1000, &y);
        Tensor with_null = cond.predict_value(x, 37, 1000, nullptr);
        Tensor base = uncond.predict_value(x, 37, 1000);
        CHECK(with_cond.data == with_null.data);
        CHECK(with_cond.data == base.data);
    }
}

TEST_CASE("init_conditional_from_unconditional contracts") {
    Rng rng(8);
    DenoiserConfig cfg;
    cfg.data_dim = 3;
    cfg.hidden_dims = {10, 10};
    cfg.time_embed_dim = 6;
    Denoiser uncond(cfg, rng);

    CHECK_THROWS_AS(Denoiser::init_conditional_from_unconditional(uncond, 5), DataError);

    Denoiser cond = Denoiser::init_conditional_from_unconditional(uncond, 3);
    CHECK(cond.parameter_count() > uncond.parameter_count());
    CHECK(cond.config().conditional());

    // conditional-from-conditional is rejected
    CHECK_THROWS_AS(Denoiser::init_conditional_from_unconditional(cond, 3), DataError);
}

TEST_CASE("post-init denoising loss equals the unconditional loss on the same batch") {
    Rng rng(13);
    DenoiserConfig cfg;
    cfg.data_dim = 2;
    cfg.hidden_dims = {16};
    cfg.time_embed_dim = 8;
    Denoiser uncond(cfg, rng);
    Denoiser cond = Denoiser::init_conditional_from_unconditional(uncond, 2);
    NoiseSchedule sched = NoiseSchedule::linear(100);

    Tensor batch = rng.normal_tensor({8, 2});
    Tensor ybatch = rng.normal_tensor({8, 2});
    Rng r1(99), r2(99);
    double lu = denoising_loss(uncond, sched, batch, nullptr, 0.0, r1);
    double lc = denoising_loss(cond, sched, batch, &ybatch, 0.0, r2);
    CHECK(lu == lc);
}

TEST_CASE("smoothness: tiny input perturbations move the output very little") {
    Rng rng(31);
    DenoiserConfig cfg;
    cfg.data_dim = 4;
    cfg.hidden_dims = {32, 32};
    cfg.time_embed_dim = 16;
    Denoiser net(cfg, rng);
    Tensor x = rng.normal_tensor({1, 4});
    Tensor x2 = x;
    x2.data[1] += 1e-8;
    Tensor a = net.predict_value(x, 250, 1000);
    Tensor b = net.predict_value(x2, 250, 1000);
    double diff = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) diff += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
    CHECK(std::sqrt(diff) < 1e-4);
}

TEST_CASE("null token and injections train (grads flow when conditioning is used)") {
    Rng rng(77);
    DenoiserConfig cfg;
    cfg.data_dim = 2;
    cfg.cond_dim = 2;
    cfg.hidden_dims = {8};
    cfg.time_embed_dim = 4;
    Denoiser net(cfg, rng);
    Tensor x = rng.normal_tensor({3, 2});
    Tensor y = rng.normal_tensor({3, 2});
    Tape t;
    Denoiser::CondSpec cs;
    cs.rows = &y;
    auto out = net.predict(t, t.input(x), t.input(time_embedding_rows({5, 5, 5}, 4, 100)), cs);
    t.backward(t.sq_norm(out));
    bool enc_grads = false;
    for (const Parameter* p : static_cast<const Denoiser&>(net).parameters()) {
        if (p->name.rfind("enc.", 0) == 0) {
            for (double g : p->grad.data) {
                if (g != 0.0) enc_grads = true;
            }
        }
    }
    CHECK(enc_grads);
}

TEST_CASE("mixed per-row condition dropout routes dropped rows through the null token") {
    Rng rng(50);
    DenoiserConfig cfg;
    cfg.data_dim = 2;
    cfg.cond_dim = 2;
    cfg.hidden_dims = {12};
    cfg.time_embed_dim = 4;
    Denoiser net(cfg, rng);
    Tensor x = rng.normal_tensor({2, 2});
    Tensor y = rng.normal_tensor({2, 2});
    std::vector<bool> drop{false, true};

    Tape t;
    Denoiser::CondSpec cs;
    cs.rows = &y;
    cs.drop = &drop;
    Tensor temb = time_embedding_rows({9, 9}, 4, 100);
    Tensor mixed = t.value(net.predict(t, t.input(x), t.input(temb), cs));

    Tensor row0 = x.row_slice(0), row1 = x.row_slice(1);
    Tensor y0 = y.row_slice(0);
    Tensor kept = net.predict_value(row0, 9, 100, &y0);
    Tensor dropped = net.predict_value(row1, 9, 100, nullptr);
    for (std::size_t j = 0; j < 2; ++j) {
        CHECK(mixed.at(0, j) == doctest::Approx(kept.at(0, j)).epsilon(1e-14));
        CHECK(mixed.at(1, j) == doctest::Approx(dropped.at(0, j)).epsilon(1e-14));
    }
}
