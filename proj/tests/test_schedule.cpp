// Noise schedule construction, forward/inverse diffusion identities, and the
// deterministic strided sampler, including recovery of a known target under
// the exact denoiser for a point-mass data distribution.

#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "dome/schedule.hpp"

using namespace dome;
using T = Tensor<double>;

TEST_CASE("alpha_bar is a strictly decreasing product that vanishes") {
    auto s = make_schedule(1000, 1e-4, 0.02, 20);
    REQUIRE(s.T == 1000);
    REQUIRE(s.beta.front() == Catch::Approx(1e-4));
    REQUIRE(s.beta.back() == Catch::Approx(0.02));
    for (int i = 1; i < 1000; ++i) {
        REQUIRE(s.alpha_bar[i] < s.alpha_bar[i - 1]);
        REQUIRE(s.beta[i] > s.beta[i - 1]);
    }
    REQUIRE(s.alpha_bar.back() < 1e-4);

    // Independent extended-precision accumulation of the same product.
    long double acc = 1.0L;
    for (int i = 0; i < 1000; ++i) {
        long double b = 1e-4L + (0.02L - 1e-4L) * i / 999.0L;
        acc *= 1.0L - b;
        REQUIRE(s.alpha_bar[i] ==
                Catch::Approx(static_cast<double>(acc)).epsilon(1e-12));
    }
}

TEST_CASE("degenerate single-step schedule") {
    auto s = make_schedule(1, 0.1, 0.2, 1);
    REQUIRE(s.beta == std::vector<double>{0.1});
    REQUIRE(s.alpha_bar == std::vector<double>{0.9});
    REQUIRE(s.inference_steps == std::vector<int>{0});
}

TEST_CASE("inference stride covers both endpoints") {
    auto s = make_schedule(1000, 1e-4, 0.02, 20);
    REQUIRE(s.inference_steps.size() == 20);
    REQUIRE(s.inference_steps.front() == 999);
    REQUIRE(s.inference_steps.back() == 0);
    for (size_t k = 1; k < s.inference_steps.size(); ++k)
        REQUIRE(s.inference_steps[k] < s.inference_steps[k - 1]);
    // Interior points sit on the rounded uniform grid over [0, T-1].
    REQUIRE(s.inference_steps[10] == static_cast<int>(std::lround(9.0 * 999.0 / 19.0)));

    auto one = make_schedule(1000, 1e-4, 0.02, 1);
    REQUIRE(one.inference_steps == std::vector<int>{999});
}

TEST_CASE("make_schedule validates its ranges") {
    REQUIRE_THROWS_AS(make_schedule(0, 1e-4, 0.02, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 0.0, 0.02, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 0.03, 0.02, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 1e-4, 1.0, 1), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 1e-4, 0.02, 0), std::invalid_argument);
    REQUIRE_THROWS_AS(make_schedule(10, 1e-4, 0.02, 11), std::invalid_argument);
}

TEST_CASE("q_sample mixes by the square-root weights") {
    DiffusionSchedule s;
    s.T = 1;
    s.beta = {0.75};
    s.alpha_bar = {0.25};
    s.inference_steps = {0};
    auto x0 = T::from({3}, {1.0, -2.0, 0.5});
    auto eps = T::from({3}, {2.0, 0.0, -4.0});
    auto x = q_sample(x0, 0, eps, s);
    double c = std::sqrt(0.75);
    REQUIRE(x.values()[0] == Catch::Approx(0.5 * 1.0 + c * 2.0));
    REQUIRE(x.values()[1] == Catch::Approx(-1.0));
    REQUIRE(x.values()[2] == Catch::Approx(0.25 - 4.0 * c));

    REQUIRE_THROWS_AS(q_sample(x0, 1, eps, s), std::out_of_range);
    REQUIRE_THROWS_AS(q_sample(x0, -1, eps, s), std::out_of_range);
}

TEST_CASE("predict_x0 inverts q_sample") {
    auto s = make_schedule(1000, 1e-4, 0.02, 20);
    Rng rng(40);
    auto x0 = T::randn({4, 5}, rng);
    auto eps = T::randn({4, 5}, rng);
    for (int i : {0, 137, 500, 999}) {
        auto x = q_sample(x0, i, eps, s);
        auto back = predict_x0(x, eps, i, s);
        for (size_t j = 0; j < x0.numel(); ++j)
            REQUIRE(back.values()[j] == Catch::Approx(x0.values()[j]).margin(1e-6));
    }
}

TEST_CASE("predict_x0 refuses a vanished alpha_bar") {
    auto s = make_schedule(2000, 1e-4, 0.05, 10);
    REQUIRE(s.alpha_bar.back() < 1e-12);
    Rng rng(41);
    auto x = T::randn({2}, rng);
    auto eps = T::randn({2}, rng);
    REQUIRE_THROWS_AS(predict_x0(x, eps, 1999, s), std::domain_error);
}

TEST_CASE("sample_loop pins masked frames bit-identically") {
    auto s = make_schedule(50, 1e-4, 0.02, 8);
    Rng rng(42);
    auto z_ctx = T::randn({3, 4}, rng);
    auto model = [](T x, int, int) { return T::zeros(x.shape()); };

    std::vector<bool> mask = {true, false, true};
    Rng srng(43);
    auto out = sample_loop(model, z_ctx, mask, 0, s, srng);
    for (int f : {0, 2})
        for (int j = 0; j < 4; ++j)
            REQUIRE(out.values()[f * 4 + j] == z_ctx.values()[f * 4 + j]);

    std::vector<bool> all(3, true);
    Rng srng2(44);
    auto pinned = sample_loop(model, z_ctx, all, 0, s, srng2);
    REQUIRE(pinned.values() == z_ctx.values());

    Rng srng3(45);
    REQUIRE_THROWS_AS(sample_loop(model, z_ctx, std::vector<bool>{true}, 0, s, srng3),
                      std::invalid_argument);
}

TEST_CASE("sample_loop is a pure function of the seed") {
    auto s = make_schedule(100, 1e-4, 0.02, 10);
    Rng rng(46);
    auto z_ctx = T::randn({2, 6}, rng);
    std::vector<bool> mask = {true, false};
    auto model = [](T x, int i, int) {
        return scale(x, 0.01 * (i + 1) / 100.0);
    };
    Rng a(47), b(47);
    auto out1 = sample_loop(model, z_ctx, mask, 0, s, a);
    auto out2 = sample_loop(model, z_ctx, mask, 0, s, b);
    REQUIRE(out1.values() == out2.values());
}

TEST_CASE("exact denoiser for a point mass recovers the target") {
    auto s = make_schedule(1000, 1e-4, 0.02, 20);
    auto target = T::from({2, 3}, {0.8, -1.2, 0.3, 2.0, -0.5, 0.0});
    // For data concentrated at x*, the optimal eps prediction is
    // (x - sqrt(ab) * x*) / sqrt(1 - ab); predict_x0 then returns x* exactly.
    auto model = [&](T x, int i, int) {
        double ab = s.alpha_bar[static_cast<size_t>(i)];
        return scale(add(x, scale(target, -std::sqrt(ab))), 1.0 / std::sqrt(1.0 - ab));
    };
    std::vector<bool> mask = {false, false};
    Rng rng(48);
    auto out = sample_loop(model, target, mask, 0, s, rng);
    for (size_t j = 0; j < target.numel(); ++j)
        REQUIRE(out.values()[j] == Catch::Approx(target.values()[j]).margin(1e-4));
}
