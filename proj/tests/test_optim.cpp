#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dome/optim.hpp"

using namespace dome;
using T = Tensor<double>;

namespace {

std::string tmp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("one adamw step matches the hand-evaluated update") {
    ParameterStore<double> store;
    auto p = store.add("p", T::from({1}, {1.0}, true));
    p.grad()[0] = 1.0;
    AdamWConfig cfg;
    cfg.lr = 1e-3;
    cfg.weight_decay = 0.0;
    store.adamw_step(cfg);
    // bias-corrected m_hat = v_hat = 1 => p = 1 - lr / (1 + eps)
    REQUIRE(p.values()[0] == Catch::Approx(0.999).margin(1e-8));
    REQUIRE(store.step_count() == 1);
}

TEST_CASE("decoupled weight decay shrinks parameters independently of the gradient") {
    ParameterStore<double> store;
    auto p = store.add("p", T::from({1}, {2.0}, true));
    p.grad()[0] = 0.0;
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.5;
    store.adamw_step(cfg);
    // zero gradient: update is lr * wd * p only
    REQUIRE(p.values()[0] == Catch::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("adamw rejects nonpositive learning rates") {
    ParameterStore<double> store;
    store.add("p", T::zeros({2}, true));
    AdamWConfig cfg;
    cfg.lr = 0.0;
    REQUIRE_THROWS_AS(store.adamw_step(cfg), std::invalid_argument);
    cfg.lr = -1.0;
    REQUIRE_THROWS_AS(store.adamw_step(cfg), std::invalid_argument);
}

TEST_CASE("ema shadows track and swap") {
    ParameterStore<double> store;
    auto p = store.add("p", T::from({2}, {1.0, -2.0}, true));

    store.ema_update(1.0);  // decay 1: shadow unchanged (stays at init copy)
    const auto before = p.values();
    store.ema_update(0.5);
    // shadow started equal to the init values, so a 0.5 update keeps it equal
    store.swap_ema();
    REQUIRE(p.values() == before);

    store.swap_ema();
    p.values() = {3.0, 4.0};
    store.ema_update(0.0);  // decay 0: shadow = params
    store.swap_ema();
    REQUIRE(p.values() == std::vector<double>({3.0, 4.0}));

    REQUIRE_THROWS_AS(store.ema_update(1.5), std::invalid_argument);
}

TEST_CASE("cosine schedule endpoints and midpoint") {
    REQUIRE(cosine_lr(0, 100, 1e-3) == Catch::Approx(1e-3));
    REQUIRE(cosine_lr(100, 100, 1e-3) == Catch::Approx(0.0).margin(1e-18));
    REQUIRE(cosine_lr(50, 100, 1e-3) == Catch::Approx(0.5e-3));
    REQUIRE(cosine_lr(100, 100, 1e-3, 1e-5) == Catch::Approx(1e-5));
    REQUIRE(cosine_lr(0, 100, 1e-3, 1e-5) == Catch::Approx(1e-3));
}

TEST_CASE("duplicate parameter names are rejected") {
    ParameterStore<double> store;
    store.add("w", T::zeros({1}, true));
    REQUIRE_THROWS_AS(store.add("w", T::zeros({1}, true)), std::invalid_argument);
    REQUIRE_THROWS_AS(store.get("missing"), std::invalid_argument);
}

TEST_CASE("iteration order is by name") {
    ParameterStore<double> store;
    store.add("b", T::zeros({1}, true));
    store.add("a", T::zeros({1}, true));
    store.add("c", T::zeros({1}, true));
    std::vector<std::string> seen;
    store.for_each([&](const std::string& n, T&) { seen.push_back(n); });
    REQUIRE(seen == std::vector<std::string>({"a", "b", "c"}));
}

TEST_CASE("checkpoint round trip preserves values and ema shadows") {
    const std::string path = tmp_path("dome_test_opt.ckpt");
    ParameterStore<float> store;
    auto w = store.add("layer/w", Tensor<float>::from({2, 2}, {1, 2, 3, 4}, true));
    store.add("layer/b", Tensor<float>::from({2}, {-1, 5}, true));
    w.grad().assign(4, 1.0f);
    AdamWConfig cfg;
    store.adamw_step(cfg);
    store.ema_update(0.5);
    store.save(path);

    ParameterStore<float> other;
    other.add("layer/w", Tensor<float>::zeros({2, 2}, true));
    other.add("layer/b", Tensor<float>::zeros({2}, true));
    other.load(path);
    REQUIRE(other.get("layer/w").values() == store.get("layer/w").values());
    REQUIRE(other.get("layer/b").values() == store.get("layer/b").values());
    other.swap_ema();
    store.swap_ema();
    REQUIRE(other.get("layer/w").values() == store.get("layer/w").values());
    std::remove(path.c_str());
}

TEST_CASE("checkpoint error codes") {
    const std::string path = tmp_path("dome_test_bad.ckpt");
    ParameterStore<float> store;
    store.add("w", Tensor<float>::zeros({2}, true));

    SECTION("bad magic") {
        std::ofstream(path, std::ios::binary) << "XXXXXXXXrest";
        try {
            store.load(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.code() == FormatErrorCode::BadMagic);
        }
    }
    SECTION("bad version") {
        std::ofstream os(path, std::ios::binary);
        os << "DOMEckpt";
        write_u16(os, 999);
        write_u32(os, 0);
        os.close();
        try {
            store.load(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.code() == FormatErrorCode::BadVersion);
        }
    }
    SECTION("truncated payload") {
        store.save(path);
        auto size = std::filesystem::file_size(path);
        std::filesystem::resize_file(path, size - 3);
        try {
            store.load(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.code() == FormatErrorCode::Truncated);
        }
    }
    SECTION("unknown parameter name") {
        ParameterStore<float> other;
        other.add("w", Tensor<float>::zeros({2}, true));
        other.add("extra", Tensor<float>::zeros({1}, true));
        other.save(path);
        try {
            store.load(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.code() == FormatErrorCode::Corrupt);
        }
    }
    SECTION("shape mismatch") {
        ParameterStore<float> other;
        other.add("w", Tensor<float>::zeros({3}, true));
        other.save(path);
        try {
            store.load(path);
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.code() == FormatErrorCode::Corrupt);
        }
    }
    SECTION("missing file") {
        try {
            store.load(tmp_path("dome_does_not_exist.ckpt"));
            FAIL("expected FormatError");
        } catch (const FormatError& e) {
            REQUIRE(e.code() == FormatErrorCode::OpenFailed);
        }
    }
    std::remove(path.c_str());
}
