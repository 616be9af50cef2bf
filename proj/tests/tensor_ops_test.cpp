#include <doctest.h>

#include <cmath>

#include "sceneseg/ops.hpp"
#include "sceneseg/parallel.hpp"
#include "test_support.hpp"

using namespace sceneseg;

TEST_SUITE("conv2d") {
    TEST_CASE("identity kernel reproduces the input") {
        Tensor input({1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
        Tensor kernel(1, 1, 3, 3);
        kernel.at(0, 0, 1, 1) = 1.0f;
        const Tensor out = ops::conv2d_value(input, kernel, {0.0f}, 1);
        REQUIRE(out.shape() == input.shape());
        for (size_t i = 0; i < out.count(); ++i)
            CHECK(out.values()[i] == doctest::Approx(input.values()[i]));
    }

    TEST_CASE("all-ones kernel on a 2x2 input sums every value") {
        Tensor input({1, 1, 2, 2}, {1, 2, 3, 4});
        Tensor kernel(1, 1, 3, 3);
        kernel.fill(1.0f);
        const Tensor out = ops::conv2d_value(input, kernel, {0.0f}, 1);
        // the padded 3x3 window covers the whole 2x2 input at every position
        const Tensor oracle = testsup::naive_conv2d(input, kernel, {0.0f}, 1);
        for (size_t i = 0; i < out.count(); ++i) {
            CHECK(out.values()[i] == doctest::Approx(10.0f));
            CHECK(oracle.values()[i] == doctest::Approx(10.0f));
        }
    }

    TEST_CASE("matches the direct-loop oracle on a random case") {
        const auto input = testsup::random_tensor<float>(2, 3, 8, 8, 11);
        const auto weights = testsup::random_tensor<float>(4, 3, 3, 3, 12);
        std::vector<float> bias = {0.1f, -0.2f, 0.3f, 0.0f};
        const Tensor fast = ops::conv2d_value(input, weights, bias, 1);
        const Tensor slow = testsup::naive_conv2d(input, weights, bias, 1);
        double max_diff = 0.0;
        for (size_t i = 0; i < fast.count(); ++i)
            max_diff = std::max(max_diff,
                                std::abs(double(fast.values()[i]) - double(slow.values()[i])));
        CHECK(max_diff < 1e-5);
    }

    TEST_CASE("matches the oracle on 100 random shapes with dims <= 8") {
        Rng shapes(99);
        for (int iter = 0; iter < 100; ++iter) {
            const size_t n = 1 + shapes.uniform_index(2);
            const size_t in_c = 1 + shapes.uniform_index(4);
            const size_t out_c = 1 + shapes.uniform_index(5);
            const bool one_by_one = shapes.uniform_index(4) == 0;
            const size_t k = one_by_one ? 1 : 3;
            const size_t pad = one_by_one ? 0 : 1;
            const size_t h = 3 + shapes.uniform_index(6);  // 3..8
            const size_t w = 3 + shapes.uniform_index(6);
            const auto input = testsup::random_tensor<float>(n, in_c, h, w, 1000 + iter);
            const auto weights = testsup::random_tensor<float>(out_c, in_c, k, k, 2000 + iter);
            std::vector<float> bias(out_c);
            Rng brng(3000 + iter);
            for (auto& b : bias) b = float(brng.normal());
            const Tensor fast = ops::conv2d_value(input, weights, bias, pad);
            const Tensor slow = testsup::naive_conv2d(input, weights, bias, pad);
            REQUIRE(fast.shape() == slow.shape());
            double max_diff = 0.0;
            for (size_t i = 0; i < fast.count(); ++i)
                max_diff = std::max(max_diff,
                                    std::abs(double(fast.values()[i]) - double(slow.values()[i])));
            CHECK(max_diff < 1e-5);
        }
    }

    TEST_CASE("3x3 kernel with padding 1 preserves spatial shape") {
        for (size_t h : {3, 5, 8}) {
            const auto input = testsup::random_tensor<float>(1, 2, h, h + 1, 7);
            const auto weights = testsup::random_tensor<float>(3, 2, 3, 3, 8);
            const Tensor out = ops::conv2d_value(input, weights, {0, 0, 0}, 1);
            CHECK(out.h() == h);
            CHECK(out.w() == h + 1);
        }
    }

    TEST_CASE("channel mismatch names the offending dimension") {
        const auto input = testsup::random_tensor<float>(1, 3, 4, 4, 1);
        const auto weights = testsup::random_tensor<float>(4, 2, 3, 3, 2);
        CHECK_THROWS_WITH_AS(ops::conv2d_value(input, weights, {0, 0, 0, 0}, 1),
                             doctest::Contains("channel"), ShapeError);
    }

    TEST_CASE("forward and backward are identical across thread counts") {
        const auto input = testsup::random_tensor<float>(5, 3, 6, 6, 21);
        const auto weights = testsup::random_tensor<float>(4, 3, 3, 3, 22);
        const auto upstream = testsup::random_tensor<float>(5, 4, 6, 6, 23);
        const std::vector<float> bias(4, 0.25f);

        set_max_threads(1);
        const auto r1 = ops::conv2d(input, weights, bias, 1);
        const auto g1 = r1.backward(upstream);
        set_max_threads(3);
        const auto r3 = ops::conv2d(input, weights, bias, 1);
        const auto g3 = r3.backward(upstream);
        set_max_threads(1);

        CHECK(r1.output.values() == r3.output.values());
        CHECK(g1.input.values() == g3.input.values());
        CHECK(g1.weights.values() == g3.weights.values());
        CHECK(g1.bias == g3.bias);
    }
}

TEST_SUITE("relu") {
    TEST_CASE("clamps negatives") {
        Tensor x({1, 1, 1, 3}, {-1.0f, 0.0f, 2.0f});
        const Tensor y = ops::relu_value(x);
        CHECK(y.values() == std::vector<float>{0.0f, 0.0f, 2.0f});
    }

    TEST_CASE("all-negative input: zero output and zero input gradient") {
        auto x = testsup::random_tensor<float>(1, 2, 3, 3, 5);
        for (auto& v : x.values()) v = -std::abs(v) - 0.1f;
        const auto r = ops::relu(x);
        Tensor upstream(x.shape());
        upstream.fill(1.0f);
        const Tensor g = r.backward(upstream);
        for (size_t i = 0; i < x.count(); ++i) {
            CHECK(r.output.values()[i] == 0.0f);
            CHECK(g.values()[i] == 0.0f);
        }
    }

    TEST_CASE("subgradient at zero is zero") {
        Tensor x({1, 1, 1, 3}, {-1.0f, 0.0f, 2.0f});
        Tensor upstream({1, 1, 1, 3}, {1.0f, 1.0f, 1.0f});
        const Tensor g = ops::relu(x).backward(upstream);
        CHECK(g.values() == std::vector<float>{0.0f, 0.0f, 1.0f});
    }
}

TEST_SUITE("sigmoid") {
    TEST_CASE("value at zero is one half, gradient one quarter") {
        Tensor x(1, 1, 1, 1);
        const auto r = ops::sigmoid(x);
        CHECK(r.output.values()[0] == doctest::Approx(0.5));
        Tensor upstream(1, 1, 1, 1);
        upstream.fill(1.0f);
        CHECK(r.backward(upstream).values()[0] == doctest::Approx(0.25));
    }

    TEST_CASE("symmetry: sigmoid(x) = 1 - sigmoid(-x)") {
        const auto x = testsup::random_tensor<float>(1, 2, 4, 4, 17, 2.0);
        Tensor neg(x.shape());
        for (size_t i = 0; i < x.count(); ++i) neg.values()[i] = -x.values()[i];
        const Tensor a = ops::sigmoid_value(x);
        const Tensor b = ops::sigmoid_value(neg);
        for (size_t i = 0; i < x.count(); ++i)
            CHECK(std::abs(a.values()[i] - (1.0f - b.values()[i])) < 1e-7f);
    }

    TEST_CASE("outputs lie strictly inside (0, 1)") {
        Tensor x({1, 1, 1, 4}, {-12.0f, -3.0f, 3.0f, 12.0f});
        const Tensor y = ops::sigmoid_value(x);
        for (float v : y.values()) {
            CHECK(v > 0.0f);
            CHECK(v < 1.0f);
        }
    }
}

TEST_SUITE("batchnorm") {
    TEST_CASE("train mode normalizes each channel to mean 0, variance 1") {
        // input variance well above eps, so the eps term stays below the
        // 1e-5 assertion
        const auto x = testsup::random_tensor<float>(4, 2, 5, 5, 31, 3.0);
        const std::vector<float> gamma(2, 1.0f), beta(2, 0.0f);
        const auto r = ops::batchnorm(x, gamma, beta, ops::BnState<float>::zeros(2),
                                      ops::BnMode::Train);
        const size_t m = x.n() * x.plane();
        for (size_t ch = 0; ch < 2; ++ch) {
            double mean = 0.0, var = 0.0;
            for (size_t b = 0; b < x.n(); ++b) {
                const float* p = r.output.plane_ptr(b, ch);
                for (size_t i = 0; i < x.plane(); ++i) mean += p[i];
            }
            mean /= double(m);
            for (size_t b = 0; b < x.n(); ++b) {
                const float* p = r.output.plane_ptr(b, ch);
                for (size_t i = 0; i < x.plane(); ++i) var += (p[i] - mean) * (p[i] - mean);
            }
            var /= double(m);
            CHECK(std::abs(mean) < 1e-5);
            CHECK(std::abs(var - 1.0) < 1e-5);
        }
    }

    TEST_CASE("constant channel maps to beta") {
        Tensor x(2, 1, 3, 3);
        x.fill(7.25f);
        const std::vector<float> gamma = {2.0f}, beta = {0.75f};
        const auto r = ops::batchnorm(x, gamma, beta, ops::BnState<float>::zeros(1),
                                      ops::BnMode::Train);
        for (float v : r.output.values()) CHECK(v == doctest::Approx(0.75f));
    }

    TEST_CASE("running stats update toward the batch statistics") {
        auto x = testsup::random_tensor<float>(2, 1, 4, 4, 33);
        for (auto& v : x.values()) v = v * 2.0f + 3.0f;
        const auto r = ops::batchnorm(x, {1.0f}, {0.0f}, ops::BnState<float>::zeros(1),
                                      ops::BnMode::Train, 1e-5f, 0.1f);
        CHECK(r.updated_stats.initialized);
        // run <- 0.9 * 0 + 0.1 * batch_mean
        CHECK(r.updated_stats.running_mean[0] == doctest::Approx(0.1 * 3.0).epsilon(0.2));
        CHECK(r.updated_stats.running_var[0] > 0.9f);  // 0.9 * 1 + 0.1 * batch_var
    }

    TEST_CASE("eval mode without stats is a state error") {
        const auto x = testsup::random_tensor<float>(1, 2, 3, 3, 35);
        CHECK_THROWS_AS(ops::batchnorm(x, {1.0f, 1.0f}, {0.0f, 0.0f},
                                       ops::BnState<float>::zeros(2), ops::BnMode::Eval),
                        StateError);
    }
}

TEST_SUITE("global_pool") {
    TEST_CASE("avg and max of a 2x2 plane") {
        Tensor x({1, 1, 2, 2}, {1, 2, 3, 4});
        CHECK(ops::global_pool_value(x, ops::PoolKind::Avg).values()[0] == doctest::Approx(2.5));
        CHECK(ops::global_pool_value(x, ops::PoolKind::Max).values()[0] == doctest::Approx(4.0));
    }

    TEST_CASE("max over a constant plane routes gradient to the first position") {
        Tensor x(1, 1, 3, 3);
        x.fill(2.0f);
        const auto r = ops::global_pool(x, ops::PoolKind::Max);
        Tensor upstream(1, 1, 1, 1);
        upstream.fill(5.0f);
        const Tensor g = r.backward(upstream);
        CHECK(g.at(0, 0, 0, 0) == 5.0f);
        for (size_t i = 1; i < g.count(); ++i) CHECK(g.values()[i] == 0.0f);
    }

    TEST_CASE("avg backward spreads the gradient uniformly") {
        const auto x = testsup::random_tensor<float>(2, 3, 4, 4, 41);
        const auto r = ops::global_pool(x, ops::PoolKind::Avg);
        Tensor upstream(2, 3, 1, 1);
        upstream.fill(16.0f);
        const Tensor g = r.backward(upstream);
        for (float v : g.values()) CHECK(v == doctest::Approx(1.0f));
    }
}

TEST_SUITE("dense") {
    TEST_CASE("identity weights reproduce the input") {
        Tensor x({1, 3, 1, 1}, {1.5f, -2.0f, 0.25f});
        Tensor w(3, 3, 1, 1);
        for (size_t i = 0; i < 3; ++i) w.at(i, i, 0, 0) = 1.0f;
        const Tensor y = ops::dense_value(x, w, {0, 0, 0});
        CHECK(y.values() == x.values());
    }

    TEST_CASE("row of ones sums the input") {
        Tensor x({1, 2, 1, 1}, {2.0f, 3.0f});
        Tensor w({1, 2, 1, 1}, {1.0f, 1.0f});
        CHECK(ops::dense_value(x, w, {0.0f}).values()[0] == doctest::Approx(5.0f));
    }

    TEST_CASE("dimension mismatch is a shape error") {
        Tensor x(1, 3, 1, 1);
        Tensor w(2, 4, 1, 1);
        CHECK_THROWS_AS(ops::dense_value(x, w, {0.0f, 0.0f}), ShapeError);
    }
}

TEST_CASE("all forward ops preserve finiteness on random input") {
    const auto x = testsup::random_tensor<float>(2, 3, 5, 5, 55, 10.0);
    const auto w = testsup::random_tensor<float>(4, 3, 3, 3, 56, 10.0);
    CHECK(ops::conv2d_value(x, w, {1, 2, 3, 4}, 1).all_finite());
    CHECK(ops::relu_value(x).all_finite());
    CHECK(ops::sigmoid_value(x).all_finite());
    CHECK(ops::global_pool_value(x, ops::PoolKind::Avg).all_finite());
    CHECK(ops::global_pool_value(x, ops::PoolKind::Max).all_finite());
    CHECK(ops::batchnorm(x, {1, 1, 1}, {0, 0, 0}, ops::BnState<float>::zeros(3),
                         ops::BnMode::Train)
              .output.all_finite());
}
