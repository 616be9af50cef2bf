#include <doctest.h>

#include <cmath>

#include "sceneseg/losses.hpp"
#include "sceneseg/errors.hpp"
#include "test_support.hpp"

using namespace sceneseg;

TEST_SUITE("assign_pseudo_labels") {
    TEST_CASE("picks the channel with the maximum value") {
        Tensor y(1, 3, 1, 1);
        y.at(0, 0, 0, 0) = 0.1f;
        y.at(0, 1, 0, 0) = 0.7f;
        y.at(0, 2, 0, 0) = 0.2f;
        CHECK(assign_pseudo_labels(y).at(0, 0, 0) == 1);
    }

    TEST_CASE("ties break to the lowest index") {
        Tensor y(1, 2, 1, 1);
        y.at(0, 0, 0, 0) = 0.5f;
        y.at(0, 1, 0, 0) = 0.5f;
        CHECK(assign_pseudo_labels(y).at(0, 0, 0) == 0);
    }

    TEST_CASE("labels stay inside [0, K)") {
        const auto y = testsup::random_tensor<float>(3, 5, 6, 6, 71);
        const auto labels = assign_pseudo_labels(y);
        for (int32_t l : labels.labels) {
            CHECK(l >= 0);
            CHECK(l < 5);
        }
    }

    TEST_CASE("invariant under adding a constant to all channels of a pixel") {
        const auto y = testsup::random_tensor<float>(2, 4, 3, 3, 72);
        Tensor shifted = y;
        for (size_t b = 0; b < y.n(); ++b)
            for (size_t ch = 0; ch < y.c(); ++ch)
                for (size_t i = 0; i < y.plane(); ++i)
                    shifted.plane_ptr(b, ch)[i] += 3.25f;
        CHECK(assign_pseudo_labels(y).labels == assign_pseudo_labels(shifted).labels);
    }
}

TEST_SUITE("clustering_loss") {
    TEST_CASE("uniform logits give ln 2") {
        Tensor y(1, 2, 1, 1);
        PseudoLabelBatch labels{1, 1, 1, {0}};
        const auto r = clustering_loss(y, labels);
        CHECK(r.value == doctest::Approx(std::log(2.0)).epsilon(1e-9));
    }

    TEST_CASE("confident correct logit gives ln(1 + e^-10)") {
        Tensor y(1, 2, 1, 1);
        y.at(0, 0, 0, 0) = 10.0f;
        PseudoLabelBatch labels{1, 1, 1, {0}};
        const auto r = clustering_loss(y, labels);
        CHECK(r.value == doctest::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-6));
        CHECK(r.value == doctest::Approx(4.5399e-5).epsilon(1e-4));
    }

    TEST_CASE("scaling a correct-argmax logit vector decreases the loss monotonically") {
        Tensor base({1, 3, 1, 1}, {2.0f, 0.5f, -1.0f});
        const PseudoLabelBatch labels = assign_pseudo_labels(base);
        double prev = 1e300;
        for (float t : {1.0f, 2.0f, 4.0f}) {
            Tensor scaled(base.shape());
            for (size_t i = 0; i < base.count(); ++i) scaled.values()[i] = base.values()[i] * t;
            const double v = clustering_loss(scaled, labels).value;
            CHECK(v < prev);
            prev = v;
        }
    }

    TEST_CASE("gradient sums to zero per pixel (softmax minus onehot)") {
        const auto y = testsup::random_tensor<float>(2, 4, 3, 3, 73);
        const auto labels = assign_pseudo_labels(y);
        const auto r = clustering_loss(y, labels);
        for (size_t b = 0; b < y.n(); ++b)
            for (size_t i = 0; i < y.plane(); ++i) {
                double s = 0.0;
                for (size_t ch = 0; ch < y.c(); ++ch) s += r.grad.plane_ptr(b, ch)[i];
                CHECK(std::abs(s) < 1e-7);
            }
    }
}

TEST_SUITE("shuffle_pairing") {
    TEST_CASE("two patches always swap") {
        for (uint64_t seed : {1, 2, 3, 4, 5}) {
            Rng rng(seed);
            CHECK(shuffle_pairing(2, rng) == std::vector<size_t>{1, 0});
        }
    }

    TEST_CASE("never maps an index to itself") {
        for (uint64_t seed = 0; seed < 50; ++seed) {
            Rng rng(seed);
            const auto perm = shuffle_pairing(10, rng);
            for (size_t i = 0; i < perm.size(); ++i) CHECK(perm[i] != i);
        }
    }

    TEST_CASE("deterministic given the rng state") {
        Rng a(42), b(42);
        CHECK(shuffle_pairing(10, a) == shuffle_pairing(10, b));
    }

    TEST_CASE("batch below two is a config error") {
        Rng rng(1);
        CHECK_THROWS_AS(shuffle_pairing(1, rng), ConfigError);
    }
}

TEST_SUITE("contrastive_loss") {
    TEST_CASE("identical paired features give exactly 1") {
        auto y = testsup::random_tensor<float>(2, 4, 3, 3, 74);
        // make both samples identical
        std::copy(y.sample_ptr(0), y.sample_ptr(0) + y.c() * y.plane(), y.sample_ptr(1));
        const auto r = contrastive_loss(y, {1, 0});
        CHECK(r.value == 1.0);
        for (float g : r.grad.values()) CHECK(g == 0.0f);  // subgradient at 0 is 0
    }

    TEST_CASE("channel difference [1, -1] gives e^-2") {
        Tensor y(2, 2, 1, 1);
        y.at(0, 0, 0, 0) = 1.0f;
        y.at(0, 1, 0, 0) = -1.0f;
        const auto r = contrastive_loss(y, {1, 0});
        CHECK(r.value == doctest::Approx(std::exp(-2.0)).epsilon(1e-6));
        CHECK(r.value == doctest::Approx(0.135335).epsilon(1e-5));
    }

    TEST_CASE("value always lies in (0, 1]") {
        for (uint64_t seed = 0; seed < 10; ++seed) {
            const auto y = testsup::random_tensor<float>(3, 4, 4, 4, 80 + seed, 3.0);
            Rng rng(seed);
            const auto perm = shuffle_pairing(3, rng);
            const double v = contrastive_loss(y, perm).value;
            CHECK(v > 0.0);
            CHECK(v <= 1.0);
        }
    }

    TEST_CASE("a fixed point in the permutation is a contract error") {
        const auto y = testsup::random_tensor<float>(3, 2, 2, 2, 81);
        CHECK_THROWS_AS(contrastive_loss(y, {0, 2, 1}), ContractError);
    }
}

TEST_CASE("loss report total is exactly the sum of the terms") {
    const LossReport r = LossReport::of(0.625, 0.25);
    CHECK(r.total == 0.875);
    CHECK(r.total == r.clustering + r.contrastive);
}
