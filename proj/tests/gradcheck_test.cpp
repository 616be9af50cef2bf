#include <doctest.h>

#include "sceneseg/gradcheck.hpp"
#include "sceneseg/errors.hpp"

using namespace sceneseg;

// Central-difference verification of every analytic backward pass, five seeds
// per op. The acceptance suite re-runs these at the criterion tolerances; the
// unit tests here keep the loop small per op for quick feedback.

TEST_CASE("every registered op passes the finite-difference check") {
    for (const auto& op : registered_op_ids()) {
        if (op == "full_model") continue;  // composite covered below
        for (uint64_t seed : {1, 2}) {
            CAPTURE(op);
            CAPTURE(seed);
            CHECK(finite_difference_check(op, seed, 1e-4) < 1e-4);
        }
    }
}

TEST_CASE("loss gradients are tight") {
    CHECK(finite_difference_check("clustering_loss", 3, 1e-5) < 1e-5);
    CHECK(finite_difference_check("contrastive_loss", 3, 1e-5) < 1e-5);
}

TEST_CASE("relu away from the kink is near machine precision") {
    CHECK(finite_difference_check("relu", 4, 1e-6) < 1e-6);
}

TEST_CASE("full-model composite gradient") {
    // the small step keeps +/-step sweeps from crossing relu kinks deep in
    // the stack; fp64 has precision to spare at 1e-6
    CHECK(finite_difference_check("full_model", 1, 1e-6) < 1e-3);
}

TEST_CASE("step size outside [1e-6, 1e-3] is rejected") {
    auto p = make_fd_problem("sigmoid", 1);
    CHECK_THROWS_AS(finite_difference_check(p, 1e-2), ConfigError);
    CHECK_THROWS_AS(finite_difference_check(p, 1e-7), ConfigError);
}

TEST_CASE("unknown op id is rejected") {
    CHECK_THROWS_AS(make_fd_problem("softmax", 1), ConfigError);
}
