#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sceneseg/tensor.hpp"

// Central finite-difference verification of every analytic backward pass.
// Everything here runs at fp64. An objective may expose an activation-pattern
// signature (relu masks, pool argmax positions); coordinates whose +/-step
// sweep changes the signature straddle a kink, where the central difference
// does not estimate the derivative, and are skipped (the skipped fraction is
// bounded).

namespace sceneseg {

struct FdProblem {
    std::vector<std::string> names;  // one per differentiated tensor
    std::vector<TensorD> point;      // the sample point

    /// Scalar objective at the given point. When `signature` is non-null the
    /// objective writes a hash of its activation pattern there.
    std::function<double(const std::vector<TensorD>&, uint64_t* signature)> objective;

    /// Analytic gradients of the objective, same order/shapes as `point`.
    std::function<std::vector<TensorD>(const std::vector<TensorD>&)> analytic;
};

struct FdReport {
    double max_rel_error = 0.0;
    size_t coords_checked = 0;
    size_t coords_skipped = 0;  // kink-straddling coordinates
    std::string worst_coordinate;
};

/// Relative error per coordinate: |analytic - central| / max(1, |central|).
/// step must lie in [1e-6, 1e-3]. With max_coords_per_tensor > 0, at most
/// that many coordinates per tensor are probed (deterministic selection).
/// Throws DivergenceError naming the coordinate if a perturbed objective is
/// non-finite, and ContractError if more than a quarter of the probed
/// coordinates straddle kinks.
FdReport finite_difference_check(FdProblem& problem, double step,
                                 size_t max_coords_per_tensor = 0, uint64_t coord_seed = 7);

/// Registered differentiable operations, each with a seeded standard sample
/// point: conv2d, relu, batchnorm, global_avg_pool, global_max_pool, dense,
/// sigmoid, channel_attention, clustering_loss, contrastive_loss, full_model.
std::vector<std::string> registered_op_ids();
FdProblem make_fd_problem(const std::string& op_id, uint64_t seed);

/// Convenience wrapper: builds the registered op's sample point from the seed
/// and returns the max relative error.
double finite_difference_check(const std::string& op_id, uint64_t seed, double step);

}  // namespace sceneseg
