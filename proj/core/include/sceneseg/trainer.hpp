#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <utility>
#include <vector>

#include "sceneseg/losses.hpp"
#include "sceneseg/model.hpp"
#include "sceneseg/scene.hpp"

// Single-scene self-supervised training: extract overlapping patches, then
// for every epoch walk a random permutation of them in chunks of B, running J
// inner iterations per chunk. Each iteration recomputes features and argmax
// pseudo-labels, evaluates clustering + contrastive losses, and takes one
// SGD-with-momentum step on their sum.

namespace sceneseg {

struct TrainConfig {
    size_t epochs = 2;        // I
    size_t inner_iters = 50;  // J
    size_t batch_size = 10;   // B
    size_t feature_count = 8; // K
    size_t patch_height = 128;
    size_t patch_width = 128;
    size_t extraction_stride = 64;
    float learning_rate = 0.1f;
    float momentum = 0.9f;
    uint64_t seed = 1;
    size_t attention_ratio = 8;

    void validate() const;
    uint64_t digest() const;
};

/// Top-left corners of every extractable patch window, row-major.
struct PatchIndex {
    std::vector<std::pair<size_t, size_t>> offsets;

    size_t total() const { return offsets.size(); }
};

/// Regular grid at the extraction stride plus edge-aligned offsets so the
/// right/bottom borders are covered.
PatchIndex extract_patches(size_t scene_height, size_t scene_width, const TrainConfig& cfg);

/// Momentum buffers, one per trainable tensor (running stats are not
/// optimizer state). Shapes mirror the parameters.
struct SgdVelocity {
    std::array<ConvBlockParamsT<float>, kConvBlocks> blocks;
    AttentionParamsT<float> attention;
    Tensor proj_weights;
    std::vector<float> proj_bias;

    static SgdVelocity zeros_like(const ModelParams& params);
};

/// v <- momentum * v + g; w <- w - lr * v for every trainable tensor.
/// Throws DivergenceError naming the parameter if a gradient or updated
/// weight is non-finite.
void sgd_update(ModelParams& params, const ModelGrads<float>& grads, float lr, float momentum,
                SgdVelocity& velocity);

/// One line of the training log (all indices 1-based).
struct StepRecord {
    uint64_t step = 0;
    size_t epoch = 0;
    size_t chunk = 0;
    size_t inner = 0;
    LossReport loss;
};

struct TrainLog {
    std::vector<StepRecord> steps;

    /// Tab-separated, one record per line:
    /// step epoch chunk j clustering contrastive total
    void write_tsv(std::ostream& os) const;
};

using StepCallback = std::function<void(const StepRecord&)>;

struct TrainOutput {
    ModelParams params;
    TrainLog log;
};

/// Runs the full training schedule on one scene. Deterministic in cfg.seed.
TrainOutput train(const Scene& scene, const TrainConfig& cfg, const StepCallback& on_step = {});

}  // namespace sceneseg
