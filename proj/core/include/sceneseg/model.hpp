#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sceneseg/ops.hpp"
#include "sceneseg/scene.hpp"
#include "sceneseg/tensor.hpp"

// The segmentation network: five 3x3/64 conv blocks (conv -> relu -> batch
// norm), a channel-attention gate, and a 1x1 projection to K feature maps.
// Spatial size is preserved end to end (stride 1, no pooling).

namespace sceneseg {

inline constexpr size_t kConvBlocks = 5;
inline constexpr size_t kWidth = 64;  // kernel count of every non-final layer

template <typename T>
struct ConvBlockParamsT {
    TensorT<T> weights;  // (64, in_c, 3, 3)
    std::vector<T> bias;
    std::vector<T> gamma;
    std::vector<T> beta;
    ops::BnState<T> bn;
};

/// Bottleneck MLP of the attention gate: dense(64 -> 64/r) -> relu ->
/// dense(64/r -> 64), shared between the avg-pool and max-pool branches.
template <typename T>
struct AttentionParamsT {
    TensorT<T> fc1_weights;  // (64/r, 64, 1, 1)
    std::vector<T> fc1_bias;
    TensorT<T> fc2_weights;  // (64, 64/r, 1, 1)
    std::vector<T> fc2_bias;
};

template <typename T>
struct ModelParamsT {
    std::array<ConvBlockParamsT<T>, kConvBlocks> blocks;
    AttentionParamsT<T> attention;
    TensorT<T> proj_weights;  // (K, 64, 1, 1)
    std::vector<T> proj_bias;

    size_t feature_count = 0;    // K
    size_t attention_ratio = 0;  // r
    size_t input_bands = 0;
    uint64_t seed = 0;
    uint64_t config_digest = 0;

    bool stats_initialized() const {
        for (const auto& b : blocks)
            if (!b.bn.initialized) return false;
        return true;
    }

    template <typename U>
    ModelParamsT<U> cast() const {
        auto cast_vec = [](const std::vector<T>& v) {
            return std::vector<U>(v.begin(), v.end());
        };
        ModelParamsT<U> out;
        for (size_t i = 0; i < kConvBlocks; ++i) {
            out.blocks[i].weights = blocks[i].weights.template cast<U>();
            out.blocks[i].bias = cast_vec(blocks[i].bias);
            out.blocks[i].gamma = cast_vec(blocks[i].gamma);
            out.blocks[i].beta = cast_vec(blocks[i].beta);
            out.blocks[i].bn.running_mean = cast_vec(blocks[i].bn.running_mean);
            out.blocks[i].bn.running_var = cast_vec(blocks[i].bn.running_var);
            out.blocks[i].bn.initialized = blocks[i].bn.initialized;
        }
        out.attention.fc1_weights = attention.fc1_weights.template cast<U>();
        out.attention.fc1_bias = cast_vec(attention.fc1_bias);
        out.attention.fc2_weights = attention.fc2_weights.template cast<U>();
        out.attention.fc2_bias = cast_vec(attention.fc2_bias);
        out.proj_weights = proj_weights.template cast<U>();
        out.proj_bias = cast_vec(proj_bias);
        out.feature_count = feature_count;
        out.attention_ratio = attention_ratio;
        out.input_bands = input_bands;
        out.seed = seed;
        out.config_digest = config_digest;
        return out;
    }
};

using ModelParams = ModelParamsT<float>;

/// He/fan-in normal initialization: conv weights ~ N(0, 2/fan_in), biases 0,
/// gamma 1, beta 0, running stats empty. Deterministic in the seed.
ModelParams init_params(uint64_t seed, size_t feature_count, size_t attention_ratio,
                        size_t input_bands = 3);

// ---------------------------------------------------------------------------
// channel attention
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionGrads {
    TensorT<T> input;
    AttentionParamsT<T> params;  // bn state unused; weight/bias gradients only
};

template <typename T>
struct AttentionResult {
    TensorT<T> output;
    TensorT<T> input;
    TensorT<T> gate;  // (n, 64, 1, 1), strictly inside (0, 1)

    ops::PoolResult<T> avg_pool, max_pool;
    ops::DenseResult<T> fc1_avg, fc1_max;
    ops::ReluResult<T> relu_avg, relu_max;
    ops::DenseResult<T> fc2_avg, fc2_max;
    ops::SigmoidResult<T> sig;

    AttentionGrads<T> backward(const TensorT<T>& grad_out) const;
};

/// gate = sigmoid(MLP(avgpool(x)) + MLP(maxpool(x))); output = x scaled
/// per channel by its sample's gate.
template <typename T>
AttentionResult<T> channel_attention(const TensorT<T>& input, const AttentionParamsT<T>& params);

template <typename T>
TensorT<T> channel_attention_value(const TensorT<T>& input, const AttentionParamsT<T>& params);

// ---------------------------------------------------------------------------
// full network
// ---------------------------------------------------------------------------

template <typename T>
struct BlockCache {
    TensorT<T> input;            // activations entering the block's conv
    std::vector<uint8_t> mask;   // relu positivity mask
    TensorT<T> xhat;             // batch-norm normalized values
    std::vector<T> inv_std;
};

/// Gradients of every trainable tensor, shaped exactly like the parameters.
template <typename T>
struct ModelGrads {
    std::array<ConvBlockParamsT<T>, kConvBlocks> blocks;  // bn state unused
    AttentionParamsT<T> attention;
    TensorT<T> proj_weights;
    std::vector<T> proj_bias;
    TensorT<T> input;
};

template <typename T>
struct ForwardResult {
    TensorT<T> features;  // (B, K, h, w)
    ops::BnMode mode = ops::BnMode::Train;

    /// Batch-norm states after this forward; the trainer folds them back
    /// into the parameters (train mode updates running stats).
    std::array<ops::BnState<T>, kConvBlocks> bn_states;

    // train-mode caches
    std::array<BlockCache<T>, kConvBlocks> block_caches;
    AttentionResult<T> attention_cache;
    TensorT<T> proj_input;

    ModelGrads<T> backward(const ModelParamsT<T>& params, const TensorT<T>& grad_features) const;
};

/// Runs the Table-1 stack. Train mode caches everything backward needs and
/// returns updated running stats; eval mode requires populated stats.
template <typename T>
ForwardResult<T> forward(const TensorT<T>& batch, const ModelParamsT<T>& params, ops::BnMode mode);

/// Forward without gradient caches; eval mode only.
template <typename T>
TensorT<T> forward_value(const TensorT<T>& batch, const ModelParamsT<T>& params, ops::BnMode mode);

/// Tiles the scene with non-overlapping tile_h x tile_w windows (edge tiles
/// shifted inward to fit), runs eval-mode forward on each tile, and assigns
/// per-pixel argmax clusters. Later tiles win on edge-shift overlaps.
SegmentationMap segment_scene(const Scene& scene, const ModelParams& params, size_t tile_h = 128,
                              size_t tile_w = 128);

/// Offsets of the inference tiling along one axis: 0, step, 2*step, ... plus
/// an inward-shifted final offset when the border is not covered.
std::vector<size_t> tile_offsets(size_t extent, size_t window);

}  // namespace sceneseg
