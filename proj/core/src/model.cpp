#include "sceneseg/model.hpp"

#include <cmath>
#include <utility>

#include "sceneseg/digest.hpp"
#include "sceneseg/losses.hpp"
#include "sceneseg/parallel.hpp"
#include "sceneseg/rng.hpp"

namespace sceneseg {

namespace {

template <typename T>
void he_normal_fill(TensorT<T>& t, size_t fan_in, Rng& rng) {
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(rng.normal() * scale);
}

}  // namespace

ModelParams init_params(uint64_t seed, size_t feature_count, size_t attention_ratio,
                        size_t input_bands) {
    if (feature_count < 2)
        throw ConfigError(detail::msg("init_params: K = ", feature_count, ", need at least 2"));
    if (attention_ratio == 0 || kWidth % attention_ratio != 0)
        throw ConfigError(detail::msg("init_params: attention ratio ", attention_ratio,
                                      " must divide ", kWidth));
    if (input_bands == 0) throw ConfigError("init_params: input_bands must be >= 1");

    Rng rng(seed);
    ModelParams p;
    p.feature_count = feature_count;
    p.attention_ratio = attention_ratio;
    p.input_bands = input_bands;
    p.seed = seed;
    p.config_digest = fnv1a64(detail::msg("init:seed=", seed, ";K=", feature_count, ";r=",
                                          attention_ratio, ";bands=", input_bands));

    for (size_t i = 0; i < kConvBlocks; ++i) {
        const size_t in_c = i == 0 ? input_bands : kWidth;
        auto& blk = p.blocks[i];
        blk.weights = Tensor(kWidth, in_c, 3, 3);
        he_normal_fill(blk.weights, in_c * 9, rng);
        blk.bias.assign(kWidth, 0.0f);
        blk.gamma.assign(kWidth, 1.0f);
        blk.beta.assign(kWidth, 0.0f);
        blk.bn = ops::BnState<float>::zeros(kWidth);
    }

    const size_t hidden = kWidth / attention_ratio;
    p.attention.fc1_weights = Tensor(hidden, kWidth, 1, 1);
    he_normal_fill(p.attention.fc1_weights, kWidth, rng);
    p.attention.fc1_bias.assign(hidden, 0.0f);
    p.attention.fc2_weights = Tensor(kWidth, hidden, 1, 1);
    he_normal_fill(p.attention.fc2_weights, hidden, rng);
    p.attention.fc2_bias.assign(kWidth, 0.0f);

    p.proj_weights = Tensor(feature_count, kWidth, 1, 1);
    he_normal_fill(p.proj_weights, kWidth, rng);
    p.proj_bias.assign(feature_count, 0.0f);
    return p;
}

// ---------------------------------------------------------------------------
// channel attention
// ---------------------------------------------------------------------------

template <typename T>
AttentionResult<T> channel_attention(const TensorT<T>& input, const AttentionParamsT<T>& params) {
    if (input.c() != kWidth)
        throw ShapeError(detail::msg("channel_attention: channel dim is ", input.c(),
                                     ", expected ", kWidth));
    AttentionResult<T> r;
    r.input = input;
    r.avg_pool = ops::global_pool(input, ops::PoolKind::Avg);
    r.max_pool = ops::global_pool(input, ops::PoolKind::Max);
    r.fc1_avg = ops::dense(r.avg_pool.output, params.fc1_weights, params.fc1_bias);
    r.fc1_max = ops::dense(r.max_pool.output, params.fc1_weights, params.fc1_bias);
    r.relu_avg = ops::relu(r.fc1_avg.output);
    r.relu_max = ops::relu(r.fc1_max.output);
    r.fc2_avg = ops::dense(r.relu_avg.output, params.fc2_weights, params.fc2_bias);
    r.fc2_max = ops::dense(r.relu_max.output, params.fc2_weights, params.fc2_bias);

    TensorT<T> summed(r.fc2_avg.output.shape());
    for (size_t i = 0; i < summed.count(); ++i)
        summed.values()[i] = r.fc2_avg.output.values()[i] + r.fc2_max.output.values()[i];
    r.sig = ops::sigmoid(summed);
    r.gate = r.sig.output;

    r.output = TensorT<T>(input.shape());
    const size_t plane = input.plane();
    for (size_t b = 0; b < input.n(); ++b) {
        for (size_t ch = 0; ch < kWidth; ++ch) {
            const T g = r.gate.at(b, ch, 0, 0);
            const T* x = input.plane_ptr(b, ch);
            T* y = r.output.plane_ptr(b, ch);
            for (size_t i = 0; i < plane; ++i) y[i] = x[i] * g;
        }
    }
    return r;
}

template <typename T>
AttentionGrads<T> AttentionResult<T>::backward(const TensorT<T>& grad_out) const {
    require_shape(grad_out, input.n(), input.c(), input.h(), input.w(),
                  "channel_attention backward: grad_out");
    const size_t plane = input.plane();

    // scaling path: d(gate) and the direct input gradient
    TensorT<T> grad_gate(input.n(), kWidth, 1, 1);
    AttentionGrads<T> g;
    g.input = TensorT<T>(input.shape());
    for (size_t b = 0; b < input.n(); ++b) {
        for (size_t ch = 0; ch < kWidth; ++ch) {
            const T gv = gate.at(b, ch, 0, 0);
            const T* go = grad_out.plane_ptr(b, ch);
            const T* x = input.plane_ptr(b, ch);
            T* gi = g.input.plane_ptr(b, ch);
            T acc = T(0);
            for (size_t i = 0; i < plane; ++i) {
                acc += go[i] * x[i];
                gi[i] = go[i] * gv;
            }
            grad_gate.at(b, ch, 0, 0) = acc;
        }
    }

    const TensorT<T> grad_sum = sig.backward(grad_gate);
    const auto g2a = fc2_avg.backward(grad_sum);
    const auto g2m = fc2_max.backward(grad_sum);
    const auto gra = relu_avg.backward(g2a.input);
    const auto grm = relu_max.backward(g2m.input);
    const auto g1a = fc1_avg.backward(gra);
    const auto g1m = fc1_max.backward(grm);
    const TensorT<T> pool_a = avg_pool.backward(g1a.input);
    const TensorT<T> pool_m = max_pool.backward(g1m.input);

    for (size_t i = 0; i < g.input.count(); ++i)
        g.input.values()[i] += pool_a.values()[i] + pool_m.values()[i];

    g.params.fc1_weights = TensorT<T>(g1a.weights.shape());
    for (size_t i = 0; i < g1a.weights.count(); ++i)
        g.params.fc1_weights.values()[i] = g1a.weights.values()[i] + g1m.weights.values()[i];
    g.params.fc1_bias.resize(g1a.bias.size());
    for (size_t i = 0; i < g1a.bias.size(); ++i)
        g.params.fc1_bias[i] = g1a.bias[i] + g1m.bias[i];
    g.params.fc2_weights = TensorT<T>(g2a.weights.shape());
    for (size_t i = 0; i < g2a.weights.count(); ++i)
        g.params.fc2_weights.values()[i] = g2a.weights.values()[i] + g2m.weights.values()[i];
    g.params.fc2_bias.resize(g2a.bias.size());
    for (size_t i = 0; i < g2a.bias.size(); ++i)
        g.params.fc2_bias[i] = g2a.bias[i] + g2m.bias[i];
    return g;
}

template <typename T>
TensorT<T> channel_attention_value(const TensorT<T>& input, const AttentionParamsT<T>& params) {
    if (input.c() != kWidth)
        throw ShapeError(detail::msg("channel_attention: channel dim is ", input.c(),
                                     ", expected ", kWidth));
    const auto branch = [&](ops::PoolKind kind) {
        TensorT<T> pooled = ops::global_pool_value(input, kind);
        TensorT<T> hidden = ops::relu_value(ops::dense_value(pooled, params.fc1_weights, params.fc1_bias));
        return ops::dense_value(hidden, params.fc2_weights, params.fc2_bias);
    };
    TensorT<T> summed = branch(ops::PoolKind::Avg);
    {
        const TensorT<T> mx = branch(ops::PoolKind::Max);
        for (size_t i = 0; i < summed.count(); ++i) summed.values()[i] += mx.values()[i];
    }
    const TensorT<T> gate = ops::sigmoid_value(summed);
    TensorT<T> out(input.shape());
    const size_t plane = input.plane();
    for (size_t b = 0; b < input.n(); ++b) {
        for (size_t ch = 0; ch < kWidth; ++ch) {
            const T g = gate.at(b, ch, 0, 0);
            const T* x = input.plane_ptr(b, ch);
            T* y = out.plane_ptr(b, ch);
            for (size_t i = 0; i < plane; ++i) y[i] = x[i] * g;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// full network
// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_input_bands(const TensorT<T>& batch, const ModelParamsT<T>& params) {
    if (batch.c() != params.input_bands)
        throw ShapeError(detail::msg("forward: input has ", batch.c(), " bands, model expects ",
                                     params.input_bands));
    if (batch.h() < 3 || batch.w() < 3)
        throw ShapeError(detail::msg("forward: spatial size ", batch.h(), "x", batch.w(),
                                     " is below the 3x3 kernel support"));
}

}  // namespace

template <typename T>
ForwardResult<T> forward(const TensorT<T>& batch, const ModelParamsT<T>& params, ops::BnMode mode) {
    check_input_bands(batch, params);
    if (mode == ops::BnMode::Eval && !params.stats_initialized())
        throw StateError("forward: eval mode before any training step (running stats empty)");

    ForwardResult<T> r;
    r.mode = mode;
    TensorT<T> x = batch;
    for (size_t i = 0; i < kConvBlocks; ++i) {
        const auto& blk = params.blocks[i];
        auto& cache = r.block_caches[i];
        cache.input = std::move(x);
        TensorT<T> act = ops::conv2d_value(cache.input, blk.weights, blk.bias, 1);
        cache.mask.resize(act.count());
        for (size_t j = 0; j < act.count(); ++j) {
            const bool pos = act.values()[j] > T(0);
            cache.mask[j] = pos;
            if (!pos) act.values()[j] = T(0);
        }
        auto bn = ops::batchnorm(act, blk.gamma, blk.beta, blk.bn, mode);
        cache.xhat = std::move(bn.xhat);
        cache.inv_std = std::move(bn.inv_std);
        r.bn_states[i] = std::move(bn.updated_stats);
        x = std::move(bn.output);
    }
    r.attention_cache = channel_attention(x, params.attention);
    r.features = ops::conv2d_value(r.attention_cache.output, params.proj_weights, params.proj_bias, 0);
    return r;
}

template <typename T>
ModelGrads<T> ForwardResult<T>::backward(const ModelParamsT<T>& params,
                                         const TensorT<T>& grad_features) const {
    ModelGrads<T> g;
    auto proj_g = ops::conv2d_backward(attention_cache.output, params.proj_weights, size_t(0),
                                       grad_features);
    g.proj_weights = std::move(proj_g.weights);
    g.proj_bias = std::move(proj_g.bias);

    auto att_g = attention_cache.backward(proj_g.input);
    g.attention = std::move(att_g.params);

    TensorT<T> gx = std::move(att_g.input);
    for (size_t i = kConvBlocks; i-- > 0;) {
        const auto& blk = params.blocks[i];
        const auto& cache = block_caches[i];
        auto bn_g = ops::batchnorm_backward(cache.xhat, cache.inv_std, blk.gamma, mode, gx);
        g.blocks[i].gamma = std::move(bn_g.gamma);
        g.blocks[i].beta = std::move(bn_g.beta);
        for (size_t j = 0; j < bn_g.input.count(); ++j)
            if (!cache.mask[j]) bn_g.input.values()[j] = T(0);
        auto conv_g = ops::conv2d_backward(cache.input, blk.weights, size_t(1), bn_g.input);
        g.blocks[i].weights = std::move(conv_g.weights);
        g.blocks[i].bias = std::move(conv_g.bias);
        gx = std::move(conv_g.input);
    }
    g.input = std::move(gx);
    return g;
}

template <typename T>
TensorT<T> forward_value(const TensorT<T>& batch, const ModelParamsT<T>& params, ops::BnMode mode) {
    check_input_bands(batch, params);
    TensorT<T> x = batch;
    for (size_t i = 0; i < kConvBlocks; ++i) {
        const auto& blk = params.blocks[i];
        x = ops::relu_value(ops::conv2d_value(x, blk.weights, blk.bias, 1));
        x = ops::batchnorm_value(x, blk.gamma, blk.beta, blk.bn, mode);
    }
    x = channel_attention_value(x, params.attention);
    return ops::conv2d_value(x, params.proj_weights, params.proj_bias, 0);
}

// ---------------------------------------------------------------------------
// whole-scene inference
// ---------------------------------------------------------------------------

std::vector<size_t> tile_offsets(size_t extent, size_t window) {
    if (window == 0 || extent < window)
        throw ConfigError(detail::msg("tile_offsets: window ", window, " exceeds extent ", extent));
    std::vector<size_t> offsets;
    for (size_t off = 0; off + window <= extent; off += window) offsets.push_back(off);
    if (offsets.back() + window < extent) offsets.push_back(extent - window);
    return offsets;
}

SegmentationMap segment_scene(const Scene& scene, const ModelParams& params, size_t tile_h,
                              size_t tile_w) {
    if (!params.stats_initialized())
        throw StateError("segment_scene: model has no running statistics (not trained)");
    if (scene.bands != params.input_bands)
        throw ShapeError(detail::msg("segment_scene: scene has ", scene.bands,
                                     " bands, model expects ", params.input_bands));
    if (scene.height < tile_h || scene.width < tile_w)
        throw ConfigError(detail::msg("segment_scene: scene ", scene.height, "x", scene.width,
                                      " is smaller than one ", tile_h, "x", tile_w, " tile"));

    const auto rows = tile_offsets(scene.height, tile_h);
    const auto cols = tile_offsets(scene.width, tile_w);
    const size_t tiles = rows.size() * cols.size();

    std::vector<PseudoLabelBatch> tile_labels(tiles);
    parallel_for_blocks(tiles, [&](size_t t0, size_t t1) {
        for (size_t t = t0; t < t1; ++t) {
            Tensor tile(1, scene.bands, tile_h, tile_w);
            scene.gather_patch(tile, 0, rows[t / cols.size()], cols[t % cols.size()]);
            const Tensor features = forward_value(tile, params, ops::BnMode::Eval);
            tile_labels[t] = assign_pseudo_labels(features);
        }
    });

    SegmentationMap map;
    map.height = scene.height;
    map.width = scene.width;
    map.num_labels = params.feature_count;
    map.labels.assign(scene.height * scene.width, 0);
    // sequential stitch in tile order: later tiles overwrite edge overlaps
    for (size_t t = 0; t < tiles; ++t) {
        const size_t r0 = rows[t / cols.size()], c0 = cols[t % cols.size()];
        const auto& lbl = tile_labels[t];
        for (size_t r = 0; r < tile_h; ++r)
            for (size_t c = 0; c < tile_w; ++c) map.at(r0 + r, c0 + c) = lbl.at(0, r, c);
    }
    return map;
}

template struct AttentionResult<float>;
template struct AttentionResult<double>;
template struct ForwardResult<float>;
template struct ForwardResult<double>;
template AttentionResult<float> channel_attention<float>(const TensorT<float>&,
                                                         const AttentionParamsT<float>&);
template AttentionResult<double> channel_attention<double>(const TensorT<double>&,
                                                           const AttentionParamsT<double>&);
template TensorT<float> channel_attention_value<float>(const TensorT<float>&,
                                                       const AttentionParamsT<float>&);
template TensorT<double> channel_attention_value<double>(const TensorT<double>&,
                                                         const AttentionParamsT<double>&);
template ForwardResult<float> forward<float>(const TensorT<float>&, const ModelParamsT<float>&,
                                             ops::BnMode);
template ForwardResult<double> forward<double>(const TensorT<double>&, const ModelParamsT<double>&,
                                               ops::BnMode);
template TensorT<float> forward_value<float>(const TensorT<float>&, const ModelParamsT<float>&,
                                             ops::BnMode);
template TensorT<double> forward_value<double>(const TensorT<double>&, const ModelParamsT<double>&,
                                               ops::BnMode);

}  // namespace sceneseg
