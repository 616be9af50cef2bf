#include "sceneseg/trainer.hpp"

#include <cmath>
#include <cstdio>

#include "sceneseg/digest.hpp"
#include "sceneseg/errors.hpp"
#include "sceneseg/rng.hpp"

namespace sceneseg {

void TrainConfig::validate() const {
    if (epochs < 1) throw ConfigError("TrainConfig: epochs must be >= 1");
    if (inner_iters < 1) throw ConfigError("TrainConfig: inner_iters must be >= 1");
    if (batch_size < 1) throw ConfigError("TrainConfig: batch_size must be >= 1");
    if (feature_count < 2) throw ConfigError("TrainConfig: feature_count must be >= 2");
    if (patch_height < 3 || patch_width < 3)
        throw ConfigError(detail::msg("TrainConfig: patch ", patch_height, "x", patch_width,
                                      " is below the 3x3 kernel support"));
    if (extraction_stride < 1) throw ConfigError("TrainConfig: extraction_stride must be >= 1");
    if (!(learning_rate > 0.0f)) throw ConfigError("TrainConfig: learning_rate must be > 0");
    if (!(momentum >= 0.0f) || momentum >= 1.0f)
        throw ConfigError("TrainConfig: momentum must be in [0, 1)");
    if (attention_ratio != 4 && attention_ratio != 8 && attention_ratio != 16)
        throw ConfigError(detail::msg("TrainConfig: attention_ratio ", attention_ratio,
                                      " not in {4, 8, 16}"));
}

uint64_t TrainConfig::digest() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "train:I=%zu;J=%zu;B=%zu;K=%zu;Rp=%zu;Cp=%zu;stride=%zu;lr=%.9g;mom=%.9g;"
                  "seed=%llu;r=%zu",
                  epochs, inner_iters, batch_size, feature_count, patch_height, patch_width,
                  extraction_stride, static_cast<double>(learning_rate),
                  static_cast<double>(momentum), static_cast<unsigned long long>(seed),
                  attention_ratio);
    return fnv1a64(buf);
}

namespace {

std::vector<size_t> grid_offsets(size_t extent, size_t window, size_t stride) {
    std::vector<size_t> offsets;
    for (size_t off = 0; off + window <= extent; off += stride) offsets.push_back(off);
    if (offsets.back() + window < extent) offsets.push_back(extent - window);
    return offsets;
}

}  // namespace

PatchIndex extract_patches(size_t scene_height, size_t scene_width, const TrainConfig& cfg) {
    if (scene_height < cfg.patch_height || scene_width < cfg.patch_width)
        throw ConfigError(detail::msg("extract_patches: scene ", scene_height, "x", scene_width,
                                      " is smaller than one ", cfg.patch_height, "x",
                                      cfg.patch_width, " patch"));
    const auto rows = grid_offsets(scene_height, cfg.patch_height, cfg.extraction_stride);
    const auto cols = grid_offsets(scene_width, cfg.patch_width, cfg.extraction_stride);
    PatchIndex index;
    index.offsets.reserve(rows.size() * cols.size());
    for (size_t r : rows)
        for (size_t c : cols) index.offsets.emplace_back(r, c);
    return index;
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

SgdVelocity SgdVelocity::zeros_like(const ModelParams& params) {
    SgdVelocity v;
    for (size_t i = 0; i < kConvBlocks; ++i) {
        v.blocks[i].weights = Tensor(params.blocks[i].weights.shape());
        v.blocks[i].bias.assign(params.blocks[i].bias.size(), 0.0f);
        v.blocks[i].gamma.assign(params.blocks[i].gamma.size(), 0.0f);
        v.blocks[i].beta.assign(params.blocks[i].beta.size(), 0.0f);
    }
    v.attention.fc1_weights = Tensor(params.attention.fc1_weights.shape());
    v.attention.fc1_bias.assign(params.attention.fc1_bias.size(), 0.0f);
    v.attention.fc2_weights = Tensor(params.attention.fc2_weights.shape());
    v.attention.fc2_bias.assign(params.attention.fc2_bias.size(), 0.0f);
    v.proj_weights = Tensor(params.proj_weights.shape());
    v.proj_bias.assign(params.proj_bias.size(), 0.0f);
    return v;
}

namespace {

void sgd_apply(const char* name, std::vector<float>& w, const std::vector<float>& g,
               std::vector<float>& v, float lr, float momentum) {
    if (g.size() != w.size() || v.size() != w.size())
        throw ShapeError(detail::msg("sgd_update: ", name, ": gradient length ", g.size(),
                                     " does not match parameter length ", w.size()));
    for (size_t i = 0; i < w.size(); ++i) {
        if (!std::isfinite(g[i]))
            throw DivergenceError(detail::msg("sgd_update: non-finite gradient in ", name,
                                              " at index ", i));
        v[i] = momentum * v[i] + g[i];
        w[i] -= lr * v[i];
        if (!std::isfinite(w[i]))
            throw DivergenceError(detail::msg("sgd_update: parameter ", name,
                                              " became non-finite at index ", i));
    }
}

}  // namespace

void sgd_update(ModelParams& params, const ModelGrads<float>& grads, float lr, float momentum,
                SgdVelocity& velocity) {
    for (size_t i = 0; i < kConvBlocks; ++i) {
        const std::string tag = detail::msg("block", i + 1);
        sgd_apply((tag + ".weights").c_str(), params.blocks[i].weights.values(),
                  grads.blocks[i].weights.values(), velocity.blocks[i].weights.values(), lr,
                  momentum);
        sgd_apply((tag + ".bias").c_str(), params.blocks[i].bias, grads.blocks[i].bias,
                  velocity.blocks[i].bias, lr, momentum);
        sgd_apply((tag + ".gamma").c_str(), params.blocks[i].gamma, grads.blocks[i].gamma,
                  velocity.blocks[i].gamma, lr, momentum);
        sgd_apply((tag + ".beta").c_str(), params.blocks[i].beta, grads.blocks[i].beta,
                  velocity.blocks[i].beta, lr, momentum);
    }
    sgd_apply("attention.fc1_weights", params.attention.fc1_weights.values(),
              grads.attention.fc1_weights.values(), velocity.attention.fc1_weights.values(), lr,
              momentum);
    sgd_apply("attention.fc1_bias", params.attention.fc1_bias, grads.attention.fc1_bias,
              velocity.attention.fc1_bias, lr, momentum);
    sgd_apply("attention.fc2_weights", params.attention.fc2_weights.values(),
              grads.attention.fc2_weights.values(), velocity.attention.fc2_weights.values(), lr,
              momentum);
    sgd_apply("attention.fc2_bias", params.attention.fc2_bias, grads.attention.fc2_bias,
              velocity.attention.fc2_bias, lr, momentum);
    sgd_apply("proj.weights", params.proj_weights.values(), grads.proj_weights.values(),
              velocity.proj_weights.values(), lr, momentum);
    sgd_apply("proj.bias", params.proj_bias, grads.proj_bias, velocity.proj_bias, lr, momentum);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

void TrainLog::write_tsv(std::ostream& os) const {
    char buf[160];
    for (const auto& s : steps) {
        std::snprintf(buf, sizeof(buf), "%llu\t%zu\t%zu\t%zu\t%.9g\t%.9g\t%.9g\n",
                      static_cast<unsigned long long>(s.step), s.epoch, s.chunk, s.inner,
                      s.loss.clustering, s.loss.contrastive, s.loss.total);
        os << buf;
    }
}

TrainOutput train(const Scene& scene, const TrainConfig& cfg, const StepCallback& on_step) {
    cfg.validate();
    if (scene.bands == 0 || scene.data.size() != scene.bands * scene.height * scene.width)
        throw ConfigError("train: scene has no loaded data");

    const PatchIndex patches = extract_patches(scene.height, scene.width, cfg);

    TrainOutput out;
    out.params = init_params(cfg.seed, cfg.feature_count, cfg.attention_ratio, scene.bands);
    SgdVelocity velocity = SgdVelocity::zeros_like(out.params);
    Rng loop_rng(split_seed(cfg.seed, 1));

    std::vector<size_t> order(patches.total());
    uint64_t step = 0;
    for (size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        for (size_t i = 0; i < order.size(); ++i) order[i] = i;
        loop_rng.shuffle(order);
        const size_t chunks = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
        for (size_t chunk = 1; chunk <= chunks; ++chunk) {
            const size_t begin = (chunk - 1) * cfg.batch_size;
            const size_t size = std::min(cfg.batch_size, order.size() - begin);

            Tensor batch(size, scene.bands, cfg.patch_height, cfg.patch_width);
            for (size_t b = 0; b < size; ++b) {
                const auto& off = patches.offsets[order[begin + b]];
                scene.gather_patch(batch, b, off.first, off.second);
            }

            for (size_t j = 1; j <= cfg.inner_iters; ++j) {
                auto fwd = forward(batch, out.params, ops::BnMode::Train);
                for (size_t i = 0; i < kConvBlocks; ++i)
                    out.params.blocks[i].bn = std::move(fwd.bn_states[i]);

                const PseudoLabelBatch labels = assign_pseudo_labels(fwd.features);
                auto cluster = clustering_loss(fwd.features, labels);

                double contrast_value = 0.0;
                Tensor grad_features = std::move(cluster.grad);
                if (size >= 2) {
                    const auto perm = shuffle_pairing(size, loop_rng);
                    auto contrast = contrastive_loss(fwd.features, perm);
                    contrast_value = contrast.value;
                    for (size_t i = 0; i < grad_features.count(); ++i)
                        grad_features.values()[i] += contrast.grad.values()[i];
                }

                ++step;
                const LossReport report = LossReport::of(cluster.value, contrast_value);
                if (!std::isfinite(report.total))
                    throw DivergenceError(detail::msg("train: non-finite loss at step ", step));

                const auto grads = fwd.backward(out.params, grad_features);
                sgd_update(out.params, grads, cfg.learning_rate, cfg.momentum, velocity);

                out.log.steps.push_back({step, epoch, chunk, j, report});
                if (on_step) on_step(out.log.steps.back());
            }
        }
    }
    out.params.config_digest = cfg.digest();
    return out;
}

}  // namespace sceneseg
