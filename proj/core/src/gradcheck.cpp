#include "sceneseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "sceneseg/digest.hpp"
#include "sceneseg/losses.hpp"
#include "sceneseg/model.hpp"
#include "sceneseg/ops.hpp"
#include "sceneseg/rng.hpp"

namespace sceneseg {

namespace {

uint64_t hash_bytes(uint64_t h, const void* data, size_t len) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ULL;
    }
    return h;
}

TensorD random_tensor(size_t n, size_t c, size_t h, size_t w, Rng& rng, double scale = 1.0) {
    TensorD t(n, c, h, w);
    for (auto& v : t.values()) v = rng.normal() * scale;
    return t;
}

std::vector<double> vec_of(const TensorD& t) { return t.values(); }

TensorD tensor_of_vec(const std::vector<double>& v) {
    return TensorD({1, v.size(), 1, 1}, v);
}

/// Ensures the top-2 gap in every (n, c) plane is at least `margin` so the
/// max-pool argmax is stable under FD perturbation.
void enforce_pool_margin(TensorD& t, double margin) {
    const size_t plane = t.plane();
    for (size_t b = 0; b < t.n(); ++b) {
        for (size_t c = 0; c < t.c(); ++c) {
            double* x = t.plane_ptr(b, c);
            size_t best = 0;
            for (size_t i = 1; i < plane; ++i)
                if (x[i] > x[best]) best = i;
            double second = -1e300;
            for (size_t i = 0; i < plane; ++i)
                if (i != best) second = std::max(second, x[i]);
            if (plane > 1 && x[best] - second < margin) x[best] = second + margin;
        }
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// checker core
// ---------------------------------------------------------------------------

FdReport finite_difference_check(FdProblem& problem, double step, size_t max_coords_per_tensor,
                                 uint64_t coord_seed) {
    if (!(step >= 1e-6 && step <= 1e-3))
        throw ConfigError(detail::msg("finite_difference_check: step ", step,
                                      " outside [1e-6, 1e-3]"));
    const auto grads = problem.analytic(problem.point);
    if (grads.size() != problem.point.size())
        throw ContractError("finite_difference_check: analytic gradient count mismatch");
    for (size_t t = 0; t < grads.size(); ++t)
        if (!grads[t].same_shape(problem.point[t]))
            throw ContractError(detail::msg("finite_difference_check: gradient shape mismatch for ",
                                            problem.names[t]));

    FdReport report;
    Rng coord_rng(coord_seed);
    for (size_t t = 0; t < problem.point.size(); ++t) {
        TensorD& tensor = problem.point[t];
        const size_t count = tensor.count();
        std::vector<size_t> coords;
        if (max_coords_per_tensor == 0 || count <= max_coords_per_tensor) {
            coords.resize(count);
            for (size_t i = 0; i < count; ++i) coords[i] = i;
        } else {
            std::vector<size_t> all(count);
            for (size_t i = 0; i < count; ++i) all[i] = i;
            coord_rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + max_coords_per_tensor);
            std::sort(coords.begin(), coords.end());
        }

        for (size_t i : coords) {
            const double orig = tensor.values()[i];
            uint64_t sig_plus = 0, sig_minus = 0;
            tensor.values()[i] = orig + step;
            const double f_plus = problem.objective(problem.point, &sig_plus);
            tensor.values()[i] = orig - step;
            const double f_minus = problem.objective(problem.point, &sig_minus);
            tensor.values()[i] = orig;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus))
                throw DivergenceError(detail::msg(
                    "finite_difference_check: non-finite objective perturbing ", problem.names[t],
                    " coordinate ", i));
            if (sig_plus != sig_minus) {
                // the sweep crossed a relu/argmax kink; central difference is
                // not a derivative estimate there
                ++report.coords_skipped;
                continue;
            }
            const double central = (f_plus - f_minus) / (2.0 * step);
            const double err = std::abs(grads[t].values()[i] - central) /
                               std::max(1.0, std::abs(central));
            if (err > report.max_rel_error) {
                report.max_rel_error = err;
                report.worst_coordinate = detail::msg(problem.names[t], "[", i, "]");
            }
            ++report.coords_checked;
        }
    }
    if (report.coords_skipped * 4 > (report.coords_checked + report.coords_skipped))
        throw ContractError(detail::msg("finite_difference_check: ", report.coords_skipped,
                                        " of ", report.coords_checked + report.coords_skipped,
                                        " coordinates straddle kinks; sample point is degenerate"));
    return report;
}

// ---------------------------------------------------------------------------
// registered problems
// ---------------------------------------------------------------------------

namespace {

FdProblem conv2d_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input", "weights", "bias"};
    p.point.push_back(random_tensor(2, 3, 6, 6, rng));
    p.point.push_back(random_tensor(4, 3, 3, 3, rng, 0.5));
    p.point.push_back(random_tensor(1, 4, 1, 1, rng, 0.5));
    auto proj = random_tensor(2, 4, 6, 6, rng);
    p.objective = [proj](const std::vector<TensorD>& pt, uint64_t*) {
        const TensorD out = ops::conv2d_value(pt[0], pt[1], vec_of(pt[2]), 1);
        double acc = 0.0;
        for (size_t i = 0; i < out.count(); ++i) acc += out.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj](const std::vector<TensorD>& pt) {
        auto g = ops::conv2d_backward(pt[0], pt[1], size_t(1), proj);
        return std::vector<TensorD>{g.input, g.weights, tensor_of_vec(g.bias)};
    };
    return p;
}

FdProblem relu_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input"};
    TensorD x = random_tensor(2, 3, 4, 4, rng);
    for (auto& v : x.values())  // keep every coordinate clear of the kink
        if (std::abs(v) < 0.05) v = v < 0 ? v - 0.05 : v + 0.05;
    p.point.push_back(std::move(x));
    auto proj = random_tensor(2, 3, 4, 4, rng);
    p.objective = [proj](const std::vector<TensorD>& pt, uint64_t*) {
        const TensorD out = ops::relu_value(pt[0]);
        double acc = 0.0;
        for (size_t i = 0; i < out.count(); ++i) acc += out.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj](const std::vector<TensorD>& pt) {
        return std::vector<TensorD>{ops::relu(pt[0]).backward(proj)};
    };
    return p;
}

FdProblem batchnorm_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input", "gamma", "beta"};
    p.point.push_back(random_tensor(4, 2, 5, 5, rng));
    TensorD gamma = random_tensor(1, 2, 1, 1, rng, 0.3);
    for (auto& v : gamma.values()) v += 1.0;
    p.point.push_back(std::move(gamma));
    p.point.push_back(random_tensor(1, 2, 1, 1, rng, 0.3));
    auto proj = random_tensor(4, 2, 5, 5, rng);
    const auto stats = ops::BnState<double>::zeros(2);
    p.objective = [proj, stats](const std::vector<TensorD>& pt, uint64_t*) {
        const auto r = ops::batchnorm(pt[0], vec_of(pt[1]), vec_of(pt[2]), stats,
                                      ops::BnMode::Train);
        double acc = 0.0;
        for (size_t i = 0; i < r.output.count(); ++i)
            acc += r.output.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj, stats](const std::vector<TensorD>& pt) {
        const auto r = ops::batchnorm(pt[0], vec_of(pt[1]), vec_of(pt[2]), stats,
                                      ops::BnMode::Train);
        auto g = r.backward(proj);
        return std::vector<TensorD>{g.input, tensor_of_vec(g.gamma), tensor_of_vec(g.beta)};
    };
    return p;
}

FdProblem pool_problem(uint64_t seed, ops::PoolKind kind) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input"};
    TensorD x = random_tensor(2, 3, 4, 4, rng);
    if (kind == ops::PoolKind::Max) enforce_pool_margin(x, 0.05);
    p.point.push_back(std::move(x));
    auto proj = random_tensor(2, 3, 1, 1, rng);
    p.objective = [proj, kind](const std::vector<TensorD>& pt, uint64_t* sig) {
        const auto r = ops::global_pool(pt[0], kind);
        if (sig && kind == ops::PoolKind::Max)
            *sig = hash_bytes(0xCBF29CE484222325ULL, r.argmax.data(),
                              r.argmax.size() * sizeof(uint32_t));
        double acc = 0.0;
        for (size_t i = 0; i < r.output.count(); ++i)
            acc += r.output.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj, kind](const std::vector<TensorD>& pt) {
        return std::vector<TensorD>{ops::global_pool(pt[0], kind).backward(proj)};
    };
    return p;
}

FdProblem dense_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input", "weights", "bias"};
    p.point.push_back(random_tensor(3, 8, 1, 1, rng));
    p.point.push_back(random_tensor(4, 8, 1, 1, rng, 0.5));
    p.point.push_back(random_tensor(1, 4, 1, 1, rng, 0.5));
    auto proj = random_tensor(3, 4, 1, 1, rng);
    p.objective = [proj](const std::vector<TensorD>& pt, uint64_t*) {
        const TensorD out = ops::dense_value(pt[0], pt[1], vec_of(pt[2]));
        double acc = 0.0;
        for (size_t i = 0; i < out.count(); ++i) acc += out.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj](const std::vector<TensorD>& pt) {
        auto g = ops::dense(pt[0], pt[1], vec_of(pt[2])).backward(proj);
        return std::vector<TensorD>{g.input, g.weights, tensor_of_vec(g.bias)};
    };
    return p;
}

FdProblem sigmoid_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input"};
    p.point.push_back(random_tensor(2, 3, 4, 4, rng));
    auto proj = random_tensor(2, 3, 4, 4, rng);
    p.objective = [proj](const std::vector<TensorD>& pt, uint64_t*) {
        const TensorD out = ops::sigmoid_value(pt[0]);
        double acc = 0.0;
        for (size_t i = 0; i < out.count(); ++i) acc += out.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj](const std::vector<TensorD>& pt) {
        return std::vector<TensorD>{ops::sigmoid(pt[0]).backward(proj)};
    };
    return p;
}

AttentionParamsT<double> attention_point_params(const std::vector<TensorD>& pt, size_t base) {
    AttentionParamsT<double> a;
    a.fc1_weights = pt[base];
    a.fc1_bias = vec_of(pt[base + 1]);
    a.fc2_weights = pt[base + 2];
    a.fc2_bias = vec_of(pt[base + 3]);
    return a;
}

uint64_t attention_signature(const AttentionResult<double>& r) {
    uint64_t h = 0xCBF29CE484222325ULL;
    h = hash_bytes(h, r.max_pool.argmax.data(), r.max_pool.argmax.size() * sizeof(uint32_t));
    // relu kinks inside the shared MLP
    for (const auto* relu_in : {&r.fc1_avg.output, &r.fc1_max.output})
        for (double v : relu_in->values()) {
            const uint8_t bit = v > 0.0;
            h = hash_bytes(h, &bit, 1);
        }
    return h;
}

FdProblem attention_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"input", "fc1_weights", "fc1_bias", "fc2_weights", "fc2_bias"};
    TensorD x = random_tensor(2, kWidth, 5, 5, rng);
    enforce_pool_margin(x, 0.05);
    p.point.push_back(std::move(x));
    const size_t hidden = kWidth / 8;
    p.point.push_back(random_tensor(hidden, kWidth, 1, 1, rng, 0.4));
    p.point.push_back(random_tensor(1, hidden, 1, 1, rng, 0.2));
    p.point.push_back(random_tensor(kWidth, hidden, 1, 1, rng, 0.4));
    p.point.push_back(random_tensor(1, kWidth, 1, 1, rng, 0.2));
    auto proj = random_tensor(2, kWidth, 5, 5, rng);
    p.objective = [proj](const std::vector<TensorD>& pt, uint64_t* sig) {
        const auto r = channel_attention(pt[0], attention_point_params(pt, 1));
        if (sig) *sig = attention_signature(r);
        double acc = 0.0;
        for (size_t i = 0; i < r.output.count(); ++i)
            acc += r.output.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj](const std::vector<TensorD>& pt) {
        const auto r = channel_attention(pt[0], attention_point_params(pt, 1));
        auto g = r.backward(proj);
        return std::vector<TensorD>{g.input, g.params.fc1_weights, tensor_of_vec(g.params.fc1_bias),
                                    g.params.fc2_weights, tensor_of_vec(g.params.fc2_bias)};
    };
    return p;
}

FdProblem clustering_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"features"};
    p.point.push_back(random_tensor(1, 4, 3, 3, rng));
    // labels are constants of the problem (no gradient through argmax), so
    // the objective is smooth in the features
    const PseudoLabelBatch labels = assign_pseudo_labels(p.point[0]);
    p.objective = [labels](const std::vector<TensorD>& pt, uint64_t*) {
        return clustering_loss(pt[0], labels).value;
    };
    p.analytic = [labels](const std::vector<TensorD>& pt) {
        return std::vector<TensorD>{clustering_loss(pt[0], labels).grad};
    };
    return p;
}

FdProblem contrastive_problem(uint64_t seed) {
    Rng rng(seed);
    FdProblem p;
    p.names = {"features"};
    TensorD y = random_tensor(2, 4, 3, 3, rng);
    // keep paired differences clear of the L1 kink at zero
    const size_t plane = y.plane();
    for (size_t ch = 0; ch < y.c(); ++ch) {
        double* a = y.plane_ptr(0, ch);
        const double* b = y.plane_ptr(1, ch);
        for (size_t i = 0; i < plane; ++i) {
            const double d = a[i] - b[i];
            if (std::abs(d) < 0.05) a[i] += d >= 0 ? 0.05 : -0.05;
        }
    }
    p.point.push_back(std::move(y));
    const std::vector<size_t> perm = {1, 0};
    p.objective = [perm](const std::vector<TensorD>& pt, uint64_t*) {
        return contrastive_loss(pt[0], perm).value;
    };
    p.analytic = [perm](const std::vector<TensorD>& pt) {
        return std::vector<TensorD>{contrastive_loss(pt[0], perm).grad};
    };
    return p;
}

struct ModelPointLayout {
    static std::vector<std::string> names() {
        std::vector<std::string> n = {"input"};
        for (size_t i = 0; i < kConvBlocks; ++i) {
            const std::string tag = detail::msg("block", i + 1);
            n.push_back(tag + ".weights");
            n.push_back(tag + ".bias");
            n.push_back(tag + ".gamma");
            n.push_back(tag + ".beta");
        }
        n.insert(n.end(), {"attention.fc1_weights", "attention.fc1_bias", "attention.fc2_weights",
                           "attention.fc2_bias", "proj.weights", "proj.bias"});
        return n;
    }

    static std::vector<TensorD> pack(const TensorD& input, const ModelParamsT<double>& m) {
        std::vector<TensorD> pt = {input};
        for (const auto& blk : m.blocks) {
            pt.push_back(blk.weights);
            pt.push_back(tensor_of_vec(blk.bias));
            pt.push_back(tensor_of_vec(blk.gamma));
            pt.push_back(tensor_of_vec(blk.beta));
        }
        pt.push_back(m.attention.fc1_weights);
        pt.push_back(tensor_of_vec(m.attention.fc1_bias));
        pt.push_back(m.attention.fc2_weights);
        pt.push_back(tensor_of_vec(m.attention.fc2_bias));
        pt.push_back(m.proj_weights);
        pt.push_back(tensor_of_vec(m.proj_bias));
        return pt;
    }

    static ModelParamsT<double> unpack(const std::vector<TensorD>& pt,
                                       const ModelParamsT<double>& base) {
        ModelParamsT<double> m = base;
        size_t i = 1;
        for (auto& blk : m.blocks) {
            blk.weights = pt[i++];
            blk.bias = vec_of(pt[i++]);
            blk.gamma = vec_of(pt[i++]);
            blk.beta = vec_of(pt[i++]);
        }
        m.attention.fc1_weights = pt[i++];
        m.attention.fc1_bias = vec_of(pt[i++]);
        m.attention.fc2_weights = pt[i++];
        m.attention.fc2_bias = vec_of(pt[i++]);
        m.proj_weights = pt[i++];
        m.proj_bias = vec_of(pt[i++]);
        return m;
    }
};

uint64_t model_signature(const ForwardResult<double>& r) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (const auto& cache : r.block_caches)
        h = hash_bytes(h, cache.mask.data(), cache.mask.size());
    h ^= attention_signature(r.attention_cache);
    return h;
}

FdProblem full_model_problem(uint64_t seed) {
    Rng rng(seed);
    const ModelParamsT<double> params = init_params(seed, 8, 8, 3).cast<double>();
    FdProblem p;
    p.names = ModelPointLayout::names();
    TensorD input = random_tensor(1, 3, 6, 6, rng);
    p.point = ModelPointLayout::pack(input, params);
    auto proj = random_tensor(1, 8, 6, 6, rng, 0.5);
    p.objective = [proj, params](const std::vector<TensorD>& pt, uint64_t* sig) {
        const auto m = ModelPointLayout::unpack(pt, params);
        const auto r = forward(pt[0], m, ops::BnMode::Train);
        if (sig) *sig = model_signature(r);
        double acc = 0.0;
        for (size_t i = 0; i < r.features.count(); ++i)
            acc += r.features.values()[i] * proj.values()[i];
        return acc;
    };
    p.analytic = [proj, params](const std::vector<TensorD>& pt) {
        const auto m = ModelPointLayout::unpack(pt, params);
        const auto r = forward(pt[0], m, ops::BnMode::Train);
        const auto g = r.backward(m, proj);
        ModelParamsT<double> as_params;
        as_params.blocks = g.blocks;
        as_params.attention = g.attention;
        as_params.proj_weights = g.proj_weights;
        as_params.proj_bias = g.proj_bias;
        return ModelPointLayout::pack(g.input, as_params);
    };
    return p;
}

}  // namespace

std::vector<std::string> registered_op_ids() {
    return {"conv2d",          "relu",          "batchnorm",
            "global_avg_pool", "global_max_pool", "dense",
            "sigmoid",         "channel_attention", "clustering_loss",
            "contrastive_loss", "full_model"};
}

FdProblem make_fd_problem(const std::string& op_id, uint64_t seed) {
    if (op_id == "conv2d") return conv2d_problem(seed);
    if (op_id == "relu") return relu_problem(seed);
    if (op_id == "batchnorm") return batchnorm_problem(seed);
    if (op_id == "global_avg_pool") return pool_problem(seed, ops::PoolKind::Avg);
    if (op_id == "global_max_pool") return pool_problem(seed, ops::PoolKind::Max);
    if (op_id == "dense") return dense_problem(seed);
    if (op_id == "sigmoid") return sigmoid_problem(seed);
    if (op_id == "channel_attention") return attention_problem(seed);
    if (op_id == "clustering_loss") return clustering_problem(seed);
    if (op_id == "contrastive_loss") return contrastive_problem(seed);
    if (op_id == "full_model") return full_model_problem(seed);
    throw ConfigError(detail::msg("make_fd_problem: unknown op id '", op_id, "'"));
}

double finite_difference_check(const std::string& op_id, uint64_t seed, double step) {
    FdProblem problem = make_fd_problem(op_id, seed);
    const size_t cap = op_id == "full_model" ? 24 : 0;
    return finite_difference_check(problem, step, cap).max_rel_error;
}

}  // namespace sceneseg
