#include "sceneseg/losses.hpp"

#include <algorithm>
#include <cmath>

#include "sceneseg/errors.hpp"

namespace sceneseg {

template <typename T>
PseudoLabelBatch assign_pseudo_labels(const TensorT<T>& features) {
    const size_t nb = features.n(), k = features.c(), plane = features.plane();
    PseudoLabelBatch out;
    out.batch = nb;
    out.height = features.h();
    out.width = features.w();
    out.labels.assign(nb * plane, 0);
    for (size_t b = 0; b < nb; ++b) {
        const T* sample = features.sample_ptr(b);
        int32_t* labels = out.labels.data() + b * plane;
        for (size_t i = 0; i < plane; ++i) {
            T best = sample[i];
            int32_t arg = 0;
            for (size_t ch = 1; ch < k; ++ch) {
                const T v = sample[ch * plane + i];
                if (v > best) {  // strict: ties keep the lower index
                    best = v;
                    arg = static_cast<int32_t>(ch);
                }
            }
            labels[i] = arg;
        }
    }
    return out;
}

template <typename T>
LossValueGrad<T> clustering_loss(const TensorT<T>& features, const PseudoLabelBatch& labels) {
    const size_t nb = features.n(), k = features.c(), plane = features.plane();
    if (labels.batch != nb || labels.height != features.h() || labels.width != features.w())
        throw ShapeError(detail::msg("clustering_loss: label grid ", labels.batch, "x",
                                     labels.height, "x", labels.width,
                                     " does not match feature batch"));
    LossValueGrad<T> out;
    out.grad = TensorT<T>(features.shape());
    const double inv_count = 1.0 / static_cast<double>(nb * plane);
    double accum = 0.0;
    std::vector<T> probs(k);
    for (size_t b = 0; b < nb; ++b) {
        const T* sample = features.sample_ptr(b);
        T* grad = out.grad.sample_ptr(b);
        const int32_t* lbl = labels.labels.data() + b * plane;
        for (size_t i = 0; i < plane; ++i) {
            const int32_t c = lbl[i];
            if (c < 0 || static_cast<size_t>(c) >= k)
                throw ContractError(detail::msg("clustering_loss: label ", c, " out of range [0, ",
                                                k, ")"));
            T maxv = sample[i];
            for (size_t ch = 1; ch < k; ++ch) maxv = std::max(maxv, sample[ch * plane + i]);
            T denom = T(0);
            for (size_t ch = 0; ch < k; ++ch) {
                probs[ch] = std::exp(sample[ch * plane + i] - maxv);
                denom += probs[ch];
            }
            accum += -(static_cast<double>(sample[static_cast<size_t>(c) * plane + i] - maxv) -
                       std::log(static_cast<double>(denom)));
            const T inv_denom = T(1) / denom;
            for (size_t ch = 0; ch < k; ++ch) {
                T g = probs[ch] * inv_denom;
                if (static_cast<int32_t>(ch) == c) g -= T(1);
                grad[ch * plane + i] = g * static_cast<T>(inv_count);
            }
        }
    }
    out.value = accum * inv_count;
    return out;
}

std::vector<size_t> shuffle_pairing(size_t batch, Rng& rng) {
    if (batch < 2)
        throw ConfigError(detail::msg("shuffle_pairing: batch size ", batch,
                                      " has no derangement (need >= 2)"));
    std::vector<size_t> perm(batch);
    for (int attempt = 0; attempt < 100; ++attempt) {
        for (size_t i = 0; i < batch; ++i) perm[i] = i;
        rng.shuffle(perm);
        bool fixed_point = false;
        for (size_t i = 0; i < batch; ++i)
            if (perm[i] == i) {
                fixed_point = true;
                break;
            }
        if (!fixed_point) return perm;
    }
    for (size_t i = 0; i < batch; ++i) perm[i] = (i + 1) % batch;
    return perm;
}

template <typename T>
LossValueGrad<T> contrastive_loss(const TensorT<T>& features, const std::vector<size_t>& perm) {
    const size_t nb = features.n(), k = features.c(), plane = features.plane();
    if (perm.size() != nb)
        throw ContractError(detail::msg("contrastive_loss: permutation length ", perm.size(),
                                        " does not match batch size ", nb));
    for (size_t b = 0; b < nb; ++b) {
        if (perm[b] >= nb)
            throw ContractError(detail::msg("contrastive_loss: perm[", b, "] = ", perm[b],
                                            " out of range"));
        if (perm[b] == b)
            throw ContractError(detail::msg("contrastive_loss: perm has fixed point at ", b,
                                            "; pairs must be unpaired patches"));
    }

    LossValueGrad<T> out;
    out.grad = TensorT<T>(features.shape());
    const double inv_count = 1.0 / static_cast<double>(nb * plane);
    double accum = 0.0;
    for (size_t b = 0; b < nb; ++b) {
        const T* lhs = features.sample_ptr(b);
        const T* rhs = features.sample_ptr(perm[b]);
        T* grad_lhs = out.grad.sample_ptr(b);
        T* grad_rhs = out.grad.sample_ptr(perm[b]);
        for (size_t i = 0; i < plane; ++i) {
            T l1 = T(0);
            for (size_t ch = 0; ch < k; ++ch) l1 += std::abs(lhs[ch * plane + i] - rhs[ch * plane + i]);
            const T term = std::exp(-l1);
            accum += static_cast<double>(term);
            const T scale = term * static_cast<T>(inv_count);
            for (size_t ch = 0; ch < k; ++ch) {
                const T d = lhs[ch * plane + i] - rhs[ch * plane + i];
                if (d == T(0)) continue;  // L1 subgradient at 0 taken as 0
                const T s = d > T(0) ? T(1) : T(-1);
                grad_lhs[ch * plane + i] -= s * scale;
                grad_rhs[ch * plane + i] += s * scale;
            }
        }
    }
    out.value = accum * inv_count;
    return out;
}

template PseudoLabelBatch assign_pseudo_labels<float>(const TensorT<float>&);
template PseudoLabelBatch assign_pseudo_labels<double>(const TensorT<double>&);
template LossValueGrad<float> clustering_loss<float>(const TensorT<float>&, const PseudoLabelBatch&);
template LossValueGrad<double> clustering_loss<double>(const TensorT<double>&,
                                                       const PseudoLabelBatch&);
template LossValueGrad<float> contrastive_loss<float>(const TensorT<float>&,
                                                      const std::vector<size_t>&);
template LossValueGrad<double> contrastive_loss<double>(const TensorT<double>&,
                                                        const std::vector<size_t>&);

}  // namespace sceneseg
