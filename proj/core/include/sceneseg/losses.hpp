#pragma once

#include <cstdint>
#include <vector>

#include "sceneseg/rng.hpp"
#include "sceneseg/tensor.hpp"

// The two unsupervised loss terms: deep-clustering cross-entropy against
// argmax pseudo-labels, and the shuffled-pair contrastive penalty
// mean(exp(-L1 distance)) pushing unpaired patch features apart.

namespace sceneseg {

/// Per-pixel cluster indices in [0, K) for a (B, K, h, w) feature batch.
struct PseudoLabelBatch {
    size_t batch = 0;
    size_t height = 0;
    size_t width = 0;
    std::vector<int32_t> labels;  // (batch, height, width) row-major

    int32_t at(size_t b, size_t r, size_t c) const {
        return labels[(b * height + r) * width + c];
    }
};

struct LossReport {
    double clustering = 0.0;
    double contrastive = 0.0;
    double total = 0.0;

    static LossReport of(double clustering, double contrastive) {
        return {clustering, contrastive, clustering + contrastive};
    }
};

template <typename T>
struct LossValueGrad {
    double value = 0.0;
    TensorT<T> grad;  // w.r.t. the features
};

/// Argmax over the K feature channels per pixel; ties break to the lowest
/// index. Labels are constants: no gradient flows through this assignment.
template <typename T>
PseudoLabelBatch assign_pseudo_labels(const TensorT<T>& features);

/// Mean over all pixels of -log softmax(y)[label], with gradient
/// (softmax(y) - onehot(label)) / (B * N).
template <typename T>
LossValueGrad<T> clustering_loss(const TensorT<T>& features, const PseudoLabelBatch& labels);

/// Uniformly random derangement of [0, batch): resampled until it has no
/// fixed point, rotation-by-one fallback after 100 draws.
std::vector<size_t> shuffle_pairing(size_t batch, Rng& rng);

/// Mean over all pixels of exp(-||y_b - y_perm(b)||_1), both pair members
/// receiving gradient. The L1 subgradient at exactly zero difference is 0.
template <typename T>
LossValueGrad<T> contrastive_loss(const TensorT<T>& features, const std::vector<size_t>& perm);

}  // namespace sceneseg
