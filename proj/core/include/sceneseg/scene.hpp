#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sceneseg/errors.hpp"
#include "sceneseg/tensor.hpp"

namespace sceneseg {

/// Per-band statistics of the raw raster, kept so normalized values can be
/// mapped back to raw units.
struct BandStats {
    double mean = 0.0;
    double std = 0.0;  // 0 for a constant band
};

/// A multi-band raster in channels-first fp32 layout: data[band][row][col].
struct Scene {
    size_t bands = 0;
    size_t height = 0;
    size_t width = 0;
    std::vector<float> data;
    std::vector<BandStats> norm_stats;
    bool normalized = false;

    size_t plane() const { return height * width; }

    float at(size_t band, size_t row, size_t col) const {
        return data[(band * height + row) * width + col];
    }
    float& at(size_t band, size_t row, size_t col) {
        return data[(band * height + row) * width + col];
    }

    /// Copies the window [row0, row0+h) x [col0, col0+w) of all bands into
    /// sample `n` of a (., bands, h, w) batch tensor.
    void gather_patch(Tensor& batch, size_t n, size_t row0, size_t col0) const {
        const size_t h = batch.h(), w = batch.w();
        if (batch.c() != bands)
            throw ShapeError(detail::msg("gather_patch: batch has ", batch.c(),
                                         " channels, scene has ", bands, " bands"));
        if (row0 + h > height || col0 + w > width)
            throw ConfigError(detail::msg("gather_patch: window at (", row0, ",", col0,
                                          ") exceeds scene ", height, "x", width));
        for (size_t b = 0; b < bands; ++b) {
            const float* src = data.data() + (b * height + row0) * width + col0;
            float* dst = batch.plane_ptr(n, b);
            for (size_t r = 0; r < h; ++r) std::copy(src + r * width, src + r * width + w, dst + r * w);
        }
    }
};

/// Per-pixel cluster (or class) indices in [0, num_labels).
struct SegmentationMap {
    size_t height = 0;
    size_t width = 0;
    size_t num_labels = 0;
    std::vector<int32_t> labels;

    int32_t at(size_t row, size_t col) const { return labels[row * width + col]; }
    int32_t& at(size_t row, size_t col) { return labels[row * width + col]; }
};

/// Decoded reference mask. Labels are class indices, or kIgnore for pixels
/// whose color matched no palette entry; those are excluded from all metrics.
struct ReferenceMap {
    static constexpr int32_t kIgnore = -1;

    size_t height = 0;
    size_t width = 0;
    size_t num_classes = 0;
    std::vector<int32_t> labels;
    bool palette_warning = false;  // set when > 50% of pixels were ignored
};

}  // namespace sceneseg
