#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sceneseg/scene.hpp"

// Scoring of an unsupervised K-cluster map against a reference: overlap-based
// cluster naming, per-class and macro F1/IoU, binary building maps, and
// multi-seed report averaging.

namespace sceneseg {

struct ConfusionMatrix {
    size_t clusters = 0;
    size_t classes = 0;
    std::vector<int64_t> counts;  // clusters x classes, row-major
    int64_t ignored = 0;

    int64_t at(size_t cluster, size_t cls) const { return counts[cluster * classes + cls]; }
    int64_t& at(size_t cluster, size_t cls) { return counts[cluster * classes + cls]; }

    /// Pools another tile's counts into this one.
    void add(const ConfusionMatrix& other);
};

/// counts[k][m] = pixels predicted cluster k with reference class m;
/// ignore-sentinel reference pixels are excluded (and counted in `ignored`).
ConfusionMatrix confusion(const SegmentationMap& pred, const ReferenceMap& ref);

/// Majority-overlap naming: each cluster maps to the reference class with the
/// largest count in its row (ties to the lower class index, many-to-one
/// allowed). Empty clusters map to -1 and are excluded from metrics.
std::vector<int32_t> majority_map(const ConfusionMatrix& cm);

struct MetricsReport {
    std::vector<double> f1;       // per class
    std::vector<double> iou;      // per class
    std::vector<bool> present;    // class appears in the reference
    double macro_f1 = 0.0;        // unweighted mean over present classes
    double macro_iou = 0.0;
    std::vector<int32_t> mapping;  // cluster -> class; empty for averaged reports
    int64_t ignored = 0;
    std::vector<std::string> class_names;

    /// {per_class:{name:{f1,iou}}, macro_f1, macro_iou, mapping, ignored}
    std::string to_json(int indent = 2) const;
};

/// Collapses clusters by the mapping into a class-vs-class confusion and
/// computes F1 = 2TP/(2TP+FP+FN) and IoU = TP/(TP+FP+FN) per class. The
/// mapping must cover every non-empty cluster.
MetricsReport metrics(const ConfusionMatrix& cm, const std::vector<int32_t>& mapping,
                      std::vector<std::string> class_names = {});

/// Rewrites cluster ids into class ids through the mapping.
SegmentationMap apply_mapping(const SegmentationMap& map, const std::vector<int32_t>& mapping);

/// 1 where the label equals the positive class, 0 elsewhere.
SegmentationMap binarize(const SegmentationMap& class_map, int32_t positive_class);

/// Field-wise arithmetic mean of reports over runs; the mapping is omitted.
MetricsReport average_runs(const std::vector<MetricsReport>& reports);

}  // namespace sceneseg
