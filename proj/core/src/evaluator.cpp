#include "sceneseg/evaluator.hpp"

#include <cmath>

#include <json.hpp>

#include "sceneseg/errors.hpp"

namespace sceneseg {

void ConfusionMatrix::add(const ConfusionMatrix& other) {
    if (other.clusters != clusters || other.classes != classes)
        throw ShapeError(detail::msg("ConfusionMatrix::add: ", other.clusters, "x", other.classes,
                                     " does not match ", clusters, "x", classes));
    for (size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
    ignored += other.ignored;
}

ConfusionMatrix confusion(const SegmentationMap& pred, const ReferenceMap& ref) {
    if (pred.height != ref.height || pred.width != ref.width)
        throw ShapeError(detail::msg("confusion: prediction ", pred.height, "x", pred.width,
                                     " does not match reference ", ref.height, "x", ref.width));
    ConfusionMatrix cm;
    cm.clusters = pred.num_labels;
    cm.classes = ref.num_classes;
    cm.counts.assign(cm.clusters * cm.classes, 0);
    for (size_t i = 0; i < pred.labels.size(); ++i) {
        const int32_t m = ref.labels[i];
        if (m == ReferenceMap::kIgnore) {
            ++cm.ignored;
            continue;
        }
        const int32_t k = pred.labels[i];
        if (k < 0 || static_cast<size_t>(k) >= cm.clusters)
            throw ContractError(detail::msg("confusion: cluster id ", k, " out of range [0, ",
                                            cm.clusters, ")"));
        if (static_cast<size_t>(m) >= cm.classes)
            throw ContractError(detail::msg("confusion: reference class ", m, " out of range [0, ",
                                            cm.classes, ")"));
        ++cm.at(static_cast<size_t>(k), static_cast<size_t>(m));
    }
    return cm;
}

std::vector<int32_t> majority_map(const ConfusionMatrix& cm) {
    std::vector<int32_t> mapping(cm.clusters, -1);
    for (size_t k = 0; k < cm.clusters; ++k) {
        int64_t best = 0;
        int32_t arg = -1;
        for (size_t m = 0; m < cm.classes; ++m) {
            if (cm.at(k, m) > best) {  // strict: ties keep the lower class index
                best = cm.at(k, m);
                arg = static_cast<int32_t>(m);
            }
        }
        mapping[k] = arg;  // stays -1 for an empty cluster
    }
    return mapping;
}

MetricsReport metrics(const ConfusionMatrix& cm, const std::vector<int32_t>& mapping,
                      std::vector<std::string> class_names) {
    if (mapping.size() != cm.clusters)
        throw ContractError(detail::msg("metrics: mapping covers ", mapping.size(),
                                        " clusters, confusion has ", cm.clusters));
    // collapse clusters into an M x M class confusion
    std::vector<int64_t> collapsed(cm.classes * cm.classes, 0);
    for (size_t k = 0; k < cm.clusters; ++k) {
        int64_t row_total = 0;
        for (size_t m = 0; m < cm.classes; ++m) row_total += cm.at(k, m);
        if (mapping[k] < 0) {
            if (row_total > 0)
                throw ContractError(detail::msg("metrics: non-empty cluster ", k,
                                                " is unmapped (mapping gap)"));
            continue;
        }
        if (static_cast<size_t>(mapping[k]) >= cm.classes)
            throw ContractError(detail::msg("metrics: cluster ", k, " mapped to class ",
                                            mapping[k], ", outside [0, ", cm.classes, ")"));
        for (size_t m = 0; m < cm.classes; ++m)
            collapsed[static_cast<size_t>(mapping[k]) * cm.classes + m] += cm.at(k, m);
    }

    MetricsReport rep;
    rep.f1.assign(cm.classes, 0.0);
    rep.iou.assign(cm.classes, 0.0);
    rep.present.assign(cm.classes, false);
    rep.mapping = mapping;
    rep.ignored = cm.ignored;
    rep.class_names = std::move(class_names);

    double f1_sum = 0.0, iou_sum = 0.0;
    size_t present_count = 0;
    for (size_t m = 0; m < cm.classes; ++m) {
        const int64_t tp = collapsed[m * cm.classes + m];
        int64_t fp = 0, fn = 0;
        for (size_t j = 0; j < cm.classes; ++j) {
            if (j == m) continue;
            fp += collapsed[m * cm.classes + j];
            fn += collapsed[j * cm.classes + m];
        }
        rep.present[m] = (tp + fn) > 0;
        rep.f1[m] = (2 * tp + fp + fn) > 0
                        ? 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn)
                        : 0.0;
        rep.iou[m] = (tp + fp + fn) > 0
                         ? static_cast<double>(tp) / static_cast<double>(tp + fp + fn)
                         : 0.0;
        if (rep.present[m]) {
            f1_sum += rep.f1[m];
            iou_sum += rep.iou[m];
            ++present_count;
        }
    }
    if (present_count > 0) {
        rep.macro_f1 = f1_sum / static_cast<double>(present_count);
        rep.macro_iou = iou_sum / static_cast<double>(present_count);
    }
    return rep;
}

SegmentationMap apply_mapping(const SegmentationMap& map, const std::vector<int32_t>& mapping) {
    SegmentationMap out;
    out.height = map.height;
    out.width = map.width;
    out.labels.resize(map.labels.size());
    int32_t max_class = 0;
    for (size_t i = 0; i < map.labels.size(); ++i) {
        const int32_t k = map.labels[i];
        if (k < 0 || static_cast<size_t>(k) >= mapping.size() || mapping[k] < 0)
            throw ContractError(detail::msg("apply_mapping: cluster ", k,
                                            " present in map but not covered by the mapping"));
        out.labels[i] = mapping[k];
        max_class = std::max(max_class, mapping[k]);
    }
    out.num_labels = static_cast<size_t>(max_class) + 1;
    return out;
}

SegmentationMap binarize(const SegmentationMap& class_map, int32_t positive_class) {
    if (positive_class < 0)
        throw ConfigError(detail::msg("binarize: invalid positive class ", positive_class));
    SegmentationMap out;
    out.height = class_map.height;
    out.width = class_map.width;
    out.num_labels = 2;
    out.labels.resize(class_map.labels.size());
    for (size_t i = 0; i < class_map.labels.size(); ++i)
        out.labels[i] = class_map.labels[i] == positive_class ? 1 : 0;
    return out;
}

MetricsReport average_runs(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ConfigError("average_runs: no reports given");
    const size_t classes = reports.front().f1.size();
    for (const auto& r : reports) {
        if (r.f1.size() != classes || r.present != reports.front().present)
            throw ConfigError("average_runs: reports do not share a class set");
    }
    MetricsReport out;
    out.f1.assign(classes, 0.0);
    out.iou.assign(classes, 0.0);
    out.present = reports.front().present;
    out.class_names = reports.front().class_names;
    double ignored = 0.0;
    for (const auto& r : reports) {
        for (size_t m = 0; m < classes; ++m) {
            out.f1[m] += r.f1[m];
            out.iou[m] += r.iou[m];
        }
        out.macro_f1 += r.macro_f1;
        out.macro_iou += r.macro_iou;
        ignored += static_cast<double>(r.ignored);
    }
    const double n = static_cast<double>(reports.size());
    for (size_t m = 0; m < classes; ++m) {
        out.f1[m] /= n;
        out.iou[m] /= n;
    }
    out.macro_f1 /= n;
    out.macro_iou /= n;
    out.ignored = std::llround(ignored / n);
    return out;
}

std::string MetricsReport::to_json(int indent) const {
    nlohmann::json doc;
    nlohmann::json per_class = nlohmann::json::object();
    for (size_t m = 0; m < f1.size(); ++m) {
        const std::string name =
            m < class_names.size() ? class_names[m] : detail::msg("class", m);
        per_class[name] = {{"f1", f1[m]}, {"iou", iou[m]}, {"present", bool(present[m])}};
    }
    doc["per_class"] = per_class;
    doc["macro_f1"] = macro_f1;
    doc["macro_iou"] = macro_iou;
    if (!mapping.empty()) {
        nlohmann::json m = nlohmann::json::object();
        for (size_t k = 0; k < mapping.size(); ++k) {
            const std::string key = std::to_string(k);
            if (mapping[k] < 0) {
                m[key] = nullptr;
            } else if (static_cast<size_t>(mapping[k]) < class_names.size()) {
                m[key] = class_names[mapping[k]];
            } else {
                m[key] = mapping[k];
            }
        }
        doc["mapping"] = m;
    }
    doc["ignored"] = ignored;
    return doc.dump(indent);
}

}  // namespace sceneseg
