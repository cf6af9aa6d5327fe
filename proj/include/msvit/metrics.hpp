#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "msvit/tensor.hpp"

namespace msvit {

struct GeneMetrics {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    double accuracy = 0, precision = 0, recall = 0, specificity = 0, f_score = 0;
};

// standard confusion-count metrics; fractions with empty denominators are 0
inline GeneMetrics compute_metrics(const std::vector<int>& preds, const std::vector<int>& labels) {
    check(preds.size() == labels.size() && !preds.empty(), "compute_metrics: size mismatch or empty input");
    GeneMetrics m;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        check((preds[i] == 0 || preds[i] == 1) && (labels[i] == 0 || labels[i] == 1),
              "compute_metrics: entries must be binary");
        if (labels[i] == 1)
            preds[i] == 1 ? ++m.tp : ++m.fn;
        else
            preds[i] == 1 ? ++m.fp : ++m.tn;
    }
    const double total = static_cast<double>(preds.size());
    m.accuracy = static_cast<double>(m.tp + m.tn) / total;
    m.precision = m.tp + m.fp ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp) : 0.0;
    m.recall = m.tp + m.fn ? static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn) : 0.0;
    m.specificity = m.tn + m.fp ? static_cast<double>(m.tn) / static_cast<double>(m.tn + m.fp) : 0.0;
    m.f_score = m.precision + m.recall > 0 ? 2.0 * m.precision * m.recall / (m.precision + m.recall) : 0.0;
    return m;
}

struct FoldMetrics {
    GeneMetrics arms2, cfh;
    double mean_accuracy() const { return 0.5 * (arms2.accuracy + cfh.accuracy); }
};

struct MetricsReport {
    std::vector<FoldMetrics> folds;

    // per-metric mean over folds (confusion counts are per fold only)
    FoldMetrics mean() const {
        FoldMetrics m;
        if (folds.empty()) return m;
        const auto avg = [&](double GeneMetrics::*field, GeneMetrics FoldMetrics::*gene) {
            double acc = 0;
            for (const auto& f : folds) acc += (f.*gene).*field;
            return acc / static_cast<double>(folds.size());
        };
        for (auto gene : {&FoldMetrics::arms2, &FoldMetrics::cfh}) {
            GeneMetrics& g = m.*gene;
            g.accuracy = avg(&GeneMetrics::accuracy, gene);
            g.precision = avg(&GeneMetrics::precision, gene);
            g.recall = avg(&GeneMetrics::recall, gene);
            g.specificity = avg(&GeneMetrics::specificity, gene);
            g.f_score = avg(&GeneMetrics::f_score, gene);
        }
        return m;
    }
};

}  // namespace msvit
