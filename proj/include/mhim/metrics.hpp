// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mhim/errors.hpp"

namespace mhim {

struct MetricReport {
    double auc = 0.0;
    double accuracy = 0.0;
    double f1 = 0.0;
    double optimal_threshold = 0.0;
    std::size_t n_pos = 0;
    std::size_t n_neg = 0;
    std::string criterion = "f1";
};

namespace detail {

inline void count_classes(std::span<const int> labels, std::size_t& pos, std::size_t& neg) {
    pos = static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
    neg = labels.size() - pos;
}

inline void check_binary(std::span<const double> scores, std::span<const int> labels,
                         const char* what) {
    if (scores.size() != labels.size())
        throw ContractError(std::string(what) + ": scores and labels differ in length");
    for (int y : labels)
        if (y != 0 && y != 1) throw ContractError(std::string(what) + ": labels must be 0 or 1");
    std::size_t pos = 0, neg = 0;
    count_classes(labels, pos, neg);
    if (pos == 0 || neg == 0)
        throw UndefinedMetricError(std::string(what) + " is undefined without both classes");
}

}  // namespace detail

/// ROC-AUC as the Mann-Whitney statistic: (concordant + ties/2) / (n_pos n_neg).
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    detail::check_binary(scores, labels, "auc");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Twice the numerator, kept integral so the result is exact.
    std::uint64_t twice = 0;
    std::uint64_t neg_below = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        std::uint64_t pos_tied = 0, neg_tied = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1 ? pos_tied : neg_tied) += 1;
            ++j;
        }
        twice += pos_tied * (2 * neg_below + neg_tied);
        neg_below += neg_tied;
        i = j;
    }
    std::size_t pos = 0, neg = 0;
    detail::count_classes(labels, pos, neg);
    return static_cast<double>(twice) / 2.0 / (static_cast<double>(pos) * static_cast<double>(neg));
}

struct ThresholdOutcome {
    double threshold = 0.0;
    double accuracy = 0.0;
    double f1 = 0.0;
};

/// Accuracy and F1 when predicting positive for score > threshold.
inline ThresholdOutcome evaluate_threshold(std::span<const double> scores,
                                           std::span<const int> labels, double threshold) {
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        const bool pred = scores[i] > threshold;
        if (pred) (labels[i] == 1 ? tp : fp) += 1;
        else (labels[i] == 1 ? fn : tn) += 1;
    }
    ThresholdOutcome o;
    o.threshold = threshold;
    o.accuracy = static_cast<double>(tp + tn) / static_cast<double>(scores.size());
    const std::size_t denom = 2 * tp + fp + fn;
    o.f1 = denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
    return o;
}

/// Candidate thresholds: -inf, midpoints of adjacent sorted unique scores, +inf.
inline std::vector<double> candidate_thresholds(std::span<const double> scores) {
    std::vector<double> s(scores.begin(), scores.end());
    std::sort(s.begin(), s.end());
    s.erase(std::unique(s.begin(), s.end()), s.end());
    std::vector<double> out{-std::numeric_limits<double>::infinity()};
    for (std::size_t i = 0; i + 1 < s.size(); ++i) out.push_back(s[i] + (s[i + 1] - s[i]) / 2.0);
    out.push_back(std::numeric_limits<double>::infinity());
    return out;
}

/**
 * AUC plus accuracy and F1 at the F1-optimal threshold.
 * Ties in F1 prefer higher accuracy, then the lower threshold.
 */
inline MetricReport optimal_threshold_metrics(std::span<const double> scores,
                                              std::span<const int> labels) {
    detail::check_binary(scores, labels, "optimal_threshold_metrics");
    MetricReport r;
    r.auc = auc(scores, labels);
    detail::count_classes(labels, r.n_pos, r.n_neg);
    bool first = true;
    ThresholdOutcome best;
    for (double t : candidate_thresholds(scores)) {
        const ThresholdOutcome o = evaluate_threshold(scores, labels, t);
        if (first || o.f1 > best.f1 || (o.f1 == best.f1 && o.accuracy > best.accuracy)) {
            best = o;
            first = false;
        }
    }
    r.accuracy = best.accuracy;
    r.f1 = best.f1;
    r.optimal_threshold = best.threshold;
    return r;
}

/**
 * Multi-class report: macro one-vs-rest AUC, argmax accuracy and macro F1.
 * `probs` is row-major n x C. No threshold is optimized.
 */
inline MetricReport multiclass_metrics(std::span<const double> probs, std::size_t classes,
                                       std::span<const int> labels) {
    const std::size_t n = labels.size();
    if (probs.size() != n * classes) throw ContractError("multiclass_metrics: shape mismatch");
    MetricReport r;
    r.criterion = "argmax";
    r.optimal_threshold = std::numeric_limits<double>::quiet_NaN();
    std::size_t correct = 0;
    std::vector<std::size_t> tp(classes, 0), fp(classes, 0), fn(classes, 0);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = probs.subspan(i * classes, classes);
        const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        const auto y = static_cast<std::size_t>(labels[i]);
        if (pred == y) {
            ++correct;
            ++tp[y];
        } else {
            ++fp[pred];
            ++fn[y];
        }
    }
    double auc_sum = 0.0, f1_sum = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::vector<double> s(n);
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = probs[i * classes + c];
            y[i] = static_cast<std::size_t>(labels[i]) == c ? 1 : 0;
        }
        auc_sum += auc(s, y);
        const std::size_t denom = 2 * tp[c] + fp[c] + fn[c];
        f1_sum += denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp[c]) / static_cast<double>(denom);
    }
    r.auc = auc_sum / static_cast<double>(classes);
    r.f1 = f1_sum / static_cast<double>(classes);
    r.accuracy = static_cast<double>(correct) / static_cast<double>(n);
    r.n_pos = n;
    return r;
}

struct MeanStd {
    double mean = 0.0;
    double std = 0.0;  // population
};

inline MeanStd mean_std(std::span<const double> values) {
    MeanStd out;
    if (values.empty()) return out;
    const double n = static_cast<double>(values.size());
    out.mean = std::accumulate(values.begin(), values.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : values) ss += (v - out.mean) * (v - out.mean);
    out.std = std::sqrt(ss / n);
    return out;
}

struct AggregateReport {
    MeanStd auc, accuracy, f1;
};

inline AggregateReport aggregate(std::span<const MetricReport> folds) {
    std::vector<double> a, acc, f;
    for (const MetricReport& r : folds) {
        a.push_back(r.auc);
        acc.push_back(r.accuracy);
        f.push_back(r.f1);
    }
    return {mean_std(a), mean_std(acc), mean_std(f)};
}

}  // namespace mhim
