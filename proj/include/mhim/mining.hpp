// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "mhim/aggregators.hpp"
#include "mhim/rng.hpp"

namespace mhim {

enum class ScoreSource { attention, instance_probability };
enum class LargeScaleStrategy { rsm, lsm };

inline std::string to_string(ScoreSource s) {
    return s == ScoreSource::attention ? "attention" : "instance_probability";
}
inline std::string to_string(LargeScaleStrategy s) { return s == LargeScaleStrategy::rsm ? "rsm" : "lsm"; }

/// Per-instance easiness scores; higher means easier to classify.
struct InstanceScores {
    std::vector<double> values;
    ScoreSource source = ScoreSource::instance_probability;

    std::size_t size() const { return values.size(); }
};

/// ceil(ratio * n) robust to representation error in `ratio` (0.07 * 100 must give 7).
inline std::size_t ceil_count(double ratio, std::size_t n) {
    const double x = ratio * static_cast<double>(n);
    const double c = std::ceil(x - 1e-9 * std::max(1.0, x));
    return std::min(n, static_cast<std::size_t>(std::max(0.0, c)));
}

/**
 * Easy-instance assessment by the teacher.
 *
 * With ScoreSource::attention the score is the attention weight itself. With
 * ScoreSource::instance_probability the teacher's bag classifier is applied to
 * each attention-weighted projected instance a_i * z_i; binary heads give the
 * positive-class sigmoid probability, multi-class heads the maximum class
 * softmax probability.
 */
inline InstanceScores assess(std::span<const double> attention, const Linear& classifier,
                             const Matrix& projected, ScoreSource source) {
    const std::size_t n = projected.rows();
    if (attention.size() != n) {
        throw ContractError("assess: attention length " + std::to_string(attention.size()) +
                            " != instance count " + std::to_string(n));
    }
    InstanceScores out{std::vector<double>(attention.begin(), attention.end()), source};
    if (source == ScoreSource::attention) return out;

    Matrix weighted = projected;
    for (std::size_t i = 0; i < n; ++i)
        for (double& v : weighted.row(i)) v *= attention[i];
    Matrix logits = kernel::matmul(weighted, classifier.weight.value);
    for (std::size_t i = 0; i < n; ++i) {
        auto row = logits.row(i);
        for (std::size_t j = 0; j < row.size(); ++j) row[j] += classifier.bias.value(0, j);
        const auto probs = class_probabilities(Matrix::row_vector(row));
        out.values[i] = *std::max_element(probs.begin(), probs.end());
    }
    return out;
}

/// Indices ordered by descending score; ties keep the lower original index first.
inline std::vector<std::size_t> sort_descending(std::span<const double> scores) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return idx;
}

/// Cosine decay of the high-score mask ratio over training steps.
struct DecaySchedule {
    double initial = 0.0;
    std::size_t total_steps = 0;
};

/// beta(t) = beta0 * (1 + cos(pi t / T)) / 2. Steps past T clamp to 0.
inline double decayed_ratio(const DecaySchedule& s, std::size_t step) {
    if (step > s.total_steps) return 0.0;
    if (s.total_steps == 0) return s.initial;
    const double t = static_cast<double>(step) / static_cast<double>(s.total_steps);
    return s.initial * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Draws `count` distinct elements of `pool` uniformly (partial Fisher-Yates).
inline std::vector<std::size_t> sample_without_replacement(std::vector<std::size_t> pool,
                                                           std::size_t count, Rng& rng) {
    count = std::min(count, pool.size());
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t j = rng.uniform_index(i, pool.size() - 1);
        std::swap(pool[i], pool[j]);
    }
    pool.resize(count);
    return pool;
}

/**
 * Randomly-high-score masking. Candidates are the top ceil(2*beta*N) scores;
 * exactly ceil(beta*N) of them, drawn uniformly without replacement, get flag 1.
 */
inline std::vector<std::uint8_t> rhsm(const InstanceScores& scores, double ratio, Rng& rng) {
    const std::size_t n = scores.size();
    std::vector<std::uint8_t> flags(n, 0);
    const std::size_t masked = ceil_count(ratio, n);
    if (masked == 0) return flags;
    const std::size_t candidates = ceil_count(2.0 * ratio, n);
    if (2.0 * ratio > 1.0 + 1e-12) {
        throw ContractError("rhsm: candidate set ceil(2*beta*N) exceeds N");
    }
    std::vector<std::size_t> order = sort_descending(scores.values);
    order.resize(candidates);
    for (std::size_t i : sample_without_replacement(std::move(order), masked, rng)) flags[i] = 1;
    return flags;
}

struct LargeScaleSplit {
    std::vector<std::size_t> kept;     // ascending original indices
    std::vector<std::size_t> recycle;  // ascending original indices
};

/**
 * Large-ratio masking over the survivors of high-score masking.
 * |recycle| = ceil(beta_l * N_hat); RSM picks them uniformly at random, LSM
 * picks the lowest-scored survivors (ties: lower original index first).
 */
inline LargeScaleSplit large_scale_mask(std::span<const std::size_t> survivors,
                                        const InstanceScores& scores, double ratio,
                                        LargeScaleStrategy strategy, Rng& rng) {
    if (!(ratio >= 0.0 && ratio < 1.0)) {
        throw ParameterError("large-scale mask ratio must lie in [0, 1)");
    }
    const std::size_t count = ceil_count(ratio, survivors.size());
    std::vector<std::size_t> recycle;
    if (count > 0) {
        std::vector<std::size_t> pool(survivors.begin(), survivors.end());
        if (strategy == LargeScaleStrategy::rsm) {
            recycle = sample_without_replacement(std::move(pool), count, rng);
        } else {
            std::stable_sort(pool.begin(), pool.end(), [&](std::size_t a, std::size_t b) {
                return scores.values[a] < scores.values[b] ||
                       (scores.values[a] == scores.values[b] && a < b);
            });
            pool.resize(count);
            recycle = std::move(pool);
        }
    }
    std::sort(recycle.begin(), recycle.end());
    LargeScaleSplit out;
    out.recycle = std::move(recycle);
    out.kept.reserve(survivors.size() - count);
    for (std::size_t i : survivors)
        if (!std::binary_search(out.recycle.begin(), out.recycle.end(), i)) out.kept.push_back(i);
    std::sort(out.kept.begin(), out.kept.end());
    return out;
}

/// The per-bag result of mining.
struct MaskPlan {
    std::vector<std::size_t> sorted_idx;   // descending score permutation
    std::vector<std::uint8_t> high_mask;   // N flags
    std::vector<std::uint8_t> large_mask;  // flags over survivors, in survivor order
    std::vector<std::size_t> kept;
    std::vector<std::size_t> recycle;
    double high_ratio = 0.0;               // effective (decayed) ratio used

    std::size_t instance_count() const { return high_mask.size(); }
    std::size_t masked_high_count() const {
        return static_cast<std::size_t>(std::count(high_mask.begin(), high_mask.end(), 1));
    }
};

/// Full mining pipeline for one bag: sort, RHSM, then large-scale masking.
inline MaskPlan plan_masks(const InstanceScores& scores, double high_ratio, double low_ratio,
                           LargeScaleStrategy strategy, Rng& rng) {
    MaskPlan plan;
    plan.high_ratio = high_ratio;
    plan.sorted_idx = sort_descending(scores.values);
    plan.high_mask = rhsm(scores, high_ratio, rng);
    std::vector<std::size_t> survivors;
    for (std::size_t i = 0; i < plan.high_mask.size(); ++i)
        if (plan.high_mask[i] == 0) survivors.push_back(i);
    LargeScaleSplit split = large_scale_mask(survivors, scores, low_ratio, strategy, rng);
    plan.large_mask.assign(survivors.size(), 0);
    for (std::size_t s = 0; s < survivors.size(); ++s)
        if (std::binary_search(split.recycle.begin(), split.recycle.end(), survivors[s]))
            plan.large_mask[s] = 1;
    plan.kept = std::move(split.kept);
    plan.recycle = std::move(split.recycle);
    return plan;
}

/// Row-gathers kept and recycled instances, preserving original relative order.
inline std::pair<Matrix, Matrix> apply_mask(const Matrix& z, std::span<const std::size_t> kept,
                                            std::span<const std::size_t> recycle) {
    std::vector<std::uint8_t> seen(z.rows(), 0);
    for (auto list : {kept, recycle}) {
        for (std::size_t i : list) {
            if (i >= z.rows()) {
                throw ContractError("apply_mask: index " + std::to_string(i) +
                                    " out of range for " + std::to_string(z.rows()) + " rows");
            }
            if (seen[i]++ != 0) throw ContractError("apply_mask: index lists overlap at " +
                                                    std::to_string(i));
        }
    }
    std::vector<std::size_t> k(kept.begin(), kept.end()), r(recycle.begin(), recycle.end());
    std::sort(k.begin(), k.end());
    std::sort(r.begin(), r.end());
    return {kernel::gather_rows(z, k), kernel::gather_rows(z, r)};
}

/// Role of each instance in a plan: "masked_high", "kept" or "recycled".
inline std::vector<std::string> mask_roles(const MaskPlan& plan) {
    std::vector<std::string> roles(plan.instance_count(), "masked_high");
    for (std::size_t i : plan.kept) roles[i] = "kept";
    for (std::size_t i : plan.recycle) roles[i] = "recycled";
    return roles;
}

/// CSV rows (no header): bag_id,instance_idx,score,role
inline void write_mask_plan_rows(std::ostream& os, const std::string& bag_id,
                                 const MaskPlan& plan, const InstanceScores& scores) {
    const auto roles = mask_roles(plan);
    for (std::size_t i = 0; i < roles.size(); ++i)
        os << bag_id << ',' << i << ',' << scores.values[i] << ',' << roles[i] << '\n';
}

inline constexpr const char* kMaskPlanCsvHeader = "bag_id,instance_idx,score,role";

}  // namespace mhim
