#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <set>
#include <sstream>

#include "mhim/data.hpp"
#include "mhim/mining.hpp"
#include "oracles.hpp"

using namespace mhim;

namespace {

InstanceScores random_scores(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    InstanceScores s;
    for (std::size_t i = 0; i < n; ++i) s.values.push_back(rng.uniform());
    return s;
}

std::set<std::size_t> flagged(const std::vector<std::uint8_t>& flags) {
    std::set<std::size_t> out;
    for (std::size_t i = 0; i < flags.size(); ++i)
        if (flags[i]) out.insert(i);
    return out;
}

}  // namespace

TEST(Assess, ZeroClassifierGivesHalf) {
    Linear head("c", 3, 1);
    Rng rng(1);
    Matrix z(4, 3);
    for (double& v : z.values()) v = rng.normal();
    const std::vector<double> a{0.1, 0.2, 0.3, 0.4};
    for (double s : assess(a, head, z, ScoreSource::instance_probability).values) EXPECT_EQ(s, 0.5);
}

TEST(Assess, AttentionSourcePassesThrough) {
    Linear head("c", 2, 1);
    const std::vector<double> a{0.7, 0.3};
    EXPECT_EQ(assess(a, head, Matrix(2, 2, 1.0), ScoreSource::attention).values, a);
}

TEST(Assess, OneHotAttentionOnlyMovesThatInstance) {
    Linear head("c", 3, 1);
    Rng rng(2);
    head.init(rng);
    Matrix z(5, 3);
    for (double& v : z.values()) v = rng.normal();
    const std::vector<double> a{0, 0, 1, 0, 0};
    const auto s = assess(a, head, z, ScoreSource::instance_probability).values;
    const double base = oracle::sigmoid(head.bias.value[0]);
    for (std::size_t i : {0, 1, 3, 4}) EXPECT_EQ(s[i], base);
}

TEST(Assess, MatchesPerInstanceLoop) {
    for (std::size_t classes : {1, 4}) {
        Linear head("c", 6, classes);
        Rng rng(3 + classes);
        head.init(rng);
        Matrix z(9, 6);
        for (double& v : z.values()) v = rng.normal();
        std::vector<double> a(9);
        for (double& v : a) v = rng.uniform();
        const auto got = assess(a, head, z, ScoreSource::instance_probability).values;
        for (std::size_t i = 0; i < 9; ++i) {
            std::vector<double> logit(classes);
            for (std::size_t c = 0; c < classes; ++c) {
                logit[c] = head.bias.value(0, c);
                for (std::size_t j = 0; j < 6; ++j) logit[c] += a[i] * z(i, j) * head.weight.value(j, c);
            }
            double expected = 0.0;
            if (classes == 1) {
                expected = oracle::sigmoid(logit[0]);
            } else {
                const auto p = oracle::softmax(logit);
                expected = *std::max_element(p.begin(), p.end());
            }
            EXPECT_NEAR(got[i], expected, 1e-12);
        }
    }
}

TEST(Sort, DescendingWithStableTies) {
    const std::vector<double> s{0.2, 0.9, 0.2, 0.5, 0.9};
    EXPECT_EQ(sort_descending(s), (std::vector<std::size_t>{1, 4, 3, 0, 2}));
}

TEST(Sort, IsAPermutationWithNonincreasingScores) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        auto s = random_scores(50, seed);
        for (std::size_t i = 0; i < 50; i += 7) s.values[i] = 0.5;  // ties
        const auto idx = sort_descending(s.values);
        std::vector<std::size_t> sorted = idx;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < 50; ++i) EXPECT_EQ(sorted[i], i);
        for (std::size_t i = 1; i < 50; ++i) EXPECT_GE(s.values[idx[i - 1]], s.values[idx[i]]);
    }
}

TEST(Decay, CosineEndpoints) {
    const DecaySchedule d{0.04, 100};
    EXPECT_EQ(decayed_ratio(d, 0), 0.04);
    EXPECT_NEAR(decayed_ratio(d, 100), 0.0, 1e-18);
    EXPECT_NEAR(decayed_ratio(d, 50), 0.02, 1e-15);
    EXPECT_EQ(decayed_ratio(d, 101), 0.0);
    for (std::size_t t = 1; t <= 100; ++t) EXPECT_LE(decayed_ratio(d, t), decayed_ratio(d, t - 1));
}

TEST(Rhsm, ZeroRatioMasksNothing) {
    Rng rng(1);
    const auto flags = rhsm(random_scores(30, 1), 0.0, rng);
    EXPECT_TRUE(flagged(flags).empty());
}

TEST(Rhsm, HundredInstancesFivePercent) {
    Rng rng(2);
    const auto s = random_scores(100, 2);
    const auto flags = rhsm(s, 0.05, rng);
    const auto masked = flagged(flags);
    EXPECT_EQ(masked.size(), 5u);
    const auto order = sort_descending(s.values);
    const std::set<std::size_t> top10(order.begin(), order.begin() + 10);
    for (std::size_t i : masked) EXPECT_TRUE(top10.count(i));
}

TEST(Rhsm, ContainmentAndFrequencyOverSeeds) {
    const auto s = random_scores(100, 3);
    const auto order = sort_descending(s.values);
    const std::set<std::size_t> top8(order.begin(), order.begin() + 8);
    std::vector<int> hits(100, 0);
    for (std::uint64_t seed = 0; seed < 1000; ++seed) {
        Rng rng(seed, "rhsm");
        const auto masked = flagged(rhsm(s, 0.04, rng));
        ASSERT_EQ(masked.size(), 4u);
        for (std::size_t i : masked) {
            ASSERT_TRUE(top8.count(i));
            ++hits[i];
        }
    }
    for (std::size_t i : top8) EXPECT_NEAR(hits[i] / 1000.0, 0.5, 0.05);
}

TEST(LargeScale, ZeroRatioKeepsAllSurvivors) {
    Rng rng(1);
    std::vector<std::size_t> survivors{0, 2, 3, 7};
    const auto split = large_scale_mask(survivors, random_scores(8, 1), 0.0, LargeScaleStrategy::rsm, rng);
    EXPECT_EQ(split.kept, survivors);
    EXPECT_TRUE(split.recycle.empty());
}

TEST(LargeScale, NinetySixAtThreeQuarters) {
    Rng rng(2);
    std::vector<std::size_t> survivors(96);
    std::iota(survivors.begin(), survivors.end(), std::size_t{4});
    const auto split = large_scale_mask(survivors, random_scores(100, 2), 0.75, LargeScaleStrategy::rsm, rng);
    EXPECT_EQ(split.recycle.size(), 72u);
    EXPECT_EQ(split.kept.size(), 24u);
}

TEST(LargeScale, LowScoreTakesTheBottomHalf) {
    Rng rng(3);
    InstanceScores s;
    for (std::size_t i = 0; i < 10; ++i) s.values.push_back(double(i));
    std::vector<std::size_t> survivors{9, 1, 5, 3, 7, 0};
    const auto split = large_scale_mask(survivors, s, 0.5, LargeScaleStrategy::lsm, rng);
    EXPECT_EQ(split.recycle, (std::vector<std::size_t>{0, 1, 3}));
    EXPECT_EQ(split.kept, (std::vector<std::size_t>{5, 7, 9}));
}

TEST(LargeScale, LowScoreTiesPreferLowerIndex) {
    Rng rng(4);
    InstanceScores s{std::vector<double>(6, 1.0), ScoreSource::attention};
    std::vector<std::size_t> survivors{5, 4, 3, 2, 1, 0};
    const auto split = large_scale_mask(survivors, s, 0.5, LargeScaleStrategy::lsm, rng);
    EXPECT_EQ(split.recycle, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(ApplyMask, KeepEverything) {
    Matrix z = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
    auto [kept, recycled] = apply_mask(z, std::vector<std::size_t>{0, 1, 2}, {});
    EXPECT_EQ(kept, z);
    EXPECT_EQ(recycled.rows(), 0u);
}

TEST(ApplyMask, SingleRows) {
    Matrix z = Matrix::from_rows({{1, 2}, {3, 4}, {5, 6}});
    auto [kept, recycled] = apply_mask(z, std::vector<std::size_t>{2}, std::vector<std::size_t>{0});
    EXPECT_EQ(kept, Matrix::from_rows({{5, 6}}));
    EXPECT_EQ(recycled, Matrix::from_rows({{1, 2}}));
}

TEST(ApplyMask, ReinterleaveReconstructsSurvivors) {
    Rng rng(5);
    Matrix z(40, 3);
    for (double& v : z.values()) v = rng.normal();
    const auto scores = random_scores(40, 5);
    const MaskPlan plan = plan_masks(scores, 0.05, 0.7, LargeScaleStrategy::rsm, rng);
    auto [kept, recycled] = apply_mask(z, plan.kept, plan.recycle);
    std::vector<std::size_t> survivors;
    for (std::size_t i = 0; i < 40; ++i)
        if (!plan.high_mask[i]) survivors.push_back(i);
    std::size_t a = 0, b = 0;
    for (std::size_t i : survivors) {
        const bool from_kept = a < plan.kept.size() && plan.kept[a] == i;
        const Matrix& src = from_kept ? kept : recycled;
        const std::size_t r = from_kept ? a++ : b++;
        for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(src(r, j), z(i, j));
    }
    EXPECT_EQ(a + b, survivors.size());
}

TEST(ApplyMask, RejectsBadIndices) {
    Matrix z(3, 2);
    EXPECT_THROW(apply_mask(z, std::vector<std::size_t>{3}, {}), ContractError);
    EXPECT_THROW(apply_mask(z, std::vector<std::size_t>{1}, std::vector<std::size_t>{1}), ContractError);
}

TEST(MaskPlan, CountsAreExactOverTheGrid) {
    // Ratios as exact fractions of 100; the oracle uses integer arithmetic.
    const std::size_t highs[] = {0, 1, 2, 5};
    const std::size_t lows[] = {0, 70, 80, 90};
    Rng rng(6);
    std::size_t violations = 0;
    for (std::size_t n = 1; n <= 1000; ++n) {
        const auto scores = random_scores(n, n);
        for (std::size_t h : highs)
            for (std::size_t l : lows) {
                const MaskPlan p = plan_masks(scores, h / 100.0, l / 100.0, LargeScaleStrategy::rsm, rng);
                const std::size_t masked = oracle::ceil_frac(h, 100, n);
                const std::size_t nhat = n - masked;
                violations += p.masked_high_count() != masked;
                violations += p.recycle.size() != oracle::ceil_frac(l, 100, nhat);
                violations += p.kept.size() != oracle::floor_frac(100 - l, 100, nhat);
                violations += p.kept.size() + p.recycle.size() + p.masked_high_count() != n;
            }
    }
    EXPECT_EQ(violations, 0u);
}

TEST(MaskPlan, PartitionInvariants) {
    Rng rng(7);
    const auto scores = random_scores(200, 7);
    const MaskPlan p = plan_masks(scores, 0.02, 0.8, LargeScaleStrategy::rsm, rng);
    std::set<std::size_t> k(p.kept.begin(), p.kept.end()), r(p.recycle.begin(), p.recycle.end());
    for (std::size_t i : k) EXPECT_FALSE(r.count(i));
    for (std::size_t i = 0; i < 200; ++i)
        EXPECT_EQ(p.high_mask[i] == 0, k.count(i) + r.count(i) == 1);
    EXPECT_EQ(std::count(p.large_mask.begin(), p.large_mask.end(), 1), static_cast<long>(p.recycle.size()));
}

TEST(MaskPlan, CsvRows) {
    Rng rng(8);
    InstanceScores s{{0.9, 0.1, 0.5, 0.4}, ScoreSource::instance_probability};
    const MaskPlan p = plan_masks(s, 0.25, 0.5, LargeScaleStrategy::lsm, rng);
    std::ostringstream os;
    write_mask_plan_rows(os, "bag_7", p, s);
    EXPECT_EQ(os.str(), "bag_7,0,0.9,masked_high\nbag_7,1,0.1,recycled\nbag_7,2,0.5,kept\nbag_7,3,0.4,recycled\n");
}

TEST(MaskPlan, EasyMaskingEnrichesPlantedPositives) {
    // A teacher whose head reads the planted direction scores positives highest.
    SyntheticSpec spec;
    spec.n_bags = 40;
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const auto ds = generate(spec, seed);
        Rng dir(seed, "synthetic.directions");
        const auto u = detail::random_unit(spec.input_dim, dir);
        Linear head("c", spec.input_dim, 1);
        for (std::size_t j = 0; j < spec.input_dim; ++j) head.weight.value(j, 0) = u[j] * 50.0;
        head.bias.value[0] = -40.0;
        double masked_rate = 0.0, random_rate = 0.0;
        Rng rng(seed, "probe");
        for (std::size_t b = 0; b < ds.bags.size(); ++b) {
            if (ds.bags[b].label != 1) continue;
            const std::size_t n = ds.bags[b].size();
            const std::vector<double> a(n, 1.0);
            const auto s = assess(a, head, ds.bags[b].features, ScoreSource::instance_probability);
            const MaskPlan p = plan_masks(s, 0.02, 0.0, LargeScaleStrategy::rsm, rng);
            std::vector<std::size_t> all(n);
            std::iota(all.begin(), all.end(), std::size_t{0});
            const auto uniform = sample_without_replacement(all, p.masked_high_count(), rng);
            for (std::size_t i = 0; i < n; ++i)
                if (p.high_mask[i]) masked_rate += ds.planted[b].positive[i];
            for (std::size_t i : uniform) random_rate += ds.planted[b].positive[i];
        }
        EXPECT_GT(masked_rate - random_rate, 0.0) << "seed " << seed;
    }
}
