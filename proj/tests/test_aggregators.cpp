#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>

#include "mhim/aggregators.hpp"
#include "oracles.hpp"

using namespace mhim;

namespace {

ModelConfig small(Family f) {
    ModelConfig c;
    c.family = f;
    c.input_dim = 5;
    c.hidden_dim = 8;
    c.attention_dim = 4;
    c.layers = 2;
    c.heads = 2;
    return c;
}

Matrix random_bag(std::size_t n, std::size_t d, std::uint64_t seed) {
    Rng rng(seed);
    Matrix z(n, d);
    for (double& v : z.values()) v = rng.normal();
    return z;
}

MilModel make_model(const ModelConfig& c, std::uint64_t seed) {
    MilModel m(c);
    Rng rng(seed);
    m.init(rng);
    return m;
}

double sum_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0); }

// ReLU-projected features computed without the library.
Matrix project_oracle(const Linear& proj, const Matrix& z) {
    Matrix h = oracle::matmul(z, proj.weight.value);
    for (std::size_t i = 0; i < h.rows(); ++i)
        for (std::size_t j = 0; j < h.cols(); ++j) h(i, j) = std::max(0.0, h(i, j) + proj.bias.value(0, j));
    return h;
}

}  // namespace

TEST(Gated, SingletonBagPoolsToItsProjection) {
    MilModel m = make_model(small(Family::gated), 1);
    Tape t(false);
    const Matrix z = random_bag(1, 5, 2);
    BagOutput out = m.forward(t, z);
    ASSERT_EQ(out.attention.size(), 1u);
    EXPECT_EQ(out.attention[0], 1.0);
    EXPECT_LE(max_abs_diff(out.embedding.value(), project_oracle(m.projection(), z)), 1e-12);
}

TEST(Gated, DuplicateInstancesShareAttention) {
    MilModel m = make_model(small(Family::gated), 3);
    Matrix z = random_bag(2, 5, 4);
    for (std::size_t j = 0; j < 5; ++j) z(1, j) = z(0, j);
    Tape t(false);
    BagOutput out = m.forward(t, z);
    EXPECT_NEAR(out.attention[0], 0.5, 1e-15);
    EXPECT_NEAR(out.attention[1], 0.5, 1e-15);
}

TEST(Gated, EmbeddingMatchesIndependentReimplementation) {
    MilModel m = make_model(small(Family::gated), 5);
    const Matrix z = random_bag(8, 5, 6);
    Tape t(false);
    BagOutput out = m.forward(t, z);

    GatedAttentionModel& g = *m.gated();
    const Matrix h = project_oracle(g.proj, z);
    std::vector<double> logits(8);
    for (std::size_t i = 0; i < 8; ++i) {
        double s = g.attn_w.bias.value[0];
        for (std::size_t k = 0; k < 4; ++k) {
            double v = g.attn_v.bias.value(0, k), u = g.attn_u.bias.value(0, k);
            for (std::size_t j = 0; j < 8; ++j) {
                v += h(i, j) * g.attn_v.weight.value(j, k);
                u += h(i, j) * g.attn_u.weight.value(j, k);
            }
            s += std::tanh(v) * oracle::sigmoid(u) * g.attn_w.weight.value(k, 0);
        }
        logits[i] = s;
    }
    const auto a = oracle::softmax(logits);
    Matrix f(1, 8);
    for (std::size_t i = 0; i < 8; ++i)
        for (std::size_t j = 0; j < 8; ++j) f(0, j) += a[i] * h(i, j);
    EXPECT_LE(max_abs_diff(out.embedding.value(), f), 1e-10);
    for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(out.attention[i], a[i], 1e-12);
    EXPECT_NEAR(sum_of(out.attention), 1.0, 1e-10);
}

TEST(Gated, EmptyBagIsRejected) {
    MilModel m = make_model(small(Family::gated), 1);
    Tape t(false);
    EXPECT_THROW(m.forward(t, Matrix(0, 5)), ContractError);
}

TEST(Msa, IdenticalInstancesGiveUniformAttention) {
    ModelConfig c = small(Family::msa);
    c.layers = 1;
    c.heads = 1;
    MilModel m = make_model(c, 7);
    Matrix z(6, 5);
    const Matrix row = random_bag(1, 5, 8);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 5; ++j) z(i, j) = row(0, j);
    Tape t(false);
    BagOutput out = m.forward(t, z);
    for (double a : out.attention) EXPECT_NEAR(a, 1.0 / 6.0, 1e-12);
}

TEST(Msa, SingletonAttentionIsOne) {
    MilModel m = make_model(small(Family::msa), 9);
    Tape t(false);
    BagOutput out = m.forward(t, random_bag(1, 5, 10));
    ASSERT_EQ(out.attention.size(), 1u);
    EXPECT_NEAR(out.attention[0], 1.0, 1e-15);
}

TEST(Msa, ClassTokenRowMatchesExplicitOracle) {
    MilModel m = make_model(small(Family::msa), 11);
    const Matrix z = random_bag(6, 5, 12);
    Tape t(false);
    BagOutput out = m.forward(t, z);

    ClassTokenMSAModel& msa = *m.msa();
    Matrix seq = kernel::concat_rows(msa.class_token.value, project_oracle(msa.proj, z));
    std::vector<Matrix> attn;
    for (auto& b : msa.blocks) {
        attn.clear();
        seq = oracle::cross_attention(seq, seq, b.wq.value, b.wk.value, b.wv.value, b.wo.value, 2, &attn);
    }
    std::vector<double> expected(6, 0.0);
    for (const Matrix& a : attn)
        for (std::size_t i = 0; i < 6; ++i) expected[i] += a(0, i + 1);
    const double total = sum_of(expected);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(out.attention[i], expected[i] / total, 1e-10);
    for (std::size_t j = 0; j < 8; ++j) EXPECT_NEAR(out.embedding.value()(0, j), seq(0, j), 1e-10);
    for (const Matrix& a : attn)
        for (std::size_t r = 0; r < a.rows(); ++r) {
            double s = 0.0;
            for (std::size_t c = 0; c < a.cols(); ++c) s += a(r, c);
            EXPECT_NEAR(s, 1.0, 1e-10);
        }
}

TEST(Msa, ZeroQueryKeyReducesToMeanOfValues) {
    ModelConfig c = small(Family::msa);
    c.layers = 1;
    c.heads = 1;
    MilModel m = make_model(c, 13);
    ClassTokenMSAModel& msa = *m.msa();
    msa.blocks[0].wq.value.fill(0.0);
    msa.blocks[0].wk.value.fill(0.0);
    const Matrix z = random_bag(5, 5, 14);
    Tape t(false);
    BagOutput out = m.forward(t, z);

    // Uniform attention over the whole sequence, class token included.
    const Matrix seq = kernel::concat_rows(msa.class_token.value, project_oracle(msa.proj, z));
    const Matrix vo = oracle::matmul(oracle::matmul(seq, msa.blocks[0].wv.value), msa.blocks[0].wo.value);
    for (std::size_t j = 0; j < 8; ++j) {
        double mean = 0.0;
        for (std::size_t i = 0; i < seq.rows(); ++i) mean += vo(i, j);
        EXPECT_NEAR(out.embedding.value()(0, j), mean / double(seq.rows()), 1e-10);
    }
    for (double a : out.attention) EXPECT_NEAR(a, 0.2, 1e-12);
}

TEST(Msa, HeadsMustDivideWidth) {
    ModelConfig c = small(Family::msa);
    c.heads = 3;
    EXPECT_THROW(MilModel{c}, ConfigError);
}

TEST(Classify, AffineHead) {
    MilModel m = make_model(small(Family::gated), 15);
    Linear& head = m.classifier();
    Tape t(false);
    const Matrix f = random_bag(1, 8, 16);
    const double got = m.classify(t, t.constant(f)).value()[0];
    double expected = head.bias.value[0];
    for (std::size_t j = 0; j < 8; ++j) expected += f(0, j) * head.weight.value(j, 0);
    EXPECT_NEAR(got, expected, 1e-12);

    head.weight.value.fill(0.0);
    head.bias.value.fill(0.0);
    EXPECT_EQ(m.classify(t, t.constant(f)).value()[0], 0.0);
}

TEST(Classify, OneByOneHeadPassesThrough) {
    Linear head("h", 1, 1);
    head.weight.value(0, 0) = 1.0;
    Tape t(false);
    EXPECT_EQ(head.forward(t, t.constant(Matrix(1, 1, 2.0))).value()[0], 2.0);
}

class PermutationInvariance : public ::testing::TestWithParam<Family> {};

TEST_P(PermutationInvariance, LogitsAndEmbeddingIgnoreRowOrder) {
    MilModel m = make_model(small(GetParam()), 21);
    const Matrix z = random_bag(9, 5, 22);
    Rng rng(23);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::size_t> perm(9);
        std::iota(perm.begin(), perm.end(), std::size_t{0});
        std::shuffle(perm.begin(), perm.end(), rng.engine());
        Tape t(false);
        BagOutput a = m.forward(t, z);
        BagOutput b = m.forward(t, kernel::gather_rows(z, perm));
        EXPECT_LE(max_abs_diff(a.logits.value(), b.logits.value()), 1e-10);
        EXPECT_LE(max_abs_diff(a.embedding.value(), b.embedding.value()), 1e-10);
        for (std::size_t i = 0; i < 9; ++i) EXPECT_NEAR(b.attention[i], a.attention[perm[i]], 1e-10);
    }
}

TEST_P(PermutationInvariance, AttentionIsADistribution) {
    MilModel m = make_model(small(GetParam()), 31);
    Tape t(false);
    BagOutput out = m.forward(t, random_bag(17, 5, 32));
    EXPECT_EQ(out.attention.size(), 17u);
    for (double a : out.attention) EXPECT_GE(a, 0.0);
    EXPECT_NEAR(sum_of(out.attention), 1.0, 1e-10);
}

TEST_P(PermutationInvariance, ForwardGradientMatchesFiniteDifferences) {
    MilModel m = make_model(small(GetParam()), 41);
    const Matrix z = random_bag(7, 5, 42);
    auto fwd = [&](Tape& t) {
        BagOutput out = m.forward(t, z);
        return add(bce_with_logits(out.logits, 1.0), scale(sum(mul(out.embedding, out.embedding)), 0.1));
    };
    auto r = oracle::finite_difference(
        m.parameters(), [&] { Tape t; t.backward(fwd(t)); },
        [&] { Tape t(false); return fwd(t).value()[0]; }, 30, 43);
    EXPECT_LE(r.max_rel_error, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Families, PermutationInvariance, ::testing::Values(Family::gated, Family::msa),
                         [](const auto& info) { return to_string(info.param); });

TEST(Probabilities, BinaryAndMulticlass) {
    EXPECT_EQ(class_probabilities(Matrix(1, 1, 0.0)), std::vector<double>{0.5});
    const auto p = class_probabilities(Matrix::from_rows({{0.0, std::log(3.0)}}));
    EXPECT_NEAR(p[0], 0.25, 1e-15);
    EXPECT_NEAR(p[1], 0.75, 1e-15);
}
