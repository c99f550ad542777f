// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "mhim/rng.hpp"
#include "mhim/tape.hpp"

namespace mhim {

/// Fills a parameter from uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_uniform(Parameter& p, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : p.value.values()) v = rng.uniform(-bound, bound);
}

inline Parameter make_parameter(std::string name, std::size_t rows, std::size_t cols) {
    return Parameter{std::move(name), Matrix(rows, cols), Matrix(), true};
}

/// Affine layer y = x W + b with W stored in x out layout.
struct Linear {
    Parameter weight;
    Parameter bias;

    Linear() = default;
    Linear(const std::string& name, std::size_t in, std::size_t out)
        : weight(make_parameter(name + ".weight", in, out)),
          bias(make_parameter(name + ".bias", 1, out)) {}

    std::size_t in_features() const { return weight.value.rows(); }
    std::size_t out_features() const { return weight.value.cols(); }

    void init(Rng& rng) {
        init_uniform(weight, in_features(), rng);
        init_uniform(bias, in_features(), rng);
    }

    Var forward(Tape& t, Var x) { return add(matmul(x, t.param(weight)), t.param(bias)); }

    void collect(std::vector<Parameter*>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }
};

/// Multi-head attention of `queries` onto `keys_values`, with head outputs
/// concatenated and mixed by `wo`. Returns the output and, when requested,
/// the per-head attention matrices (values only).
inline Var multi_head_attention(Tape& t, Var queries, Var keys_values, Parameter& wq,
                                Parameter& wk, Parameter& wv, Parameter& wo, std::size_t heads,
                                std::vector<Matrix>* attention_out = nullptr) {
    const std::size_t dim = wq.value.cols();
    const std::size_t head_dim = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
    Var q = matmul(queries, t.param(wq));
    Var k = matmul(keys_values, t.param(wk));
    Var v = matmul(keys_values, t.param(wv));
    std::vector<Var> head_out;
    head_out.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        Var qh = slice_cols(q, h * head_dim, head_dim);
        Var kh = slice_cols(k, h * head_dim, head_dim);
        Var vh = slice_cols(v, h * head_dim, head_dim);
        Var attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt));
        if (attention_out != nullptr) attention_out->push_back(attn.value());
        head_out.push_back(matmul(attn, vh));
    }
    return matmul(concat_cols(head_out), t.param(wo));
}

}  // namespace mhim
