// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <vector>

#include "mhim/layers.hpp"

namespace mhim {

/// Global queries of the recycle network. Updated by EMA only, never by gradients.
struct GlobalQueries {
    Matrix queries;         // K x D
    double momentum = 0.9;  // lambda_q

    std::size_t count() const { return queries.rows(); }
};

/// Multi-head cross-attention weights of the recycle network.
struct McaParams {
    Parameter wq, wk, wv, wo;  // D x D
    std::size_t heads = 8;

    McaParams() = default;
    McaParams(std::size_t dim, std::size_t heads_)
        : wq(make_parameter("grn.wq", dim, dim)),
          wk(make_parameter("grn.wk", dim, dim)),
          wv(make_parameter("grn.wv", dim, dim)),
          wo(make_parameter("grn.wo", dim, dim)),
          heads(heads_) {
        if (heads == 0 || dim % heads != 0) {
            throw ConfigError("recycle dim " + std::to_string(dim) +
                              " is not divisible by heads " + std::to_string(heads));
        }
    }

    std::size_t dim() const { return wq.value.rows(); }

    void init(Rng& rng) {
        for (Parameter* p : parameters()) init_uniform(*p, dim(), rng);
    }

    std::vector<Parameter*> parameters() { return {&wq, &wk, &wv, &wo}; }
};

/// Random initial queries, entries uniform in (-1/sqrt(D), 1/sqrt(D)).
inline GlobalQueries make_global_queries(std::size_t count, std::size_t dim, double momentum,
                                         Rng& rng) {
    GlobalQueries q{Matrix(count, dim), momentum};
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    for (double& v : q.queries.values()) v = rng.uniform(-bound, bound);
    return q;
}

/**
 * Recovers K feature rows from the masked instances by cross-attention from
 * the global queries. The queries enter as a constant, so they never carry
 * gradient. An empty masked set yields a K x D zero matrix.
 */
inline Var grn_forward(Tape& t, const GlobalQueries& q, McaParams& params, Var masked) {
    const std::size_t d = params.dim();
    if (q.count() == 0) return t.constant(Matrix(0, d));
    if (masked.rows() == 0) return t.constant(Matrix(q.count(), d));
    return multi_head_attention(t, t.constant(q.queries), masked, params.wq, params.wk,
                                params.wv, params.wo, params.heads);
}

/// Q_G <- lambda_q Q_G + (1 - lambda_q) Z~_m, on detached values.
inline void update_queries(GlobalQueries& q, const Matrix& recovered) {
    if (!q.queries.same_shape(recovered)) {
        throw ContractError("update_queries: shape " + shape_str(recovered) + " != queries " +
                            shape_str(q.queries));
    }
    const double lam = q.momentum;
    for (std::size_t k = 0; k < recovered.size(); ++k)
        q.queries[k] = lam * q.queries[k] + (1.0 - lam) * recovered[k];
}

/// Final hard-instance sequence [kept; recovered].
inline Var assemble(Var kept, Var recovered) { return concat_rows(kept, recovered); }

inline Matrix assemble(const Matrix& kept, const Matrix& recovered) {
    return kernel::concat_rows(kept, recovered);
}

}  // namespace mhim
