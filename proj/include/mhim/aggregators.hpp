// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <variant>
#include <vector>

#include "mhim/layers.hpp"

namespace mhim {

enum class Family { gated, msa };

inline std::string to_string(Family f) { return f == Family::gated ? "gated" : "msa"; }

struct ModelConfig {
    Family family = Family::gated;
    std::size_t input_dim = 64;
    std::size_t hidden_dim = 512;
    std::size_t attention_dim = 128;  // gated attention hidden size
    std::size_t layers = 2;           // MSA blocks
    std::size_t heads = 8;            // MSA heads
    std::size_t num_classes = 2;

    /// Binary tasks use a single logit.
    std::size_t logit_dim() const { return num_classes <= 2 ? 1 : num_classes; }

    void validate() const {
        if (input_dim == 0 || hidden_dim == 0) throw ConfigError("model dimensions must be > 0");
        if (num_classes < 2) throw ConfigError("num_classes must be >= 2");
        if (family == Family::gated && attention_dim == 0)
            throw ConfigError("attention_dim must be > 0");
        if (family == Family::msa) {
            if (layers == 0) throw ConfigError("msa layers must be > 0");
            if (heads == 0 || hidden_dim % heads != 0) {
                throw ConfigError("hidden_dim " + std::to_string(hidden_dim) +
                                  " is not divisible by heads " + std::to_string(heads));
            }
        }
    }
};

/// Result of one bag forward pass.
struct BagOutput {
    Var logits;     // 1 x C
    Var embedding;  // 1 x D bag embedding
    Var projected;  // N x D projected instance features
    std::vector<double> attention;  // per-instance scores, sums to 1
};

/// Gated attention pooling: a_i = softmax_i(w^T (tanh(V z_i) * sigmoid(U z_i))), F = sum a_i z_i.
class GatedAttentionModel {
public:
    explicit GatedAttentionModel(const ModelConfig& cfg)
        : proj("proj", cfg.input_dim, cfg.hidden_dim),
          attn_v("attn_v", cfg.hidden_dim, cfg.attention_dim),
          attn_u("attn_u", cfg.hidden_dim, cfg.attention_dim),
          attn_w("attn_w", cfg.attention_dim, 1),
          classifier("classifier", cfg.hidden_dim, cfg.logit_dim()) {}

    Var project(Tape& t, Var z) { return relu(proj.forward(t, z)); }

    BagOutput aggregate(Tape& t, Var h) {
        if (h.rows() == 0) throw ContractError("empty bag: aggregator needs at least one instance");
        Var gate = mul(tanh(attn_v.forward(t, h)), sigmoid(attn_u.forward(t, h)));
        Var scores = transpose(attn_w.forward(t, gate));  // 1 x N
        Var a = softmax(scores);
        Var f = matmul(a, h);
        BagOutput out{classifier.forward(t, f), f, h, {}};
        out.attention.assign(a.value().values().begin(), a.value().values().end());
        return out;
    }

    void init(Rng& rng) {
        for (Linear* l : {&proj, &attn_v, &attn_u, &attn_w, &classifier}) l->init(rng);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        for (Linear* l : {&proj, &attn_v, &attn_u, &attn_w, &classifier}) l->collect(out);
        return out;
    }

    Linear proj, attn_v, attn_u, attn_w, classifier;
};

/// Class-token multi-head self-attention aggregator without residuals or
/// normalization: Z^l = Concat(A_h Z^{l-1} W^V_h) W^O, F = z_0^L.
class ClassTokenMSAModel {
public:
    struct Block {
        Parameter wq, wk, wv, wo;  // D x D; head h owns columns [h*D/H, (h+1)*D/H)
    };

    explicit ClassTokenMSAModel(const ModelConfig& cfg)
        : proj("proj", cfg.input_dim, cfg.hidden_dim),
          class_token(make_parameter("class_token", 1, cfg.hidden_dim)),
          classifier("classifier", cfg.hidden_dim, cfg.logit_dim()),
          heads(cfg.heads) {
        const std::size_t d = cfg.hidden_dim;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            const std::string p = "msa" + std::to_string(l) + ".";
            blocks.push_back(Block{make_parameter(p + "wq", d, d), make_parameter(p + "wk", d, d),
                                   make_parameter(p + "wv", d, d), make_parameter(p + "wo", d, d)});
        }
    }

    Var project(Tape& t, Var z) { return relu(proj.forward(t, z)); }

    BagOutput aggregate(Tape& t, Var h) {
        const std::size_t n = h.rows();
        if (n == 0) throw ContractError("empty bag: aggregator needs at least one instance");
        Var seq = concat_rows(t.param(class_token), h);
        std::vector<Matrix> last_attention;
        for (std::size_t l = 0; l < blocks.size(); ++l) {
            Block& b = blocks[l];
            const bool last = l + 1 == blocks.size();
            seq = multi_head_attention(t, seq, seq, b.wq, b.wk, b.wv, b.wo, heads,
                                       last ? &last_attention : nullptr);
        }
        Var f = gather_rows(seq, {0});
        BagOutput out{classifier.forward(t, f), f, h, std::vector<double>(n, 0.0)};
        // Head-averaged class-token row over instance positions, renormalized.
        double total = 0.0;
        for (const Matrix& a : last_attention)
            for (std::size_t i = 0; i < n; ++i) out.attention[i] += a(0, i + 1);
        for (double v : out.attention) total += v;
        for (double& v : out.attention) v /= total;
        return out;
    }

    void init(Rng& rng) {
        const std::size_t d = class_token.value.cols();
        proj.init(rng);
        init_uniform(class_token, d, rng);
        for (Block& b : blocks)
            for (Parameter* p : {&b.wq, &b.wk, &b.wv, &b.wo}) init_uniform(*p, d, rng);
        classifier.init(rng);
    }

    std::vector<Parameter*> parameters() {
        std::vector<Parameter*> out;
        proj.collect(out);
        out.push_back(&class_token);
        for (Block& b : blocks)
            for (Parameter* p : {&b.wq, &b.wk, &b.wv, &b.wo}) out.push_back(p);
        classifier.collect(out);
        return out;
    }

    Linear proj;
    Parameter class_token;
    std::vector<Block> blocks;
    Linear classifier;
    std::size_t heads;
};

/// One MIL network of either family. Copyable value type.
class MilModel {
public:
    explicit MilModel(const ModelConfig& cfg) : config_(cfg), impl_(make(cfg)) {}

    const ModelConfig& config() const { return config_; }

    Var project(Tape& t, Var z) {
        return std::visit([&](auto& m) { return m.project(t, z); }, impl_);
    }

    BagOutput aggregate(Tape& t, Var projected) {
        return std::visit([&](auto& m) { return m.aggregate(t, projected); }, impl_);
    }

    BagOutput forward(Tape& t, Var z) {
        if (z.rows() == 0) throw ContractError("empty bag: forward needs at least one instance");
        return aggregate(t, project(t, z));
    }

    BagOutput forward(Tape& t, const Matrix& z) { return forward(t, t.constant(z)); }

    /// Affine bag/instance head; no activation.
    Var classify(Tape& t, Var f) { return classifier().forward(t, f); }

    Linear& classifier() {
        return std::visit([](auto& m) -> Linear& { return m.classifier; }, impl_);
    }
    Linear& projection() {
        return std::visit([](auto& m) -> Linear& { return m.proj; }, impl_);
    }

    void init(Rng& rng) {
        std::visit([&](auto& m) { m.init(rng); }, impl_);
    }

    /// Parameters in declared order: projection, aggregator, classifier.
    std::vector<Parameter*> parameters() {
        return std::visit([](auto& m) { return m.parameters(); }, impl_);
    }

    void set_trainable(bool on) {
        for (Parameter* p : parameters()) {
            p->trainable = on;
            if (!on) p->zero_grad();
        }
    }

    GatedAttentionModel* gated() { return std::get_if<GatedAttentionModel>(&impl_); }
    ClassTokenMSAModel* msa() { return std::get_if<ClassTokenMSAModel>(&impl_); }

private:
    using Impl = std::variant<GatedAttentionModel, ClassTokenMSAModel>;

    static Impl make(const ModelConfig& cfg) {
        cfg.validate();
        if (cfg.family == Family::gated) return GatedAttentionModel(cfg);
        return ClassTokenMSAModel(cfg);
    }

    ModelConfig config_;
    Impl impl_;
};

/// Probability of the positive class (binary) or of each class (multi-class).
inline std::vector<double> class_probabilities(const Matrix& logits) {
    if (logits.cols() == 1) {
        const double l = logits[0];
        const double p = l >= 0 ? 1.0 / (1.0 + std::exp(-l)) : std::exp(l) / (1.0 + std::exp(l));
        return {p};
    }
    Matrix p = kernel::softmax_rows(logits);
    return {p.values().begin(), p.values().end()};
}

}  // namespace mhim
