// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "mhim/tape.hpp"

namespace mhim {

struct AdamConfig {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-5;  // decoupled
};

/// Cosine annealing from `base` at step 0 to 0 at `total`.
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
    if (total == 0) return base;
    if (step >= total) return 0.0;
    const double t = static_cast<double>(step) / static_cast<double>(total);
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/**
 * Adam with decoupled weight decay. Moments are keyed by parameter position,
 * so every call must pass the same parameter list in the same order. A
 * parameter without a gradient buffer is treated as having zero gradient.
 */
class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }
    std::size_t steps() const { return t_; }

    void step(std::span<Parameter* const> params, double lr) {
        if (m_.empty()) {
            for (Parameter* p : params) {
                m_.emplace_back(p->value.rows(), p->value.cols());
                v_.emplace_back(p->value.rows(), p->value.cols());
            }
        }
        if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed size");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        const double decay = 1.0 - lr * cfg_.weight_decay;
        for (std::size_t k = 0; k < params.size(); ++k) {
            Parameter& p = *params[k];
            Matrix& m = m_[k];
            Matrix& v = v_[k];
            if (!m.same_shape(p.value)) throw ContractError("Adam: shape of " + p.name + " changed");
            const bool has_grad = !p.grad.empty();
            for (std::size_t i = 0; i < p.value.size(); ++i) {
                const double g = has_grad ? p.grad[i] : 0.0;
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p.value[i] = p.value[i] * decay - lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

private:
    AdamConfig cfg_;
    std::vector<Matrix> m_, v_;
    std::size_t t_ = 0;
};

/// theta_t <- lambda theta_t + (1 - lambda) theta_s over shape-mirrored lists.
inline void ema_update(std::span<Parameter* const> teacher, std::span<Parameter* const> student,
                       double lambda) {
    if (teacher.size() != student.size())
        throw ContractError("ema_update: teacher has " + std::to_string(teacher.size()) +
                            " parameters, student " + std::to_string(student.size()));
    for (std::size_t k = 0; k < teacher.size(); ++k) {
        Matrix& t = teacher[k]->value;
        const Matrix& s = student[k]->value;
        if (!t.same_shape(s))
            throw ContractError("ema_update: shape mismatch on " + teacher[k]->name);
        if (lambda == 1.0) continue;
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = lambda * t[i] + (1.0 - lambda) * s[i];
    }
}

}  // namespace mhim
