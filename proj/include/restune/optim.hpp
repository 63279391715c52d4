// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

#include "restune/tensor.hpp"

namespace restune {

struct AdamOptions {
    double lr = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Adam with bias correction. Parameters without a grad buffer are skipped,
/// so an update never fabricates movement for untouched tensors.
class AdamOptimizer {
public:
    using Options = AdamOptions;

    explicit AdamOptimizer(std::vector<TensorPtr> params, Options opts = {})
        : params_(std::move(params)), opts_(opts) {
        for (const auto& p : params_) {
            if (!p->requires_grad) throw std::invalid_argument("AdamOptimizer: parameter does not require grad");
            m_.emplace_back(p->numel(), 0.0);
            v_.emplace_back(p->numel(), 0.0);
        }
    }

    const std::vector<TensorPtr>& parameters() const { return params_; }

    void zero_grad() { zero_grads(params_); }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            auto& p = *params_[i];
            if (!p.grad) continue;
            const auto& g = *p.grad;
            for (std::size_t j = 0; j < p.numel(); ++j) {
                m_[i][j] = opts_.beta1 * m_[i][j] + (1.0 - opts_.beta1) * g[j];
                v_[i][j] = opts_.beta2 * v_[i][j] + (1.0 - opts_.beta2) * g[j] * g[j];
                const double mhat = m_[i][j] / bc1;
                const double vhat = v_[i][j] / bc2;
                p.data[j] -= opts_.lr * mhat / (std::sqrt(vhat) + opts_.eps);
            }
        }
    }

private:
    std::vector<TensorPtr> params_;
    Options opts_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

} // namespace restune
