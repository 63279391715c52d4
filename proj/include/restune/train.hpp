// SPDX-License-Identifier: Apache-2.0
//
// Training loops for the four evaluation modes: linear probe, embedded-plan
// tuning, bypass tuning, and full fine-tuning. Frozen-feature modes
// precompute what the frozen backbone can provide (pooled features for the
// probe, activation caches for the bypass); tuned-forward modes run the
// backbone inside the step.

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "restune/backbone.hpp"
#include "restune/bypass.hpp"
#include "restune/optim.hpp"
#include "restune/synthetic.hpp"
#include "restune/tensor.hpp"
#include "restune/tuners.hpp"

namespace restune {

enum class TrainMode { linear, plan, bypass, full };

inline const char* to_string(TrainMode m) {
    switch (m) {
        case TrainMode::linear: return "linear";
        case TrainMode::plan: return "plan";
        case TrainMode::bypass: return "bypass";
        case TrainMode::full: return "full";
    }
    return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
    if (s == "linear") return TrainMode::linear;
    if (s == "plan") return TrainMode::plan;
    if (s == "bypass") return TrainMode::bypass;
    if (s == "full") return TrainMode::full;
    throw std::invalid_argument("unknown mode '" + s + "' (want linear|plan|bypass|full)");
}

struct TrainSettings {
    TrainMode mode = TrainMode::bypass;
    std::size_t steps = 300;
    double lr = 1e-2;
    std::size_t batch = 8;
    std::uint64_t seed = 7;
    std::size_t eval_every = 10;

    void validate() const {
        if (steps < 1 || batch < 1) throw std::invalid_argument("TrainSettings: steps and batch must be >= 1");
        if (!(lr > 0.0)) throw std::invalid_argument("TrainSettings: lr must be > 0");
    }
};

struct StepMetric {
    std::size_t step = 0;
    double loss = 0.0;
    double test_acc = 0.0;
};

struct TrainResult {
    std::vector<StepMetric> metrics;
    double final_loss = 0.0;
    double final_test_acc = 0.0;
    std::size_t trainable_params = 0;
    std::size_t retained_scalars = 0;
    std::uint64_t forward_count = 0;
};

inline std::size_t argmax_row(const TensorPtr& logits) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < logits->shape[1]; ++j)
        if (logits->at(0, j) > logits->at(0, best)) best = j;
    return best;
}

/// Trains the selected mode on one synthetic task. `plan` is used by mode
/// plan, `bypass_cfg` by mode bypass; full mode unfreezes the backbone and
/// leaves it trained (callers that need the original weights keep their own
/// checkpoint).
inline TrainResult train_run(BackboneModel& model, const SyntheticTask& task, const TrainSettings& s,
                             const TuningPlan* plan = nullptr, const BypassConfig* bypass_cfg = nullptr) {
    s.validate();
    const std::size_t classes = task.config.classes;
    const std::size_t dm = model.config.model_dim;
    if (task.config.model_dim != dm)
        throw std::invalid_argument("train_run: task model_dim " + std::to_string(task.config.model_dim) +
                                    " does not match backbone " + std::to_string(dm));

    Rng rng(s.seed);
    Rng head_rng = rng.fork(1);
    auto w_head = gaussian_tensor({dm, classes}, head_rng, 0.02, true);
    auto b_head = make_tensor({classes}, true);
    auto head = [&](Tape& tape, const TensorPtr& pooled) {
        return tape.add(tape.matmul(pooled, w_head), b_head);
    };

    std::vector<TensorPtr> params{w_head, b_head};

    // mode-specific state
    std::vector<TensorPtr> train_features, test_features;     // linear
    std::vector<ActivationCache> train_caches, test_caches;   // bypass
    std::optional<PlanState> plan_state;                      // plan
    std::optional<BypassState> bypass_state;                  // bypass

    auto frozen_feature = [&](const Sample& sample) {
        Tape tape;
        auto rec = backbone_forward(tape, sample.tokens, model);
        return detach(mean_pool_rows(tape, rec.final_output()));
    };

    switch (s.mode) {
        case TrainMode::linear:
            for (const auto& sm : task.train) train_features.push_back(frozen_feature(sm));
            for (const auto& sm : task.test) test_features.push_back(frozen_feature(sm));
            break;
        case TrainMode::bypass: {
            if (!bypass_cfg) throw std::invalid_argument("train_run: bypass mode needs a BypassConfig");
            bypass_state = BypassState::init(*bypass_cfg, model.config, s.seed + 101);
            for (const auto& p : bypass_state->parameters()) params.push_back(p);
            auto cache_of = [&](const Sample& sm) {
                Tape tape;
                return build_cache(backbone_forward(tape, sm.tokens, model));
            };
            for (const auto& sm : task.train) train_caches.push_back(cache_of(sm));
            for (const auto& sm : task.test) test_caches.push_back(cache_of(sm));
            break;
        }
        case TrainMode::plan: {
            if (!plan) throw std::invalid_argument("train_run: plan mode needs a TuningPlan");
            plan_state = PlanState::init(*plan, model.config, s.seed + 202);
            for (const auto& p : plan_state->parameters()) params.push_back(p);
            break;
        }
        case TrainMode::full:
            model.unfreeze();
            for (const auto& p : model.parameters()) params.push_back(p);
            break;
    }

    auto logits_of = [&](Tape& tape, const Sample& sample, bool is_test, std::size_t index) -> TensorPtr {
        switch (s.mode) {
            case TrainMode::linear:
                return head(tape, is_test ? test_features[index] : train_features[index]);
            case TrainMode::bypass: {
                const auto& cache = is_test ? test_caches[index] : train_caches[index];
                auto fwd = bypass_forward(tape, cache, *bypass_state);
                return head(tape, mean_pool_rows(tape, fwd.final_output()));
            }
            case TrainMode::plan: {
                auto rec = apply_plan(tape, sample.tokens, model, *plan_state);
                return head(tape, mean_pool_rows(tape, rec.final_output()));
            }
            case TrainMode::full: {
                auto rec = backbone_forward(tape, sample.tokens, model);
                return head(tape, mean_pool_rows(tape, rec.final_output()));
            }
        }
        throw std::logic_error("unreachable");
    };

    auto test_accuracy = [&] {
        std::size_t hits = 0;
        for (std::size_t i = 0; i < task.test.size(); ++i) {
            Tape tape;
            hits += argmax_row(logits_of(tape, task.test[i], true, i)) == task.test[i].label;
        }
        return static_cast<double>(hits) / static_cast<double>(task.test.size());
    };

    AdamOptimizer opt(params, {s.lr});
    TrainResult result;
    result.trainable_params = trainable_param_count(params);

    Rng batch_rng = rng.fork(2);
    double loss_value = 0.0;
    for (std::size_t step = 0; step < s.steps; ++step) {
        Tape tape;
        std::vector<TensorPtr> losses;
        for (std::size_t b = 0; b < s.batch; ++b) {
            const std::size_t idx = batch_rng.index(task.train.size());
            losses.push_back(cross_entropy_loss(tape, logits_of(tape, task.train[idx], false, idx),
                                                task.train[idx].label));
        }
        auto loss = mean_scalar(tape, losses);
        opt.zero_grad();
        tape.backward(loss);
        opt.step();
        loss_value = loss->item();

        if (step % s.eval_every == 0 || step + 1 == s.steps)
            result.metrics.push_back({step, loss_value, test_accuracy()});
        if (step + 1 == s.steps) result.retained_scalars = memory_proxy(tape, params).retained_scalars;
    }

    result.final_loss = loss_value;
    result.final_test_acc = result.metrics.back().test_acc;
    result.forward_count = model.forward_count();
    return result;
}

} // namespace restune
