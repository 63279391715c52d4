// SPDX-License-Identifier: Apache-2.0
//
// Detached side network over cached backbone activations. Each layer mixes a
// horizontal tuner (reading the backbone's layer output) with a vertical one
// (reading the previous bypass state) under a learnable sigmoid gate:
//
//   b_0 = x_0
//   b_l = gate_l * Tuner(x_l) + (1 - gate_l) * Tuner(b_{l-1})
//
// Gates start at exactly 0.5. Because the cache is detached, no gradient can
// reach the backbone, and one backbone forward serves any number of tasks.

#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "restune/backbone.hpp"
#include "restune/optim.hpp"
#include "restune/tensor.hpp"
#include "restune/tuners.hpp"

namespace restune {

struct BypassConfig {
    TunerSpec horizontal{TunerKind::adapter, AttachPoint::block, 4};
    TunerSpec vertical{TunerKind::adapter, AttachPoint::block, 4};

    void validate() const {
        horizontal.validate();
        vertical.validate();
    }
};

/// Detached copies of x_0 .. x_L from one ForwardRecord. Immutable; none of
/// these tensors participates in any tape.
struct ActivationCache {
    std::vector<TensorPtr> activations;
    std::uint64_t source_forward_count = 0;

    std::size_t depth() const { return activations.size() - 1; }
};

inline ActivationCache build_cache(const ForwardRecord& rec) {
    if (rec.layer_inputs.empty() || rec.layer_outputs.size() != rec.layer_inputs.size())
        throw std::invalid_argument("build_cache: incomplete forward record");
    ActivationCache cache;
    for (const auto& t : rec.activations()) cache.activations.push_back(detach(t));
    cache.source_forward_count = rec.forward_count;
    return cache;
}

/// One bypass tuner with an identity carry: u + branch(u). Adapter-form by
/// default; prefix/prompt specs map onto the bank-attention branch. Branches
/// are zero-init, so at construction every tuner is the identity.
struct BypassTuner {
    TunerKind kind = TunerKind::adapter;
    std::variant<AdapterState, BankAttentionState> state;

    static BypassTuner init(const TunerSpec& spec, const BackboneConfig& cfg, Rng& rng) {
        BypassTuner t;
        t.kind = spec.kind;
        if (spec.kind == TunerKind::adapter)
            t.state = AdapterState::init(cfg.model_dim, spec.width, rng);
        else
            t.state = BankAttentionState::init(cfg.model_dim, cfg.head_dim(), spec.width, rng);
        return t;
    }

    TensorPtr apply(Tape& tape, const TensorPtr& u) const {
        if (const auto* ad = std::get_if<AdapterState>(&state)) return tape.add(u, adapter_residual(tape, u, *ad));
        return tape.add(u, bank_attention(tape, u, std::get<BankAttentionState>(state)));
    }

    std::vector<TensorPtr> params() const {
        return std::visit([](const auto& s) { return s.params(); }, state);
    }
    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& p) const {
        return std::visit([&](const auto& s) { return s.named(p); }, state);
    }
};

class BypassState {
public:
    BypassConfig config;
    std::vector<BypassTuner> horizontal, vertical;
    std::vector<TensorPtr> gate_raw; // one scalar per layer, zero-init

    static BypassState init(const BypassConfig& cfg, const BackboneConfig& backbone, std::uint64_t seed) {
        cfg.validate();
        BypassState s;
        s.config = cfg;
        Rng root(seed);
        for (std::size_t l = 0; l < backbone.depth; ++l) {
            Rng hr = root.fork(2 * l);
            Rng vr = root.fork(2 * l + 1);
            s.horizontal.push_back(BypassTuner::init(cfg.horizontal, backbone, hr));
            s.vertical.push_back(BypassTuner::init(cfg.vertical, backbone, vr));
            s.gate_raw.push_back(scalar_tensor(0.0, true)); // sigmoid(0) == 0.5 exactly
        }
        return s;
    }

    std::size_t depth() const { return horizontal.size(); }

    std::vector<double> gate_values() const {
        std::vector<double> out;
        for (const auto& g : gate_raw) out.push_back(detail::sigmoid(g->data[0]));
        return out;
    }

    std::vector<TensorPtr> parameters() const {
        std::vector<TensorPtr> out;
        for (const auto& t : horizontal)
            for (const auto& p : t.params()) out.push_back(p);
        for (const auto& t : vertical)
            for (const auto& p : t.params()) out.push_back(p);
        for (const auto& g : gate_raw) out.push_back(g);
        return out;
    }

    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (std::size_t l = 0; l < horizontal.size(); ++l)
            for (auto& e : horizontal[l].named("bypass/" + std::to_string(l) + "/horizontal"))
                out.push_back(std::move(e));
        for (std::size_t l = 0; l < vertical.size(); ++l)
            for (auto& e : vertical[l].named("bypass/" + std::to_string(l) + "/vertical")) out.push_back(std::move(e));
        for (std::size_t l = 0; l < gate_raw.size(); ++l)
            out.emplace_back("bypass/gate/" + std::to_string(l), gate_raw[l]);
        return out;
    }
};

struct BypassForward {
    std::vector<TensorPtr> states; // b_0 .. b_L
    const TensorPtr& final_output() const { return states.back(); }
};

inline BypassForward bypass_forward(Tape& tape, const ActivationCache& cache, const BypassState& bs) {
    if (cache.depth() != bs.depth())
        throw std::invalid_argument("bypass_forward: cache depth " + std::to_string(cache.depth()) +
                                    " vs bypass depth " + std::to_string(bs.depth()));
    BypassForward out;
    TensorPtr b = cache.activations[0];
    out.states.push_back(b);
    for (std::size_t l = 1; l <= bs.depth(); ++l) {
        auto gate = tape.sigmoid(bs.gate_raw[l - 1]);
        auto one_minus = tape.add_scalar(tape.mul_scalar(gate, -1.0), 1.0);
        auto horizontal = bs.horizontal[l - 1].apply(tape, cache.activations[l]);
        auto vertical = bs.vertical[l - 1].apply(tape, b);
        b = tape.add(tape.mul(horizontal, gate), tape.mul(vertical, one_minus));
        out.states.push_back(b);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Heads, losses, training step
// ---------------------------------------------------------------------------

/// Mean over token rows: [n x m] -> [1 x m].
inline TensorPtr mean_pool_rows(Tape& tape, const TensorPtr& x) {
    if (x->ndim() != 2 || x->shape[0] == 0) detail::dim_error("mean_pool_rows", x->shape, x->shape);
    auto weights = full_tensor({1, x->shape[0]}, 1.0 / static_cast<double>(x->shape[0]));
    return tape.matmul(weights, x);
}

/// Softmax cross-entropy of a [1 x C] logit row against an integer label.
inline TensorPtr cross_entropy_loss(Tape& tape, const TensorPtr& logits, std::size_t label) {
    if (logits->ndim() != 2 || logits->shape[0] != 1 || label >= logits->shape[1])
        throw std::invalid_argument("cross_entropy_loss: bad logits " + shape_str(logits->shape) + " or label " +
                                    std::to_string(label));
    auto picked = tape.slice_cols(tape.row_softmax(logits), label, 1);
    return tape.mul_scalar(tape.log(picked), -1.0);
}

inline TensorPtr mean_scalar(Tape& tape, const std::vector<TensorPtr>& xs) {
    if (xs.empty()) throw std::invalid_argument("mean_scalar: empty list");
    TensorPtr acc = xs[0];
    for (std::size_t i = 1; i < xs.size(); ++i) acc = tape.add(acc, xs[i]);
    return tape.mul_scalar(acc, 1.0 / static_cast<double>(xs.size()));
}

/// Task-specific classifier head plus its own bypass parameters. Heads of
/// distinct tasks share no learnable state.
struct TaskHead {
    std::string task_id;
    TensorPtr w_head, b_head;
    BypassState bypass;

    static TaskHead init(std::string id, std::size_t classes, const BypassConfig& cfg,
                         const BackboneConfig& backbone, std::uint64_t seed) {
        TaskHead t;
        t.task_id = std::move(id);
        Rng rng(seed);
        t.w_head = gaussian_tensor({backbone.model_dim, classes}, rng, 0.02, true);
        t.b_head = make_tensor({classes}, true);
        t.bypass = BypassState::init(cfg, backbone, seed + 1);
        return t;
    }

    std::vector<TensorPtr> parameters() const {
        auto out = bypass.parameters();
        out.push_back(w_head);
        out.push_back(b_head);
        return out;
    }

    TensorPtr logits(Tape& tape, const ActivationCache& cache) const {
        auto fwd = bypass_forward(tape, cache, bypass);
        return tape.add(tape.matmul(mean_pool_rows(tape, fwd.final_output()), w_head), b_head);
    }
};

/// One Adam update of tuner + gate + head parameters over a mini-batch of
/// cached activations. The backbone is untouched by construction.
inline double bypass_train_step(const std::vector<const ActivationCache*>& batch,
                                const std::vector<std::size_t>& labels, TaskHead& task, AdamOptimizer& opt) {
    if (batch.empty() || batch.size() != labels.size())
        throw std::invalid_argument("bypass_train_step: batch/label size mismatch");
    Tape tape;
    std::vector<TensorPtr> losses;
    for (std::size_t i = 0; i < batch.size(); ++i)
        losses.push_back(cross_entropy_loss(tape, task.logits(tape, *batch[i]), labels[i]));
    auto loss = mean_scalar(tape, losses);
    opt.zero_grad();
    tape.backward(loss);
    opt.step();
    return loss->item();
}

// ---------------------------------------------------------------------------
// Multi-task inference
// ---------------------------------------------------------------------------

struct MultiTaskResult {
    std::vector<TensorPtr> logits; // per task
    std::uint64_t forward_delta = 0;
};

/// One backbone forward, one cache, then T independent bypass + head reads.
inline MultiTaskResult multi_task_infer(const TensorPtr& x0, const BackboneModel& model,
                                        const std::vector<TaskHead>& tasks) {
    if (tasks.empty()) throw std::invalid_argument("multi_task_infer: no tasks");
    const std::uint64_t before = model.forward_count();
    Tape fwd_tape;
    auto cache = build_cache(backbone_forward(fwd_tape, x0, model));
    MultiTaskResult out;
    for (const auto& task : tasks) {
        Tape tape;
        out.logits.push_back(task.logits(tape, cache));
    }
    out.forward_delta = model.forward_count() - before;
    if (out.forward_delta != 1)
        throw std::logic_error("multi_task_infer: expected exactly one backbone forward");
    return out;
}

/// Baseline comparator: a per-task embedded plan, each task running its own
/// backbone pass (forward_count grows by T).
struct EmbeddedTask {
    std::string task_id;
    PlanState plan;
    TensorPtr w_head, b_head;
};

inline MultiTaskResult embedded_multi_task_baseline(const TensorPtr& x0, const BackboneModel& model,
                                                    const std::vector<EmbeddedTask>& tasks) {
    if (tasks.empty()) throw std::invalid_argument("embedded_multi_task_baseline: no tasks");
    const std::uint64_t before = model.forward_count();
    MultiTaskResult out;
    for (const auto& task : tasks) {
        Tape tape;
        auto rec = apply_plan(tape, x0, model, task.plan, PlanForm::embedded);
        out.logits.push_back(
            tape.add(tape.matmul(mean_pool_rows(tape, rec.final_output()), task.w_head), task.b_head));
    }
    out.forward_delta = model.forward_count() - before;
    return out;
}

// ---------------------------------------------------------------------------
// Memory proxy
// ---------------------------------------------------------------------------

/// Platform-independent memory accounting for one forward+backward trace:
/// tape-retained intermediate scalars plus the trainable parameter count.
struct MemoryProxy {
    std::size_t trainable_params = 0;
    std::size_t retained_scalars = 0;
};

inline MemoryProxy memory_proxy(const Tape& tape, const std::vector<TensorPtr>& trainable) {
    return {trainable_param_count(trainable), tape.retained_scalars()};
}

} // namespace restune
