// SPDX-License-Identifier: Apache-2.0
//
// Frozen pre-norm transformer backbone: stacked MHA + FFN blocks exposing
// per-layer outputs and an exact forward-pass counter. The backbone is the
// fixed substrate every tuner attaches to; it is frozen on construction.

#pragma once

#include <atomic>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "restune/random.hpp"
#include "restune/tensor.hpp"

namespace restune {

namespace stats {
// Process-wide attention-op counter; the multi-task efficiency report reads it.
inline std::atomic<std::uint64_t> attention_calls{0};

inline void reset_attention_calls() { attention_calls.store(0); }
} // namespace stats

struct BackboneConfig {
    std::size_t depth = 4;
    std::size_t model_dim = 32;
    std::size_t num_heads = 2;
    std::size_t ffn_hidden = 64;

    std::size_t head_dim() const { return model_dim / num_heads; }

    void validate() const {
        if (depth < 1 || num_heads < 1 || ffn_hidden < 1)
            throw std::invalid_argument("BackboneConfig: depth, num_heads and ffn_hidden must be >= 1");
        if (model_dim % num_heads != 0)
            throw std::invalid_argument("BackboneConfig: model_dim " + std::to_string(model_dim) +
                                        " not divisible by num_heads " + std::to_string(num_heads));
    }
};

struct BlockParams {
    TensorPtr w_q, w_k, w_v, w_o;
    TensorPtr w1, b1, w2, b2;
    TensorPtr ln1_scale, ln1_shift, ln2_scale, ln2_shift;

    std::vector<TensorPtr> all() const {
        return {w_q, w_k, w_v, w_o, w1, b1, w2, b2, ln1_scale, ln1_shift, ln2_scale, ln2_shift};
    }

    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& prefix) const {
        return {{prefix + "/w_q", w_q},           {prefix + "/w_k", w_k},
                {prefix + "/w_v", w_v},           {prefix + "/w_o", w_o},
                {prefix + "/ffn_w1", w1},         {prefix + "/ffn_b1", b1},
                {prefix + "/ffn_w2", w2},         {prefix + "/ffn_b2", b2},
                {prefix + "/ln1_scale", ln1_scale}, {prefix + "/ln1_shift", ln1_shift},
                {prefix + "/ln2_scale", ln2_scale}, {prefix + "/ln2_shift", ln2_shift}};
    }
};

/// Frozen by default after construction; unfreeze() exists for the
/// full-fine-tuning baseline only.
class BackboneModel {
public:
    BackboneConfig config;
    std::vector<BlockParams> blocks;

    BackboneModel() = default;
    BackboneModel(const BackboneModel&) = delete;
    BackboneModel& operator=(const BackboneModel&) = delete;
    BackboneModel(BackboneModel&& other) noexcept
        : config(other.config), blocks(std::move(other.blocks)), forwards_(other.forwards_.load()) {}
    BackboneModel& operator=(BackboneModel&& other) noexcept {
        config = other.config;
        blocks = std::move(other.blocks);
        forwards_.store(other.forwards_.load());
        return *this;
    }

    /// Gaussian(0, 0.02^2) weights, zero biases, unit layer-norm scales.
    static BackboneModel random(const BackboneConfig& cfg, std::uint64_t seed) {
        cfg.validate();
        BackboneModel model;
        model.config = cfg;
        Rng rng(seed);
        const std::size_t dm = cfg.model_dim, dh = cfg.ffn_hidden;
        for (std::size_t l = 0; l < cfg.depth; ++l) {
            BlockParams p;
            p.w_q = gaussian_tensor({dm, dm}, rng, 0.02);
            p.w_k = gaussian_tensor({dm, dm}, rng, 0.02);
            p.w_v = gaussian_tensor({dm, dm}, rng, 0.02);
            p.w_o = gaussian_tensor({dm, dm}, rng, 0.02);
            p.w1 = gaussian_tensor({dm, dh}, rng, 0.02);
            p.b1 = make_tensor({dh});
            p.w2 = gaussian_tensor({dh, dm}, rng, 0.02);
            p.b2 = make_tensor({dm});
            p.ln1_scale = full_tensor({dm}, 1.0);
            p.ln1_shift = make_tensor({dm});
            p.ln2_scale = full_tensor({dm}, 1.0);
            p.ln2_shift = make_tensor({dm});
            model.blocks.push_back(std::move(p));
        }
        model.freeze();
        return model;
    }

    void freeze() { set_requires_grad(false); }
    void unfreeze() { set_requires_grad(true); }

    std::vector<TensorPtr> parameters() const {
        std::vector<TensorPtr> out;
        for (const auto& b : blocks)
            for (const auto& t : b.all()) out.push_back(t);
        return out;
    }

    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (std::size_t l = 0; l < blocks.size(); ++l)
            for (auto& entry : blocks[l].named("block" + std::to_string(l))) out.push_back(std::move(entry));
        return out;
    }

    std::size_t total_param_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters()) n += p->numel();
        return n;
    }

    std::size_t trainable_param_count() const {
        std::size_t n = 0;
        for (const auto& p : parameters())
            if (p->requires_grad) n += p->numel();
        return n;
    }

    std::uint64_t forward_count() const { return forwards_.load(); }
    void count_forward() const { forwards_.fetch_add(1); }

private:
    mutable std::atomic<std::uint64_t> forwards_{0};

    void set_requires_grad(bool rg) {
        for (const auto& p : parameters()) {
            p->requires_grad = rg;
            if (!rg) p->grad.reset();
        }
    }
};

struct ForwardRecord {
    std::vector<TensorPtr> layer_inputs;  // x_0 .. x_{L-1}
    std::vector<TensorPtr> layer_outputs; // x_1 .. x_L
    std::vector<TensorPtr> mha_outputs;
    std::vector<TensorPtr> ffn_outputs;
    std::uint64_t forward_count = 0;

    /// x_0 .. x_L as one list (depth + 1 entries).
    std::vector<TensorPtr> activations() const {
        std::vector<TensorPtr> out;
        out.push_back(layer_inputs.front());
        for (const auto& y : layer_outputs) out.push_back(y);
        return out;
    }

    const TensorPtr& final_output() const { return layer_outputs.back(); }
};

/// softmax(Q K^T / sqrt(d)) V with d taken from Q's width. Keys and values
/// may have more or fewer rows than Q (prefix attention relies on this).
inline TensorPtr attention(Tape& tape, const TensorPtr& q, const TensorPtr& k, const TensorPtr& v) {
    if (q->ndim() != 2 || k->ndim() != 2 || q->shape[1] != k->shape[1])
        detail::dim_error("attention: query/key width", q->shape, k->shape);
    if (v->ndim() != 2 || k->shape[0] != v->shape[0])
        detail::dim_error("attention: key/value rows", k->shape, v->shape);
    stats::attention_calls.fetch_add(1);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q->shape[1]));
    auto logits = tape.mul_scalar(tape.matmul(q, tape.transpose(k)), scale);
    return tape.matmul(tape.row_softmax(logits), v);
}

/// Per-head attention over the head-sliced projections, heads concatenated
/// and merged by the output projection.
inline TensorPtr multi_head_attention(Tape& tape, const TensorPtr& x, const BlockParams& p, std::size_t num_heads) {
    const std::size_t dm = x->shape[1];
    if (p.w_q->shape[0] != dm) detail::dim_error("multi_head_attention", x->shape, p.w_q->shape);
    const std::size_t d = dm / num_heads;
    auto q = tape.matmul(x, p.w_q);
    auto k = tape.matmul(x, p.w_k);
    auto v = tape.matmul(x, p.w_v);
    std::vector<TensorPtr> heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
        auto qh = tape.slice_cols(q, h * d, d);
        auto kh = tape.slice_cols(k, h * d, d);
        auto vh = tape.slice_cols(v, h * d, d);
        heads.push_back(attention(tape, qh, kh, vh));
    }
    return tape.matmul(tape.concat_cols(heads), p.w_o);
}

/// gelu(x W1 + b1) W2 + b2.
inline TensorPtr ffn(Tape& tape, const TensorPtr& x, const BlockParams& p) {
    if (x->ndim() != 2 || x->shape[1] != p.w1->shape[0]) detail::dim_error("ffn", x->shape, p.w1->shape);
    auto hidden = tape.gelu(tape.add(tape.matmul(x, p.w1), p.b1));
    return tape.add(tape.matmul(hidden, p.w2), p.b2);
}

struct BlockOutput {
    TensorPtr y;       // block output
    TensorPtr mha_out; // MHA value after w_o (tuner attach point "MHA")
    TensorPtr ffn_out; // FFN value (tuner attach point "FFN")
};

/// Pre-norm wiring: u = x + MHA(LN1(x)); y = u + FFN(LN2(u)).
inline BlockOutput block_forward(Tape& tape, const TensorPtr& x, const BlockParams& p, std::size_t num_heads) {
    auto a = tape.layer_norm(x, p.ln1_scale, p.ln1_shift);
    auto mha_out = multi_head_attention(tape, a, p, num_heads);
    auto u = tape.add(x, mha_out);
    auto b = tape.layer_norm(u, p.ln2_scale, p.ln2_shift);
    auto ffn_out = ffn(tape, b, p);
    return {tape.add(u, ffn_out), mha_out, ffn_out};
}

inline ForwardRecord backbone_forward(Tape& tape, const TensorPtr& x0, const BackboneModel& model) {
    if (x0->ndim() != 2 || x0->shape[1] != model.config.model_dim)
        detail::dim_error("backbone_forward", x0->shape, {model.config.model_dim, model.config.model_dim});
    ForwardRecord rec;
    TensorPtr x = x0;
    for (const auto& block : model.blocks) {
        rec.layer_inputs.push_back(x);
        auto out = block_forward(tape, x, block, model.config.num_heads);
        rec.layer_outputs.push_back(out.y);
        rec.mha_outputs.push_back(out.mha_out);
        rec.ffn_outputs.push_back(out.ffn_out);
        x = out.y;
    }
    model.count_forward();
    rec.forward_count = model.forward_count();
    return rec;
}

} // namespace restune
