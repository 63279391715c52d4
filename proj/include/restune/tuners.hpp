// SPDX-License-Identifier: Apache-2.0
//
// The tuner zoo: adapter, prefix and prompt tuners in both their embedded
// form (parameters folded into the frozen op) and their unbound residual
// form (a parallel branch combined with the frozen op's output). The two
// forms are algebraically identical; the equivalence suite checks that to
// near machine precision.
//
// Gates:the unbinding of prefix/prompt attention yields a convex weight per
// (head, query row), equal to the softmax mass that the concatenated
// attention would place on the branch keys:
//
//   gate_i = sum_j exp(z_branch[i,j]) / (sum_j exp(z_main[i,j]) + sum_j exp(z_branch[i,j]))
//
// All logits carry the same 1/sqrt(d) scaling as the attention they split.

#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "restune/backbone.hpp"
#include "restune/random.hpp"
#include "restune/tensor.hpp"

namespace restune {

enum class TunerKind { adapter, prefix, prompt };
enum class AttachPoint { mha, ffn, block };

inline const char* to_string(TunerKind k) {
    switch (k) {
        case TunerKind::adapter: return "adapter";
        case TunerKind::prefix: return "prefix";
        case TunerKind::prompt: return "prompt";
    }
    return "?";
}

inline const char* to_string(AttachPoint a) {
    switch (a) {
        case AttachPoint::mha: return "mha";
        case AttachPoint::ffn: return "ffn";
        case AttachPoint::block: return "block";
    }
    return "?";
}

inline TunerKind parse_tuner_kind(const std::string& s) {
    if (s == "adapter") return TunerKind::adapter;
    if (s == "prefix") return TunerKind::prefix;
    if (s == "prompt") return TunerKind::prompt;
    throw std::invalid_argument("unknown tuner kind '" + s + "' (want adapter|prefix|prompt)");
}

inline AttachPoint parse_attach_point(const std::string& s) {
    if (s == "mha") return AttachPoint::mha;
    if (s == "ffn") return AttachPoint::ffn;
    if (s == "block") return AttachPoint::block;
    throw std::invalid_argument("unknown attach point '" + s + "' (want mha|ffn|block)");
}

struct TunerSpec {
    TunerKind kind = TunerKind::adapter;
    AttachPoint attach = AttachPoint::ffn;
    std::size_t width = 10; // adapter hidden dim, or prefix/prompt token count

    void validate() const {
        if (width < 1) throw std::invalid_argument("TunerSpec: width must be >= 1");
    }
};

// ---------------------------------------------------------------------------
// Tuner parameter states
// ---------------------------------------------------------------------------

/// Bottleneck adapter, no biases. w_up starts at zero so the residual branch
/// vanishes at step 0 and the tuned model reproduces the frozen one exactly.
struct AdapterState {
    TensorPtr w_down, w_up;

    static AdapterState init(std::size_t model_dim, std::size_t r, Rng& rng) {
        AdapterState s;
        s.w_down = gaussian_tensor({model_dim, r}, rng, 0.02, true);
        s.w_up = make_tensor({r, model_dim}, true);
        return s;
    }

    std::vector<TensorPtr> params() const { return {w_down, w_up}; }
    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& p) const {
        return {{p + "/w_down", w_down}, {p + "/w_up", w_up}};
    }
};

/// Learnable per-head key/value token banks, r rows each.
struct PrefixState {
    std::vector<TensorPtr> k_pre, v_pre;

    static PrefixState init(std::size_t head_dim, std::size_t num_heads, std::size_t r, Rng& rng) {
        PrefixState s;
        for (std::size_t h = 0; h < num_heads; ++h) {
            s.k_pre.push_back(gaussian_tensor({r, head_dim}, rng, 0.02, true));
            s.v_pre.push_back(gaussian_tensor({r, head_dim}, rng, 0.02, true));
        }
        return s;
    }

    std::size_t token_count() const { return k_pre.empty() ? 0 : k_pre[0]->shape[0]; }

    std::vector<TensorPtr> params() const {
        std::vector<TensorPtr> out;
        for (const auto& t : k_pre) out.push_back(t);
        for (const auto& t : v_pre) out.push_back(t);
        return out;
    }
    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& p) const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (std::size_t h = 0; h < k_pre.size(); ++h) {
            out.emplace_back(p + "/k_pre" + std::to_string(h), k_pre[h]);
            out.emplace_back(p + "/v_pre" + std::to_string(h), v_pre[h]);
        }
        return out;
    }
};

/// Learnable prompt tokens, projected through the frozen w_k / w_v (and w_q
/// only inside the disposable rows).
struct PromptState {
    TensorPtr x_pro;

    static PromptState init(std::size_t model_dim, std::size_t r, Rng& rng) {
        return {gaussian_tensor({r, model_dim}, rng, 0.02, true)};
    }

    std::vector<TensorPtr> params() const { return {x_pro}; }
    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& p) const {
        return {{p + "/x_pro", x_pro}};
    }
};

/// Attention-style tuner for attach points without frozen q/k/v projections
/// (prefix or prompt at FFN/Block): learnable key/value banks attended by
/// queries projected from the attach point's input. v_bank starts at zero so
/// the branch vanishes at step 0.
struct BankAttentionState {
    TensorPtr w_query; // [model_dim x head_dim]
    TensorPtr k_bank;  // [r x head_dim]
    TensorPtr v_bank;  // [r x model_dim]

    static BankAttentionState init(std::size_t model_dim, std::size_t head_dim, std::size_t r, Rng& rng) {
        BankAttentionState s;
        s.w_query = gaussian_tensor({model_dim, head_dim}, rng, 0.02, true);
        s.k_bank = gaussian_tensor({r, head_dim}, rng, 0.02, true);
        s.v_bank = make_tensor({r, model_dim}, true);
        return s;
    }

    std::vector<TensorPtr> params() const { return {w_query, k_bank, v_bank}; }
    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& p) const {
        return {{p + "/w_query", w_query}, {p + "/k_bank", k_bank}, {p + "/v_bank", v_bank}};
    }
};

// ---------------------------------------------------------------------------
// Gates and combined attention
// ---------------------------------------------------------------------------

/// Convex gate per query row from softmax masses; see the header comment.
/// Both logit sets are shifted by a shared detached row max before
/// exponentiation — the shift cancels in the ratio exactly, so gradients are
/// unaffected and the masses never overflow.
inline TensorPtr softmax_mass_gate(Tape& tape, const TensorPtr& main_logits, const TensorPtr& branch_logits) {
    if (main_logits->ndim() != 2 || branch_logits->ndim() != 2 ||
        main_logits->shape[0] != branch_logits->shape[0])
        detail::dim_error("softmax_mass_gate", main_logits->shape, branch_logits->shape);
    const std::size_t n = main_logits->shape[0];
    auto shift = make_tensor({n, 1});
    {
        auto m1 = tape.row_max_detached(main_logits);
        auto m2 = tape.row_max_detached(branch_logits);
        const bool b_empty = branch_logits->shape[1] == 0;
        const bool m_empty = main_logits->shape[1] == 0;
        for (std::size_t i = 0; i < n; ++i)
            shift->data[i] = b_empty ? m1->data[i] : m_empty ? m2->data[i] : std::max(m1->data[i], m2->data[i]);
    }
    auto mass_main = tape.row_sum(tape.exp(tape.sub_rowvec(main_logits, shift)));
    auto mass_branch = tape.row_sum(tape.exp(tape.sub_rowvec(branch_logits, shift)));
    return tape.div(mass_branch, tape.add(mass_main, mass_branch));
}

struct GatedAttentionOutput {
    TensorPtr combined;  // (1 - gate) * main + gate * branch, per query row
    TensorPtr main_out;  // Attn(q, k, v)
    TensorPtr branch_out; // Attn(q, k_branch, v_branch)
    TensorPtr gate;      // [n x 1]
};

/// One head of unbound two-branch attention. Splitting the softmax over
/// concatenated keys into per-branch attentions weighted by the mass gate
/// reproduces the concatenated result identically.
inline GatedAttentionOutput gated_attention(Tape& tape, const TensorPtr& q, const TensorPtr& k, const TensorPtr& v,
                                            const TensorPtr& k_branch, const TensorPtr& v_branch) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(q->shape[1]));
    auto main_logits = tape.mul_scalar(tape.matmul(q, tape.transpose(k)), scale);
    auto branch_logits = tape.mul_scalar(tape.matmul(q, tape.transpose(k_branch)), scale);
    auto main_out = tape.matmul(tape.row_softmax(main_logits), v);
    auto branch_out = tape.matmul(tape.row_softmax(branch_logits), v_branch);
    stats::attention_calls.fetch_add(2);
    auto gate = softmax_mass_gate(tape, main_logits, branch_logits);
    auto one_minus = tape.add_scalar(tape.mul_scalar(gate, -1.0), 1.0);
    auto combined = tape.add(tape.row_scale(main_out, one_minus), tape.row_scale(branch_out, gate));
    return {combined, main_out, branch_out, gate};
}

// ---------------------------------------------------------------------------
// Prefix tuning: embedded and unbound forms
// ---------------------------------------------------------------------------

/// Embedded form: per head, Attn(q, [k_pre; k], [v_pre; v]), then w_o.
inline TensorPtr embedded_prefix_mha(Tape& tape, const TensorPtr& x, const BlockParams& p, std::size_t num_heads,
                                     const PrefixState& pre) {
    const std::size_t d = x->shape[1] / num_heads;
    auto q = tape.matmul(x, p.w_q);
    auto k = tape.matmul(x, p.w_k);
    auto v = tape.matmul(x, p.w_v);
    std::vector<TensorPtr> heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
        auto kh = tape.concat_rows(pre.k_pre[h], tape.slice_cols(k, h * d, d));
        auto vh = tape.concat_rows(pre.v_pre[h], tape.slice_cols(v, h * d, d));
        heads.push_back(attention(tape, tape.slice_cols(q, h * d, d), kh, vh));
    }
    return tape.matmul(tape.concat_cols(heads), p.w_o);
}

struct ResPrefixOutput {
    TensorPtr combined;               // gated combination after w_o
    std::vector<TensorPtr> tuner_out; // per-head Attn(q, k_pre, v_pre)
    std::vector<TensorPtr> gate;      // per-head lambda, [n x 1]
};

/// Unbound form: main and prefix attention run independently per head and
/// are combined by the mass gate before w_o.
inline ResPrefixOutput res_prefix_mha(Tape& tape, const TensorPtr& x, const BlockParams& p, std::size_t num_heads,
                                      const PrefixState& pre) {
    const std::size_t d = x->shape[1] / num_heads;
    auto q = tape.matmul(x, p.w_q);
    auto k = tape.matmul(x, p.w_k);
    auto v = tape.matmul(x, p.w_v);
    ResPrefixOutput out;
    std::vector<TensorPtr> heads;
    for (std::size_t h = 0; h < num_heads; ++h) {
        auto g = gated_attention(tape, tape.slice_cols(q, h * d, d), tape.slice_cols(k, h * d, d),
                                 tape.slice_cols(v, h * d, d), pre.k_pre[h], pre.v_pre[h]);
        heads.push_back(g.combined);
        out.tuner_out.push_back(g.branch_out);
        out.gate.push_back(g.gate);
    }
    out.combined = tape.matmul(tape.concat_cols(heads), p.w_o);
    return out;
}

// ---------------------------------------------------------------------------
// Prompt tuning: embedded and unbound forms
// ---------------------------------------------------------------------------

struct PromptMhaOutput {
    TensorPtr y_x;   // rows belonging to the original tokens
    TensorPtr y_pro; // rows belonging to the prompt tokens (disposable)
};

/// Embedded form: full MHA over [x; x_pro], output rows split back apart.
inline PromptMhaOutput embedded_prompt_mha(Tape& tape, const TensorPtr& x, const BlockParams& p,
                                           std::size_t num_heads, const PromptState& pro) {
    const std::size_t n = x->shape[0];
    const std::size_t r = pro.x_pro->shape[0];
    auto cat = tape.concat_rows(x, pro.x_pro);
    auto y = multi_head_attention(tape, cat, p, num_heads);
    return {tape.slice_rows(y, 0, n), tape.slice_rows(y, n, r)};
}

struct ResPromptOutput {
    TensorPtr combined;                // original-token rows after w_o
    TensorPtr disposable;              // D rows after w_o (empty when skipped)
    std::vector<TensorPtr> tuner_out;  // per-head Attn(q, k_pro, v_pro)
    std::vector<TensorPtr> gate_lambda; // per-head, [n x 1]
    std::vector<TensorPtr> gate_beta;   // per-head, [r x 1]
};

/// Unbound form. Original rows combine main attention with prompt attention
/// under lambda; the disposable rows D mix the prompt-query attentions under
/// beta, whose branch mass is the one over the original keys.
inline ResPromptOutput res_prompt_mha(Tape& tape, const TensorPtr& x, const BlockParams& p, std::size_t num_heads,
                                      const PromptState& pro, bool want_disposable = true) {
    const std::size_t d = x->shape[1] / num_heads;
    auto q = tape.matmul(x, p.w_q);
    auto k = tape.matmul(x, p.w_k);
    auto v = tape.matmul(x, p.w_v);
    auto k_pro = tape.matmul(pro.x_pro, p.w_k);
    auto v_pro = tape.matmul(pro.x_pro, p.w_v);
    ResPromptOutput out;
    std::vector<TensorPtr> heads, d_heads;
    TensorPtr q_pro;
    if (want_disposable) q_pro = tape.matmul(pro.x_pro, p.w_q);
    for (std::size_t h = 0; h < num_heads; ++h) {
        auto kh = tape.slice_cols(k, h * d, d);
        auto vh = tape.slice_cols(v, h * d, d);
        auto kh_pro = tape.slice_cols(k_pro, h * d, d);
        auto vh_pro = tape.slice_cols(v_pro, h * d, d);
        auto g = gated_attention(tape, tape.slice_cols(q, h * d, d), kh, vh, kh_pro, vh_pro);
        heads.push_back(g.combined);
        out.tuner_out.push_back(g.branch_out);
        out.gate_lambda.push_back(g.gate);
        if (want_disposable) {
            // D = (1 - beta) Attn(q_pro, k_pro, v_pro) + beta Attn(q_pro, k, v)
            auto dd = gated_attention(tape, tape.slice_cols(q_pro, h * d, d), kh_pro, vh_pro, kh, vh);
            d_heads.push_back(dd.combined);
            out.gate_beta.push_back(dd.gate);
        }
    }
    out.combined = tape.matmul(tape.concat_cols(heads), p.w_o);
    if (want_disposable) out.disposable = tape.matmul(tape.concat_cols(d_heads), p.w_o);
    return out;
}

// ---------------------------------------------------------------------------
// Adapter tuning
// ---------------------------------------------------------------------------

/// Residual branch only: gelu(h w_down) w_up. The caller adds it to h.
inline TensorPtr adapter_residual(Tape& tape, const TensorPtr& h, const AdapterState& ad) {
    return tape.matmul(tape.gelu(tape.matmul(h, ad.w_down)), ad.w_up);
}

inline TensorPtr res_adapter(Tape& tape, const TensorPtr& ffn_out, const AdapterState& ad) {
    return adapter_residual(tape, ffn_out, ad);
}

/// Post-op insertion form: h + gelu(h w_down) w_up.
inline TensorPtr serial_adapter(Tape& tape, const TensorPtr& h, const AdapterState& ad) {
    return tape.add(h, adapter_residual(tape, h, ad));
}

/// Bank-attention branch for non-native attach points.
inline TensorPtr bank_attention(Tape& tape, const TensorPtr& u, const BankAttentionState& s) {
    return attention(tape, tape.matmul(u, s.w_query), s.k_bank, s.v_bank);
}

// ---------------------------------------------------------------------------
// Tuning plans
// ---------------------------------------------------------------------------

struct PlanEntry {
    std::size_t block = 0;
    TunerSpec spec;
};

enum class PlanArity { empty, single, dual, tri };

struct TuningPlan {
    std::vector<PlanEntry> entries;

    void validate(const BackboneConfig& cfg) const {
        std::vector<std::pair<std::size_t, AttachPoint>> seen;
        for (const auto& e : entries) {
            e.spec.validate();
            if (e.block >= cfg.depth)
                throw std::invalid_argument("plan: block " + std::to_string(e.block) + " out of range (depth " +
                                            std::to_string(cfg.depth) + ")");
            for (const auto& s : seen)
                if (s.first == e.block && s.second == e.spec.attach)
                    throw std::invalid_argument("plan: duplicate tuner at block " + std::to_string(e.block) +
                                                " attach " + to_string(e.spec.attach));
            seen.emplace_back(e.block, e.spec.attach);
        }
    }

    /// Tuners per block: 1 -> single, 2 -> dual, 3 -> tri.
    PlanArity arity(const BackboneConfig& cfg) const {
        if (entries.empty()) return PlanArity::empty;
        const std::size_t per_block = entries.size() / cfg.depth;
        return per_block >= 3 ? PlanArity::tri : per_block == 2 ? PlanArity::dual : PlanArity::single;
    }

    static TuningPlan single(std::size_t depth, TunerKind kind, AttachPoint attach, std::size_t r) {
        TuningPlan plan;
        for (std::size_t l = 0; l < depth; ++l) plan.entries.push_back({l, {kind, attach, r}});
        return plan;
    }

    static TuningPlan dual(std::size_t depth, TunerKind mha_kind, TunerKind ffn_kind, std::size_t r) {
        TuningPlan plan;
        for (std::size_t l = 0; l < depth; ++l) {
            plan.entries.push_back({l, {mha_kind, AttachPoint::mha, r}});
            plan.entries.push_back({l, {ffn_kind, AttachPoint::ffn, r}});
        }
        return plan;
    }

    static TuningPlan tri(std::size_t depth, TunerKind mha_kind, TunerKind ffn_kind, TunerKind block_kind,
                          std::size_t r) {
        TuningPlan plan = dual(depth, mha_kind, ffn_kind, r);
        for (std::size_t l = 0; l < depth; ++l) plan.entries.push_back({l, {block_kind, AttachPoint::block, r}});
        return plan;
    }
};

/// Learnable parameters for one plan entry. Prefix/prompt keep their native
/// structure at MHA; at FFN/Block they fall back to the bank-attention form.
struct TunerState {
    PlanEntry entry;
    std::variant<AdapterState, PrefixState, PromptState, BankAttentionState> state;

    std::vector<TensorPtr> params() const {
        return std::visit([](const auto& s) { return s.params(); }, state);
    }
    std::vector<std::pair<std::string, TensorPtr>> named(const std::string& prefix) const {
        return std::visit([&](const auto& s) { return s.named(prefix); }, state);
    }
};

class PlanState {
public:
    TuningPlan plan;
    std::vector<TunerState> tuners;

    static PlanState init(const TuningPlan& plan, const BackboneConfig& cfg, std::uint64_t seed) {
        plan.validate(cfg);
        PlanState ps;
        ps.plan = plan;
        Rng root(seed);
        for (const auto& e : plan.entries) {
            Rng rng = root.fork(ps.tuners.size());
            TunerState ts;
            ts.entry = e;
            const bool native_attention = e.spec.attach == AttachPoint::mha;
            if (e.spec.kind == TunerKind::adapter) {
                ts.state = AdapterState::init(cfg.model_dim, e.spec.width, rng);
            } else if (native_attention && e.spec.kind == TunerKind::prefix) {
                ts.state = PrefixState::init(cfg.head_dim(), cfg.num_heads, e.spec.width, rng);
            } else if (native_attention && e.spec.kind == TunerKind::prompt) {
                ts.state = PromptState::init(cfg.model_dim, e.spec.width, rng);
            } else {
                ts.state = BankAttentionState::init(cfg.model_dim, cfg.head_dim(), e.spec.width, rng);
            }
            ps.tuners.push_back(std::move(ts));
        }
        return ps;
    }

    const TunerState* find(std::size_t block, AttachPoint attach) const {
        for (const auto& t : tuners)
            if (t.entry.block == block && t.entry.spec.attach == attach) return &t;
        return nullptr;
    }

    std::vector<TensorPtr> parameters() const {
        std::vector<TensorPtr> out;
        for (const auto& t : tuners)
            for (const auto& p : t.params()) out.push_back(p);
        return out;
    }

    std::vector<std::pair<std::string, TensorPtr>> named_parameters() const {
        std::vector<std::pair<std::string, TensorPtr>> out;
        for (const auto& t : tuners) {
            const std::string prefix = "tuner/block" + std::to_string(t.entry.block) + "/" +
                                       to_string(t.entry.spec.attach) + "/" + to_string(t.entry.spec.kind);
            for (auto& e : t.named(prefix)) out.push_back(std::move(e));
        }
        return out;
    }
};

inline std::size_t trainable_param_count(const std::vector<TensorPtr>& params) {
    std::size_t n = 0;
    for (const auto& p : params)
        if (p->requires_grad) n += p->numel();
    return n;
}

inline std::size_t trainable_param_count(const BackboneModel& model) { return model.trainable_param_count(); }
inline std::size_t trainable_param_count(const PlanState& ps) { return trainable_param_count(ps.parameters()); }

// ---------------------------------------------------------------------------
// apply_plan
// ---------------------------------------------------------------------------

/// unbound runs tuners as residual branches (the framework's native form);
/// embedded folds prefix/prompt into the attention (the baseline form the
/// equivalence tests compare against). Adapter and bank tuners are additive
/// either way.
enum class PlanForm { unbound, embedded };

struct PlanRecord {
    std::vector<TensorPtr> layer_outputs;
    const TensorPtr& final_output() const { return layer_outputs.back(); }
};

inline PlanRecord apply_plan(Tape& tape, const TensorPtr& x0, const BackboneModel& model, const PlanState& ps,
                             PlanForm form = PlanForm::unbound) {
    ps.plan.validate(model.config);
    const std::size_t H = model.config.num_heads;
    PlanRecord rec;
    TensorPtr x = x0;
    for (std::size_t l = 0; l < model.blocks.size(); ++l) {
        const auto& p = model.blocks[l];
        auto a = tape.layer_norm(x, p.ln1_scale, p.ln1_shift);

        TensorPtr mha_eff;
        if (const TunerState* t = ps.find(l, AttachPoint::mha)) {
            if (t->entry.spec.kind == TunerKind::prefix) {
                const auto& pre = std::get<PrefixState>(t->state);
                mha_eff = form == PlanForm::embedded ? embedded_prefix_mha(tape, a, p, H, pre)
                                                     : res_prefix_mha(tape, a, p, H, pre).combined;
            } else if (t->entry.spec.kind == TunerKind::prompt) {
                const auto& pro = std::get<PromptState>(t->state);
                // prompt rows are discarded after every layer, so the stream stays n rows wide
                mha_eff = form == PlanForm::embedded ? embedded_prompt_mha(tape, a, p, H, pro).y_x
                                                     : res_prompt_mha(tape, a, p, H, pro, false).combined;
            } else {
                auto raw = multi_head_attention(tape, a, p, H);
                mha_eff = tape.add(raw, adapter_residual(tape, raw, std::get<AdapterState>(t->state)));
            }
        } else {
            mha_eff = multi_head_attention(tape, a, p, H);
        }
        auto u = tape.add(x, mha_eff);

        auto b = tape.layer_norm(u, p.ln2_scale, p.ln2_shift);
        auto ffn_raw = ffn(tape, b, p);
        TensorPtr ffn_eff = ffn_raw;
        if (const TunerState* t = ps.find(l, AttachPoint::ffn)) {
            if (t->entry.spec.kind == TunerKind::adapter)
                ffn_eff = tape.add(ffn_raw, adapter_residual(tape, ffn_raw, std::get<AdapterState>(t->state)));
            else
                ffn_eff = tape.add(ffn_raw, bank_attention(tape, b, std::get<BankAttentionState>(t->state)));
        }
        auto y = tape.add(u, ffn_eff);

        if (const TunerState* t = ps.find(l, AttachPoint::block)) {
            if (t->entry.spec.kind == TunerKind::adapter)
                y = tape.add(y, adapter_residual(tape, y, std::get<AdapterState>(t->state)));
            else
                y = tape.add(y, bank_attention(tape, x, std::get<BankAttentionState>(t->state)));
        }
        rec.layer_outputs.push_back(y);
        x = y;
    }
    model.count_forward();
    return rec;
}

} // namespace restune
