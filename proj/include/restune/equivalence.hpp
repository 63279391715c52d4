// SPDX-License-Identifier: Apache-2.0
//
// Verification battery for the unbinding identities. Each check draws random
// instances and measures the worst deviation between an embedded tuner and
// its unbound residual form — prefix and prompt against the concatenated
// softmax, the adapter against its serial insertion, gates against their
// closed-form mass ratios, and gradients between the two forms and against
// finite differences.

#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ostream>
#include <string>
#include <vector>

#include "restune/backbone.hpp"
#include "restune/random.hpp"
#include "restune/tensor.hpp"
#include "restune/tuners.hpp"

namespace restune {

struct InstanceSpec {
    std::uint64_t seed = 20231001;
    std::size_t trials = 100;
    double tolerance = 1e-10;         // attention identities
    double adapter_tolerance = 1e-15; // pure re-association
    double gate_tolerance = 1e-12;    // closed form vs mass ratio
    std::size_t max_tokens = 16;      // n and bank rows are drawn up to these
    std::size_t max_bank = 8;
    std::size_t max_head_dim = 8;

    void validate() const {
        if (!(tolerance > 0.0)) throw std::invalid_argument("InstanceSpec: tolerance must be > 0");
        if (trials < 1) throw std::invalid_argument("InstanceSpec: trials must be >= 1");
    }
};

struct TrialResult {
    std::string identity;
    std::size_t trial = 0;
    std::uint64_t seed = 0;
    double max_abs_diff = 0.0;
    bool pass = false;
};

struct EquivalenceReport {
    std::vector<TrialResult> trials;

    bool passed() const {
        for (const auto& t : trials)
            if (!t.pass) return false;
        return true;
    }

    double worst(const std::string& identity) const {
        double w = 0.0;
        for (const auto& t : trials)
            if (t.identity == identity) w = std::max(w, t.max_abs_diff);
        return w;
    }

    void append(EquivalenceReport other) {
        for (auto& t : other.trials) trials.push_back(std::move(t));
    }

    void write_csv(std::ostream& os) const {
        os << "identity,trial,seed,max_abs_diff,pass\n";
        char buf[32];
        for (const auto& t : trials) {
            std::snprintf(buf, sizeof buf, "%.17g", t.max_abs_diff);
            os << t.identity << ',' << t.trial << ',' << t.seed << ',' << buf << ',' << (t.pass ? 1 : 0) << '\n';
        }
    }
};

namespace detail {

struct TrialInstance {
    std::size_t n, r, d, num_heads, model_dim;
    BlockParams params;
    TensorPtr x;
};

inline TensorPtr wide_gaussian(Shape shape, Rng& rng, double sd, bool rg = false) {
    return gaussian_tensor(std::move(shape), rng, sd, rg);
}

inline TrialInstance draw_instance(const InstanceSpec& spec, Rng& rng) {
    TrialInstance t;
    t.n = 1 + rng.index(spec.max_tokens);
    t.r = 1 + rng.index(spec.max_bank);
    t.d = 1 + rng.index(spec.max_head_dim);
    const std::size_t heads[] = {1, 2, 4};
    t.num_heads = heads[rng.index(3)];
    t.model_dim = t.num_heads * t.d;
    const std::size_t dm = t.model_dim;
    t.params.w_q = wide_gaussian({dm, dm}, rng, 0.4);
    t.params.w_k = wide_gaussian({dm, dm}, rng, 0.4);
    t.params.w_v = wide_gaussian({dm, dm}, rng, 0.4);
    t.params.w_o = wide_gaussian({dm, dm}, rng, 0.4);
    t.params.ln1_scale = full_tensor({dm}, 1.0);
    t.params.ln1_shift = make_tensor({dm});
    t.params.ln2_scale = full_tensor({dm}, 1.0);
    t.params.ln2_shift = make_tensor({dm});
    t.x = wide_gaussian({t.n, dm}, rng, 0.8);
    return t;
}

inline TensorPtr plain_matmul(const Tensor& a, const Tensor& b) {
    const std::size_t m = a.shape[0], k = a.shape[1], n = b.shape[1];
    auto out = make_tensor({m, n});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p) acc += a.data[i * k + p] * b.data[p * n + j];
            out->data[i * n + j] = acc;
        }
    return out;
}

// Naive appendix-form gate: sum_j exp(z_branch) / (sum exp(z_main) + sum exp(z_branch)),
// straight loops, no stabilizing shift.
inline std::vector<double> naive_mass_gate(const Tensor& q, const Tensor& k_main, const Tensor& k_branch) {
    const std::size_t n = q.shape[0], d = q.shape[1];
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        double mass_main = 0.0, mass_branch = 0.0;
        for (std::size_t j = 0; j < k_main.shape[0]; ++j) {
            double z = 0.0;
            for (std::size_t p = 0; p < d; ++p) z += q.at(i, p) * k_main.at(j, p);
            mass_main += std::exp(z * scale);
        }
        for (std::size_t j = 0; j < k_branch.shape[0]; ++j) {
            double z = 0.0;
            for (std::size_t p = 0; p < d; ++p) z += q.at(i, p) * k_branch.at(j, p);
            mass_branch += std::exp(z * scale);
        }
        out[i] = mass_branch / (mass_main + mass_branch);
    }
    return out;
}

// slice [r0, r0+rows) x [c0, c0+cols) as a fresh plain tensor
inline TensorPtr block_of(const Tensor& a, std::size_t r0, std::size_t rows, std::size_t c0, std::size_t cols) {
    auto out = make_tensor({rows, cols});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out->data[i * cols + j] = a.at(r0 + i, c0 + j);
    return out;
}

inline double max_elem_rel_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
    double worst = 0.0;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        const double err = std::abs(a) > 1e-6 ? std::abs(a - n) / std::abs(a) : std::abs(a - n) * 1e2;
        // small entries are held to 1e-6 absolute == 1e-4 on this scale
        worst = std::max(worst, err);
    }
    return worst;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Identity checks
// ---------------------------------------------------------------------------

inline EquivalenceReport check_prefix_identity(const InstanceSpec& spec) {
    spec.validate();
    EquivalenceReport report;
    Rng root(spec.seed);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        Rng rng = root.fork(trial);
        auto inst = detail::draw_instance(spec, rng);
        PrefixState pre;
        for (std::size_t h = 0; h < inst.num_heads; ++h) {
            pre.k_pre.push_back(detail::wide_gaussian({inst.r, inst.d}, rng, 0.6));
            pre.v_pre.push_back(detail::wide_gaussian({inst.r, inst.d}, rng, 0.6));
        }
        Tape tape;
        auto embedded = embedded_prefix_mha(tape, inst.x, inst.params, inst.num_heads, pre);
        auto res = res_prefix_mha(tape, inst.x, inst.params, inst.num_heads, pre);
        const double diff = max_abs_diff(embedded, res.combined);
        report.trials.push_back({"prefix", trial, spec.seed, diff, diff <= spec.tolerance});

        // closed-form lambda vs the softmax-mass ratio of the concatenation
        double gate_diff = 0.0;
        auto q_full = detail::plain_matmul(*inst.x, *inst.params.w_q);
        auto k_full = detail::plain_matmul(*inst.x, *inst.params.w_k);
        for (std::size_t h = 0; h < inst.num_heads; ++h) {
            auto qh = detail::block_of(*q_full, 0, inst.n, h * inst.d, inst.d);
            auto kh = detail::block_of(*k_full, 0, inst.n, h * inst.d, inst.d);
            auto naive = detail::naive_mass_gate(*qh, *kh, *pre.k_pre[h]);
            for (std::size_t i = 0; i < inst.n; ++i)
                gate_diff = std::max(gate_diff, std::abs(naive[i] - res.gate[h]->data[i]));
        }
        report.trials.push_back({"prefix_gate", trial, spec.seed, gate_diff, gate_diff <= spec.gate_tolerance});
    }
    return report;
}

inline EquivalenceReport check_prompt_identity(const InstanceSpec& spec) {
    spec.validate();
    EquivalenceReport report;
    Rng root(spec.seed ^ 0x5050505050505050ULL);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        Rng rng = root.fork(trial);
        auto inst = detail::draw_instance(spec, rng);
        PromptState pro{detail::wide_gaussian({inst.r, inst.model_dim}, rng, 0.8)};

        Tape tape;
        auto embedded = embedded_prompt_mha(tape, inst.x, inst.params, inst.num_heads, pro);
        auto res = res_prompt_mha(tape, inst.x, inst.params, inst.num_heads, pro);
        const double d_orig = max_abs_diff(embedded.y_x, res.combined);
        const double d_disp = max_abs_diff(embedded.y_pro, res.disposable);
        report.trials.push_back({"prompt_original", trial, spec.seed, d_orig, d_orig <= spec.tolerance});
        report.trials.push_back({"prompt_disposable", trial, spec.seed, d_disp, d_disp <= spec.tolerance});

        // lambda and beta closed forms
        double gate_diff = 0.0;
        auto q_full = detail::plain_matmul(*inst.x, *inst.params.w_q);
        auto k_full = detail::plain_matmul(*inst.x, *inst.params.w_k);
        auto qp_full = detail::plain_matmul(*pro.x_pro, *inst.params.w_q);
        auto kp_full = detail::plain_matmul(*pro.x_pro, *inst.params.w_k);
        for (std::size_t h = 0; h < inst.num_heads; ++h) {
            auto qh = detail::block_of(*q_full, 0, inst.n, h * inst.d, inst.d);
            auto kh = detail::block_of(*k_full, 0, inst.n, h * inst.d, inst.d);
            auto qph = detail::block_of(*qp_full, 0, inst.r, h * inst.d, inst.d);
            auto kph = detail::block_of(*kp_full, 0, inst.r, h * inst.d, inst.d);
            auto lambda = detail::naive_mass_gate(*qh, *kh, *kph);
            for (std::size_t i = 0; i < inst.n; ++i)
                gate_diff = std::max(gate_diff, std::abs(lambda[i] - res.gate_lambda[h]->data[i]));
            // beta's branch mass is the one over the original keys
            auto beta = detail::naive_mass_gate(*qph, *kph, *kh);
            for (std::size_t i = 0; i < inst.r; ++i)
                gate_diff = std::max(gate_diff, std::abs(beta[i] - res.gate_beta[h]->data[i]));
        }
        report.trials.push_back({"prompt_gate", trial, spec.seed, gate_diff, gate_diff <= spec.gate_tolerance});
    }
    return report;
}

inline EquivalenceReport check_adapter_identity(const InstanceSpec& spec) {
    spec.validate();
    EquivalenceReport report;
    Rng root(spec.seed ^ 0xadadadadadadadadULL);
    for (std::size_t trial = 0; trial < spec.trials; ++trial) {
        Rng rng = root.fork(trial);
        const std::size_t n = 1 + rng.index(spec.max_tokens);
        const std::size_t dm = 2 * (1 + rng.index(spec.max_head_dim));
        const std::size_t r = 1 + rng.index(spec.max_bank);
        auto h = detail::wide_gaussian({n, dm}, rng, 1.0);
        AdapterState ad;
        ad.w_down = detail::wide_gaussian({dm, r}, rng, 0.4, true);
        ad.w_up = detail::wide_gaussian({r, dm}, rng, 0.4, true);
        Tape tape;
        auto serial = serial_adapter(tape, h, ad);
        auto parallel = tape.add(h, res_adapter(tape, h, ad));
        const double diff = max_abs_diff(serial, parallel);
        report.trials.push_back({"adapter", trial, spec.seed, diff, diff <= spec.adapter_tolerance});
    }
    return report;
}

// ---------------------------------------------------------------------------
// Gradient identity
// ---------------------------------------------------------------------------

/// Gradients of a fixed linear functional of the MHA output, taken w.r.t.
/// the tuner parameters, via three routes: embedded autodiff, unbound
/// autodiff, and central finite differences through the embedded form.
inline EquivalenceReport check_gradient_identity(const InstanceSpec& spec) {
    spec.validate();
    EquivalenceReport report;
    const std::size_t grad_trials = std::max<std::size_t>(3, spec.trials / 20);
    Rng root(spec.seed ^ 0x9d9d9d9d9d9d9d9dULL);
    const double form_tol = 1e-8, fd_tol = 1e-4;

    for (std::size_t trial = 0; trial < grad_trials; ++trial) {
        Rng rng = root.fork(trial);
        InstanceSpec small = spec;
        small.max_tokens = 6;
        small.max_bank = 4;
        small.max_head_dim = 4;
        auto inst = detail::draw_instance(small, rng);

        // ---- prefix: d loss / d {k_pre, v_pre} ----
        {
            PrefixState pre;
            for (std::size_t h = 0; h < inst.num_heads; ++h) {
                pre.k_pre.push_back(detail::wide_gaussian({inst.r, inst.d}, rng, 0.6, true));
                pre.v_pre.push_back(detail::wide_gaussian({inst.r, inst.d}, rng, 0.6, true));
            }
            auto weight = detail::wide_gaussian({inst.n, inst.model_dim}, rng, 1.0);
            auto params = pre.params();

            auto loss_embedded = [&](Tape& t) {
                return t.sum(t.mul(embedded_prefix_mha(t, inst.x, inst.params, inst.num_heads, pre), weight));
            };
            auto loss_unbound = [&](Tape& t) {
                return t.sum(t.mul(res_prefix_mha(t, inst.x, inst.params, inst.num_heads, pre).combined, weight));
            };

            Tape te;
            te.backward(loss_embedded(te));
            std::vector<std::vector<double>> embedded_grads;
            for (const auto& p : params) embedded_grads.push_back(*p->grad);
            te.zero_all_grads();

            Tape tu;
            tu.backward(loss_unbound(tu));
            double form_diff = 0.0;
            std::vector<std::vector<double>> unbound_grads;
            for (std::size_t i = 0; i < params.size(); ++i) {
                unbound_grads.push_back(*params[i]->grad);
                for (std::size_t j = 0; j < embedded_grads[i].size(); ++j)
                    form_diff = std::max(form_diff, std::abs(embedded_grads[i][j] - unbound_grads[i][j]));
            }
            tu.zero_all_grads();
            report.trials.push_back({"prefix_grad_forms", trial, spec.seed, form_diff, form_diff <= form_tol});

            // finite differences through the embedded form, against both routes
            double fd_err = 0.0;
            for (std::size_t i = 0; i < params.size(); ++i) {
                auto fd = finite_diff_grad(
                    [&](const Tensor& probe) {
                        auto saved = params[i]->data;
                        params[i]->data = probe.data;
                        Tape t;
                        const double v = loss_embedded(t)->item();
                        params[i]->data = saved;
                        return v;
                    },
                    *params[i], 1e-5);
                fd_err = std::max(fd_err, detail::max_elem_rel_error(embedded_grads[i], fd->data));
                fd_err = std::max(fd_err, detail::max_elem_rel_error(unbound_grads[i], fd->data));
            }
            report.trials.push_back({"prefix_grad_fd", trial, spec.seed, fd_err, fd_err <= fd_tol});
        }

        // ---- prompt: d loss / d x_pro ----
        {
            PromptState pro{detail::wide_gaussian({inst.r, inst.model_dim}, rng, 0.8, true)};
            auto weight = detail::wide_gaussian({inst.n, inst.model_dim}, rng, 1.0);

            auto loss_embedded = [&](Tape& t) {
                return t.sum(t.mul(embedded_prompt_mha(t, inst.x, inst.params, inst.num_heads, pro).y_x, weight));
            };
            auto loss_unbound = [&](Tape& t) {
                return t.sum(
                    t.mul(res_prompt_mha(t, inst.x, inst.params, inst.num_heads, pro, false).combined, weight));
            };

            Tape te;
            te.backward(loss_embedded(te));
            auto embedded_grad = *pro.x_pro->grad;
            te.zero_all_grads();
            Tape tu;
            tu.backward(loss_unbound(tu));
            auto unbound_grad = *pro.x_pro->grad;
            tu.zero_all_grads();

            double form_diff = 0.0;
            for (std::size_t j = 0; j < embedded_grad.size(); ++j)
                form_diff = std::max(form_diff, std::abs(embedded_grad[j] - unbound_grad[j]));
            report.trials.push_back({"prompt_grad_forms", trial, spec.seed, form_diff, form_diff <= form_tol});

            auto fd = finite_diff_grad(
                [&](const Tensor& probe) {
                    auto saved = pro.x_pro->data;
                    pro.x_pro->data = probe.data;
                    Tape t;
                    const double v = loss_embedded(t)->item();
                    pro.x_pro->data = saved;
                    return v;
                },
                *pro.x_pro, 1e-5);
            double fd_err = detail::max_elem_rel_error(embedded_grad, fd->data);
            fd_err = std::max(fd_err, detail::max_elem_rel_error(unbound_grad, fd->data));
            report.trials.push_back({"prompt_grad_fd", trial, spec.seed, fd_err, fd_err <= fd_tol});
        }

        // ---- adapter: d loss / d w_down between the two insertions ----
        {
            const std::size_t dm = inst.model_dim;
            auto h = detail::wide_gaussian({inst.n, dm}, rng, 1.0);
            AdapterState ad;
            ad.w_down = detail::wide_gaussian({dm, inst.r}, rng, 0.4, true);
            ad.w_up = detail::wide_gaussian({inst.r, dm}, rng, 0.4, true);
            auto weight = detail::wide_gaussian({inst.n, dm}, rng, 1.0);

            Tape ts;
            ts.backward(ts.sum(ts.mul(serial_adapter(ts, h, ad), weight)));
            auto serial_grad = *ad.w_down->grad;
            ts.zero_all_grads();
            Tape tp;
            tp.backward(tp.sum(tp.mul(tp.add(h, res_adapter(tp, h, ad)), weight)));
            auto parallel_grad = *ad.w_down->grad;
            tp.zero_all_grads();

            double diff = 0.0;
            for (std::size_t j = 0; j < serial_grad.size(); ++j)
                diff = std::max(diff, std::abs(serial_grad[j] - parallel_grad[j]));
            report.trials.push_back({"adapter_grad_forms", trial, spec.seed, diff, diff <= 1e-12});
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Prediction agreement
// ---------------------------------------------------------------------------

struct AgreementReport {
    std::size_t inputs = 0;
    double prefix_rate = 0.0, prompt_rate = 0.0, adapter_rate = 0.0;

    bool all_exact() const { return prefix_rate == 1.0 && prompt_rate == 1.0 && adapter_rate == 1.0; }
};

/// Random classification head over each plan form; counts argmax agreement
/// between embedded and unbound logits across random inputs.
inline AgreementReport check_prediction_agreement(const InstanceSpec& spec, std::size_t inputs = 500) {
    spec.validate();
    BackboneConfig cfg;
    cfg.depth = 2;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_hidden = 24;
    auto model = BackboneModel::random(cfg, spec.seed);

    Rng rng(spec.seed ^ 0x1717171717171717ULL);
    const std::size_t classes = 5;
    auto w_head = gaussian_tensor({cfg.model_dim, classes}, rng, 0.5);
    auto b_head = gaussian_tensor({classes}, rng, 0.5);

    auto make_plan = [&](TunerKind kind, AttachPoint at, std::uint64_t seed) {
        auto ps = PlanState::init(TuningPlan::single(cfg.depth, kind, at, 4), cfg, seed);
        // widen the banks so the gates bite
        for (auto& t : ps.tuners)
            for (auto& p : t.params())
                for (auto& v : p->data) v = rng.gaussian(0.0, 0.5);
        return ps;
    };
    auto prefix_plan = make_plan(TunerKind::prefix, AttachPoint::mha, 1);
    auto prompt_plan = make_plan(TunerKind::prompt, AttachPoint::mha, 2);
    auto adapter_plan = make_plan(TunerKind::adapter, AttachPoint::ffn, 3);

    auto argmax = [](const TensorPtr& logits) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits->shape[1]; ++j)
            if (logits->at(0, j) > logits->at(0, best)) best = j;
        return best;
    };
    auto agree = [&](const PlanState& ps, const TensorPtr& x0) {
        Tape t1, t2;
        auto emb = apply_plan(t1, x0, model, ps, PlanForm::embedded);
        auto unb = apply_plan(t2, x0, model, ps, PlanForm::unbound);
        auto head = [&](Tape& t, const PlanRecord& rec) {
            auto pool = full_tensor({1, x0->shape[0]}, 1.0 / static_cast<double>(x0->shape[0]));
            return t.add(t.matmul(t.matmul(pool, rec.final_output()), w_head), b_head);
        };
        return argmax(head(t1, emb)) == argmax(head(t2, unb));
    };

    AgreementReport rep;
    rep.inputs = inputs;
    std::size_t ok_prefix = 0, ok_prompt = 0, ok_adapter = 0;
    for (std::size_t i = 0; i < inputs; ++i) {
        auto x0 = gaussian_tensor({8, cfg.model_dim}, rng, 1.0);
        ok_prefix += agree(prefix_plan, x0);
        ok_prompt += agree(prompt_plan, x0);
        ok_adapter += agree(adapter_plan, x0);
    }
    rep.prefix_rate = static_cast<double>(ok_prefix) / static_cast<double>(inputs);
    rep.prompt_rate = static_cast<double>(ok_prompt) / static_cast<double>(inputs);
    rep.adapter_rate = static_cast<double>(ok_adapter) / static_cast<double>(inputs);
    return rep;
}

/// All four identity families plus the gradient checks in one report.
inline EquivalenceReport run_equivalence_suite(const InstanceSpec& spec) {
    EquivalenceReport report = check_prefix_identity(spec);
    report.append(check_prompt_identity(spec));
    report.append(check_adapter_identity(spec));
    report.append(check_gradient_identity(spec));
    return report;
}

} // namespace restune
