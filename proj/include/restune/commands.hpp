// SPDX-License-Identifier: Apache-2.0
//
// Library-level command implementations behind the CLI. Exit codes follow
// the tool convention: 0 success, 1 verification failure, 2 usage/config
// error (the CLI maps thrown std::invalid_argument to 2).

#pragma once

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include "restune/checkpoint.hpp"
#include "restune/csv.hpp"
#include "restune/equivalence.hpp"
#include "restune/run_config.hpp"
#include "restune/train.hpp"

namespace restune {

/// Relative output paths land under $RESTUNE_OUT_DIR when it is set.
inline std::string resolve_out_path(const std::string& path) {
    if (path.empty() || std::filesystem::path(path).is_absolute()) return path;
    const char* dir = std::getenv("RESTUNE_OUT_DIR");
    if (!dir || !*dir) return path;
    return (std::filesystem::path(dir) / path).string();
}

inline void write_text_file(const std::string& path, const std::string& content) {
    auto parent = std::filesystem::path(path).parent_path();
    if (!parent.empty()) std::filesystem::create_directories(parent);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
    f << content;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

struct VerifyOptions {
    std::size_t trials = 100;
    std::uint64_t seed = 20231001;
    double tolerance = 1e-10;
    std::size_t agreement_inputs = 500;
    std::string out = "verify.csv";
};

inline int cmd_verify(const VerifyOptions& opts, std::ostream& log) {
    InstanceSpec spec;
    spec.seed = opts.seed;
    spec.trials = opts.trials;
    spec.tolerance = opts.tolerance;
    spec.adapter_tolerance = std::min(1e-15, opts.tolerance);
    spec.gate_tolerance = std::min(1e-12, opts.tolerance);

    auto report = run_equivalence_suite(spec);
    auto agreement = check_prediction_agreement(spec, opts.agreement_inputs);
    report.trials.push_back({"argmax_prefix", 0, spec.seed, 1.0 - agreement.prefix_rate, agreement.prefix_rate == 1.0});
    report.trials.push_back({"argmax_prompt", 0, spec.seed, 1.0 - agreement.prompt_rate, agreement.prompt_rate == 1.0});
    report.trials.push_back(
        {"argmax_adapter", 0, spec.seed, 1.0 - agreement.adapter_rate, agreement.adapter_rate == 1.0});

    const std::string path = resolve_out_path(opts.out);
    {
        std::ostringstream csv;
        report.write_csv(csv);
        write_text_file(path, csv.str());
    }

    const char* identities[] = {"prefix",          "prefix_gate",     "prompt_original",  "prompt_disposable",
                                "prompt_gate",     "adapter",         "prefix_grad_forms", "prefix_grad_fd",
                                "prompt_grad_forms", "prompt_grad_fd", "adapter_grad_forms", "argmax_prefix",
                                "argmax_prompt",   "argmax_adapter"};
    bool all_pass = true;
    for (const char* id : identities) {
        bool pass = true;
        double worst = 0.0;
        for (const auto& t : report.trials)
            if (t.identity == id) {
                pass = pass && t.pass;
                worst = std::max(worst, t.max_abs_diff);
            }
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-20s worst=%-12.3e %s", id, worst, pass ? "pass" : "FAIL");
        log << buf << '\n';
        all_pass = all_pass && pass;
    }
    log << "report: " << path << '\n';
    return all_pass ? 0 : 1;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

inline int cmd_train(const std::string& config_path, const std::string& mode_override, std::ostream& log) {
    RunConfig cfg = load_run_config(config_path);
    if (!mode_override.empty()) cfg.train.mode = parse_train_mode(mode_override);
    if (cfg.train.mode == TrainMode::plan && cfg.plan.entries.empty())
        throw std::invalid_argument("config: mode plan requires a 'plan' section");

    auto model = BackboneModel::random(cfg.backbone, cfg.backbone_seed);
    auto task = SyntheticTask::generate(cfg.task);
    const auto hash_before = fnv1a(serialize_tensors(model.named_parameters()));

    auto result = train_run(model, task, cfg.train, &cfg.plan, &cfg.bypass);

    const auto hash_after = fnv1a(serialize_tensors(model.named_parameters()));
    const bool hash_stable = hash_before == hash_after;
    if (cfg.train.mode != TrainMode::full && !hash_stable) {
        log << "error: backbone checkpoint changed under a frozen-backbone mode\n";
        return 1;
    }

    char buf[64];
    CsvTable metrics;
    metrics.header = {"step", "loss", "test_acc"};
    for (const auto& m : result.metrics) {
        std::snprintf(buf, sizeof buf, "%.17g", m.loss + 0.0);
        std::string loss = buf;
        std::snprintf(buf, sizeof buf, "%.17g", m.test_acc + 0.0);
        metrics.rows.push_back({std::to_string(m.step), loss, buf});
    }
    const std::string metrics_path = resolve_out_path(cfg.out + "_metrics.csv");
    {
        std::ostringstream os;
        write_csv(os, metrics);
        write_text_file(metrics_path, os.str());
    }

    CsvTable summary;
    summary.header = {"task", "mode",   "seed",          "steps",            "final_loss",    "final_test_acc",
                      "trainable_params", "retained_scalars", "forward_count", "backbone_hash_stable"};
    std::snprintf(buf, sizeof buf, "%.17g", result.final_loss + 0.0);
    std::string loss = buf;
    std::snprintf(buf, sizeof buf, "%.17g", result.final_test_acc + 0.0);
    summary.rows.push_back({cfg.task.id, to_string(cfg.train.mode), std::to_string(cfg.train.seed),
                            std::to_string(cfg.train.steps), loss, buf, std::to_string(result.trainable_params),
                            std::to_string(result.retained_scalars), std::to_string(result.forward_count),
                            hash_stable ? "1" : "0"});
    const std::string summary_path = resolve_out_path(cfg.out + "_summary.csv");
    {
        std::ostringstream os;
        write_csv(os, summary);
        write_text_file(summary_path, os.str());
    }

    log << format_aligned(summary);
    log << "metrics: " << metrics_path << "\nsummary: " << summary_path << '\n';
    return 0;
}

// ---------------------------------------------------------------------------
// multitask
// ---------------------------------------------------------------------------

struct MultitaskOptions {
    std::string config_path;
    std::size_t tasks = 19;
    std::string out = "multitask.csv";
};

inline int cmd_multitask(const MultitaskOptions& opts, std::ostream& log) {
    if (opts.tasks < 1) throw std::invalid_argument("multitask: --tasks must be >= 1");
    RunConfig cfg = load_run_config(opts.config_path);
    auto model = BackboneModel::random(cfg.backbone, cfg.backbone_seed);
    Rng rng(cfg.task.seed + 77);
    auto x0 = gaussian_tensor({cfg.task.seq_len, cfg.backbone.model_dim}, rng, 1.0);

    std::vector<TaskHead> heads;
    for (std::size_t t = 0; t < opts.tasks; ++t)
        heads.push_back(
            TaskHead::init("task" + std::to_string(t), cfg.task.classes, cfg.bypass, cfg.backbone, 1000 + t));

    stats::reset_attention_calls();
    auto bypass_result = multi_task_infer(x0, model, heads);
    const std::uint64_t bypass_attention = stats::attention_calls.load();

    std::vector<EmbeddedTask> embedded;
    for (std::size_t t = 0; t < opts.tasks; ++t) {
        EmbeddedTask et;
        et.task_id = "task" + std::to_string(t);
        et.plan = PlanState::init(
            TuningPlan::single(cfg.backbone.depth, TunerKind::adapter, AttachPoint::ffn, cfg.bypass.horizontal.width),
            cfg.backbone, 2000 + t);
        Rng hr(3000 + t);
        et.w_head = gaussian_tensor({cfg.backbone.model_dim, cfg.task.classes}, hr, 0.02, true);
        et.b_head = make_tensor({cfg.task.classes}, true);
        embedded.push_back(std::move(et));
    }
    stats::reset_attention_calls();
    auto baseline_result = embedded_multi_task_baseline(x0, model, embedded);
    const std::uint64_t baseline_attention = stats::attention_calls.load();

    CsvTable table;
    table.header = {"approach", "tasks", "forward_delta", "attention_ops"};
    table.rows.push_back({"bypass", std::to_string(opts.tasks), std::to_string(bypass_result.forward_delta),
                          std::to_string(bypass_attention)});
    table.rows.push_back({"embedded", std::to_string(opts.tasks), std::to_string(baseline_result.forward_delta),
                          std::to_string(baseline_attention)});
    const std::string path = resolve_out_path(opts.out);
    {
        std::ostringstream os;
        write_csv(os, table);
        write_text_file(path, os.str());
    }
    log << format_aligned(table);
    log << "report: " << path << '\n';

    const bool ok = bypass_result.forward_delta == 1 && baseline_result.forward_delta == opts.tasks;
    return ok ? 0 : 1;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

inline int cmd_report(const std::vector<std::string>& paths, const std::string& out, std::ostream& log) {
    if (paths.empty()) throw std::invalid_argument("report: need at least one metrics file");
    CsvTable merged;
    for (const auto& p : paths) {
        if (!std::filesystem::exists(p)) throw std::invalid_argument("report: missing file '" + p + "'");
        auto t = read_csv_file(p);
        if (merged.header.empty())
            merged.header = t.header;
        else if (merged.header != t.header)
            throw std::invalid_argument("report: header mismatch in '" + p + "'");
        for (auto& r : t.rows) merged.rows.push_back(std::move(r));
    }
    const int mode_col = merged.column("mode");
    const int seed_col = merged.column("seed");
    std::stable_sort(merged.rows.begin(), merged.rows.end(),
                     [&](const std::vector<std::string>& a, const std::vector<std::string>& b) {
                         if (mode_col >= 0 && seed_col >= 0) {
                             if (a[mode_col] != b[mode_col]) return a[mode_col] < b[mode_col];
                             return a[seed_col] < b[seed_col];
                         }
                         return a < b;
                     });
    const std::string path = resolve_out_path(out.empty() ? "report.csv" : out);
    {
        std::ostringstream os;
        write_csv(os, merged);
        write_text_file(path, os.str());
    }
    log << format_aligned(merged);
    log << "merged: " << path << '\n';
    return 0;
}

} // namespace restune
