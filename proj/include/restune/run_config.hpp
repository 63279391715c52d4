// SPDX-License-Identifier: Apache-2.0
//
// JSON run configuration for the CLI. Every field has a documented default;
// parse errors carry the offending field path.

#pragma once

#include <cstdint>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "restune/backbone.hpp"
#include "restune/bypass.hpp"
#include "restune/synthetic.hpp"
#include "restune/train.hpp"
#include "restune/tuners.hpp"

namespace restune {

using Json = nlohmann::json;

namespace detail {

template <typename T>
T field_or(const Json& j, const std::string& scope, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const Json::exception& e) {
        throw std::invalid_argument("config field '" + scope + "." + key + "': " + e.what());
    }
}

inline std::string str_field_or(const Json& j, const std::string& scope, const std::string& key,
                                const std::string& fallback) {
    return field_or<std::string>(j, scope, key, fallback);
}

} // namespace detail

struct RunConfig {
    BackboneConfig backbone;
    std::uint64_t backbone_seed = 11;
    SyntheticTaskConfig task;
    TrainSettings train;
    TuningPlan plan; // empty unless configured
    BypassConfig bypass;
    std::string out = "run";
};

inline TuningPlan plan_from_json(const Json& j, std::size_t depth) {
    TuningPlan plan;
    if (j.contains("entries")) {
        for (const auto& e : j.at("entries")) {
            PlanEntry entry;
            entry.block = detail::field_or<std::size_t>(e, "plan.entries[]", "block", 0);
            entry.spec.kind = parse_tuner_kind(detail::str_field_or(e, "plan.entries[]", "kind", "adapter"));
            entry.spec.attach = parse_attach_point(detail::str_field_or(e, "plan.entries[]", "attach", "ffn"));
            entry.spec.width = detail::field_or<std::size_t>(e, "plan.entries[]", "r", 10);
            plan.entries.push_back(entry);
        }
        return plan;
    }
    const std::string arity = detail::str_field_or(j, "plan", "arity", "single");
    const std::size_t r = detail::field_or<std::size_t>(j, "plan", "r", 10);
    if (arity == "single") {
        const auto kind = parse_tuner_kind(detail::str_field_or(j, "plan", "kind", "adapter"));
        const auto attach = parse_attach_point(detail::str_field_or(j, "plan", "attach", "ffn"));
        return TuningPlan::single(depth, kind, attach, r);
    }
    const auto mha_kind = parse_tuner_kind(detail::str_field_or(j, "plan", "mha", "adapter"));
    const auto ffn_kind = parse_tuner_kind(detail::str_field_or(j, "plan", "ffn", "adapter"));
    if (arity == "dual") return TuningPlan::dual(depth, mha_kind, ffn_kind, r);
    if (arity == "tri") {
        const auto block_kind = parse_tuner_kind(detail::str_field_or(j, "plan", "block", "adapter"));
        return TuningPlan::tri(depth, mha_kind, ffn_kind, block_kind, r);
    }
    throw std::invalid_argument("config field 'plan.arity': unknown arity '" + arity + "'");
}

inline Json plan_to_json(const TuningPlan& plan) {
    Json entries = Json::array();
    for (const auto& e : plan.entries)
        entries.push_back({{"block", e.block},
                           {"attach", to_string(e.spec.attach)},
                           {"kind", to_string(e.spec.kind)},
                           {"r", e.spec.width}});
    return Json{{"entries", entries}};
}

inline Json backbone_to_json(const BackboneConfig& cfg) {
    return Json{{"depth", cfg.depth},
                {"model_dim", cfg.model_dim},
                {"num_heads", cfg.num_heads},
                {"ffn_hidden", cfg.ffn_hidden}};
}

inline BackboneConfig backbone_from_json(const Json& j) {
    BackboneConfig cfg;
    cfg.depth = detail::field_or<std::size_t>(j, "backbone", "depth", 4);
    cfg.model_dim = detail::field_or<std::size_t>(j, "backbone", "model_dim", 32);
    cfg.num_heads = detail::field_or<std::size_t>(j, "backbone", "num_heads", 2);
    cfg.ffn_hidden = detail::field_or<std::size_t>(j, "backbone", "ffn_hidden", 64);
    cfg.validate();
    return cfg;
}

inline RunConfig parse_run_config(const Json& j) {
    RunConfig cfg;
    if (j.contains("backbone")) cfg.backbone = backbone_from_json(j.at("backbone"));
    cfg.backbone_seed = detail::field_or<std::uint64_t>(j.contains("backbone") ? j.at("backbone") : Json::object(),
                                                        "backbone", "seed", 11);

    if (j.contains("task")) {
        const auto& t = j.at("task");
        cfg.task.id = detail::str_field_or(t, "task", "id", "task0");
        cfg.task.classes = detail::field_or<std::size_t>(t, "task", "classes", 2);
        cfg.task.seq_len = detail::field_or<std::size_t>(t, "task", "seq_len", 16);
        cfg.task.train_per_class = detail::field_or<std::size_t>(t, "task", "train_per_class", 32);
        cfg.task.test_per_class = detail::field_or<std::size_t>(t, "task", "test_per_class", 32);
        cfg.task.mean_scale = detail::field_or<double>(t, "task", "mean_scale", 1.0);
        cfg.task.noise = detail::field_or<double>(t, "task", "noise", 0.5);
        cfg.task.seed = detail::field_or<std::uint64_t>(t, "task", "seed", 1);
    }
    cfg.task.model_dim = cfg.backbone.model_dim;
    cfg.task.validate();

    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train.mode = parse_train_mode(detail::str_field_or(t, "train", "mode", "bypass"));
        cfg.train.steps = detail::field_or<std::size_t>(t, "train", "steps", 300);
        cfg.train.lr = detail::field_or<double>(t, "train", "lr", 1e-2);
        cfg.train.batch = detail::field_or<std::size_t>(t, "train", "batch", 8);
        cfg.train.seed = detail::field_or<std::uint64_t>(t, "train", "seed", 7);
        cfg.train.eval_every = detail::field_or<std::size_t>(t, "train", "eval_every", 10);
    }
    cfg.train.validate();

    if (j.contains("plan")) cfg.plan = plan_from_json(j.at("plan"), cfg.backbone.depth);

    if (j.contains("bypass")) {
        const auto& b = j.at("bypass");
        const auto kind = parse_tuner_kind(detail::str_field_or(b, "bypass", "kind", "adapter"));
        const std::size_t r = detail::field_or<std::size_t>(b, "bypass", "r", 4);
        cfg.bypass.horizontal = {kind, AttachPoint::block, r};
        cfg.bypass.vertical = {kind, AttachPoint::block, r};
    }
    cfg.bypass.validate();

    cfg.out = detail::str_field_or(j, "config", "out", "run");
    return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::invalid_argument("cannot open config '" + path + "'");
    Json j;
    try {
        f >> j;
    } catch (const Json::exception& e) {
        throw std::invalid_argument("config '" + path + "': " + e.what());
    }
    return parse_run_config(j);
}

} // namespace restune
