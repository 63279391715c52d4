// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "restune/backbone.hpp"
#include "restune/bypass.hpp"
#include "restune/optim.hpp"
#include "restune/tensor.hpp"
#include "restune/tuners.hpp"

using namespace restune;

namespace {

BackboneConfig small_config(std::size_t depth = 2) {
    BackboneConfig cfg;
    cfg.depth = depth;
    cfg.model_dim = 16;
    cfg.num_heads = 2;
    cfg.ffn_hidden = 24;
    return cfg;
}

BypassConfig adapter_bypass(std::size_t r = 4) {
    BypassConfig cfg;
    cfg.horizontal = {TunerKind::adapter, AttachPoint::block, r};
    cfg.vertical = {TunerKind::adapter, AttachPoint::block, r};
    return cfg;
}

ActivationCache fresh_cache(const BackboneModel& model, const TensorPtr& x0) {
    Tape tape;
    return build_cache(backbone_forward(tape, x0, model));
}

} // namespace

TEST_CASE("build_cache detaches and validates") {
    auto model = BackboneModel::random(small_config(2), 3);
    Rng rng(5);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    Tape tape;
    auto rec = backbone_forward(tape, x0, model);
    auto cache = build_cache(rec);
    CHECK(cache.depth() == 2);
    CHECK(cache.source_forward_count == rec.forward_count);
    for (const auto& t : cache.activations) {
        CHECK(!t->requires_grad);
        CHECK(t->leaf);
        CHECK(!t->grad.has_value());
    }
    // cache holds copies: later tuning cannot bend it
    auto snapshot = cache.activations[1]->data;
    rec.layer_outputs[0]->data[0] += 99.0;
    CHECK(cache.activations[1]->data == snapshot);

    ForwardRecord incomplete;
    CHECK_THROWS_AS(build_cache(incomplete), std::invalid_argument);
}

TEST_CASE("gates are exactly one half at construction") {
    auto bs = BypassState::init(adapter_bypass(), small_config(4), 7);
    auto gates = bs.gate_values();
    REQUIRE(gates.size() == 4);
    for (double g : gates) CHECK(g == 0.5);
}

TEST_CASE("identity tuners give the hand-unrolled convex mixture") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 11);
    Rng rng(13);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto cache = fresh_cache(model, x0);
    auto bs = BypassState::init(adapter_bypass(), cfg, 17); // zero-init branches, gates 0.5

    Tape tape;
    auto fwd = bypass_forward(tape, cache, bs);
    const auto& a = cache.activations[0]->data;
    const auto& b = cache.activations[1]->data;
    const auto& c = cache.activations[2]->data;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double b1 = 0.5 * b[i] + 0.5 * a[i];
        const double b2 = 0.5 * c[i] + 0.5 * b1;
        CHECK(std::abs(fwd.states[1]->data[i] - b1) <= 1e-15);
        CHECK(std::abs(fwd.states[2]->data[i] - b2) <= 1e-15);
    }
}

TEST_CASE("saturated gates reduce to the pure horizontal path") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 19);
    Rng rng(23);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto cache = fresh_cache(model, x0);
    auto bs = BypassState::init(adapter_bypass(), cfg, 29);
    for (auto& g : bs.gate_raw) g->data[0] = 60.0; // sigmoid -> 1 within 1e-26

    Tape tape;
    auto fwd = bypass_forward(tape, cache, bs);
    CHECK(max_abs_diff(fwd.final_output(), cache.activations[2]) <= 1e-12);
}

TEST_CASE("depth-one recurrence base case") {
    auto cfg = small_config(1);
    auto model = BackboneModel::random(cfg, 31);
    Rng rng(37);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto cache = fresh_cache(model, x0);
    auto bs = BypassState::init(adapter_bypass(), cfg, 41);
    bs.gate_raw[0]->data[0] = 0.8;

    Tape tape;
    auto fwd = bypass_forward(tape, cache, bs);
    const double lam = 1.0 / (1.0 + std::exp(-0.8));
    for (std::size_t i = 0; i < x0->numel(); ++i) {
        const double want = lam * cache.activations[1]->data[i] + (1.0 - lam) * cache.activations[0]->data[i];
        CHECK(std::abs(fwd.final_output()->data[i] - want) <= 1e-15);
    }

    auto deep = BypassState::init(adapter_bypass(), small_config(3), 43);
    Tape t2;
    CHECK_THROWS_AS(bypass_forward(t2, cache, deep), std::invalid_argument);
}

TEST_CASE("backward through a bypass loss touches no backbone parameter") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 47);
    Rng rng(53);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto cache = fresh_cache(model, x0);
    auto task = TaskHead::init("t0", 3, adapter_bypass(), cfg, 59);

    Tape tape;
    auto loss = cross_entropy_loss(tape, task.logits(tape, cache), 1);
    tape.backward(loss);
    for (const auto& p : model.parameters()) CHECK(!p->grad.has_value());
    for (const auto& t : cache.activations) CHECK(!t->grad.has_value());
    for (const auto& p : task.parameters()) CHECK(p->grad.has_value());
}

TEST_CASE("train_step updates only tuners, gates and head, deterministically") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 61);
    Rng rng(67);
    std::vector<ActivationCache> caches;
    std::vector<std::size_t> labels;
    for (int i = 0; i < 4; ++i) {
        auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
        caches.push_back(fresh_cache(model, x0));
        labels.push_back(i % 2);
    }
    std::vector<const ActivationCache*> batch;
    for (const auto& c : caches) batch.push_back(&c);

    auto run_once = [&](std::uint64_t seed) {
        auto task = TaskHead::init("t", 2, adapter_bypass(), cfg, seed);
        AdamOptimizer opt(task.parameters());
        return bypass_train_step(batch, labels, task, opt);
    };
    CHECK(run_once(71) == run_once(71)); // identical state + seed -> identical loss
}

TEST_CASE("grad recipients are exactly the tuner, gate and head parameters") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 79);
    Rng rng(83);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto cache = fresh_cache(model, x0);
    auto task = TaskHead::init("t", 2, adapter_bypass(), cfg, 89);
    AdamOptimizer opt(task.parameters());
    std::vector<const ActivationCache*> batch{&cache};
    bypass_train_step(batch, {0}, task, opt);

    for (const auto& p : task.parameters()) CHECK(p->grad.has_value());
    for (const auto& p : model.parameters()) CHECK(!p->grad.has_value());
}

TEST_CASE("loss decreases on a separable toy task") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 97);
    Rng rng(101);
    // two well-separated class means
    std::vector<double> mu0, mu1;
    for (int j = 0; j < 16; ++j) {
        mu0.push_back(rng.gaussian(0.0, 1.0));
        mu1.push_back(rng.gaussian(0.0, 1.0));
    }
    std::vector<ActivationCache> caches;
    std::vector<std::size_t> labels;
    for (int i = 0; i < 12; ++i) {
        const auto& mu = (i % 2 == 0) ? mu0 : mu1;
        auto x0 = make_tensor({4, 16});
        for (std::size_t r = 0; r < 4; ++r)
            for (std::size_t j = 0; j < 16; ++j) x0->data[r * 16 + j] = mu[j] + rng.gaussian(0.0, 0.3);
        caches.push_back(fresh_cache(model, x0));
        labels.push_back(i % 2);
    }
    std::vector<const ActivationCache*> batch;
    for (const auto& c : caches) batch.push_back(&c);

    auto task = TaskHead::init("toy", 2, adapter_bypass(), cfg, 103);
    AdamOptimizer opt(task.parameters(), {.lr = 1e-2});
    double first = 0.0, last = 0.0;
    for (int step = 0; step < 200; ++step) {
        const double loss = bypass_train_step(batch, labels, task, opt);
        if (step == 0) first = loss;
        last = loss;
    }
    CHECK(last < first);
    CHECK(last < 0.1); // effectively solved
}

TEST_CASE("multi-task inference runs the backbone exactly once") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 107);
    Rng rng(109);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);

    SUBCASE("single task") {
        std::vector<TaskHead> tasks;
        tasks.push_back(TaskHead::init("a", 3, adapter_bypass(), cfg, 113));
        auto res = multi_task_infer(x0, model, tasks);
        CHECK(res.forward_delta == 1);
        CHECK(res.logits.size() == 1);
    }
    SUBCASE("ten tasks, outputs bit-identical to isolated runs") {
        std::vector<TaskHead> tasks;
        for (int t = 0; t < 10; ++t)
            tasks.push_back(TaskHead::init("t" + std::to_string(t), 3, adapter_bypass(), cfg, 200 + t));
        auto res = multi_task_infer(x0, model, tasks);
        CHECK(res.forward_delta == 1);
        REQUIRE(res.logits.size() == 10);
        for (std::size_t t = 0; t < tasks.size(); ++t) {
            auto cache = fresh_cache(model, x0);
            Tape tape;
            auto alone = tasks[t].logits(tape, cache);
            CHECK(alone->data == res.logits[t]->data);
        }
    }
    SUBCASE("empty task list is a contract error") {
        CHECK_THROWS_AS(multi_task_infer(x0, model, {}), std::invalid_argument);
    }
}

TEST_CASE("embedded baseline performs one backbone forward per task") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 127);
    Rng rng(131);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    std::vector<EmbeddedTask> tasks;
    for (int t = 0; t < 5; ++t) {
        EmbeddedTask et;
        et.task_id = "t" + std::to_string(t);
        et.plan = PlanState::init(TuningPlan::single(2, TunerKind::adapter, AttachPoint::ffn, 4), cfg, 300 + t);
        Rng hr(400 + t);
        et.w_head = gaussian_tensor({16, 3}, hr, 0.02, true);
        et.b_head = make_tensor({3}, true);
        tasks.push_back(std::move(et));
    }
    auto res = embedded_multi_task_baseline(x0, model, tasks);
    CHECK(res.forward_delta == 5);
}

TEST_CASE("memory proxy ordering: linear <= bypass < embedded < full") {
    auto cfg = small_config(2);
    auto model = BackboneModel::random(cfg, 137);
    Rng rng(139);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    Rng hr(149);

    auto make_head = [&] {
        return std::make_pair(gaussian_tensor({16, 2}, hr, 0.02, true), make_tensor({2}, true));
    };

    // linear probe: frozen features, head only
    MemoryProxy linear;
    {
        auto [w, b] = make_head();
        Tape tape;
        auto rec = backbone_forward(tape, x0, model);
        auto loss = cross_entropy_loss(
            tape, tape.add(tape.matmul(mean_pool_rows(tape, rec.final_output()), w), b), 0);
        tape.backward(loss);
        linear = memory_proxy(tape, {w, b});
    }
    // bypass
    MemoryProxy bypass;
    {
        auto cache = fresh_cache(model, x0);
        auto task = TaskHead::init("m", 2, adapter_bypass(), cfg, 151);
        Tape tape;
        auto loss = cross_entropy_loss(tape, task.logits(tape, cache), 0);
        tape.backward(loss);
        bypass = memory_proxy(tape, task.parameters());
    }
    // embedded plan (dual adapter)
    MemoryProxy embedded;
    {
        auto ps = PlanState::init(TuningPlan::dual(2, TunerKind::adapter, TunerKind::adapter, 4), cfg, 157);
        auto [w, b] = make_head();
        Tape tape;
        auto rec = apply_plan(tape, x0, model, ps);
        auto loss = cross_entropy_loss(
            tape, tape.add(tape.matmul(mean_pool_rows(tape, rec.final_output()), w), b), 0);
        tape.backward(loss);
        auto params = ps.parameters();
        params.push_back(w);
        params.push_back(b);
        embedded = memory_proxy(tape, params);
    }
    // full fine-tuning
    MemoryProxy full;
    {
        model.unfreeze();
        auto [w, b] = make_head();
        Tape tape;
        auto rec = backbone_forward(tape, x0, model);
        auto loss = cross_entropy_loss(
            tape, tape.add(tape.matmul(mean_pool_rows(tape, rec.final_output()), w), b), 0);
        tape.backward(loss);
        auto params = model.parameters();
        params.push_back(w);
        params.push_back(b);
        full = memory_proxy(tape, params);
        model.freeze();
    }

    CHECK(linear.retained_scalars <= bypass.retained_scalars);
    CHECK(bypass.retained_scalars < embedded.retained_scalars);
    CHECK(embedded.retained_scalars < full.retained_scalars);

    CHECK(full.trainable_params == model.total_param_count() + 16 * 2 + 2);
    CHECK(linear.trainable_params < bypass.trainable_params);
}

TEST_CASE("bypass checkpoint names") {
    auto bs = BypassState::init(adapter_bypass(), small_config(2), 163);
    auto named = bs.named_parameters();
    bool has_h = false, has_v = false, has_gate = false;
    for (const auto& [name, t] : named) {
        (void)t;
        has_h |= name.rfind("bypass/0/horizontal", 0) == 0;
        has_v |= name.rfind("bypass/1/vertical", 0) == 0;
        has_gate |= name == "bypass/gate/0";
    }
    CHECK(has_h);
    CHECK(has_v);
    CHECK(has_gate);
}
