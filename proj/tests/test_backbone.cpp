// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sstream>

#include "oracles.hpp"
#include "restune/backbone.hpp"
#include "restune/checkpoint.hpp"
#include "restune/tensor.hpp"

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

} // namespace

TEST_CASE("attention with a single key returns that value row") {
    Tape tape;
    Rng rng(1);
    auto q = gaussian_tensor({4, 3}, rng, 1.0);
    auto k = gaussian_tensor({1, 3}, rng, 1.0);
    auto v = tensor2d({{7.0, -2.0}});
    auto out = attention(tape, q, k, v);
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(out->at(i, 0) == doctest::Approx(7.0).epsilon(1e-15));
        CHECK(out->at(i, 1) == doctest::Approx(-2.0).epsilon(1e-15));
    }
}

TEST_CASE("attention saturates toward the dominant key") {
    Tape tape;
    auto k = tensor2d({{1, 0}, {0, 1}}); // orthonormal keys
    auto v = tensor2d({{5, 5}, {-3, 9}});
    auto q = tensor2d({{0, 1e4}}); // hugely aligned with key 1
    auto out = attention(tape, q, k, v);
    CHECK(std::abs(out->at(0, 0) - (-3.0)) < 1e-12);
    CHECK(std::abs(out->at(0, 1) - 9.0) < 1e-12);
}

TEST_CASE("attention matches the hand-looped oracle") {
    Tape tape;
    Rng rng(99);
    auto q = gaussian_tensor({4, 8}, rng, 1.0);
    auto k = gaussian_tensor({6, 8}, rng, 1.0);
    auto v = gaussian_tensor({6, 8}, rng, 1.0);
    CHECK(max_abs_diff(attention(tape, q, k, v), oracles::attention(*q, *k, *v)) <= 1e-12);

    CHECK_THROWS_AS(attention(tape, q, gaussian_tensor({6, 7}, rng, 1.0), v), std::invalid_argument);
    CHECK_THROWS_AS(attention(tape, q, k, gaussian_tensor({5, 8}, rng, 1.0)), std::invalid_argument);
}

TEST_CASE("multi_head_attention") {
    Rng rng(7);
    auto model = BackboneModel::random(small_config(1), 7);
    const auto& p = model.blocks[0];

    SUBCASE("H=1 reduces to plain attention then w_o") {
        Tape tape;
        auto x = gaussian_tensor({5, 16}, rng, 1.0);
        auto got = multi_head_attention(tape, x, p, 1);
        auto q = tape.matmul(x, p.w_q);
        auto k = tape.matmul(x, p.w_k);
        auto v = tape.matmul(x, p.w_v);
        auto want = tape.matmul(attention(tape, q, k, v), p.w_o);
        CHECK(max_abs_diff(got, want) <= 1e-14);
    }
    SUBCASE("zero values give zero output") {
        Tape tape;
        BlockParams zeroed = p;
        zeroed.w_v = make_tensor({16, 16});
        auto x = gaussian_tensor({5, 16}, rng, 1.0);
        auto got = multi_head_attention(tape, x, zeroed, 2);
        for (double v : got->data) CHECK(v == 0.0);
    }
    SUBCASE("H=2 matches the manual head-slice oracle") {
        Tape tape;
        auto x = gaussian_tensor({5, 16}, rng, 1.0);
        auto got = multi_head_attention(tape, x, p, 2);
        auto want = oracles::mha(*x, *p.w_q, *p.w_k, *p.w_v, *p.w_o, 2);
        CHECK(max_abs_diff(*got, *want) <= 1e-12);
    }
}

TEST_CASE("ffn") {
    Rng rng(13);
    auto model = BackboneModel::random(small_config(1), 13);
    BlockParams p = model.blocks[0];

    SUBCASE("zero first layer leaves only the output bias") {
        p.w1 = make_tensor({16, 24});
        p.b1 = make_tensor({24});
        p.b2 = full_tensor({16}, 0.75);
        Tape tape;
        auto out = ffn(tape, gaussian_tensor({3, 16}, rng, 1.0), p);
        for (double v : out->data) CHECK(v == doctest::Approx(0.75).epsilon(1e-15));
    }
    SUBCASE("zero second layer gives zero") {
        p.w2 = make_tensor({24, 16});
        p.b2 = make_tensor({16});
        Tape tape;
        auto out = ffn(tape, gaussian_tensor({3, 16}, rng, 1.0), p);
        for (double v : out->data) CHECK(v == 0.0);
    }
    SUBCASE("random instance matches the loop oracle") {
        Tape tape;
        auto x = gaussian_tensor({4, 16}, rng, 1.0);
        CHECK(max_abs_diff(*ffn(tape, x, p), *oracles::ffn(*x, *p.w1, *p.b1, *p.w2, *p.b2)) <= 1e-12);
    }
}

TEST_CASE("block_forward") {
    Rng rng(23);

    SUBCASE("zero w_o and w2 make the block an identity") {
        auto model = BackboneModel::random(small_config(1), 23);
        BlockParams p = model.blocks[0];
        p.w_o = make_tensor({16, 16});
        p.w2 = make_tensor({24, 16});
        p.b2 = make_tensor({16});
        Tape tape;
        auto x = gaussian_tensor({4, 16}, rng, 1.0);
        auto out = block_forward(tape, x, p, 2);
        CHECK(max_abs_diff(out.y, x) == 0.0);
    }
    SUBCASE("random block matches a step-by-step scripted oracle") {
        auto model = BackboneModel::random(small_config(1), 29);
        const auto& p = model.blocks[0];
        Tape tape;
        auto x = gaussian_tensor({4, 16}, rng, 1.0);
        auto got = block_forward(tape, x, p, 2);

        auto a = oracles::layer_norm(*x, *p.ln1_scale, *p.ln1_shift);
        auto mha_out = oracles::mha(*a, *p.w_q, *p.w_k, *p.w_v, *p.w_o, 2);
        auto u = restune::make_tensor({4, 16});
        for (std::size_t i = 0; i < u->numel(); ++i) u->data[i] = x->data[i] + mha_out->data[i];
        auto b = oracles::layer_norm(*u, *p.ln2_scale, *p.ln2_shift);
        auto f = oracles::ffn(*b, *p.w1, *p.b1, *p.w2, *p.b2);
        auto y = restune::make_tensor({4, 16});
        for (std::size_t i = 0; i < y->numel(); ++i) y->data[i] = u->data[i] + f->data[i];

        CHECK(max_abs_diff(got.mha_out, mha_out) <= 1e-12);
        CHECK(max_abs_diff(got.ffn_out, f) <= 1e-12);
        CHECK(max_abs_diff(got.y, y) <= 1e-12);
    }
}

TEST_CASE("backbone_forward record shape and counter") {
    Rng rng(31);
    auto model = BackboneModel::random(small_config(1), 31);
    Tape tape;
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto rec = backbone_forward(tape, x0, model);
    CHECK(rec.layer_outputs.size() == 1);
    CHECK(rec.activations().size() == 2);
    CHECK(rec.activations()[0].get() == x0.get());
    CHECK(model.forward_count() == 1);

    backbone_forward(tape, x0, model);
    CHECK(model.forward_count() == 2);

    CHECK_THROWS_AS(BackboneModel::random(BackboneConfig{0, 16, 2, 24}, 1), std::invalid_argument);
}

TEST_CASE("backbone_forward equals folding block_forward") {
    Rng rng(37);
    auto model = BackboneModel::random(small_config(3), 37);
    Tape tape;
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto rec = backbone_forward(tape, x0, model);

    TensorPtr x = x0;
    Tape fold_tape;
    for (const auto& block : model.blocks) x = block_forward(fold_tape, x, block, 2).y;
    CHECK(max_abs_diff(rec.final_output(), x) == 0.0);
}

TEST_CASE("freeze and unfreeze") {
    auto model = BackboneModel::random(small_config(2), 41);
    CHECK(model.trainable_param_count() == 0); // frozen after construction
    model.unfreeze();
    CHECK(model.trainable_param_count() == model.total_param_count());
    model.freeze();
    CHECK(model.trainable_param_count() == 0);

    // backward through a loss on the record leaves every backbone grad absent
    Rng rng(43);
    Tape tape;
    auto rec = backbone_forward(tape, gaussian_tensor({4, 16}, rng, 1.0), model);
    auto loss = tape.sum(rec.final_output());
    tape.backward(loss);
    for (const auto& p : model.parameters()) CHECK(!p->grad.has_value());
    CHECK(tape.node_count() == 0); // nothing requires grad, nothing taped
}

TEST_CASE("identical seed and input give bitwise identical records") {
    Rng rng(47);
    auto x0 = gaussian_tensor({4, 16}, rng, 1.0);
    auto m1 = BackboneModel::random(small_config(2), 101);
    auto m2 = BackboneModel::random(small_config(2), 101);
    Tape t1, t2;
    auto r1 = backbone_forward(t1, x0, m1);
    auto r2 = backbone_forward(t2, x0, m2);
    for (std::size_t l = 0; l < r1.layer_outputs.size(); ++l)
        CHECK(r1.layer_outputs[l]->data == r2.layer_outputs[l]->data);
    CHECK(r1.mha_outputs[0]->data == r2.mha_outputs[0]->data);
}

TEST_CASE("checkpoint round trip and stable hash") {
    auto model = BackboneModel::random(small_config(2), 53);
    auto named = model.named_parameters();
    auto bytes = serialize_tensors(named);
    CHECK(fnv1a(bytes) == fnv1a(serialize_tensors(named)));

    std::istringstream in(bytes);
    auto parsed = parse_tensors(in);
    REQUIRE(parsed.size() == named.size());
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        CHECK(parsed[i].first == named[i].first);
        CHECK(parsed[i].second->shape == named[i].second->shape);
        CHECK(parsed[i].second->data == named[i].second->data); // exact round trip
    }

    auto fresh = BackboneModel::random(small_config(2), 999);
    restore_into(parsed, fresh.named_parameters());
    for (std::size_t l = 0; l < 2; ++l)
        CHECK(fresh.blocks[l].w_q->data == model.blocks[l].w_q->data);

    std::istringstream bad("restune.tensors.v0\n0\n");
    CHECK_THROWS_AS(parse_tensors(bad), std::runtime_error);
}
