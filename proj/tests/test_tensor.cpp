// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "oracles.hpp"
#include "restune/random.hpp"
#include "restune/tensor.hpp"

using namespace restune;

namespace {

// Compares tape gradients against central finite differences for every
// requires_grad input of `build`. rel < 1e-4 where the analytic value is
// non-negligible, abs < 1e-6 otherwise.
using Builder = std::function<TensorPtr(Tape&, const std::vector<TensorPtr>&)>;

void check_gradients(const std::vector<TensorPtr>& inputs, const Builder& build) {
    Tape tape;
    auto loss = build(tape, inputs);
    REQUIRE(loss->numel() == 1);
    tape.backward(loss);
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        if (!inputs[which]->requires_grad) continue;
        CAPTURE(which);
        REQUIRE(inputs[which]->grad.has_value());
        auto fd = finite_diff_grad(
            [&](const Tensor& probe) {
                std::vector<TensorPtr> frozen;
                for (std::size_t i = 0; i < inputs.size(); ++i) {
                    auto c = detach(inputs[i]);
                    if (i == which) c->data = probe.data;
                    frozen.push_back(c);
                }
                Tape t2;
                return build(t2, frozen)->item();
            },
            *inputs[which], 1e-5);
        for (std::size_t i = 0; i < fd->numel(); ++i) {
            CAPTURE(i);
            const double analytic = (*inputs[which]->grad)[i];
            const double numeric = fd->data[i];
            if (std::abs(analytic) > 1e-6) {
                CHECK(std::abs(analytic - numeric) / std::abs(analytic) < 1e-4);
            } else {
                CHECK(std::abs(analytic - numeric) < 1e-6);
            }
        }
    }
}

TensorPtr random_tensor(Shape shape, Rng& rng, bool rg = true, double sd = 1.0) {
    return gaussian_tensor(std::move(shape), rng, sd, rg);
}

} // namespace

TEST_CASE("matmul forward") {
    Tape tape;
    auto eye = tensor2d({{1, 0}, {0, 1}});
    auto b = tensor2d({{3, 4}, {5, 6}});
    CHECK(max_abs_diff(tape.matmul(eye, b), b) == 0.0);

    auto a = tensor2d({{1, 2}});
    auto z = tensor2d({{0}, {0}});
    auto prod = tape.matmul(a, z);
    CHECK(prod->shape == Shape{1, 1});
    CHECK(prod->data[0] == 0.0);

    Rng rng(41);
    auto x = random_tensor({3, 4}, rng, false);
    auto y = random_tensor({4, 2}, rng, false);
    CHECK(max_abs_diff(tape.matmul(x, y), oracles::matmul(*x, *y)) <= 1e-12);
}

TEST_CASE("matmul shape mismatch names both shapes") {
    Tape tape;
    auto a = make_tensor({2, 3});
    auto b = make_tensor({2, 3});
    CHECK_THROWS_WITH_AS(tape.matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("row_softmax") {
    Tape tape;
    auto flat = tensor2d({{0, 0, 0}});
    auto s = tape.row_softmax(flat);
    for (double v : s->data) CHECK(v == doctest::Approx(1.0 / 3).epsilon(1e-15));

    auto hot = tape.row_softmax(tensor2d({{1000, 0}}));
    CHECK(std::abs(hot->data[0] - 1.0) < 1e-12);
    CHECK(std::abs(hot->data[1]) < 1e-12);

    Rng rng(7);
    auto x = random_tensor({2, 5}, rng, false);
    auto y = tape.row_softmax(x);
    CHECK(max_abs_diff(y, oracles::softmax_rows(*x)) <= 1e-12);
    for (std::size_t i = 0; i < 2; ++i) {
        double rowsum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            rowsum += y->at(i, j);
            CHECK(y->at(i, j) >= 0.0);
            CHECK(y->at(i, j) <= 1.0);
        }
        CHECK(std::abs(rowsum - 1.0) <= 1e-12);
    }

    auto bad = tensor2d({{1.0, std::numeric_limits<double>::infinity()}});
    CHECK_THROWS_AS(tape.row_softmax(bad), std::domain_error);
}

TEST_CASE("elementwise basics") {
    Tape tape;
    auto zero = scalar_tensor(0.0);
    CHECK(tape.sigmoid(zero)->data[0] == 0.5);

    Rng rng(11);
    auto x = random_tensor({3, 3}, rng, false);
    auto same = tape.add(x, full_tensor({3, 3}, 0.0));
    CHECK(max_abs_diff(same, x) == 0.0);

    // GELU against the quadrature oracle at scattered points
    std::vector<double> pts{-4.0, -2.5, -1.0, -0.3, 0.0, 0.4, 1.2, 2.0, 3.7};
    auto in = make_tensor({pts.size()});
    in->data = pts;
    auto out = tape.gelu(in);
    for (std::size_t i = 0; i < pts.size(); ++i)
        CHECK(std::abs(out->data[i] - oracles::gelu(pts[i])) <= 1e-10);

    auto bad = make_tensor({2});
    CHECK_THROWS_AS(tape.add(x, bad), std::invalid_argument);
}

TEST_CASE("bias and scalar broadcast") {
    Tape tape;
    auto a = tensor2d({{1, 2}, {3, 4}});
    auto bias = make_tensor({2});
    bias->data = {10, 20};
    auto out = tape.add(a, bias);
    CHECK(out->at(0, 0) == 11);
    CHECK(out->at(0, 1) == 22);
    CHECK(out->at(1, 0) == 13);
    CHECK(out->at(1, 1) == 24);

    auto scaled = tape.mul(a, scalar_tensor(2.0));
    CHECK(scaled->at(1, 1) == 8);
}

TEST_CASE("backward: linear case and unreachable node") {
    Tape tape;
    auto x = full_tensor({2, 3}, 1.5, true);
    auto loss = tape.sum(x);
    tape.backward(loss);
    REQUIRE(x->grad.has_value());
    for (double g : *x->grad) CHECK(g == 1.0);

    // p never feeds the loss
    auto p = full_tensor({2}, 3.0, true);
    auto q = tape.mul_scalar(p, 2.0);
    (void)q;
    tape.backward(loss);
    CHECK(!p->grad.has_value());
}

TEST_CASE("backward rejects non-scalar loss") {
    Tape tape;
    auto x = full_tensor({2, 2}, 1.0, true);
    auto y = tape.mul_scalar(x, 2.0);
    CHECK_THROWS_AS(tape.backward(y), std::invalid_argument);
}

TEST_CASE("backward on detached loss is a no-op") {
    Tape tape;
    auto x = full_tensor({3}, 2.0, false);
    auto loss = tape.sum(x);
    tape.backward(loss); // nothing requires grad
    CHECK(!x->grad.has_value());
}

TEST_CASE("grad of sum(softmax(xW)) wrt W matches finite differences") {
    Rng rng(3);
    auto x = random_tensor({2, 4}, rng, false);
    auto w = random_tensor({4, 3}, rng, true);

    Tape tape;
    auto probs = tape.row_softmax(tape.matmul(x, w));
    // weight the entries so the gradient is not identically zero
    auto r = random_tensor({2, 3}, rng, false);
    auto loss = tape.sum(tape.mul(probs, r));
    tape.backward(loss);
    REQUIRE(w->grad.has_value());

    auto fd = finite_diff_grad(
        [&](const Tensor& probe) {
            auto wf = detach(w);
            wf->data = probe.data;
            Tape t2;
            return t2.sum(t2.mul(t2.row_softmax(t2.matmul(x, wf)), r))->item();
        },
        *w, 1e-5);
    for (std::size_t i = 0; i < fd->numel(); ++i) {
        const double a = (*w->grad)[i];
        const double n = fd->data[i];
        CHECK(std::abs(a - n) / std::max(1e-6, std::abs(a)) < 1e-6);
    }
}

TEST_CASE("finite_diff_grad basics") {
    auto x = make_tensor({2});
    x->data = {1.0, 2.0};
    auto grad = finite_diff_grad(
        [](const Tensor& t) {
            double acc = 0.0;
            for (double v : t.data) acc += v * v;
            return acc;
        },
        *x, 1e-6);
    CHECK(std::abs(grad->data[0] - 2.0) <= 1e-8);
    CHECK(std::abs(grad->data[1] - 4.0) <= 1e-8);

    auto zero = finite_diff_grad([](const Tensor&) { return 42.0; }, *x);
    for (double v : zero->data) CHECK(v == 0.0);

    CHECK_THROWS_AS(finite_diff_grad([](const Tensor&) { return 0.0; }, *x, 0.0), std::invalid_argument);
}

TEST_CASE("gradient check: every differentiable op") {
    Rng rng(2024);
    auto weighted_sum = [](Tape& t, const TensorPtr& v, const TensorPtr& r) { return t.sum(t.mul(v, r)); };

    SUBCASE("matmul and transpose") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({4, 2}, rng);
        auto r = random_tensor({2, 3}, rng, false);
        check_gradients({a, b, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            return t.sum(t.mul(t.transpose(t.matmul(in[0], in[1])), in[2]));
        });
    }
    SUBCASE("row_softmax") {
        auto a = random_tensor({3, 5}, rng);
        auto r = random_tensor({3, 5}, rng, false);
        check_gradients({a, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            return t.sum(t.mul(t.row_softmax(in[0]), in[1]));
        });
    }
    SUBCASE("add sub mul div") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({2, 3}, rng);
        auto c = random_tensor({2, 3}, rng, true, 0.5);
        auto r = random_tensor({2, 3}, rng, false);
        check_gradients({a, b, c, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            auto d = t.add_scalar(t.mul(in[2], in[2]), 1.0); // keep the divisor away from zero
            return t.sum(t.mul(t.div(t.mul(t.sub(in[0], in[1]), in[1]), d), in[3]));
        });
    }
    SUBCASE("scalar broadcast add/mul") {
        auto a = random_tensor({2, 4}, rng);
        auto s = random_tensor({1}, rng);
        auto r = random_tensor({2, 4}, rng, false);
        check_gradients({a, s, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            return t.sum(t.mul(t.mul(t.add(in[0], in[1]), in[1]), in[2]));
        });
    }
    SUBCASE("bias broadcast") {
        auto a = random_tensor({3, 4}, rng);
        auto bias = random_tensor({4}, rng);
        auto r = random_tensor({3, 4}, rng, false);
        check_gradients({a, bias, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            return t.sum(t.mul(t.add(in[0], in[1]), in[2]));
        });
    }
    SUBCASE("unary chain sigmoid gelu exp log") {
        auto a = random_tensor({2, 3}, rng, true, 0.7);
        auto r = random_tensor({2, 3}, rng, false);
        check_gradients({a, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            auto pos = t.add_scalar(t.sigmoid(in[0]), 0.5); // > 0 for log
            return t.sum(t.mul(t.log(t.exp(t.gelu(pos))), in[1]));
        });
    }
    SUBCASE("row_scale sub_rowvec row_sum") {
        auto a = random_tensor({3, 4}, rng);
        auto s = random_tensor({3, 1}, rng);
        auto r = random_tensor({3, 1}, rng, false);
        check_gradients({a, s, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            return t.sum(t.mul(t.row_sum(t.row_scale(t.sub_rowvec(in[0], in[1]), in[1])), in[2]));
        });
    }
    SUBCASE("concat and slice") {
        auto a = random_tensor({2, 3}, rng);
        auto b = random_tensor({1, 3}, rng);
        auto r = random_tensor({3, 2}, rng, false);
        check_gradients({a, b, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            auto cat = t.concat_rows(in[0], in[1]);
            auto left = t.slice_cols(cat, 0, 2);
            auto mid = t.slice_rows(cat, 0, 3);
            auto joined = t.concat_cols({left, t.slice_cols(mid, 1, 1)});
            return t.sum(t.mul(t.slice_cols(joined, 0, 2), in[2]));
        });
    }
    SUBCASE("layer_norm") {
        auto x = random_tensor({3, 6}, rng);
        auto gamma = random_tensor({6}, rng);
        auto beta = random_tensor({6}, rng);
        auto r = random_tensor({3, 6}, rng, false);
        check_gradients({x, gamma, beta, r}, [&](Tape& t, const std::vector<TensorPtr>& in) {
            return t.sum(t.mul(t.layer_norm(in[0], in[1], in[2]), in[3]));
        });
    }
    (void)weighted_sum;
}

TEST_CASE("fan-out accumulates") {
    Tape tape;
    auto x = full_tensor({3}, 2.0, true);
    auto loss = tape.sum(tape.add(tape.mul(x, x), x)); // d/dx (x^2 + x) = 2x + 1
    tape.backward(loss);
    REQUIRE(x->grad.has_value());
    for (double g : *x->grad) CHECK(g == doctest::Approx(5.0).epsilon(1e-14));
}

TEST_CASE("no grad buffer appears on frozen tensors") {
    Rng rng(5);
    auto x = random_tensor({2, 3}, rng, false);
    auto w = random_tensor({3, 2}, rng, true);
    Tape tape;
    auto loss = tape.sum(tape.matmul(x, w));
    tape.backward(loss);
    CHECK(!x->grad.has_value());
    CHECK(w->grad.has_value());
}

TEST_CASE("replaying the tape with cleared grads is bitwise deterministic") {
    Rng rng(17);
    auto w = random_tensor({4, 4}, rng, true);
    auto x = random_tensor({3, 4}, rng, false);
    Tape tape;
    auto loss = tape.sum(tape.row_softmax(tape.matmul(x, w)));
    tape.backward(loss);
    auto first = *w->grad;
    tape.zero_all_grads();
    tape.backward(loss);
    CHECK(*w->grad == first);
}

TEST_CASE("zero-extent shapes flow through") {
    Tape tape;
    auto empty = make_tensor({0, 3});
    auto b = make_tensor({3, 2});
    auto prod = tape.matmul(empty, b);
    CHECK(prod->shape == Shape{0, 2});

    auto k = tensor2d({{1, 2, 3}});
    auto cat = tape.concat_rows(empty, k);
    CHECK(cat->shape == Shape{1, 3});
    CHECK(max_abs_diff(cat, k) == 0.0);

    auto sm = tape.row_softmax(make_tensor({2, 0}));
    CHECK(sm->shape == Shape{2, 0});
    auto rs = tape.row_sum(make_tensor({2, 0}));
    CHECK(rs->data == std::vector<double>{0.0, 0.0});
}

TEST_CASE("tensor invariants") {
    auto t = make_tensor({3, 4}, true);
    CHECK(t->numel() == 12);
    CHECK(shape_numel(t->shape) == t->data.size());
    t->ensure_grad();
    CHECK(t->grad->size() == t->data.size());

    auto frozen = make_tensor({2});
    CHECK_THROWS_AS(frozen->ensure_grad(), std::logic_error);
}
