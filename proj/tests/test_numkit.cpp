#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "ddmec/numkit.hpp"

using namespace ddmec;

namespace {

// central finite differences against the tape's analytic grads
void check_grads_fd(std::vector<Parameter*> params,
                    const std::function<double()>& eval,
                    const std::function<void()>& backprop, double h = 1e-5,
                    double tol = 1e-4) {
    zero_grads(params);
    backprop();
    for (Parameter* p : params) {
        for (std::size_t i = 0; i < p->value.numel(); ++i) {
            double save = p->value.data[i];
            p->value.data[i] = save + h;
            double fp = eval();
            p->value.data[i] = save - h;
            double fm = eval();
            p->value.data[i] = save;
            double fd = (fp - fm) / (2.0 * h);
            double ad = p->grad.data[i];
            double denom = std::max({std::abs(fd), std::abs(ad), 1e-6});
            INFO(p->name << "[" << i << "] ad=" << ad << " fd=" << fd);
            CHECK(std::abs(ad - fd) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("backprop: x*x at x=3 gives grad 6") {
    Parameter x("x", Tensor::row({3.0}));
    Tape t;
    auto xi = t.param(x);
    auto y = t.sum(t.mul(xi, xi));
    CHECK(t.scalar(y) == doctest::Approx(9.0));
    t.backward(y);
    CHECK(x.grad.data[0] == doctest::Approx(6.0));
}

TEST_CASE("backprop: sum(x) gives all-ones grad for any shape") {
    Rng rng(7);
    for (auto shape : std::vector<std::vector<std::size_t>>{{4}, {3, 5}, {1, 1}}) {
        Parameter x("x", rng.normal_tensor(shape));
        Tape t;
        auto y = t.sum(t.param(x));
        t.backward(y);
        for (double g : x.grad.data) CHECK(g == 1.0);
    }
}

TEST_CASE("backprop rejects non-scalar output") {
    Parameter x("x", Tensor::row({1.0, 2.0}));
    Tape t;
    auto xi = t.param(x);
    CHECK_THROWS_AS(t.backward(xi), DataError);
}

TEST_CASE("backprop accumulates until grads are zeroed") {
    Parameter x("x", Tensor::row({2.0}));
    auto run = [&] {
        Tape t;
        auto y = t.sq_norm(t.param(x));
        t.backward(y);
    };
    run();
    CHECK(x.grad.data[0] == doctest::Approx(4.0));
    run();
    CHECK(x.grad.data[0] == doctest::Approx(8.0));
    x.zero_grad();
    run();
    CHECK(x.grad.data[0] == doctest::Approx(4.0));
}

TEST_CASE("two-layer MLP grads match central finite differences") {
    Rng rng(42);
    Parameter w1("w1", rng.normal_tensor({3, 8}));
    Parameter b1("b1", rng.normal_tensor({1, 8}));
    Parameter w2("w2", rng.normal_tensor({8, 2}));
    Parameter b2("b2", rng.normal_tensor({1, 2}));
    Tensor x = rng.normal_tensor({4, 3});
    Tensor target = rng.normal_tensor({4, 2});

    auto build = [&](Tape& t) {
        auto h = t.silu(t.add_row(t.matmul(t.input(x), t.param(w1)), t.param(b1)));
        auto out = t.add_row(t.matmul(h, t.param(w2)), t.param(b2));
        return t.scale(t.sq_norm(t.sub(out, t.input(target))), 0.25);
    };
    Tape t;
    auto loss = build(t);
    check_grads_fd({&w1, &b1, &w2, &b2},
                   [&] {
                       Tape e;
                       return e.scalar(build(e));
                   },
                   [&] { t.backward(loss); });
}

TEST_CASE("mixed op graph (concat, mul, mean, scale_rows, row_sum) matches FD") {
    Rng rng(11);
    Parameter a("a", rng.normal_tensor({3, 2}));
    Parameter b("b", rng.normal_tensor({3, 4}));
    Parameter w("w", rng.normal_tensor({6, 3}));
    std::vector<double> rowsw{0.5, -1.5, 2.0};

    auto build = [&](Tape& t) {
        auto c = t.concat_cols(t.param(a), t.param(b));
        auto h = t.silu(t.matmul(c, t.param(w)));
        auto m = t.mul(h, h);
        auto r = t.row_sum(t.scale_rows(m, rowsw));
        return t.add(t.mean(r), t.scale(t.sum(c), 0.1));
    };
    Tape t;
    auto loss = build(t);
    check_grads_fd({&a, &b, &w},
                   [&] {
                       Tape e;
                       return e.scalar(build(e));
                   },
                   [&] { t.backward(loss); });
}

TEST_CASE("gradient correctness property: 100 random compositions") {
    for (int trial = 0; trial < 100; ++trial) {
        Rng rng(1000 + trial);
        std::size_t in = 1 + trial % 4;
        std::size_t hid = 2 + trial % 5;
        Parameter w1("w1", rng.normal_tensor({in, hid}));
        Parameter b1("b1", rng.normal_tensor({1, hid}));
        Parameter w2("w2", rng.normal_tensor({hid, 1}));
        Tensor x = rng.normal_tensor({2, in});
        auto build = [&](Tape& t) {
            auto h = t.silu(t.add_row(t.matmul(t.input(x), t.param(w1)), t.param(b1)));
            return t.sq_norm(t.matmul(h, t.param(w2)));
        };
        Tape t;
        auto loss = build(t);
        check_grads_fd({&w1, &b1, &w2},
                       [&] {
                           Tape e;
                           return e.scalar(build(e));
                       },
                       [&] { t.backward(loss); });
    }
}

TEST_CASE("determinism: identical op sequence gives bitwise-identical values and grads") {
    auto run = [](std::vector<double>& grads) {
        Rng rng(5);
        Parameter w("w", rng.normal_tensor({4, 4}));
        Tensor x = rng.normal_tensor({2, 4});
        Tape t;
        auto y = t.sq_norm(t.silu(t.matmul(t.input(x), t.param(w))));
        t.backward(y);
        grads = w.grad.data;
        return t.scalar(y);
    };
    std::vector<double> g1, g2;
    double v1 = run(g1);
    double v2 = run(g2);
    CHECK(v1 == v2);
    CHECK(g1 == g2);
}

TEST_CASE("matmul against a hand-computed product") {
    Tape t;
    auto a = t.input(Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6}));
    auto b = t.input(Tensor::matrix(3, 2, {7, 8, 9, 10, 11, 12}));
    Tensor c = t.value(t.matmul(a, b));
    CHECK(c.at(0, 0) == 58.0);
    CHECK(c.at(0, 1) == 64.0);
    CHECK(c.at(1, 0) == 139.0);
    CHECK(c.at(1, 1) == 154.0);
    CHECK_THROWS_AS(t.matmul(a, a), DataError);
}

TEST_CASE("adam: zero grads leave params unchanged") {
    Parameter p("p", Tensor::row({1.0, -2.0}));
    Adam opt({&p}, AdamConfig{0.1, 0.9, 0.999, 1e-8});
    Tensor before = p.value;
    p.zero_grad();
    opt.step();
    CHECK(p.value.data == before.data);
    CHECK(opt.steps_done() == 1);
}

TEST_CASE("adam: first-step magnitude is lr in the eps->0 limit") {
    for (double g : {1e-6, 0.5, 3.0, 1e4}) {
        Parameter p("p", Tensor::row({0.0}));
        Adam opt({&p}, AdamConfig{0.01, 0.9, 0.999, 1e-12});
        p.grad.data[0] = g;
        opt.step();
        CHECK(std::abs(std::abs(p.value.data[0]) - 0.01) / 0.01 < 1e-6);
        CHECK(p.value.data[0] < 0.0);  // descends against the gradient
    }
}

TEST_CASE("adam: beta1=beta2=0 gives update -lr*g/(|g|+eps) on repeated grads") {
    double lr = 0.05, eps = 1e-8, g = -2.5;
    Parameter p("p", Tensor::row({1.0}));
    Adam opt({&p}, AdamConfig{lr, 0.0, 0.0, eps});
    double expect_step = -lr * g / (std::abs(g) + eps);
    p.grad.data[0] = g;
    opt.step();
    CHECK(p.value.data[0] == doctest::Approx(1.0 + expect_step).epsilon(1e-12));
    p.zero_grad();
    p.grad.data[0] = g;
    opt.step();
    CHECK(p.value.data[0] == doctest::Approx(1.0 + 2 * expect_step).epsilon(1e-12));
}

TEST_CASE("adam reports the parameter name on non-finite grads") {
    Parameter p("trunk.b0.W", Tensor::row({1.0}));
    Adam opt({&p}, AdamConfig{});
    p.grad.data[0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_WITH_AS(opt.step(), doctest::Contains("trunk.b0.W"), NumericError);
}

TEST_CASE("adam rejects bad hyperparameters") {
    Parameter p("p", Tensor::row({1.0}));
    CHECK_THROWS_AS(Adam({&p}, AdamConfig{0.0, 0.9, 0.999, 1e-8}), DataError);
    CHECK_THROWS_AS(Adam({&p}, AdamConfig{0.1, 1.0, 0.999, 1e-8}), DataError);
    CHECK_THROWS_AS(Adam({&p}, AdamConfig{0.1, 0.9, 0.999, 0.0}), DataError);
}

TEST_CASE("clip_global_norm") {
    Parameter p("p", Tensor::row({0.0, 0.0}));
    p.grad.data = {3.0, 4.0};
    CHECK(clip_global_norm({&p}, 10.0) == doctest::Approx(5.0));
    CHECK(p.grad.data[0] == 3.0);
    CHECK(p.grad.data[1] == 4.0);
    CHECK(clip_global_norm({&p}, 1.0) == doctest::Approx(5.0));
    CHECK(p.grad.data[0] == doctest::Approx(0.6));
    CHECK(p.grad.data[1] == doctest::Approx(0.8));

    p.zero_grad();
    CHECK(clip_global_norm({&p}, 1.0) == 0.0);
    CHECK(p.grad.data[0] == 0.0);
    CHECK(clip_global_norm({}, 1.0) == 0.0);
    CHECK_THROWS_AS(clip_global_norm({&p}, 0.0), DataError);
}

TEST_CASE("rng: deterministic, splittable, roughly standard normal") {
    Rng a(123), b(123);
    for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
    Rng c = Rng(123).child(1), d = Rng(123).child(2);
    CHECK(c.normal() != d.normal());

    Rng r(9);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double v = r.normal();
        sum += v;
        sq += v * v;
    }
    CHECK(std::abs(sum / n) < 0.01);
    CHECK(std::abs(sq / n - 1.0) < 0.02);

    Rng u(4);
    for (int i = 0; i < 1000; ++i) {
        auto v = u.uniform_int(3, 7);
        CHECK(v >= 3);
        CHECK(v <= 7);
    }
}

TEST_CASE("tensor shape validation") {
    CHECK_THROWS_AS(Tensor({2, 3}, {1.0, 2.0}), DataError);
    Tensor t = Tensor::zeros({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
}
