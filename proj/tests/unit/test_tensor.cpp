#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "bonegraph/tensor.hpp"
#include "support/oracles.hpp"

using namespace bonegraph;
using testsupport::fd_check;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0, bool rg = true) {
    std::vector<double> v(static_cast<std::size_t>(shape_numel(shape)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from_values(std::move(shape), std::move(v), rg);
}

}  // namespace

TEST_CASE("square function value and gradient") {
    Tensor x = Tensor::scalar(3.0, true);
    Tensor y = mul(x, x);
    REQUIRE(y.scalar_value() == 9.0);
    y.backward();
    REQUIRE(x.grad()[0] == 6.0);
}

TEST_CASE("absolute difference value and gradient") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = Tensor::scalar(5.0, true);
    Tensor d = abs_t(sub(x, y));
    REQUIRE(d.scalar_value() == 3.0);
    d.backward();
    REQUIRE(x.grad()[0] == -1.0);
    REQUIRE(y.grad()[0] == 1.0);
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(42);
    Tensor a = random_tensor({4, 3}, rng);
    Tensor b = random_tensor({3, 2}, rng);
    std::vector<Tensor> leaves{a, b};
    auto f = [](std::vector<Tensor>& l) { return sum(matmul(l[0], l[1])); };
    REQUIRE(fd_check(f, leaves) < 1e-4);
}

TEST_CASE("matmul equals naive triple loop") {
    Rng rng(7);
    Tensor a = random_tensor({5, 4}, rng, -2.0, 2.0, false);
    Tensor b = random_tensor({4, 6}, rng, -2.0, 2.0, false);
    Tensor c = matmul(a, b);
    auto expect = testsupport::naive_matmul(a.values(), b.values(), 5, 4, 6);
    for (std::size_t i = 0; i < expect.size(); ++i)
        REQUIRE(std::fabs(c.values()[i] - expect[i]) < 1e-12);
}

TEST_CASE("elementwise primitives pass finite-difference checks") {
    Rng rng(11);
    SECTION("add/sub/mul/div with broadcasting") {
        Tensor a = random_tensor({3, 4}, rng);
        Tensor b = random_tensor({1, 4}, rng, 0.5, 2.0);  // keep divisor away from 0
        std::vector<Tensor> leaves{a, b};
        auto f = [](std::vector<Tensor>& l) {
            return sum(div(mul(add(l[0], l[1]), sub(l[0], l[1])), l[1]));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("relu and sigmoid") {
        // Offsets keep probe points away from the relu kink.
        Tensor a = random_tensor({4, 4}, rng, 0.2, 1.0);
        Tensor b = random_tensor({4, 4}, rng, -1.0, -0.2);
        std::vector<Tensor> leaves{a, b};
        auto f = [](std::vector<Tensor>& l) { return sum(add(relu(l[0]), sigmoid(l[1]))); };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("sqrt and reductions") {
        Tensor a = random_tensor({2, 3, 2, 2}, rng, 0.5, 2.0);
        std::vector<Tensor> leaves{a};
        auto f = [](std::vector<Tensor>& l) {
            return sum(sqrt_t(reduce_mean(l[0], {0, 2, 3}, true)));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("gather and scatter rows") {
        Tensor a = random_tensor({5, 3}, rng);
        std::vector<Tensor> leaves{a};
        auto f = [](std::vector<Tensor>& l) {
            Tensor g = gather_rows(l[0], {4, 0, 0, 2});
            return sum(scatter_rows(g, {1, 3, 3, 0}, 6));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("concat") {
        Tensor a = random_tensor({2, 3}, rng);
        Tensor b = random_tensor({2, 2}, rng);
        Tensor c = random_tensor({1, 5}, rng);
        std::vector<Tensor> leaves{a, b, c};
        auto f = [](std::vector<Tensor>& l) {
            return sum(mul(concat_rows({concat_cols(l[0], l[1]), l[2]}),
                           concat_rows({concat_cols(l[0], l[1]), l[2]})));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
}

TEST_CASE("conv2d and pooling pass finite-difference checks") {
    Rng rng(13);
    SECTION("3x3 stride 2") {
        Tensor x = random_tensor({2, 2, 6, 6}, rng);
        Tensor w = random_tensor({3, 2, 3, 3}, rng);
        Tensor b = random_tensor({3}, rng);
        std::vector<Tensor> leaves{x, w, b};
        auto f = [](std::vector<Tensor>& l) { return sum(conv2d(l[0], l[1], l[2], 2, 1)); };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("1x1 stride 1") {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        Tensor w = random_tensor({2, 3, 1, 1}, rng);
        std::vector<Tensor> leaves{x, w};
        auto f = [](std::vector<Tensor>& l) { return sum(conv2d(l[0], l[1], std::nullopt, 1, 0)); };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("3x3 average pool keeps constants constant") {
        Tensor x = Tensor::full({1, 1, 5, 5}, 3.25);
        Tensor y = avg_pool2d(x, 3, 1, 1);
        for (double v : y.values()) REQUIRE(v == 3.25);
    }
    SECTION("average pool gradient") {
        Tensor x = random_tensor({1, 2, 5, 5}, rng);
        std::vector<Tensor> leaves{x};
        auto f = [](std::vector<Tensor>& l) {
            return sum(avg_pool2d(avg_pool2d(l[0], 3, 1, 1), 2, 2, 0));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("gather_cells gradient") {
        Tensor x = random_tensor({2, 3, 4, 4}, rng);
        std::vector<Tensor> leaves{x};
        auto f = [](std::vector<Tensor>& l) {
            return sum(gather_cells(l[0], {{0, 1, 2}, {1, 3, 0}, {0, 1, 2}}));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
}

TEST_CASE("l1 loss") {
    SECTION("hand arithmetic") {
        Tensor p = Tensor::from_values({2}, {4.0, 6.0});
        Tensor t = Tensor::from_values({2}, {5.0, 5.0});
        REQUIRE(l1_loss(p, t).scalar_value() == 1.0);
    }
    SECTION("identity gives zero") {
        Tensor p = Tensor::from_values({3}, {1.0, -2.0, 0.5});
        REQUIRE(l1_loss(p, p).scalar_value() == 0.0);
    }
    SECTION("gradient is sign over count, checked against finite differences") {
        Rng rng(5);
        Tensor p = random_tensor({6}, rng, 1.0, 2.0);
        Tensor t = random_tensor({6}, rng, -2.0, -1.0, false);  // no ties
        std::vector<Tensor> leaves{p};
        auto f = [&t](std::vector<Tensor>& l) { return l1_loss(l[0], t); };
        REQUIRE(fd_check(f, leaves) < 1e-4);
        Tensor loss = l1_loss(p, t);
        p.zero_grad();
        loss.backward();
        for (std::size_t i = 0; i < 6; ++i) {
            const double sign = p.values()[i] > t.values()[i] ? 1.0 : -1.0;
            REQUIRE(p.grad()[i] == Catch::Approx(sign / 6.0));
        }
    }
    SECTION("shape mismatch raises an error naming the operation") {
        Tensor p = Tensor::zeros({2});
        Tensor t = Tensor::zeros({3});
        REQUIRE_THROWS_WITH(l1_loss(p, t), Catch::Matchers::ContainsSubstring("l1_loss"));
    }
}

TEST_CASE("backward error paths") {
    SECTION("non-scalar backward without seed") {
        Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
        Tensor y = mul(x, x);
        REQUIRE_THROWS_WITH(y.backward(), Catch::Matchers::ContainsSubstring("seed"));
    }
    SECTION("explicit seed works for non-scalar outputs") {
        Tensor x = Tensor::from_values({2}, {1.0, 2.0}, true);
        Tensor y = mul(x, x);
        y.backward(Tensor::from_values({2}, {1.0, 1.0}));
        REQUIRE(x.grad()[0] == 2.0);
        REQUIRE(x.grad()[1] == 4.0);
    }
    SECTION("shape mismatch names the operation") {
        Tensor a = Tensor::zeros({2, 3});
        Tensor b = Tensor::zeros({4, 3});
        REQUIRE_THROWS_WITH(matmul(a, b), Catch::Matchers::ContainsSubstring("matmul"));
        REQUIRE_THROWS_WITH(add(Tensor::zeros({2}), Tensor::zeros({3})),
                            Catch::Matchers::ContainsSubstring("add"));
    }
}

TEST_CASE("forward evaluation is deterministic") {
    auto run = [] {
        Rng rng(99);
        Tensor a = random_tensor({8, 8}, rng);
        Tensor b = random_tensor({8, 8}, rng);
        return sum(sigmoid(matmul(a, b))).scalar_value();
    };
    REQUIRE(run() == run());
}

TEST_CASE("adam optimizer") {
    SECTION("textbook first step") {
        std::vector<Tensor> params{Tensor::scalar(1.0, true).set_name("p")};
        params[0].node().ensure_grad();
        params[0].node().grad[0] = 1.0;
        AdamState st;
        adam_step(params, st);
        const double expected = 1.0 - 0.001 / (1.0 + 1e-8);
        REQUIRE(params[0].scalar_value() == Catch::Approx(expected).epsilon(1e-12));
        REQUIRE(st.t == 1);
    }
    SECTION("zero gradients leave parameters unchanged") {
        std::vector<Tensor> params{Tensor::from_values({3}, {1.0, -2.0, 0.5}, true)};
        AdamState st;
        for (int i = 0; i < 5; ++i) adam_step(params, st);
        REQUIRE(params[0].values() == std::vector<double>{1.0, -2.0, 0.5});
    }
    SECTION("100 steps shrink |x| on the square function") {
        std::vector<Tensor> params{Tensor::scalar(1.0, true)};
        AdamState st;
        st.lr = 0.05;
        for (int i = 0; i < 100; ++i) {
            params[0].zero_grad();
            Tensor loss = mul(params[0], params[0]);
            loss.backward();
            adam_step(params, st);
        }
        REQUIRE(std::fabs(params[0].scalar_value()) < 1.0);
    }
    SECTION("non-finite gradient is rejected with the parameter name") {
        std::vector<Tensor> params{Tensor::scalar(1.0, true).set_name("weights/w1")};
        params[0].node().ensure_grad();
        params[0].node().grad[0] = std::numeric_limits<double>::quiet_NaN();
        AdamState st;
        REQUIRE_THROWS_WITH(adam_step(params, st), Catch::Matchers::ContainsSubstring("weights/w1"));
    }
}

TEST_CASE("batch normalization") {
    SECTION("constant batch with identity affine gives zeros") {
        BatchNormState st(3);
        Tensor x = Tensor::full({4, 3}, 7.0);
        Tensor y = batch_norm(x, st, true);
        for (double v : y.values()) REQUIRE(std::fabs(v) < 1e-9);
    }
    SECTION("gamma 0 beta 5 overrides everything") {
        BatchNormState st(2);
        st.gamma.set_values({0.0, 0.0});
        st.beta.set_values({5.0, 5.0});
        Rng rng(3);
        Tensor x = random_tensor({6, 2}, rng, -3.0, 3.0, false);
        Tensor y = batch_norm(x, st, true);
        for (double v : y.values()) REQUIRE(v == 5.0);
    }
    SECTION("training output has mean beta and std gamma per channel") {
        BatchNormState st(4);
        st.gamma.set_values({1.5, 0.5, 2.0, 1.0});
        st.beta.set_values({-1.0, 0.0, 3.0, 0.25});
        Rng rng(17);
        Tensor x = random_tensor({64, 4}, rng, -2.0, 2.0, false);
        Tensor y = batch_norm(x, st, true);
        for (std::int64_t c = 0; c < 4; ++c) {
            double m = 0.0;
            for (std::int64_t b = 0; b < 64; ++b) m += y.at({b, c});
            m /= 64.0;
            double var = 0.0;
            for (std::int64_t b = 0; b < 64; ++b) var += (y.at({b, c}) - m) * (y.at({b, c}) - m);
            var /= 64.0;
            REQUIRE(std::fabs(m - st.beta.values()[c]) < 1e-6);
            // eps slightly shrinks the std; tolerance covers it
            REQUIRE(std::fabs(std::sqrt(var) - std::fabs(st.gamma.values()[c])) < 1e-4);
        }
    }
    SECTION("batch size 1 in training mode is an error") {
        BatchNormState st(2);
        Tensor x = Tensor::zeros({1, 2});
        REQUIRE_THROWS_WITH(batch_norm(x, st, true), Catch::Matchers::ContainsSubstring("batch size"));
    }
    SECTION("inference is invariant to shuffling and duplicating rows") {
        BatchNormState st(2);
        st.running_mean = {0.3, -0.2};
        st.running_var = {1.7, 0.9};
        Tensor x = Tensor::from_values({2, 2}, {1.0, 2.0, -1.0, 0.5});
        Tensor y = batch_norm(x, st, false);
        Tensor xs = Tensor::from_values({3, 2}, {-1.0, 0.5, 1.0, 2.0, 1.0, 2.0});
        Tensor ys = batch_norm(xs, st, false);
        REQUIRE(ys.at({1, 0}) == y.at({0, 0}));
        REQUIRE(ys.at({1, 1}) == y.at({0, 1}));
        REQUIRE(ys.at({2, 0}) == y.at({0, 0}));
        REQUIRE(ys.at({0, 1}) == y.at({1, 1}));
    }
    SECTION("training gradients match finite differences") {
        Rng rng(23);
        Tensor x = random_tensor({5, 3}, rng);
        Tensor g = random_tensor({3}, rng, 0.5, 1.5);
        Tensor b = random_tensor({3}, rng);
        std::vector<Tensor> leaves{x, g, b};
        auto f = [](std::vector<Tensor>& l) {
            BatchNormState st(3);
            st.gamma = l[1];
            st.beta = l[2];
            return sum(mul(batch_norm(l[0], st, true), batch_norm(l[0], st, true)));
        };
        REQUIRE(fd_check(f, leaves) < 1e-4);
    }
    SECTION("4-D input normalizes over batch and spatial dims") {
        BatchNormState st(2);
        Rng rng(29);
        Tensor x = random_tensor({3, 2, 4, 4}, rng, -1.0, 1.0, false);
        Tensor y = batch_norm(x, st, true);
        for (std::int64_t c = 0; c < 2; ++c) {
            double m = 0.0;
            for (std::int64_t b = 0; b < 3; ++b)
                for (std::int64_t i = 0; i < 4; ++i)
                    for (std::int64_t j = 0; j < 4; ++j) m += y.at({b, c, i, j});
            m /= 48.0;
            REQUIRE(std::fabs(m) < 1e-9);
        }
    }
}

TEST_CASE("gradients helper returns exact leaf gradients") {
    Tensor x = Tensor::scalar(2.0, true);
    Tensor y = Tensor::scalar(5.0, true);
    Tensor z = Tensor::scalar(1.0);  // constant leaf
    Tensor out = add(mul(x, y), z);
    auto grads = gradients(out, {x, y, z});
    REQUIRE(grads[0].scalar_value() == 5.0);
    REQUIRE(grads[1].scalar_value() == 2.0);
    REQUIRE(grads[2].scalar_value() == 0.0);
}
