// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "qgrade/tensor.hpp"
#include "support/test_util.hpp"

using namespace qgrade;
using test::random_tensor;

namespace {

bool throws_code(ErrorCode code, const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code() == code;
    }
    return false;
}

} // namespace

TEST_CASE("tensor_create basics") {
    Tensor identity = tensor_create({2, 2}, {1, 0, 0, 1});
    CHECK(identity.shape() == std::vector<std::size_t>{2, 2});
    CHECK(identity.at(0) == 1.0);
    CHECK(identity.at(3) == 1.0);
    CHECK_FALSE(identity.requires_grad());

    Tensor zeros = tensor_create({3}, {0, 0, 0});
    CHECK(zeros.size() == 3);

    CHECK(throws_code(ErrorCode::shape_mismatch, [] { tensor_create({2, 3}, {1, 2, 3, 4, 5}); }));
    CHECK(throws_code(ErrorCode::invalid_shape, [] { tensor_create({0}, {}); }));
    CHECK(throws_code(ErrorCode::invalid_shape,
                      [] { tensor_create({2, 2, 2, 2}, std::vector<double>(16, 0.0)); }));
}

TEST_CASE("matmul forward") {
    Graph g;
    Tensor i2 = tensor_create({2, 2}, {1, 0, 0, 1});
    Tensor m = tensor_create({2, 2}, {3.5, -1, 2, 0.25});
    Tensor prod = matmul(g, i2, m);
    CHECK(test::max_abs_diff(prod, m) == 0.0);

    Tensor a = tensor_create({2, 2}, {1, 2, 3, 4});
    Tensor b = tensor_create({2, 1}, {1, 1});
    Tensor c = matmul(g, a, b);
    CHECK(c.at(0) == 3.0);
    CHECK(c.at(1) == 7.0);

    CHECK(throws_code(ErrorCode::shape_mismatch,
                      [&] { matmul(g, a, tensor_create({3, 1}, {1, 1, 1})); }));
}

TEST_CASE("matmul gradient matches finite differences") {
    Rng rng(11);
    Tensor b = random_tensor({3, 2}, rng);
    auto f = [&](Graph& g, const Tensor& a) { return reduce_sum(g, matmul(g, a, b)); };
    Tensor point = random_tensor({2, 3}, rng);
    CHECK(grad_check(f, point, 1e-6) < 1e-6);
}

TEST_CASE("matmul associativity on random chains") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor a = random_tensor({4, 4}, rng);
        Tensor b = random_tensor({4, 4}, rng);
        Tensor c = random_tensor({4, 4}, rng);
        Graph g(false);
        Tensor left = matmul(g, matmul(g, a, b), c);
        Tensor right = matmul(g, a, matmul(g, b, c));
        CHECK(test::max_abs_diff(left, right) < 1e-9);
    }
}

TEST_CASE("elementwise forward cases") {
    Graph g;
    Tensor x = tensor_create({1}, {0.0});
    CHECK(sigmoid(g, x).item() == 0.5);

    Tensor sum = add(g, tensor_create({2}, {1, 2}), tensor_create({2}, {3, 4}));
    CHECK(sum.at(0) == 4.0);
    CHECK(sum.at(1) == 6.0);

    CHECK(throws_code(ErrorCode::shape_mismatch, [&] {
        add(g, tensor_create({2}, {1, 2}), tensor_create({3}, {1, 2, 3}));
    }));
}

TEST_CASE("multiplying by scalar zero zeroes both value and gradient") {
    Graph g;
    Tensor x = tensor_create({2}, {3, -4}, true);
    Tensor y = scale(g, x, 0.0);
    CHECK(y.at(0) == 0.0);
    CHECK(y.at(1) == 0.0);
    g.backward(reduce_sum(g, y));
    CHECK(x.grad()[0] == 0.0);
    CHECK(x.grad()[1] == 0.0);
}

TEST_CASE("gelu golden values from the documented constants") {
    Graph g;
    Tensor x = tensor_create({3}, {0.0, 1.0, -1.0});
    Tensor y = gelu(g, x);
    CHECK(y.at(0) == 0.0);
    // frozen from the tanh approximation with c0 = 0.7978845608028654,
    // c1 = 0.044715
    CHECK(y.at(1) == Catch::Approx(0.8411919906082768).epsilon(1e-12));
    CHECK(y.at(2) == Catch::Approx(-0.15880800939171588).epsilon(1e-12));
}

TEST_CASE("softmax_rows") {
    Graph g;
    Tensor flat = softmax_rows(g, tensor_create({1, 2}, {0, 0}));
    CHECK(flat.at(0) == 0.5);
    CHECK(flat.at(1) == 0.5);

    Tensor hand = softmax_rows(g, tensor_create({1, 2}, {std::log(1.0), std::log(3.0)}));
    CHECK(hand.at(0) == Catch::Approx(0.25).epsilon(1e-12));
    CHECK(hand.at(1) == Catch::Approx(0.75).epsilon(1e-12));

    Tensor big = softmax_rows(g, tensor_create({1, 2}, {1000.0, 1000.0}));
    CHECK(big.at(0) == 0.5);
    CHECK(big.at(1) == 0.5);

    CHECK(throws_code(ErrorCode::non_finite_input, [&] {
        softmax_rows(g, tensor_create({1, 2}, {std::numeric_limits<double>::infinity(), 0.0}));
    }));

    Rng rng(3);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor p = softmax_rows(g, random_tensor({4, 7}, rng, 5.0));
        for (std::size_t r = 0; r < 4; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < 7; ++c) {
                const double v = p.at(r * 7 + c);
                CHECK(v >= 0.0);
                CHECK(v <= 1.0);
                sum += v;
            }
            CHECK(sum == Catch::Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("layer_norm forward and backward") {
    Graph g;
    Tensor gain = tensor_create({2}, {1, 1});
    Tensor bias = tensor_create({2}, {0, 0});

    Tensor constant_row = layer_norm(g, tensor_create({1, 2}, {3, 3}), gain, bias, 1e-5);
    CHECK(std::abs(constant_row.at(0)) < 1e-9);
    CHECK(std::abs(constant_row.at(1)) < 1e-9);

    Tensor near = layer_norm(g, tensor_create({1, 2}, {1, 3}), gain, bias, 1e-12);
    CHECK(near.at(0) == Catch::Approx(-1.0).epsilon(1e-9));
    CHECK(near.at(1) == Catch::Approx(1.0).epsilon(1e-9));

    Rng rng(7);
    Tensor g2 = random_tensor({5}, rng);
    Tensor b2 = random_tensor({5}, rng);
    auto f = [&](Graph& gg, const Tensor& x) {
        Tensor y = layer_norm(gg, x, g2, b2, 1e-5);
        return reduce_sum(gg, mul(gg, y, y));
    };
    CHECK(grad_check(f, random_tensor({3, 5}, rng), 1e-6) < 1e-5);
}

TEST_CASE("backward basics") {
    {
        Graph g;
        Rng rng(2);
        Tensor x = random_tensor({2, 3}, rng, 1.0, true);
        g.backward(reduce_sum(g, x));
        for (double v : x.grad()) CHECK(v == 1.0);
    }
    {
        Graph g;
        Tensor x = tensor_create({2}, {1, 2}, true);
        g.backward(reduce_sum(g, mul(g, x, x)));
        CHECK(x.grad()[0] == 2.0);
        CHECK(x.grad()[1] == 4.0);
    }
    {
        // fan-out accumulates
        Graph g;
        Tensor y = tensor_create({2}, {1, 1}, true);
        g.backward(reduce_sum(g, add(g, y, y)));
        CHECK(y.grad()[0] == 2.0);
        CHECK(y.grad()[1] == 2.0);
    }
}

TEST_CASE("k-fold fan-out produces k-fold gradients") {
    for (int k = 2; k <= 5; ++k) {
        Graph g;
        Tensor x = tensor_create({3}, {0.5, -1, 2}, true);
        Tensor acc = scale(g, x, 1.0);
        for (int i = 1; i < k; ++i) acc = add(g, acc, x);
        g.backward(reduce_sum(g, acc));
        for (double v : x.grad()) CHECK(v == static_cast<double>(k));
    }
}

TEST_CASE("repeated backward accumulates") {
    Graph g;
    Tensor x = tensor_create({2}, {1, 2}, true);
    Tensor loss = reduce_sum(g, scale(g, x, 2.0));
    g.backward(loss);
    g.backward(loss);
    CHECK(x.grad()[0] == 4.0);
    CHECK(x.grad()[1] == 4.0);
}

TEST_CASE("backward error cases") {
    Graph g;
    Tensor x = tensor_create({2}, {1, 2}, true);
    Tensor y = add(g, x, x);
    CHECK(throws_code(ErrorCode::not_scalar, [&] { g.backward(y); }));
    Tensor detached = tensor_create({1}, {5}, true);
    CHECK(throws_code(ErrorCode::detached_graph, [&] { g.backward(detached); }));
}

TEST_CASE("grad_check is exact for linear functions at power-of-two steps") {
    auto f = [](Graph& g, const Tensor& x) { return reduce_sum(g, x); };
    Tensor point = tensor_create({4}, {1, 2, 3, 4});
    CHECK(grad_check(f, point, 0.0009765625) == 0.0);
}

TEST_CASE("grad_check on sum of squares") {
    Rng rng(13);
    auto f = [](Graph& g, const Tensor& x) { return reduce_sum(g, mul(g, x, x)); };
    CHECK(grad_check(f, random_tensor({6}, rng), 1e-6) < 1e-6);
}

TEST_CASE("grad_check through a single attention block") {
    Rng rng(17);
    const std::size_t t = 3, d = 4;
    Tensor wq = random_tensor({d, d}, rng, 0.5);
    Tensor wk = random_tensor({d, d}, rng, 0.5);
    Tensor wv = random_tensor({d, d}, rng, 0.5);
    auto f = [&](Graph& g, const Tensor& x) {
        Tensor qh = split_heads(g, matmul_nt(g, x, wq), 2);
        Tensor kh = split_heads(g, matmul_nt(g, x, wk), 2);
        Tensor vh = split_heads(g, matmul_nt(g, x, wv), 2);
        Tensor scores = scale(g, bmm_nt(g, qh, kh), 1.0 / std::sqrt(2.0));
        Tensor ctx = merge_heads(g, bmm(g, softmax_causal(g, scores), vh));
        return reduce_sum(g, mul(g, ctx, ctx));
    };
    CHECK(grad_check(f, random_tensor({t, d}, rng), 1e-5) < 1e-4);
}

TEST_CASE("per-op gradient checks at random points") {
    Rng rng(23);
    auto check_many = [&](const std::function<Tensor(Graph&, const Tensor&)>& f,
                          std::vector<std::size_t> shape, double bound, int points = 20) {
        for (int i = 0; i < points; ++i) {
            CHECK(grad_check(f, random_tensor(shape, rng), 1e-6) < bound);
        }
    };

    SECTION("smooth elementwise ops stay under 1e-6") {
        check_many([](Graph& g, const Tensor& x) { return reduce_sum(g, sigmoid(g, x)); }, {5}, 1e-6);
        check_many([](Graph& g, const Tensor& x) { return reduce_sum(g, gelu(g, x)); }, {5}, 1e-6);
        check_many([](Graph& g, const Tensor& x) { return reduce_sum(g, scale(g, x, 1.7)); }, {5},
                   1e-6);
    }
    SECTION("softmax and gather") {
        check_many([](Graph& g, const Tensor& x) {
            Tensor p = softmax_rows(g, x);
            return reduce_sum(g, mul(g, p, p));
        }, {3, 4}, 1e-4);
        check_many([](Graph& g, const Tensor& x) {
            Tensor picked = gather_rows(g, x, {0, 2, 2});
            return reduce_sum(g, mul(g, picked, picked));
        }, {3, 4}, 1e-6);
    }
    SECTION("batched matmuls") {
        Tensor other = random_tensor({2, 4, 3}, rng);
        check_many([&](Graph& g, const Tensor& x) {
            return reduce_sum(g, mul(g, bmm(g, x, other), bmm(g, x, other)));
        }, {2, 3, 4}, 1e-4);
        Tensor other_nt = random_tensor({2, 5, 4}, rng);
        check_many([&](Graph& g, const Tensor& x) {
            return reduce_sum(g, bmm_nt(g, x, other_nt));
        }, {2, 3, 4}, 1e-6);
    }
}

TEST_CASE("no-grad graphs record nothing") {
    Graph g(false);
    Tensor x = tensor_create({2}, {1, 2}, true);
    Tensor y = add(g, x, x);
    CHECK(g.node_count() == 0);
    CHECK_FALSE(y.requires_grad());
}
