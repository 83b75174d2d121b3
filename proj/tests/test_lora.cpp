// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "qgrade/lora.hpp"
#include "qgrade/model.hpp"
#include "qgrade/train.hpp"
#include "support/test_util.hpp"

using namespace qgrade;
using test::max_abs_diff;
using test::random_tensor;

TEST_CASE("lora_init contract") {
    LoraAdapter a1 = lora_init(8, 6, 2, 16.0, 42);
    LoraAdapter a2 = lora_init(8, 6, 2, 16.0, 42);
    CHECK(a1.a.values().size() == 16);
    CHECK(std::equal(a1.a.values().begin(), a1.a.values().end(), a2.a.values().begin()));
    for (double v : a1.b.values()) CHECK(v == 0.0);
    CHECK(a1.a.requires_grad());
    CHECK(a1.b.requires_grad());

    CHECK_THROWS_AS(lora_init(4, 4, 5, 16.0, 0), Error);
    CHECK_THROWS_AS(lora_init(4, 4, 0, 16.0, 0), Error);
    CHECK_THROWS_AS(lora_init(4, 4, 2, 0.0, 0), Error);
}

TEST_CASE("fresh adapter leaves the layer exactly at the base") {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor w = random_tensor({6, 4}, rng);
        LoraAdapter ad = lora_init(4, 6, 2, 16.0, static_cast<std::uint64_t>(trial));
        Tensor merged = lora_merge(w, ad);
        CHECK(max_abs_diff(merged, w) == 0.0);
    }
}

TEST_CASE("lora_merge hand example") {
    Tensor w0 = tensor_create({2, 2}, {1, 0, 0, 1});
    LoraAdapter ad = lora_init(2, 2, 1, 1.0, 0);
    ad.a = tensor_create({1, 2}, {1, 0}, true);
    ad.b = tensor_create({2, 1}, {1, 0}, true);
    Tensor merged = lora_merge(w0, ad);
    CHECK(merged.at(0) == 2.0);
    CHECK(merged.at(1) == 0.0);
    CHECK(merged.at(2) == 0.0);
    CHECK(merged.at(3) == 1.0);
    // inputs untouched
    CHECK(w0.at(0) == 1.0);
}

TEST_CASE("merged forward equals adapter forward") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
        Tensor w = random_tensor({5, 7}, rng);
        LoraAdapter ad = lora_init(7, 5, 3, 8.0, static_cast<std::uint64_t>(trial));
        // give B nonzero values so the delta participates
        for (std::size_t i = 0; i < ad.b.size(); ++i) ad.b.data()[i] = 0.1 * rng.gaussian();

        Tensor x = random_tensor({2, 7}, rng);
        Graph g(false);
        Tensor unmerged = add(g, matmul_nt(g, x, w), lora_delta(g, ad, x));
        Tensor merged = matmul_nt(g, x, lora_merge(w, ad));
        CHECK(max_abs_diff(unmerged, merged) < 1e-12);
    }
}

TEST_CASE("alpha is exactly linear in the delta") {
    Rng rng(21);
    Tensor x = random_tensor({3, 6}, rng);
    LoraAdapter ad = lora_init(6, 4, 2, 8.0, 3);
    for (std::size_t i = 0; i < ad.b.size(); ++i) ad.b.data()[i] = rng.gaussian();
    Graph g(false);
    Tensor once = lora_delta(g, ad, x);
    LoraAdapter doubled = ad;
    doubled.alpha = 16.0;
    Tensor twice = lora_delta(g, doubled, x);
    for (std::size_t i = 0; i < once.size(); ++i) {
        CHECK(twice.at(i) == 2.0 * once.at(i));
    }
}

TEST_CASE("qlora_forward basics") {
    Rng rng(33);
    Tensor w = random_tensor({4, 6}, rng);
    Tensor bias = tensor_create({4}, {0.5, -0.5, 1.0, 0.0});
    QLoraLinear layer = QLoraLinear::wrap(w, 4, 3, lora_init(6, 4, 2, 16.0, 1), bias);

    SECTION("zero input yields the bias") {
        Graph g(false);
        Tensor y = qlora_forward(g, layer, tensor_create({6}, {0, 0, 0, 0, 0, 0}));
        REQUIRE(y.shape() == std::vector<std::size_t>{4});
        for (std::size_t i = 0; i < 4; ++i) CHECK(y.at(i) == bias.at(i));
    }

    SECTION("fresh adapter equals the dequantized base exactly") {
        Tensor x = random_tensor({2, 6}, rng);
        Graph g(false);
        Tensor with_adapter = qlora_forward(g, layer, x);
        QLoraLinear bare = layer;
        bare.adapter.reset();
        Tensor without_adapter = qlora_forward(g, bare, x);
        CHECK(max_abs_diff(with_adapter, without_adapter) == 0.0);
    }

    SECTION("shape errors") {
        Graph g(false);
        CHECK_THROWS_AS(qlora_forward(g, layer, tensor_create({5}, {1, 2, 3, 4, 5})), Error);
    }
}

TEST_CASE("merged vs unmerged agreement through a quantized base") {
    Rng rng(55);
    Tensor w = random_tensor({6, 6}, rng);
    LoraAdapter ad = lora_init(6, 6, 2, 16.0, 4);
    for (std::size_t i = 0; i < ad.b.size(); ++i) ad.b.data()[i] = 0.05 * rng.gaussian();
    QLoraLinear layer = QLoraLinear::wrap(w, 4, 16, ad);

    Tensor x = random_tensor({3, 6}, rng);
    Graph g(false);
    Tensor via_layer = qlora_forward(g, layer, x);
    Tensor via_merge = matmul_nt(g, x, lora_merge(layer.base_dequantized, ad));
    CHECK(max_abs_diff(via_layer, via_merge) < 1e-10);
}

TEST_CASE("one training step never touches base codes") {
    ModelConfig cfg;
    cfg.vocab_size = 24;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.max_seq_len = 16;
    cfg.head_kind = HeadKind::regression;
    cfg.quantize_base = true;
    cfg.tune = TuneMode::lora;
    Model m = build_model(cfg, 3);

    auto snapshot_codes = [&] {
        std::vector<std::vector<std::int8_t>> codes;
        std::vector<std::vector<double>> scales;
        for (auto& b : m.blocks) {
            for (Linear* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) {
                codes.push_back(lin->quantized->base.codes);
                scales.push_back(lin->quantized->base.scales);
            }
        }
        return std::make_pair(codes, scales);
    };
    auto before = snapshot_codes();

    std::vector<TrainItem> items;
    for (int i = 0; i < 4; ++i) {
        TrainItem item;
        item.ids = {5, 6, 7, static_cast<int>(8 + i)};
        item.target = 0.25 * i;
        items.push_back(item);
    }
    TrainConfig tc;
    tc.epochs = 1;
    tc.learning_rate = 1e-2;
    train(m, items, items, Objective::mse, tc);

    auto after = snapshot_codes();
    CHECK(before == after);
}

TEST_CASE("trainable fraction arithmetic") {
    CHECK(trainable_fraction(39, 1000) == 0.039);
    CHECK(trainable_fraction(0, 500) == 0.0);

    ModelConfig cfg; // desk default: regression head, d64 x 4h x 2L
    cfg.quantize_base = true;
    cfg.tune = TuneMode::lora;
    Model m = build_model(cfg, 1);
    const double fraction = trainable_fraction(m);
    INFO("desk-scale default trainable fraction: " << fraction);
    CHECK(fraction >= 0.005);
    CHECK(fraction <= 0.15);

    ModelConfig frozen = cfg;
    frozen.tune = TuneMode::heads;
    Model mh = build_model(frozen, 1);
    CHECK(trainable_fraction(mh) > 0.0); // heads and norms and embeddings train
}
