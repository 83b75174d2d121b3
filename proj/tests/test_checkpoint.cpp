// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "qgrade/checkpoint.hpp"

using namespace qgrade;

namespace {

Vocab tiny_vocab() {
    const std::vector<std::string> corpus = {"alpha beta gamma delta one two three"};
    return build_vocab(corpus, 64);
}

ModelConfig ckpt_config(bool quantized, TuneMode tune) {
    ModelConfig cfg;
    cfg.vocab_size = 12;
    cfg.d_model = 8;
    cfg.n_heads = 2;
    cfg.n_layers = 2;
    cfg.max_seq_len = 16;
    cfg.head_kind = HeadKind::regression;
    cfg.quantize_base = quantized;
    cfg.tune = tune;
    cfg.lora_rank = 2;
    cfg.quant_block_size = 8;
    return cfg;
}

} // namespace

TEST_CASE("checkpoint round trip is byte-identical") {
    for (auto [quantized, tune] : {std::pair{false, TuneMode::full},
                                   {true, TuneMode::lora},
                                   {false, TuneMode::lora},
                                   {true, TuneMode::heads}}) {
        Model m = build_model(ckpt_config(quantized, tune), 17);
        Vocab vocab = tiny_vocab();
        CheckpointMeta meta;
        meta.seed = 17;
        meta.best_epoch = 3;
        meta.config_hash = fnv1a_hash("unit");
        const std::string bytes = serialize_checkpoint(m, vocab, meta);

        Checkpoint loaded = parse_checkpoint(bytes);
        CHECK(loaded.meta.seed == 17);
        CHECK(loaded.meta.best_epoch == 3);
        CHECK(loaded.vocab == vocab);
        const std::string again =
            serialize_checkpoint(loaded.model, loaded.vocab, loaded.meta);
        CHECK(again == bytes);
    }
}

TEST_CASE("loaded model reproduces forward outputs") {
    Model m = build_model(ckpt_config(true, TuneMode::lora), 23);
    // perturb adapters and head so the state is not the fresh init
    for (auto& b : m.blocks) {
        LoraAdapter* ad = b.wq.adapter_ptr();
        REQUIRE(ad != nullptr);
        for (std::size_t i = 0; i < ad->b.size(); ++i) ad->b.data()[i] = 0.01 * double(i + 1);
    }
    for (std::size_t i = 0; i < m.head_weight.size(); ++i) m.head_weight.data()[i] = 0.1;

    Vocab vocab = tiny_vocab();
    const std::string bytes = serialize_checkpoint(m, vocab, CheckpointMeta{});
    Checkpoint loaded = parse_checkpoint(bytes);

    const std::vector<int> ids = {5, 7, 9, 11};
    CHECK(forward_score(loaded.model, ids) == forward_score(m, ids));
}

TEST_CASE("checkpoint header validation") {
    Model m = build_model(ckpt_config(false, TuneMode::full), 1);
    Vocab vocab = tiny_vocab();
    std::string bytes = serialize_checkpoint(m, vocab, CheckpointMeta{});

    SECTION("bad magic") {
        std::string corrupt = bytes;
        corrupt[0] = 'X';
        CHECK_THROWS_AS(parse_checkpoint(corrupt), Error);
    }
    SECTION("bad version") {
        std::string corrupt = bytes;
        corrupt[5] = 9;
        CHECK_THROWS_AS(parse_checkpoint(corrupt), Error);
    }
    SECTION("truncation") {
        CHECK_THROWS_AS(parse_checkpoint(std::string_view(bytes).substr(0, bytes.size() / 2)),
                        Error);
    }
}

TEST_CASE("checkpoint files save and load through disk") {
    const std::string path = "ckpt_unit_test.bin";
    Model m = build_model(ckpt_config(true, TuneMode::lora), 5);
    Vocab vocab = tiny_vocab();
    CheckpointMeta meta;
    meta.seed = 5;
    save_checkpoint(path, m, vocab, meta);
    Checkpoint loaded = load_checkpoint(path);
    save_checkpoint(path + ".resave", loaded.model, loaded.vocab, loaded.meta);
    CHECK(read_file(path) == read_file(path + ".resave"));
    std::remove(path.c_str());
    std::remove((path + ".resave").c_str());
}
