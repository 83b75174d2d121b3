// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "qgrade/metrics.hpp"
#include "qgrade/model.hpp"
#include "qgrade/pipeline.hpp"
#include "qgrade/train.hpp"

using namespace qgrade;

TEST_CASE("a 16-item LM memorization set overfits within 200 epochs") {
    ModelConfig cfg;
    cfg.vocab_size = 48;
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 1;
    cfg.max_seq_len = 12;
    cfg.head_kind = HeadKind::lm;
    Model m = build_model(cfg, 7);

    std::vector<TrainItem> items;
    for (int i = 0; i < 16; ++i) {
        TrainItem item;
        item.ids = {5 + i, 24 + (i % 4), 28 + (i / 4), 32 + ((i * 3) % 7), Vocab::eos_id};
        item.predict_from = 1;
        items.push_back(item);
    }

    const double initial = [&] {
        double sum = 0.0;
        for (const TrainItem& item : items) {
            Graph g(false);
            Tensor h = hidden_states(g, m, item.ids);
            std::vector<int> rows, targets;
            for (std::size_t t = 1; t < item.ids.size(); ++t) {
                rows.push_back(static_cast<int>(t - 1));
                targets.push_back(item.ids[t]);
            }
            Tensor logits = matmul_nt(g, gather_rows(g, h, rows), m.head_weight);
            sum += cross_entropy(g, logits, targets).item();
        }
        return sum / items.size();
    }();
    CHECK(initial > 1.0); // roughly ln(48)

    TrainConfig tc;
    tc.epochs = 200;
    tc.early_stop_patience = 200;
    tc.learning_rate = 3e-3;
    tc.weight_decay = 0.0;
    tc.seed = 1;
    TrainReport report = train(m, items, items, Objective::lm, tc);

    double best = report.train_losses[0];
    for (double v : report.train_losses) best = std::min(best, v);
    INFO("initial " << initial << " best " << best);
    CHECK(best < 0.01 * initial);
}

TEST_CASE("memorized generator scores bleu 1.0 on its own train split") {
    // tiny corpus with a distinct prompt and feedback per example
    std::vector<GradingExample> examples;
    const char* subjects[8] = {"balak", "corak", "dexak", "fenak",
                               "gorak", "hulak", "jinak", "kalak"};
    const char* verbs[4] = {"covers", "misses", "shows", "lists"};
    for (int i = 0; i < 8; ++i) {
        GradingExample ex;
        ex.id = "m" + std::to_string(i);
        ex.question = std::string("describe ") + subjects[i];
        ex.reference_answer = std::string("the key points are ") + subjects[i];
        ex.provided_answer = std::string("it involves ") + subjects[(i + 1) % 8];
        ex.raw_score = 0.5;
        ex.score = 0.5;
        ex.feedback = std::string("the answer ") + verbs[i % 4] + " " + subjects[i / 2] + " points";
        examples.push_back(ex);
    }

    std::vector<std::string> corpus;
    for (const auto& ex : examples) {
        corpus.push_back(ex.question);
        corpus.push_back(ex.reference_answer);
        corpus.push_back(ex.provided_answer);
        corpus.push_back(ex.feedback);
    }
    for (std::string& s : prompt_support_texts()) corpus.push_back(std::move(s));
    const Vocab vocab = build_vocab(corpus, 256);

    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(vocab.size());
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 1;
    cfg.max_seq_len = 64;
    cfg.head_kind = HeadKind::lm;
    Model m = build_model(cfg, 3);

    const auto items = make_feedback_items(examples, vocab, cfg.max_seq_len,
                                           GenMode::without_grade);
    TrainConfig tc;
    tc.epochs = 150;
    tc.early_stop_patience = 150;
    tc.learning_rate = 3e-3;
    tc.weight_decay = 0.0;
    tc.seed = 2;
    train(m, items, items, Objective::lm, tc);

    DecodeConfig decode;
    decode.max_new_tokens = 12;
    decode.stop_id = Vocab::eos_id;
    std::vector<std::vector<std::string>> cands, refs;
    for (const auto& ex : examples) {
        const auto prompt = build_prompt(ex, rubric_for(ex), std::nullopt, vocab,
                                         cfg.max_seq_len - decode.max_new_tokens);
        const auto full = generate(m, prompt, decode);
        const std::vector<int> fresh(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                     full.end());
        cands.push_back(tokenize_words(detokenize(fresh, vocab)));
        refs.push_back(tokenize_words(ex.feedback));
    }
    CHECK(bleu(cands, refs) == 1.0);
}

TEST_CASE("trained scorer separates a perfect answer from an empty one") {
    SyntheticSpec spec;
    spec.n_examples = 240;
    spec.n_questions = 4;
    spec.vocab_theme_size = 40;
    spec.seed = 31;
    DatasetSplits data = gen_synthetic(spec);

    std::vector<std::string> corpus;
    for (const auto& ex : data.train) {
        corpus.push_back(ex.question);
        corpus.push_back(ex.provided_answer);
    }
    const Vocab vocab = build_vocab(corpus, 256);

    ModelConfig cfg;
    cfg.vocab_size = static_cast<int>(vocab.size());
    cfg.d_model = 32;
    cfg.n_heads = 4;
    cfg.n_layers = 1;
    cfg.max_seq_len = 48;
    cfg.head_kind = HeadKind::regression;
    Model m = build_model(cfg, 5);

    TrainConfig tc;
    tc.epochs = 12;
    tc.learning_rate = 1e-3;
    tc.weight_decay = 0.01;
    tc.seed = 5;
    train(m, make_scorer_items(data.train, vocab, cfg.max_seq_len),
          make_scorer_items(data.validation, vocab, cfg.max_seq_len), Objective::mse, tc);

    // craft a perfect and an empty answer for a training question
    GradingExample perfect = data.train[0];
    perfect.provided_answer = perfect.reference_answer;
    GradingExample empty = data.train[0];
    empty.provided_answer.clear();
    CHECK(predict_grade(m, perfect, vocab) > predict_grade(m, empty, vocab));
}
