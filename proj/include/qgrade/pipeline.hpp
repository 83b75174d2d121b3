// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "qgrade/data.hpp"
#include "qgrade/error.hpp"
#include "qgrade/metrics.hpp"
#include "qgrade/model.hpp"
#include "qgrade/train.hpp"

namespace qgrade {

struct Rubric {
    std::string text;
};

enum class GenMode : std::uint8_t { with_grade, without_grade };

inline const char* gen_mode_name(GenMode m) {
    return m == GenMode::with_grade ? "with_grade" : "without_grade";
}

/// The synthetic reference answer doubles as the grading rubric text.
inline Rubric rubric_for(const GradingExample& ex) { return Rubric{ex.reference_answer}; }

/// Grades rendered into prompts use two decimals so the numeric tokens stay
/// stable under the word-level tokenizer.
inline std::string format_grade(double grade) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%.2f", grade);
    return buf;
}

/// Scorer input: question <sep> provided_answer, front-truncated so the tail
/// of the answer survives.
inline std::vector<int> scorer_input(const GradingExample& ex, const Vocab& vocab, int max_len) {
    std::vector<int> ids = tokenize(ex.question, vocab);
    ids.push_back(Vocab::sep_id);
    for (int id : tokenize(ex.provided_answer, vocab)) ids.push_back(id);
    if (ids.size() > static_cast<std::size_t>(max_len)) {
        ids.erase(ids.begin(),
                  ids.begin() + static_cast<std::ptrdiff_t>(ids.size() - static_cast<std::size_t>(max_len)));
    }
    return ids;
}

inline double predict_grade(const Model& scorer, const GradingExample& ex, const Vocab& vocab) {
    require(scorer.config.head_kind == HeadKind::regression, ErrorCode::wrong_head,
            "grade prediction needs a regression head");
    return forward_score(scorer, scorer_input(ex, vocab, scorer.config.max_seq_len));
}

/// Deterministic prompt: `question: {q} <sep> answer: {a} <sep> rubric: {r}
/// <sep> grade: {g:.2f} <sep> feedback:`; absent segments are omitted
/// entirely. Front-truncation keeps the trailing feedback cue.
inline std::vector<int> build_prompt(const GradingExample& ex, const std::optional<Rubric>& rubric,
                                     std::optional<double> grade, const Vocab& vocab, int max_len) {
    if (grade) {
        require(*grade >= 0.0 && *grade <= 1.0, ErrorCode::invalid_grade,
                "grade must lie in [0, 1]");
    }
    if (rubric) {
        require(!rubric->text.empty(), ErrorCode::invalid_spec, "supplied rubric must be nonempty");
    }
    std::vector<int> ids;
    auto append_text = [&](const std::string& text) {
        for (int id : tokenize(text, vocab)) ids.push_back(id);
    };
    append_text("question : " + ex.question);
    ids.push_back(Vocab::sep_id);
    append_text("answer : " + ex.provided_answer);
    ids.push_back(Vocab::sep_id);
    if (rubric) {
        append_text("rubric : " + rubric->text);
        ids.push_back(Vocab::sep_id);
    }
    if (grade) {
        append_text("grade : " + format_grade(*grade));
        ids.push_back(Vocab::sep_id);
    }
    append_text("feedback :");
    if (ids.size() > static_cast<std::size_t>(max_len)) {
        ids.erase(ids.begin(),
                  ids.begin() + static_cast<std::ptrdiff_t>(ids.size() - static_cast<std::size_t>(max_len)));
    }
    return ids;
}

struct PipelineOutput {
    double predicted_score = 0.0;
    std::string feedback_text;
    std::vector<int> prompt_used;
    GenMode generator_mode = GenMode::with_grade;
};

/// Fig-style two-stage run: score first, then condition the generator on the
/// *predicted* grade (never the ground truth) when mode is with_grade.
inline PipelineOutput grade_and_feedback(const Model& scorer, const Model& generator,
                                         const GradingExample& ex,
                                         const std::optional<Rubric>& rubric, GenMode mode,
                                         const DecodeConfig& decode, const Vocab& vocab) {
    require(generator.config.head_kind == HeadKind::lm, ErrorCode::wrong_head,
            "feedback generation needs an LM head");
    PipelineOutput out;
    out.generator_mode = mode;
    out.predicted_score = predict_grade(scorer, ex, vocab);
    const std::optional<double> injected =
        mode == GenMode::with_grade ? std::optional<double>(out.predicted_score) : std::nullopt;
    const int budget = std::max(1, decode.max_new_tokens);
    out.prompt_used =
        build_prompt(ex, rubric, injected, vocab, generator.config.max_seq_len - budget);
    std::vector<int> full = generate(generator, out.prompt_used, decode);
    std::vector<int> new_ids(full.begin() + static_cast<std::ptrdiff_t>(out.prompt_used.size()),
                             full.end());
    out.feedback_text = detokenize(new_ids, vocab);
    return out;
}

// ---------------------------------------------------------------------------
// training-item assembly
// ---------------------------------------------------------------------------

inline std::vector<TrainItem> make_scorer_items(std::span<const GradingExample> examples,
                                                const Vocab& vocab, int max_len) {
    std::vector<TrainItem> items;
    items.reserve(examples.size());
    for (const GradingExample& ex : examples) {
        TrainItem item;
        item.ids = scorer_input(ex, vocab, max_len);
        item.target = ex.score;
        items.push_back(std::move(item));
    }
    return items;
}

/// Teacher-forced generator items: prompt (gold grade when conditioning) then
/// feedback tokens and <eos>; only the feedback span is scored.
inline std::vector<TrainItem> make_feedback_items(std::span<const GradingExample> examples,
                                                  const Vocab& vocab, int max_len, GenMode mode,
                                                  bool use_rubric = true) {
    std::vector<TrainItem> items;
    items.reserve(examples.size());
    for (const GradingExample& ex : examples) {
        std::vector<int> completion = tokenize(ex.feedback, vocab);
        completion.push_back(Vocab::eos_id);
        const int prompt_budget = std::max(2, max_len - static_cast<int>(completion.size()));
        const std::optional<Rubric> rubric =
            use_rubric ? std::optional<Rubric>(rubric_for(ex)) : std::nullopt;
        const std::optional<double> grade =
            mode == GenMode::with_grade ? std::optional<double>(ex.score) : std::nullopt;
        TrainItem item;
        item.ids = build_prompt(ex, rubric, grade, vocab, prompt_budget);
        item.predict_from = static_cast<int>(item.ids.size());
        for (int id : completion) item.ids.push_back(id);
        items.push_back(std::move(item));
    }
    return items;
}

/// Corpus texts that prompts can introduce beyond the dataset fields: the
/// template words and the two-decimal grade token set.
inline std::vector<std::string> prompt_support_texts() {
    std::vector<std::string> texts = {"question : answer : rubric : grade : feedback :"};
    std::string digits;
    for (int i = 0; i < 100; ++i) {
        char buf[8];
        std::snprintf(buf, sizeof(buf), "%02d", i);
        digits += buf;
        digits += ' ';
    }
    digits += "0 1";
    texts.push_back(digits);
    return texts;
}

// ---------------------------------------------------------------------------
// grade-conditioning experiment
// ---------------------------------------------------------------------------

struct ExperimentRun {
    std::uint64_t seed = 0;
    GenMode mode = GenMode::with_grade;
    std::vector<double> val_losses;
    MetricsReport metrics;
};

struct ExperimentReport {
    std::vector<ExperimentRun> runs;

    double median_final_val_loss(GenMode mode) const {
        std::vector<double> finals;
        for (const ExperimentRun& r : runs) {
            if (r.mode == mode && !r.val_losses.empty()) finals.push_back(r.val_losses.back());
        }
        require(!finals.empty(), ErrorCode::empty_input, "no runs for mode");
        std::sort(finals.begin(), finals.end());
        return finals[finals.size() / 2];
    }

    double median_metric(GenMode mode,
                         const std::function<std::optional<double>(const MetricsReport&)>& pick) const {
        std::vector<double> values;
        for (const ExperimentRun& r : runs) {
            if (r.mode != mode) continue;
            if (auto v = pick(r.metrics)) values.push_back(*v);
        }
        require(!values.empty(), ErrorCode::empty_input, "no metric values for mode");
        std::sort(values.begin(), values.end());
        return values[values.size() / 2];
    }

    /// Blocks of `# seed=<s> mode=<m>`, per-epoch val-loss lines, then the
    /// metrics section.
    void write(std::ostream& out) const {
        for (const ExperimentRun& r : runs) {
            out << "# seed=" << r.seed << " mode=" << gen_mode_name(r.mode) << '\n';
            for (std::size_t e = 0; e < r.val_losses.size(); ++e) {
                out << (e + 1) << '\t' << format_double(r.val_losses[e]) << '\n';
            }
            out << "metrics\n" << r.metrics.serialize();
        }
    }
};

struct ExperimentOptions {
    std::string eval_split = "test_ua";
    int max_new_tokens = 24;
    bool use_rubric = true;
};

/// For each seed, trains a scorer plus one grade-conditioned and one
/// unconditioned generator on matched configs. Conditioning uses gold grades
/// at train time and the seed's scorer predictions at eval time.
inline ExperimentReport conditioning_experiment(const DatasetSplits& data,
                                                const ModelConfig& generator_config,
                                                const TrainConfig& train_config,
                                                std::span<const std::uint64_t> seeds,
                                                const Vocab& vocab,
                                                const ExperimentOptions& options = {}) {
    require(!seeds.empty(), ErrorCode::invalid_spec, "need at least one seed");
    require(generator_config.head_kind == HeadKind::lm, ErrorCode::invalid_config,
            "experiment model config must have an LM head");

    const std::vector<GradingExample>& eval_set = split_by_name(data, options.eval_split);
    require(!eval_set.empty(), ErrorCode::empty_dataset, "experiment eval split is empty");

    ModelConfig scorer_config = generator_config;
    scorer_config.head_kind = HeadKind::regression;

    ExperimentReport report;
    for (std::uint64_t seed : seeds) {
        // per-seed scorer supplies the eval-time predicted grades
        Model scorer = build_model(scorer_config, seed);
        {
            TrainConfig scorer_tc = TrainConfig::preset_scorer();
            scorer_tc.seed = seed;
            scorer_tc.max_seq_len = train_config.max_seq_len;
            scorer_tc.epochs = std::min(scorer_tc.epochs, train_config.epochs);
            train(scorer, make_scorer_items(data.train, vocab, scorer_config.max_seq_len),
                  make_scorer_items(data.validation, vocab, scorer_config.max_seq_len),
                  Objective::mse, scorer_tc);
        }

        for (GenMode mode : {GenMode::with_grade, GenMode::without_grade}) {
            Model generator = build_model(generator_config, seed);
            TrainConfig tc = train_config;
            tc.seed = seed;
            TrainReport tr =
                train(generator,
                      make_feedback_items(data.train, vocab, generator_config.max_seq_len, mode,
                                          options.use_rubric),
                      make_feedback_items(data.validation, vocab, generator_config.max_seq_len,
                                          mode, options.use_rubric),
                      Objective::lm, tc);

            ExperimentRun run;
            run.seed = seed;
            run.mode = mode;
            run.val_losses = tr.val_losses;

            DecodeConfig decode;
            decode.max_new_tokens = options.max_new_tokens;
            decode.stop_id = Vocab::eos_id;
            std::vector<std::vector<std::string>> cands, refs;
            std::vector<double> preds, targets;
            double rouge1_sum = 0.0, rouge2_sum = 0.0;
            const std::optional<Rubric> no_rubric;
            for (const GradingExample& ex : eval_set) {
                PipelineOutput out = grade_and_feedback(
                    scorer, generator, ex,
                    options.use_rubric ? std::optional<Rubric>(rubric_for(ex)) : no_rubric, mode,
                    decode, vocab);
                cands.push_back(tokenize_words(out.feedback_text));
                refs.push_back(tokenize_words(ex.feedback));
                preds.push_back(out.predicted_score);
                targets.push_back(ex.score);
                rouge1_sum += rouge_n(cands.back(), refs.back(), 1).f1;
                rouge2_sum += rouge_n(cands.back(), refs.back(), 2).f1;
            }
            run.metrics.set_scores(score_metrics(preds, targets));
            run.metrics.bleu = bleu(cands, refs);
            run.metrics.rouge1_f = rouge1_sum / static_cast<double>(eval_set.size());
            run.metrics.rouge2_f = rouge2_sum / static_cast<double>(eval_set.size());
            run.metrics.n_examples = eval_set.size();
            report.runs.push_back(std::move(run));
        }
    }
    return report;
}

} // namespace qgrade
