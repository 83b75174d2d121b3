// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "qgrade/checkpoint.hpp"
#include "qgrade/data.hpp"
#include "qgrade/error.hpp"
#include "qgrade/io.hpp"
#include "qgrade/metrics.hpp"
#include "qgrade/model.hpp"
#include "qgrade/pipeline.hpp"
#include "qgrade/train.hpp"

namespace qgrade::cli {

// exit codes shared by every subcommand: 0 ok, 2 usage/validation, 1 runtime
inline int classify_error(const Error& e) {
    switch (e.code()) {
        case ErrorCode::invalid_spec:
        case ErrorCode::invalid_config:
        case ErrorCode::invalid_grade:
        case ErrorCode::invalid_rank:
        case ErrorCode::invalid_alpha:
        case ErrorCode::invalid_block_size:
        case ErrorCode::incompatible_checkpoint:
        case ErrorCode::incompatible_objective:
        case ErrorCode::wrong_head:
            return 2;
        default:
            return 1;
    }
}

inline int max_eval_threads() {
    if (const char* env = std::getenv("QGRADE_THREADS")) {
        const int v = std::atoi(env);
        if (v >= 1) return v;
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

/// Static index partition over worker threads; results must be written to
/// per-index slots so the output order stays deterministic.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const int threads = std::min<int>(max_eval_threads(), static_cast<int>(n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    for (int t = 0; t < threads; ++t) {
        pool.emplace_back([&fn, t, threads, n] {
            for (std::size_t i = static_cast<std::size_t>(t); i < n;
                 i += static_cast<std::size_t>(threads)) {
                fn(i);
            }
        });
    }
    for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// flag bundles
// ---------------------------------------------------------------------------

struct ModelFlags {
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int max_seq_len = 512;
    int vocab_max = 512;
    int n_classes = 11;
    bool quantize_base = false;
    std::string tune = "full";
    int lora_rank = 8;
    double lora_alpha = 16.0;
    int quant_bits = 4;
    int quant_block_size = 64;

    ModelConfig to_config(HeadKind head, int vocab_size) const {
        ModelConfig c;
        c.vocab_size = vocab_size;
        c.d_model = d_model;
        c.n_heads = n_heads;
        c.n_layers = n_layers;
        c.max_seq_len = max_seq_len;
        c.head_kind = head;
        c.n_classes = n_classes;
        c.quantize_base = quantize_base;
        if (tune == "lora") {
            c.tune = TuneMode::lora;
        } else if (tune == "heads") {
            c.tune = TuneMode::heads;
        } else if (tune == "full") {
            c.tune = TuneMode::full;
        } else {
            fail(ErrorCode::invalid_config, "unknown tune mode '" + tune + "'");
        }
        c.lora_rank = lora_rank;
        c.lora_alpha = lora_alpha;
        c.quant_bits = quant_bits;
        c.quant_block_size = quant_block_size;
        c.validate();
        return c;
    }
};

struct TrainFlags {
    std::string preset = "scorer";
    std::optional<int> batch_size;
    std::optional<double> learning_rate;
    std::optional<double> weight_decay;
    std::optional<int> epochs;
    std::optional<int> patience;
    std::optional<double> grad_clip;

    TrainConfig to_config(std::uint64_t seed, int max_seq_len) const {
        TrainConfig c;
        if (preset == "scorer") {
            c = TrainConfig::preset_scorer();
        } else if (preset == "feedback") {
            c = TrainConfig::preset_feedback();
        } else {
            fail(ErrorCode::invalid_config, "unknown preset '" + preset + "'");
        }
        if (batch_size) c.batch_size = *batch_size;
        if (learning_rate) c.learning_rate = *learning_rate;
        if (weight_decay) c.weight_decay = *weight_decay;
        if (epochs) c.epochs = *epochs;
        if (patience) c.early_stop_patience = *patience;
        c.grad_clip_norm = grad_clip;
        c.seed = seed;
        c.max_seq_len = max_seq_len;
        c.validate();
        return c;
    }
};

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

struct GenDataArgs {
    std::uint64_t seed = 7;
    int examples = 2000;
    int questions = 24;
    int theme_size = 150;
    std::string out;
};

inline void cmd_gen_data(const GenDataArgs& args, std::ostream& log = std::cout) {
    SyntheticSpec spec;
    spec.seed = args.seed;
    spec.n_examples = args.examples;
    spec.n_questions = args.questions;
    spec.vocab_theme_size = args.theme_size;
    DatasetSplits splits = gen_synthetic(spec);
    save_dataset(splits, args.out);
    log << "wrote " << args.out << "\n"
        << "train\t" << splits.train.size() << "\nval\t" << splits.validation.size() << "\ntest_ua\t"
        << splits.test_unseen_answers.size() << "\ntest_uq\t" << splits.test_unseen_questions.size()
        << "\n";
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
    std::string task = "scorer"; // scorer | feedback
    std::string data;
    std::string out;
    std::string log_path; // defaults to out + ".log"
    std::uint64_t seed = 1;
    std::string gen_mode = "with_grade"; // feedback task conditioning
    ModelFlags model;
    TrainFlags training;
};

namespace detail {

inline Vocab vocab_for_dataset(const DatasetSplits& data, int vocab_max) {
    std::vector<std::string> corpus;
    for (const GradingExample& ex : data.train) {
        corpus.push_back(ex.question);
        corpus.push_back(ex.reference_answer);
        corpus.push_back(ex.provided_answer);
        corpus.push_back(ex.feedback);
    }
    for (std::string& s : prompt_support_texts()) corpus.push_back(std::move(s));
    return build_vocab(corpus, static_cast<std::size_t>(vocab_max));
}

inline GenMode parse_gen_mode(const std::string& name) {
    if (name == "with_grade") return GenMode::with_grade;
    if (name == "without_grade") return GenMode::without_grade;
    fail(ErrorCode::invalid_config, "unknown mode '" + name + "'");
}

inline std::uint64_t hash_train_args(const TrainArgs& args, const TrainConfig& tc,
                                     const ModelConfig& mc) {
    std::ostringstream s;
    s << "task=" << args.task << " gen_mode=" << args.gen_mode << " seed=" << args.seed
      << " d_model=" << mc.d_model << " n_heads=" << mc.n_heads << " n_layers=" << mc.n_layers
      << " max_seq_len=" << mc.max_seq_len << " vocab=" << mc.vocab_size
      << " quantize=" << mc.quantize_base << " tune=" << static_cast<int>(mc.tune)
      << " rank=" << mc.lora_rank << " alpha=" << mc.lora_alpha << " bits=" << mc.quant_bits
      << " block=" << mc.quant_block_size << " bs=" << tc.batch_size << " lr=" << tc.learning_rate
      << " wd=" << tc.weight_decay << " epochs=" << tc.epochs
      << " patience=" << tc.early_stop_patience;
    return fnv1a_hash(s.str());
}

} // namespace detail

inline TrainReport cmd_train(const TrainArgs& args, std::ostream& log = std::cout) {
    require(args.task == "scorer" || args.task == "feedback", ErrorCode::invalid_config,
            "task must be scorer or feedback");
    DatasetSplits data = load_dataset(args.data);
    require(!data.train.empty() && !data.validation.empty(), ErrorCode::empty_dataset,
            "dataset needs nonempty train and val splits");

    const Vocab vocab = detail::vocab_for_dataset(data, args.model.vocab_max);
    const HeadKind head = args.task == "scorer" ? HeadKind::regression : HeadKind::lm;
    const ModelConfig mc = args.model.to_config(head, static_cast<int>(vocab.size()));
    const TrainConfig tc = args.training.to_config(args.seed, mc.max_seq_len);

    std::vector<TrainItem> train_items, val_items;
    Objective objective;
    if (args.task == "scorer") {
        objective = Objective::mse;
        train_items = make_scorer_items(data.train, vocab, mc.max_seq_len);
        val_items = make_scorer_items(data.validation, vocab, mc.max_seq_len);
    } else {
        objective = Objective::lm;
        const GenMode mode = detail::parse_gen_mode(args.gen_mode);
        train_items = make_feedback_items(data.train, vocab, mc.max_seq_len, mode);
        val_items = make_feedback_items(data.validation, vocab, mc.max_seq_len, mode);
    }

    Model model = build_model(mc, args.seed);
    TrainReport report = train(model, train_items, val_items, objective, tc);

    CheckpointMeta meta;
    meta.seed = args.seed;
    meta.best_epoch = static_cast<std::uint32_t>(report.best_epoch);
    meta.config_hash = detail::hash_train_args(args, tc, mc);
    meta.generator_mode =
        args.task == "feedback" ? detail::parse_gen_mode(args.gen_mode) : GenMode::without_grade;
    save_checkpoint(args.out, model, vocab, meta);

    const std::string log_path = args.log_path.empty() ? args.out + ".log" : args.log_path;
    {
        std::ostringstream body;
        report.write_log(body);
        write_file_atomic(log_path, body.str());
    }

    log << "checkpoint\t" << args.out << "\nepochs_run\t" << report.val_losses.size()
        << "\nbest_epoch\t" << report.best_epoch << "\nbest_val_loss\t"
        << format_double(report.val_losses[static_cast<std::size_t>(report.best_epoch - 1)])
        << "\nstopped_early\t" << (report.stopped_early ? "true" : "false")
        << "\ntrainable_fraction\t" << format_double(report.trainable_fraction) << "\n";
    return report;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::string task = "scorer";
    std::string ckpt;
    std::string data;
    std::string split = "val";
    std::string scorer_ckpt; // needed for grade-conditioned feedback checkpoints
    int max_new_tokens = 24;
};

inline MetricsReport cmd_eval(const EvalArgs& args, std::ostream& out = std::cout) {
    require(args.task == "scorer" || args.task == "feedback", ErrorCode::invalid_config,
            "task must be scorer or feedback");
    Checkpoint ckpt = load_checkpoint(args.ckpt);
    DatasetSplits data = load_dataset(args.data);
    const std::vector<GradingExample>& split = split_by_name(data, args.split);
    require(!split.empty(), ErrorCode::empty_dataset, "split '" + args.split + "' is empty");

    MetricsReport report;
    report.n_examples = split.size();

    if (args.task == "scorer") {
        require(ckpt.model.config.head_kind == HeadKind::regression,
                ErrorCode::incompatible_checkpoint, "checkpoint does not hold a scorer");
        std::vector<double> preds(split.size()), targets(split.size());
        parallel_for(split.size(), [&](std::size_t i) {
            preds[i] = predict_grade(ckpt.model, split[i], ckpt.vocab);
            targets[i] = split[i].score;
        });
        report.set_scores(score_metrics(preds, targets));
    } else {
        require(ckpt.model.config.head_kind == HeadKind::lm, ErrorCode::incompatible_checkpoint,
                "checkpoint does not hold a feedback generator");
        const GenMode mode = ckpt.meta.generator_mode;
        std::optional<Checkpoint> scorer;
        if (mode == GenMode::with_grade) {
            require(!args.scorer_ckpt.empty(), ErrorCode::invalid_config,
                    "grade-conditioned generator needs --scorer-ckpt for predicted grades");
            scorer = load_checkpoint(args.scorer_ckpt);
            require(scorer->model.config.head_kind == HeadKind::regression,
                    ErrorCode::incompatible_checkpoint, "--scorer-ckpt is not a scorer");
            require(scorer->vocab == ckpt.vocab, ErrorCode::incompatible_checkpoint,
                    "scorer and generator vocabularies differ");
        }
        DecodeConfig decode;
        decode.max_new_tokens = args.max_new_tokens;
        decode.stop_id = Vocab::eos_id;
        std::vector<std::vector<std::string>> cands(split.size()), refs(split.size());
        parallel_for(split.size(), [&](std::size_t i) {
            const GradingExample& ex = split[i];
            std::vector<int> prompt;
            if (scorer) {
                PipelineOutput po = grade_and_feedback(scorer->model, ckpt.model, ex,
                                                       rubric_for(ex), mode, decode, ckpt.vocab);
                cands[i] = tokenize_words(po.feedback_text);
            } else {
                prompt = build_prompt(ex, rubric_for(ex), std::nullopt, ckpt.vocab,
                                      ckpt.model.config.max_seq_len - std::max(1, decode.max_new_tokens));
                std::vector<int> full = generate(ckpt.model, prompt, decode);
                std::vector<int> fresh(full.begin() + static_cast<std::ptrdiff_t>(prompt.size()),
                                       full.end());
                cands[i] = tokenize_words(detokenize(fresh, ckpt.vocab));
            }
            refs[i] = tokenize_words(ex.feedback);
        });
        report.bleu = bleu(cands, refs);
        double r1 = 0.0, r2 = 0.0;
        for (std::size_t i = 0; i < split.size(); ++i) {
            r1 += rouge_n(cands[i], refs[i], 1).f1;
            r2 += rouge_n(cands[i], refs[i], 2).f1;
        }
        report.rouge1_f = r1 / static_cast<double>(split.size());
        report.rouge2_f = r2 / static_cast<double>(split.size());
    }
    out << report.serialize();
    return report;
}

// ---------------------------------------------------------------------------
// pipeline
// ---------------------------------------------------------------------------

struct PipelineArgs {
    std::string scorer_ckpt;
    std::string gen_ckpt;
    std::string data;
    std::string split = "test_ua";
    std::string mode = "with_grade";
    std::string out;
    bool dump_prompts = false;
    int max_new_tokens = 24;
};

inline MetricsReport cmd_pipeline(const PipelineArgs& args, std::ostream& log = std::cout) {
    Checkpoint scorer = load_checkpoint(args.scorer_ckpt);
    Checkpoint generator = load_checkpoint(args.gen_ckpt);
    require(scorer.model.config.head_kind == HeadKind::regression,
            ErrorCode::incompatible_checkpoint, "scorer checkpoint does not hold a scorer");
    require(generator.model.config.head_kind == HeadKind::lm, ErrorCode::incompatible_checkpoint,
            "generator checkpoint does not hold an LM");
    require(scorer.vocab == generator.vocab, ErrorCode::incompatible_checkpoint,
            "pipeline requires a shared vocabulary");
    const GenMode mode = detail::parse_gen_mode(args.mode);

    DatasetSplits data = load_dataset(args.data);
    const std::vector<GradingExample>& split = split_by_name(data, args.split);
    require(!split.empty(), ErrorCode::empty_dataset, "split '" + args.split + "' is empty");

    DecodeConfig decode;
    decode.max_new_tokens = args.max_new_tokens;
    decode.stop_id = Vocab::eos_id;

    std::vector<PipelineOutput> outputs(split.size());
    parallel_for(split.size(), [&](std::size_t i) {
        outputs[i] = grade_and_feedback(scorer.model, generator.model, split[i],
                                        rubric_for(split[i]), mode, decode, generator.vocab);
    });

    std::string records;
    for (std::size_t i = 0; i < split.size(); ++i) {
        records += split[i].id;
        records += '\t';
        records += format_double(outputs[i].predicted_score);
        records += '\t';
        records += outputs[i].feedback_text;
        if (args.dump_prompts) {
            records += '\t';
            records += detokenize(outputs[i].prompt_used, generator.vocab);
        }
        records += '\n';
    }
    write_file_atomic(args.out, records);

    MetricsReport report;
    report.n_examples = split.size();
    std::vector<double> preds, targets;
    std::vector<std::vector<std::string>> cands, refs;
    double r1 = 0.0, r2 = 0.0;
    for (std::size_t i = 0; i < split.size(); ++i) {
        preds.push_back(outputs[i].predicted_score);
        targets.push_back(split[i].score);
        cands.push_back(tokenize_words(outputs[i].feedback_text));
        refs.push_back(tokenize_words(split[i].feedback));
        r1 += rouge_n(cands.back(), refs.back(), 1).f1;
        r2 += rouge_n(cands.back(), refs.back(), 2).f1;
    }
    report.set_scores(score_metrics(preds, targets));
    report.bleu = bleu(cands, refs);
    report.rouge1_f = r1 / static_cast<double>(split.size());
    report.rouge2_f = r2 / static_cast<double>(split.size());
    log << report.serialize();
    return report;
}

// ---------------------------------------------------------------------------
// experiment
// ---------------------------------------------------------------------------

struct ExperimentArgs {
    std::string data;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string out_dir;
    std::string eval_split = "test_ua";
    int max_new_tokens = 24;
    ModelFlags model;
    TrainFlags training{.preset = "feedback"};
};

inline ExperimentReport cmd_experiment(const ExperimentArgs& args, std::ostream& log = std::cout) {
    require(!args.seeds.empty(), ErrorCode::invalid_spec, "need at least one seed");
    DatasetSplits data = load_dataset(args.data);
    const Vocab vocab = detail::vocab_for_dataset(data, args.model.vocab_max);
    const ModelConfig mc = args.model.to_config(HeadKind::lm, static_cast<int>(vocab.size()));
    const TrainConfig tc = args.training.to_config(0, mc.max_seq_len);

    ExperimentOptions options;
    options.eval_split = args.eval_split;
    options.max_new_tokens = args.max_new_tokens;
    ExperimentReport report = conditioning_experiment(data, mc, tc, args.seeds, vocab, options);

    std::filesystem::create_directories(args.out_dir);
    for (std::uint64_t seed : args.seeds) {
        ExperimentReport one;
        for (const ExperimentRun& run : report.runs) {
            if (run.seed == seed) one.runs.push_back(run);
        }
        std::ostringstream body;
        one.write(body);
        write_file_atomic(args.out_dir + "/seed" + std::to_string(seed) + ".report", body.str());
    }

    std::ostringstream summary;
    summary << "mode\tmedian_final_val_loss\tmedian_bleu\tmedian_rouge1_f\tmedian_rouge2_f\n";
    for (GenMode mode : {GenMode::with_grade, GenMode::without_grade}) {
        summary << gen_mode_name(mode) << '\t'
                << format_double(report.median_final_val_loss(mode)) << '\t'
                << format_double(report.median_metric(mode, [](const MetricsReport& m) { return m.bleu; }))
                << '\t'
                << format_double(
                       report.median_metric(mode, [](const MetricsReport& m) { return m.rouge1_f; }))
                << '\t'
                << format_double(
                       report.median_metric(mode, [](const MetricsReport& m) { return m.rouge2_f; }))
                << '\n';
    }
    write_file_atomic(args.out_dir + "/summary.tsv", summary.str());
    log << summary.str();
    return report;
}

// ---------------------------------------------------------------------------
// inspect
// ---------------------------------------------------------------------------

struct InspectArgs {
    std::string ckpt;
};

inline void cmd_inspect(const InspectArgs& args, std::ostream& out = std::cout) {
    const std::string bytes = read_file(args.ckpt);
    ByteReader r(bytes);
    const CheckpointSections sections = read_checkpoint_header(r);
    out << "magic\t" << kCheckpointMagic << "\nversion\t" << sections.version << "\n";
    for (const auto& [name, range] : sections.table) {
        out << "section\t" << name << "\toffset\t" << range.first << "\tsize\t" << range.second
            << "\n";
    }
    Checkpoint ckpt = parse_checkpoint(bytes);
    const ModelConfig& c = ckpt.model.config;
    out << "vocab_size\t" << c.vocab_size << "\nd_model\t" << c.d_model << "\nn_heads\t" << c.n_heads
        << "\nn_layers\t" << c.n_layers << "\nmax_seq_len\t" << c.max_seq_len << "\nhead\t"
        << (c.head_kind == HeadKind::lm ? "lm"
            : c.head_kind == HeadKind::regression ? "regression"
                                                  : "classification")
        << "\nquantize_base\t" << (c.quantize_base ? "true" : "false") << "\ntune\t"
        << (c.tune == TuneMode::lora ? "lora" : c.tune == TuneMode::heads ? "heads" : "full")
        << "\nseed\t" << ckpt.meta.seed << "\nbest_epoch\t" << ckpt.meta.best_epoch
        << "\nconfig_hash\t" << ckpt.meta.config_hash << "\ngenerator_mode\t"
        << gen_mode_name(ckpt.meta.generator_mode) << "\n";
}

} // namespace qgrade::cli
