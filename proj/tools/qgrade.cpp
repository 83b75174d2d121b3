// SPDX-License-Identifier: Apache-2.0
//
// qgrade: train, evaluate and run the two-stage short-answer grading and
// feedback pipeline on synthetic or SAF-style datasets.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "qgrade/cli.hpp"

namespace {

void add_model_flags(CLI::App* cmd, qgrade::cli::ModelFlags& flags) {
    cmd->add_option("--d-model", flags.d_model, "model width");
    cmd->add_option("--n-heads", flags.n_heads, "attention heads");
    cmd->add_option("--n-layers", flags.n_layers, "transformer blocks");
    cmd->add_option("--max-seq-len", flags.max_seq_len, "maximum sequence length");
    cmd->add_option("--vocab-max", flags.vocab_max, "vocabulary cap");
    cmd->add_option("--n-classes", flags.n_classes, "grade bins (classification head)");
    cmd->add_flag("--quantize-base", flags.quantize_base, "store base weights as int4/int8");
    cmd->add_option("--tune", flags.tune, "trainable set: lora | heads | full")
        ->check(CLI::IsMember({"lora", "heads", "full"}));
    cmd->add_option("--rank", flags.lora_rank, "LoRA rank");
    cmd->add_option("--alpha", flags.lora_alpha, "LoRA alpha");
    cmd->add_option("--bits", flags.quant_bits, "quantization bits (4 or 8)");
    cmd->add_option("--block-size", flags.quant_block_size, "quantization block size");
}

void add_train_flags(CLI::App* cmd, qgrade::cli::TrainFlags& flags) {
    cmd->add_option("--preset", flags.preset, "training preset: scorer | feedback")
        ->check(CLI::IsMember({"scorer", "feedback"}));
    cmd->add_option("--batch-size", flags.batch_size, "mini-batch size");
    cmd->add_option("--lr", flags.learning_rate, "learning rate");
    cmd->add_option("--weight-decay", flags.weight_decay, "decoupled weight decay");
    cmd->add_option("--epochs", flags.epochs, "training epochs");
    cmd->add_option("--patience", flags.patience, "early-stopping patience");
    cmd->add_option("--grad-clip", flags.grad_clip, "global gradient-norm clip");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"short-answer grading and feedback toolkit"};
    app.require_subcommand(1);

    qgrade::cli::GenDataArgs gen_args;
    CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic grading corpus");
    gen->add_option("--seed", gen_args.seed, "corpus seed");
    gen->add_option("--examples", gen_args.examples, "total example count (>= 40)");
    gen->add_option("--questions", gen_args.questions, "question count");
    gen->add_option("--theme-size", gen_args.theme_size, "theme vocabulary size");
    gen->add_option("--out", gen_args.out, "output dataset path")->required();
    gen->set_config("--config");

    qgrade::cli::TrainArgs train_args;
    CLI::App* train = app.add_subcommand("train", "train a scorer or feedback generator");
    train->add_option("--task", train_args.task, "scorer | feedback")
        ->check(CLI::IsMember({"scorer", "feedback"}));
    train->add_option("--data", train_args.data, "dataset path")->required();
    train->add_option("--out", train_args.out, "checkpoint output path")->required();
    train->add_option("--log", train_args.log_path, "run log path (default <out>.log)");
    train->add_option("--seed", train_args.seed, "training seed");
    train->add_option("--mode", train_args.gen_mode, "feedback conditioning: with_grade | without_grade")
        ->check(CLI::IsMember({"with_grade", "without_grade"}));
    add_model_flags(train, train_args.model);
    add_train_flags(train, train_args.training);
    train->set_config("--config");

    qgrade::cli::EvalArgs eval_args;
    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
    eval->add_option("--task", eval_args.task, "scorer | feedback")
        ->check(CLI::IsMember({"scorer", "feedback"}));
    eval->add_option("--ckpt", eval_args.ckpt, "checkpoint path")->required();
    eval->add_option("--data", eval_args.data, "dataset path")->required();
    eval->add_option("--split", eval_args.split, "train | val | test_ua | test_uq")
        ->check(CLI::IsMember({"train", "val", "test_ua", "test_uq"}));
    eval->add_option("--scorer-ckpt", eval_args.scorer_ckpt,
                     "scorer checkpoint (required for grade-conditioned generators)");
    eval->add_option("--max-new-tokens", eval_args.max_new_tokens, "generation budget");
    eval->set_config("--config");

    qgrade::cli::PipelineArgs pipe_args;
    CLI::App* pipe = app.add_subcommand("pipeline", "run score-then-generate over a split");
    pipe->add_option("--scorer-ckpt", pipe_args.scorer_ckpt, "scorer checkpoint")->required();
    pipe->add_option("--gen-ckpt", pipe_args.gen_ckpt, "generator checkpoint")->required();
    pipe->add_option("--data", pipe_args.data, "dataset path")->required();
    pipe->add_option("--split", pipe_args.split, "train | val | test_ua | test_uq")
        ->check(CLI::IsMember({"train", "val", "test_ua", "test_uq"}));
    pipe->add_option("--mode", pipe_args.mode, "with_grade | without_grade")
        ->check(CLI::IsMember({"with_grade", "without_grade"}));
    pipe->add_option("--out", pipe_args.out, "per-example output path")->required();
    pipe->add_flag("--dump-prompts", pipe_args.dump_prompts, "append the prompt to each record");
    pipe->add_option("--max-new-tokens", pipe_args.max_new_tokens, "generation budget");
    pipe->set_config("--config");

    qgrade::cli::ExperimentArgs exp_args;
    CLI::App* exp = app.add_subcommand("experiment", "grade-conditioning comparison across seeds");
    exp->add_option("--data", exp_args.data, "dataset path")->required();
    exp->add_option("--seeds", exp_args.seeds, "seed list")->delimiter(',');
    exp->add_option("--out-dir", exp_args.out_dir, "report directory")->required();
    exp->add_option("--eval-split", exp_args.eval_split, "split for generation metrics")
        ->check(CLI::IsMember({"train", "val", "test_ua", "test_uq"}));
    exp->add_option("--max-new-tokens", exp_args.max_new_tokens, "generation budget");
    add_model_flags(exp, exp_args.model);
    add_train_flags(exp, exp_args.training);
    exp->set_config("--config");

    qgrade::cli::InspectArgs inspect_args;
    CLI::App* inspect = app.add_subcommand("inspect", "print checkpoint header and config");
    inspect->add_option("--ckpt", inspect_args.ckpt, "checkpoint path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) qgrade::cli::cmd_gen_data(gen_args);
        if (train->parsed()) qgrade::cli::cmd_train(train_args);
        if (eval->parsed()) qgrade::cli::cmd_eval(eval_args);
        if (pipe->parsed()) qgrade::cli::cmd_pipeline(pipe_args);
        if (exp->parsed()) qgrade::cli::cmd_experiment(exp_args);
        if (inspect->parsed()) qgrade::cli::cmd_inspect(inspect_args);
    } catch (const qgrade::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return qgrade::cli::classify_error(e);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
