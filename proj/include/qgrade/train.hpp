// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "qgrade/error.hpp"
#include "qgrade/io.hpp"
#include "qgrade/model.hpp"
#include "qgrade/rng.hpp"
#include "qgrade/tensor.hpp"

namespace qgrade {

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay
// ---------------------------------------------------------------------------

struct AdamWHyper {
    double learning_rate = 2e-4;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamWState {
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Slot> slots;
    std::int64_t t = 0;

    static AdamWState for_params(const std::vector<Tensor>& params) {
        AdamWState s;
        s.slots.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            s.slots[i].m.assign(params[i].size(), 0.0);
            s.slots[i].v.assign(params[i].size(), 0.0);
        }
        return s;
    }
};

/// One AdamW update from the params' grad fields. Decay is decoupled and
/// applied before the adaptive step; a missing grad buffer counts as zero.
inline void adamw_step(std::vector<Tensor>& params, AdamWState& state, const AdamWHyper& h) {
    require(state.slots.size() == params.size(), ErrorCode::state_mismatch,
            "optimizer state does not match parameter list");
    state.t += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor& p = params[pi];
        auto& slot = state.slots[pi];
        require(slot.m.size() == p.size(), ErrorCode::state_mismatch,
                "optimizer slot size does not match parameter");
        const double* g = p.has_grad() ? p.grad().data() : nullptr;
        double* w = p.data();
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double gi = g ? g[i] : 0.0;
            w[i] -= h.learning_rate * h.weight_decay * w[i];
            slot.m[i] = h.beta1 * slot.m[i] + (1.0 - h.beta1) * gi;
            slot.v[i] = h.beta2 * slot.v[i] + (1.0 - h.beta2) * gi * gi;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            w[i] -= h.learning_rate * mhat / (std::sqrt(vhat) + h.eps);
        }
    }
}

// ---------------------------------------------------------------------------
// early stopping
// ---------------------------------------------------------------------------

/// True when the best (minimum) validation value lies `patience` or more
/// epochs in the past; ties pick the earliest best epoch.
inline bool early_stop_check(std::span<const double> val_history, int patience) {
    require(!val_history.empty(), ErrorCode::empty_input, "empty validation history");
    require(patience >= 1, ErrorCode::invalid_config, "patience must be >= 1");
    std::size_t best = 0;
    for (std::size_t i = 1; i < val_history.size(); ++i) {
        if (val_history[i] < val_history[best]) best = i;
    }
    return val_history.size() - 1 - best >= static_cast<std::size_t>(patience);
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

enum class Objective : std::uint8_t { ce, mse, lm };

/// One pre-tokenized training example. For the lm objective, tokens from
/// index `predict_from` onward are scored (the prompt is context only).
struct TrainItem {
    std::vector<int> ids;
    double target = 0.0;  // mse
    int class_target = 0; // ce
    int predict_from = 1; // lm
};

struct TrainConfig {
    int batch_size = 4;
    double learning_rate = 2e-4;
    double weight_decay = 0.05;
    int epochs = 10;
    int early_stop_patience = 10;
    std::uint64_t seed = 0;
    int max_seq_len = 512;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::optional<double> grad_clip_norm;

    // scorer runs: 10 epochs, weight decay 0.05
    static TrainConfig preset_scorer() { return TrainConfig{}; }
    // feedback runs: 20 epochs, weight decay 1e-3
    static TrainConfig preset_feedback() {
        TrainConfig c;
        c.weight_decay = 1e-3;
        c.epochs = 20;
        return c;
    }

    void validate() const {
        require(batch_size >= 1, ErrorCode::invalid_config, "batch_size must be >= 1");
        require(learning_rate > 0.0, ErrorCode::invalid_config, "learning_rate must be > 0");
        require(weight_decay >= 0.0, ErrorCode::invalid_config, "weight_decay must be >= 0");
        require(epochs >= 1, ErrorCode::invalid_config, "epochs must be >= 1");
        require(early_stop_patience >= 1, ErrorCode::invalid_config, "patience must be >= 1");
        require(adam_beta1 > 0.0 && adam_beta1 < 1.0 && adam_beta2 > 0.0 && adam_beta2 < 1.0,
                ErrorCode::invalid_config, "betas must lie in (0, 1)");
        require(adam_eps > 0.0, ErrorCode::invalid_config, "adam_eps must be > 0");
        require(max_seq_len >= 1, ErrorCode::invalid_config, "max_seq_len must be >= 1");
        if (grad_clip_norm) {
            require(*grad_clip_norm > 0.0, ErrorCode::invalid_config, "grad clip must be > 0");
        }
    }
};

struct TrainReport {
    std::vector<double> train_losses;
    std::vector<double> val_losses;
    std::vector<double> epoch_seconds;
    int best_epoch = 0; // 1-based
    bool stopped_early = false;
    double trainable_fraction = 0.0;

    /// One line per epoch (epoch, train_loss, val_loss, seconds) plus a
    /// summary line; all tab-separated.
    void write_log(std::ostream& out) const {
        for (std::size_t i = 0; i < train_losses.size(); ++i) {
            out << (i + 1) << '\t' << format_double(train_losses[i]) << '\t'
                << format_double(val_losses[i]) << '\t' << format_double(epoch_seconds[i]) << '\n';
        }
        out << "summary\tbest_epoch\t" << best_epoch << "\tstopped_early\t"
            << (stopped_early ? "true" : "false") << "\ttrainable_fraction\t"
            << format_double(trainable_fraction) << '\n';
    }
};

namespace detail {

inline Tensor item_loss(Graph& g, const Model& m, const TrainItem& item, Objective obj) {
    switch (obj) {
        case Objective::mse: {
            Tensor pred = forward_score_graph(g, m, item.ids);
            Tensor diff = sub(g, pred, item.target);
            return mul(g, diff, diff);
        }
        case Objective::ce: {
            Tensor logits = forward_class(g, m, item.ids);
            Tensor row = reshape(g, logits, {1, logits.dim(0)});
            const int target = item.class_target;
            return cross_entropy(g, row, std::span<const int>(&target, 1));
        }
        case Objective::lm: {
            require(item.predict_from >= 1 &&
                        static_cast<std::size_t>(item.predict_from) < item.ids.size(),
                    ErrorCode::invalid_spec, "lm item has no positions to score");
            Tensor h = hidden_states(g, m, item.ids);
            std::vector<int> rows;
            std::vector<int> targets;
            for (std::size_t t = static_cast<std::size_t>(item.predict_from); t < item.ids.size();
                 ++t) {
                rows.push_back(static_cast<int>(t - 1));
                targets.push_back(item.ids[t]);
            }
            Tensor picked = gather_rows(g, h, std::move(rows));
            Tensor logits = matmul_nt(g, picked, m.head_weight);
            return cross_entropy(g, logits, targets);
        }
    }
    fail(ErrorCode::incompatible_objective, "unknown objective");
}

inline Tensor batch_loss(Graph& g, const Model& m, std::span<const TrainItem> items, Objective obj) {
    Tensor total = item_loss(g, m, items[0], obj);
    for (std::size_t i = 1; i < items.size(); ++i) {
        total = add(g, total, item_loss(g, m, items[i], obj));
    }
    return scale(g, total, 1.0 / static_cast<double>(items.size()));
}

inline double mean_loss(const Model& m, std::span<const TrainItem> items, Objective obj) {
    double sum = 0.0;
    for (const TrainItem& item : items) {
        Graph g(false);
        sum += item_loss(g, m, item, obj).item();
    }
    return sum / static_cast<double>(items.size());
}

inline void clip_grad_norm(std::vector<Tensor>& params, double max_norm) {
    double sq = 0.0;
    for (Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double gi : p.grad()) sq += gi * gi;
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm) return;
    const double factor = max_norm / norm;
    for (Tensor& p : params) {
        if (!p.has_grad()) continue;
        for (double& gi : p.grad_buffer()) gi *= factor;
    }
}

inline void check_objective(const Model& m, Objective obj) {
    const HeadKind head = m.config.head_kind;
    const bool ok = (obj == Objective::mse && head == HeadKind::regression) ||
                    (obj == Objective::ce && head == HeadKind::classification) ||
                    (obj == Objective::lm && head == HeadKind::lm);
    require(ok, ErrorCode::incompatible_objective, "objective does not match the model head");
}

} // namespace detail

/// AdamW loop with per-epoch seeded shuffling and early stopping on
/// validation loss; the best-epoch parameters are restored before returning.
inline TrainReport train(Model& m, const std::vector<TrainItem>& train_set,
                         const std::vector<TrainItem>& val_set, Objective objective,
                         const TrainConfig& config) {
    config.validate();
    require(!train_set.empty() && !val_set.empty(), ErrorCode::empty_dataset,
            "train and validation sets must be nonempty");
    detail::check_objective(m, objective);
    for (const TrainItem& item : train_set) {
        require(item.ids.size() <= static_cast<std::size_t>(config.max_seq_len),
                ErrorCode::sequence_too_long, "training item exceeds max_seq_len");
    }

    std::vector<Tensor> params = trainable_parameters(m);
    AdamWState state = AdamWState::for_params(params);
    const AdamWHyper hyper{config.learning_rate, config.weight_decay, config.adam_beta1,
                           config.adam_beta2, config.adam_eps};

    TrainReport report;
    report.trainable_fraction = trainable_fraction(m);

    auto snapshot = [&params] {
        std::vector<std::vector<double>> copy;
        copy.reserve(params.size());
        for (Tensor& p : params) copy.emplace_back(p.values().begin(), p.values().end());
        return copy;
    };
    std::vector<std::vector<double>> best_params = snapshot();
    double best_val = std::numeric_limits<double>::infinity();

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(derive_seed(config.seed, static_cast<std::uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double train_loss_sum = 0.0;
        std::vector<TrainItem> batch;
        batch.reserve(static_cast<std::size_t>(config.batch_size));
        auto flush_batch = [&] {
            if (batch.empty()) return;
            zero_grads(m);
            Graph g;
            Tensor loss = detail::batch_loss(g, m, batch, objective);
            g.backward(loss);
            if (config.grad_clip_norm) detail::clip_grad_norm(params, *config.grad_clip_norm);
            adamw_step(params, state, hyper);
            train_loss_sum += loss.item() * static_cast<double>(batch.size());
            batch.clear();
        };
        for (std::size_t i : order) {
            batch.push_back(train_set[i]);
            if (batch.size() == static_cast<std::size_t>(config.batch_size)) flush_batch();
        }
        flush_batch();

        const double train_loss = train_loss_sum / static_cast<double>(train_set.size());
        const double val_loss = detail::mean_loss(m, val_set, objective);
        const auto t1 = std::chrono::steady_clock::now();
        report.train_losses.push_back(train_loss);
        report.val_losses.push_back(val_loss);
        report.epoch_seconds.push_back(std::chrono::duration<double>(t1 - t0).count());
        require(std::isfinite(train_loss) && std::isfinite(val_loss), ErrorCode::invalid_spec,
                "loss diverged to a non-finite value");

        if (val_loss < best_val) {
            best_val = val_loss;
            report.best_epoch = epoch;
            best_params = snapshot();
        }
        if (early_stop_check(report.val_losses, config.early_stop_patience)) {
            report.stopped_early = true;
            break;
        }
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(best_params[i].begin(), best_params[i].end(), params[i].data());
    }
    return report;
}

} // namespace qgrade
