// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qgrade/error.hpp"
#include "qgrade/io.hpp"

namespace qgrade {

struct ScoreMetrics {
    double rmse = 0.0;
    double mae = 0.0;
    std::optional<double> pearson; // nullopt when either side has zero variance
};

inline ScoreMetrics score_metrics(std::span<const double> preds, std::span<const double> targets) {
    require(preds.size() == targets.size(), ErrorCode::length_mismatch,
            "prediction/target lengths differ");
    require(!preds.empty(), ErrorCode::empty_input, "no examples to score");

    const auto n = static_cast<double>(preds.size());
    ScoreMetrics m;
    double sq = 0.0, ab = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - targets[i];
        sq += d * d;
        ab += std::abs(d);
    }
    m.rmse = std::sqrt(sq / n);
    m.mae = ab / n;

    if (preds.size() >= 2) {
        double mp = 0.0, mt = 0.0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            mp += preds[i];
            mt += targets[i];
        }
        mp /= n;
        mt /= n;
        double cov = 0.0, vp = 0.0, vt = 0.0;
        for (std::size_t i = 0; i < preds.size(); ++i) {
            const double dp = preds[i] - mp;
            const double dt = targets[i] - mt;
            cov += dp * dt;
            vp += dp * dp;
            vt += dt * dt;
        }
        if (vp > 0.0 && vt > 0.0) m.pearson = cov / std::sqrt(vp * vt);
    }
    return m;
}

// ---------------------------------------------------------------------------
// BLEU / ROUGE over token sequences (works for int ids or string tokens)
// ---------------------------------------------------------------------------

namespace detail {

template <class Token>
std::map<std::vector<Token>, std::size_t> ngram_counts(const std::vector<Token>& seq, int n) {
    std::map<std::vector<Token>, std::size_t> counts;
    if (seq.size() < static_cast<std::size_t>(n)) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= seq.size(); ++i) {
        counts[std::vector<Token>(seq.begin() + static_cast<std::ptrdiff_t>(i),
                                  seq.begin() + static_cast<std::ptrdiff_t>(i) + n)]++;
    }
    return counts;
}

} // namespace detail

/// Corpus BLEU-4 with brevity penalty, one reference per candidate, no
/// smoothing: a zero pooled n-gram precision gives 0.
template <class Token>
double bleu(const std::vector<std::vector<Token>>& candidates,
            const std::vector<std::vector<Token>>& references) {
    require(candidates.size() == references.size(), ErrorCode::length_mismatch,
            "candidate/reference counts differ");
    require(!candidates.empty(), ErrorCode::empty_input, "bleu on an empty corpus");

    double cand_len = 0.0, ref_len = 0.0;
    double log_precision_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        std::size_t matched = 0, total = 0;
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            auto cand_counts = detail::ngram_counts(candidates[i], n);
            auto ref_counts = detail::ngram_counts(references[i], n);
            for (const auto& [gram, count] : cand_counts) {
                total += count;
                auto it = ref_counts.find(gram);
                if (it != ref_counts.end()) matched += std::min(count, it->second);
            }
        }
        if (total == 0 || matched == 0) return 0.0;
        log_precision_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    }
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        cand_len += static_cast<double>(candidates[i].size());
        ref_len += static_cast<double>(references[i].size());
    }
    const double bp = cand_len < ref_len ? std::exp(1.0 - ref_len / cand_len) : 1.0;
    return bp * std::exp(0.25 * log_precision_sum);
}

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

/// ROUGE-N n-gram overlap; degenerate inputs (either side shorter than n)
/// return zeros.
template <class Token>
RougeScore rouge_n(const std::vector<Token>& candidate, const std::vector<Token>& reference, int n) {
    require(n == 1 || n == 2, ErrorCode::invalid_spec, "rouge_n supports n in {1, 2}");
    auto cand_counts = detail::ngram_counts(candidate, n);
    auto ref_counts = detail::ngram_counts(reference, n);
    std::size_t cand_total = 0, ref_total = 0, overlap = 0;
    for (const auto& [gram, count] : cand_counts) {
        cand_total += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) overlap += std::min(count, it->second);
    }
    for (const auto& [gram, count] : ref_counts) ref_total += count;

    RougeScore s;
    if (cand_total == 0 || ref_total == 0) return s;
    s.precision = static_cast<double>(overlap) / static_cast<double>(cand_total);
    s.recall = static_cast<double>(overlap) / static_cast<double>(ref_total);
    if (s.precision + s.recall > 0.0) {
        s.f1 = 2.0 * s.precision * s.recall / (s.precision + s.recall);
    }
    return s;
}

// ---------------------------------------------------------------------------
// report bundle mirroring the result-table columns
// ---------------------------------------------------------------------------

struct MetricsReport {
    std::optional<double> rmse;
    std::optional<double> mae;
    std::optional<double> pearson; // printed as n/a when scores exist but it is undefined
    std::optional<double> bleu;
    std::optional<double> rouge1_f;
    std::optional<double> rouge2_f;
    std::size_t n_examples = 0;

    void set_scores(const ScoreMetrics& s) {
        rmse = s.rmse;
        mae = s.mae;
        pearson = s.pearson;
        // Cauchy-Schwarz; tolerate only fp round-off
        require(s.mae <= s.rmse * (1.0 + 1e-12) + 1e-300, ErrorCode::invalid_spec,
                "mae exceeds rmse");
    }

    /// Fixed-order tab-separated lines; absent metrics are omitted.
    std::string serialize() const {
        std::string out;
        auto line = [&out](const char* name, const std::string& value) {
            out += name;
            out += '\t';
            out += value;
            out += '\n';
        };
        if (rmse) line("rmse", format_double(*rmse));
        if (mae) line("mae", format_double(*mae));
        if (rmse) line("pearson", pearson ? format_double(*pearson) : "n/a");
        if (bleu) line("bleu", format_double(*bleu));
        if (rouge1_f) line("rouge1_f", format_double(*rouge1_f));
        if (rouge2_f) line("rouge2_f", format_double(*rouge2_f));
        line("n_examples", std::to_string(n_examples));
        return out;
    }
};

} // namespace qgrade
