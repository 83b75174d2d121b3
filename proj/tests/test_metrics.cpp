// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "qgrade/metrics.hpp"
#include "qgrade/rng.hpp"

using namespace qgrade;

namespace {

// Independent oracle: positional scanning without hash/count maps. For each
// n-gram position in the candidate, greedily match an unused reference
// position; the total equals the clipped-count overlap.
std::size_t overlap_oracle(const std::vector<int>& cand, const std::vector<int>& ref, int n) {
    if (cand.size() < static_cast<std::size_t>(n) || ref.size() < static_cast<std::size_t>(n)) {
        return 0;
    }
    std::vector<bool> used(ref.size(), false);
    std::size_t matched = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
        for (std::size_t j = 0; j + n <= ref.size(); ++j) {
            if (used[j]) continue;
            bool equal = true;
            for (int k = 0; k < n; ++k) equal &= cand[i + k] == ref[j + k];
            if (equal) {
                used[j] = true;
                ++matched;
                break;
            }
        }
    }
    return matched;
}

double bleu_oracle(const std::vector<std::vector<int>>& cands,
                   const std::vector<std::vector<int>>& refs) {
    double log_sum = 0.0;
    for (int n = 1; n <= 4; ++n) {
        std::size_t matched = 0, total = 0;
        for (std::size_t i = 0; i < cands.size(); ++i) {
            matched += overlap_oracle(cands[i], refs[i], n);
            total += cands[i].size() >= static_cast<std::size_t>(n)
                         ? cands[i].size() - static_cast<std::size_t>(n) + 1
                         : 0;
        }
        if (total == 0 || matched == 0) return 0.0;
        log_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
    }
    double c = 0.0, r = 0.0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        c += static_cast<double>(cands[i].size());
        r += static_cast<double>(refs[i].size());
    }
    const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
    return bp * std::exp(0.25 * log_sum);
}

std::vector<int> random_sentence(Rng& rng, int alphabet, int max_len) {
    const int len = static_cast<int>(rng.uniform_int(1, max_len));
    std::vector<int> out;
    for (int i = 0; i < len; ++i) out.push_back(static_cast<int>(rng.uniform_int(0, alphabet - 1)));
    return out;
}

} // namespace

TEST_CASE("score_metrics oracles") {
    const std::vector<double> incr = {1, 2, 3};
    ScoreMetrics same = score_metrics(incr, incr);
    CHECK(same.rmse == 0.0);
    CHECK(same.mae == 0.0);
    REQUIRE(same.pearson.has_value());
    CHECK(*same.pearson == Catch::Approx(1.0).margin(1e-12));

    ScoreMetrics hand = score_metrics(incr, std::vector<double>{1, 2, 4});
    REQUIRE(hand.pearson.has_value());
    CHECK(*hand.pearson == Catch::Approx(0.9819805060619659).margin(1e-9));

    const std::vector<double> anti = {1, 0, -1};
    ScoreMetrics mirrored = score_metrics(anti, std::vector<double>{-1, 0, 1});
    REQUIRE(mirrored.pearson.has_value());
    CHECK(*mirrored.pearson == Catch::Approx(-1.0).margin(1e-12));

    ScoreMetrics flat = score_metrics(std::vector<double>{2, 2, 2}, incr);
    CHECK_FALSE(flat.pearson.has_value());

    CHECK_THROWS_AS(score_metrics(incr, std::vector<double>{1}), Error);
    CHECK_THROWS_AS(score_metrics(std::vector<double>{}, std::vector<double>{}), Error);
}

TEST_CASE("pearson is invariant under positive affine maps") {
    Rng rng(8);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> x, y;
        for (int i = 0; i < 12; ++i) {
            x.push_back(rng.gaussian());
            y.push_back(rng.gaussian() + 0.4 * x.back());
        }
        std::vector<double> ax;
        for (double v : x) ax.push_back(2.5 * v + 1.75);
        const auto base = score_metrics(x, y);
        const auto mapped = score_metrics(ax, y);
        REQUIRE(base.pearson.has_value());
        REQUIRE(mapped.pearson.has_value());
        CHECK(*mapped.pearson == Catch::Approx(*base.pearson).margin(1e-12));
    }
}

TEST_CASE("mae never exceeds rmse") {
    Rng rng(15);
    for (int trial = 0; trial < 1000; ++trial) {
        std::vector<double> p, t;
        const int n = static_cast<int>(rng.uniform_int(1, 20));
        for (int i = 0; i < n; ++i) {
            p.push_back(rng.gaussian());
            t.push_back(rng.gaussian());
        }
        const auto m = score_metrics(p, t);
        CHECK(m.mae <= m.rmse * (1.0 + 1e-12) + 1e-300);
    }
}

TEST_CASE("bleu oracles") {
    using Sent = std::vector<std::string>;
    const Sent ref = {"the", "cat", "sat", "on", "the", "mat"};
    const Sent cand = {"the", "cat", "sat", "on", "mat"};

    CHECK(bleu<std::string>({ref}, {ref}) == 1.0);

    const double expected =
        std::exp(1.0 - 6.0 / 5.0) *
        std::pow((5.0 / 5.0) * (3.0 / 4.0) * (2.0 / 3.0) * (1.0 / 2.0), 0.25);
    CHECK(bleu<std::string>({cand}, {ref}) == Catch::Approx(expected).margin(1e-12));
    CHECK(expected == Catch::Approx(0.5789).margin(5e-5));

    const Sent disjoint = {"dog", "ran", "far", "away", "fast"};
    CHECK(bleu<std::string>({disjoint}, {ref}) == 0.0);

    CHECK_THROWS_AS((bleu<std::string>({cand, cand}, {ref})), Error);
    CHECK_THROWS_AS((bleu<std::string>({}, {})), Error);
}

TEST_CASE("corpus bleu against itself is exactly one") {
    Rng rng(3);
    std::vector<std::vector<int>> corpus;
    for (int i = 0; i < 25; ++i) corpus.push_back(random_sentence(rng, 9, 12));
    CHECK(bleu(corpus, corpus) == 1.0);
}

TEST_CASE("rouge oracles") {
    using Sent = std::vector<std::string>;
    const Sent cand = {"the", "cat", "sat"};
    const Sent ref = {"the", "cat"};
    RougeScore r1 = rouge_n(cand, ref, 1);
    CHECK(r1.precision == Catch::Approx(2.0 / 3.0).margin(1e-12));
    CHECK(r1.recall == 1.0);
    CHECK(r1.f1 == Catch::Approx(0.8).margin(1e-12));

    RougeScore same1 = rouge_n(cand, cand, 1);
    RougeScore same2 = rouge_n(cand, cand, 2);
    CHECK(same1.f1 == 1.0);
    CHECK(same2.f1 == 1.0);

    const Sent single = {"word"};
    RougeScore degenerate = rouge_n(single, ref, 2);
    CHECK(degenerate.precision == 0.0);
    CHECK(degenerate.recall == 0.0);
    CHECK(degenerate.f1 == 0.0);

    CHECK_THROWS_AS(rouge_n(cand, ref, 3), Error);
}

TEST_CASE("token relabeling leaves bleu and rouge unchanged") {
    Rng rng(12);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<int> cand = random_sentence(rng, 6, 10);
        std::vector<int> ref = random_sentence(rng, 6, 10);
        auto relabel = [](const std::vector<int>& v) {
            std::vector<int> out;
            for (int t : v) out.push_back(100 + 7 * t); // injective map
            return out;
        };
        CHECK(bleu<int>({cand}, {ref}) == bleu<int>({relabel(cand)}, {relabel(ref)}));
        CHECK(rouge_n(cand, ref, 1).f1 == rouge_n(relabel(cand), relabel(ref), 1).f1);
        CHECK(rouge_n(cand, ref, 2).f1 == rouge_n(relabel(cand), relabel(ref), 2).f1);
    }
}

TEST_CASE("agreement with the brute-force counting oracle on random pairs") {
    Rng rng(77);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<int> cand = random_sentence(rng, 5, 14);
        std::vector<int> ref = random_sentence(rng, 5, 14);
        CHECK(bleu<int>({cand}, {ref}) == Catch::Approx(bleu_oracle({cand}, {ref})).margin(1e-12));
        for (int n : {1, 2}) {
            const std::size_t overlap = overlap_oracle(cand, ref, n);
            RougeScore s = rouge_n(cand, ref, n);
            const std::size_t cand_total =
                cand.size() >= static_cast<std::size_t>(n) ? cand.size() - n + 1 : 0;
            const std::size_t ref_total =
                ref.size() >= static_cast<std::size_t>(n) ? ref.size() - n + 1 : 0;
            if (cand_total == 0 || ref_total == 0) {
                CHECK(s.f1 == 0.0);
            } else {
                CHECK(s.precision ==
                      Catch::Approx(double(overlap) / double(cand_total)).margin(1e-12));
                CHECK(s.recall == Catch::Approx(double(overlap) / double(ref_total)).margin(1e-12));
            }
        }
    }
}

TEST_CASE("metrics report serialization") {
    MetricsReport report;
    report.n_examples = 7;
    ScoreMetrics s;
    s.rmse = 0.5;
    s.mae = 0.25;
    report.set_scores(s); // pearson undefined -> n/a
    report.bleu = 0.125;
    report.rouge1_f = 0.75;
    report.rouge2_f = 0.5;
    CHECK(report.serialize() ==
          "rmse\t0.5\nmae\t0.25\npearson\tn/a\nbleu\t0.125\nrouge1_f\t0.75\nrouge2_f\t0.5\n"
          "n_examples\t7\n");

    MetricsReport scorer_only;
    scorer_only.n_examples = 3;
    ScoreMetrics s2;
    s2.rmse = 1.0;
    s2.mae = 1.0;
    s2.pearson = -0.5;
    scorer_only.set_scores(s2);
    CHECK(scorer_only.serialize() == "rmse\t1\nmae\t1\npearson\t-0.5\nn_examples\t3\n");
}
