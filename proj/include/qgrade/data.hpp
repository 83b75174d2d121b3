// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "qgrade/error.hpp"
#include "qgrade/io.hpp"
#include "qgrade/rng.hpp"

namespace qgrade {

// ---------------------------------------------------------------------------
// tokenizer / vocabulary
// ---------------------------------------------------------------------------

namespace detail {

inline bool is_space_char(char c) {
    return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

inline bool is_punct_char(char c) {
    const auto u = static_cast<unsigned char>(c);
    return u < 0x80 && std::ispunct(u) != 0;
}

inline constexpr std::array<std::string_view, 5> kReservedSpellings = {
    "<pad>", "<unk>", "<bos>", "<eos>", "<sep>"};

} // namespace detail

/// Lowercase word/punctuation split: words are maximal alnum runs, each
/// punctuation character is its own token, whitespace separates. The five
/// reserved spellings (<pad> etc.) survive as single tokens so detokenized
/// text re-tokenizes to the same ids.
inline std::vector<std::string> tokenize_words(std::string_view text) {
    std::vector<std::string> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty()) {
            out.push_back(word);
            word.clear();
        }
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (c == '<') {
            bool matched = false;
            for (std::string_view sp : detail::kReservedSpellings) {
                if (text.substr(i, sp.size()) == sp) {
                    flush();
                    out.emplace_back(sp);
                    i += sp.size() - 1;
                    matched = true;
                    break;
                }
            }
            if (matched) continue;
        }
        if (detail::is_space_char(c)) {
            flush();
        } else if (detail::is_punct_char(c)) {
            flush();
            out.push_back(std::string(1, c));
        } else {
            word.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
        }
    }
    flush();
    return out;
}

struct Vocab {
    static constexpr int pad_id = 0;
    static constexpr int unk_id = 1;
    static constexpr int bos_id = 2;
    static constexpr int eos_id = 3;
    static constexpr int sep_id = 4;

    std::unordered_map<std::string, int> to_id;
    std::vector<std::string> tokens; // id -> token

    std::size_t size() const { return tokens.size(); }

    int id_of(const std::string& token) const {
        auto it = to_id.find(token);
        return it == to_id.end() ? unk_id : it->second;
    }

    bool operator==(const Vocab& other) const { return tokens == other.tokens; }
};

/// Most frequent word tokens win, ties break lexicographically.
inline Vocab build_vocab(std::span<const std::string> corpus, std::size_t max_size) {
    require(max_size > detail::kReservedSpellings.size(), ErrorCode::invalid_config,
            "vocab max_size must exceed the reserved id count");
    std::unordered_map<std::string, std::size_t> counts;
    for (const std::string& text : corpus) {
        for (std::string& tok : tokenize_words(text)) counts[std::move(tok)]++;
    }
    std::vector<std::pair<std::string, std::size_t>> ranked;
    ranked.reserve(counts.size());
    for (auto& kv : counts) {
        bool reserved = false;
        for (std::string_view sp : detail::kReservedSpellings) reserved |= kv.first == sp;
        if (!reserved) ranked.emplace_back(kv.first, kv.second);
    }
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    for (std::string_view sp : detail::kReservedSpellings) {
        v.to_id.emplace(sp, static_cast<int>(v.tokens.size()));
        v.tokens.emplace_back(sp);
    }
    for (auto& [tok, count] : ranked) {
        if (v.tokens.size() >= max_size) break;
        v.to_id.emplace(tok, static_cast<int>(v.tokens.size()));
        v.tokens.push_back(tok);
    }
    return v;
}

inline std::vector<int> tokenize(std::string_view text, const Vocab& vocab) {
    std::vector<int> ids;
    for (const std::string& tok : tokenize_words(text)) ids.push_back(vocab.id_of(tok));
    return ids;
}

inline std::string detokenize(std::span<const int> ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        require(id >= 0 && static_cast<std::size_t>(id) < vocab.tokens.size(),
                ErrorCode::token_out_of_range, "detokenize id outside vocab");
        if (!out.empty()) out.push_back(' ');
        out += vocab.tokens[static_cast<std::size_t>(id)];
    }
    return out;
}

// ---------------------------------------------------------------------------
// grading records and score scales
// ---------------------------------------------------------------------------

struct GradingExample {
    std::string id;
    std::string question;
    std::string reference_answer;
    std::string provided_answer; // may legitimately be empty
    double score = 0.0;          // normalized to [0, 1]
    double raw_score = 0.0;      // on the source scale
    std::string feedback;

    bool operator==(const GradingExample&) const = default;
};

enum class GradeScaleKind : std::uint8_t { unit_interval, mohler_0_5_halfstep };

struct GradeScale {
    GradeScaleKind kind = GradeScaleKind::unit_interval;
    double min = 0.0;
    double max = 1.0;
    double step = 0.0; // 0 = continuous

    static GradeScale unit() { return {GradeScaleKind::unit_interval, 0.0, 1.0, 0.0}; }
    // 11 grades: 0, 0.5, ..., 5
    static GradeScale mohler() { return {GradeScaleKind::mohler_0_5_halfstep, 0.0, 5.0, 0.5}; }
};

inline double normalize_score(double raw, const GradeScale& scale) {
    require(raw >= scale.min && raw <= scale.max, ErrorCode::score_out_of_range,
            "raw score " + format_double(raw) + " outside [" + format_double(scale.min) + ", " +
                format_double(scale.max) + "]");
    return (raw - scale.min) / (scale.max - scale.min);
}

struct DatasetSplits {
    std::vector<GradingExample> train;
    std::vector<GradingExample> validation;
    std::vector<GradingExample> test_unseen_answers;
    std::vector<GradingExample> test_unseen_questions;

    std::vector<const std::vector<GradingExample>*> all() const {
        return {&train, &validation, &test_unseen_answers, &test_unseen_questions};
    }
    std::size_t total() const {
        return train.size() + validation.size() + test_unseen_answers.size() +
               test_unseen_questions.size();
    }
};

inline const std::vector<GradingExample>& split_by_name(const DatasetSplits& splits,
                                                        std::string_view name) {
    if (name == "train") return splits.train;
    if (name == "val") return splits.validation;
    if (name == "test_ua") return splits.test_unseen_answers;
    if (name == "test_uq") return splits.test_unseen_questions;
    fail(ErrorCode::invalid_spec, "unknown split '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// dataset file format: one record per line, 8 tab-separated fields
// id, split, question, reference_answer, provided_answer, raw_score, scale, feedback
// ---------------------------------------------------------------------------

namespace detail {

inline std::string sanitize_text(std::string_view text) {
    std::string out(text);
    for (char& c : out) {
        if (c == '\t' || c == '\n' || c == '\r') c = ' ';
    }
    return out;
}

inline GradeScale scale_by_name(std::string_view name, const std::string& context) {
    if (name == "unit") return GradeScale::unit();
    if (name == "mohler") return GradeScale::mohler();
    fail(ErrorCode::parse_error, context + ": unknown scale '" + std::string(name) + "'");
}

inline const char* scale_name(GradeScaleKind kind) {
    return kind == GradeScaleKind::unit_interval ? "unit" : "mohler";
}

} // namespace detail

inline std::string serialize_dataset(const DatasetSplits& splits,
                                     GradeScaleKind scale = GradeScaleKind::unit_interval) {
    std::string out =
        "# id\tsplit\tquestion\treference_answer\tprovided_answer\traw_score\tscale\tfeedback\n";
    const std::array<std::pair<const std::vector<GradingExample>*, const char*>, 4> parts = {
        std::pair{&splits.train, "train"},
        {&splits.validation, "val"},
        {&splits.test_unseen_answers, "test_ua"},
        {&splits.test_unseen_questions, "test_uq"}};
    for (auto [list, name] : parts) {
        for (const GradingExample& ex : *list) {
            out += detail::sanitize_text(ex.id);
            out += '\t';
            out += name;
            out += '\t';
            out += detail::sanitize_text(ex.question);
            out += '\t';
            out += detail::sanitize_text(ex.reference_answer);
            out += '\t';
            out += detail::sanitize_text(ex.provided_answer);
            out += '\t';
            out += format_double(ex.raw_score);
            out += '\t';
            out += detail::scale_name(scale);
            out += '\t';
            out += detail::sanitize_text(ex.feedback);
            out += '\n';
        }
    }
    return out;
}

inline void save_dataset(const DatasetSplits& splits, const std::string& path,
                         GradeScaleKind scale = GradeScaleKind::unit_interval) {
    write_file_atomic(path, serialize_dataset(splits, scale));
}

/// Parse a dataset file. When `expected_scale` is given, every record must
/// declare that scale. Scores are normalized on load.
inline DatasetSplits parse_dataset(std::string_view content,
                                   std::optional<GradeScale> expected_scale = std::nullopt) {
    DatasetSplits splits;
    std::unordered_set<std::string> seen_ids;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start <= content.size()) {
        const std::size_t end = content.find('\n', start);
        std::string_view line = content.substr(
            start, end == std::string_view::npos ? content.size() - start : end - start);
        start = end == std::string_view::npos ? content.size() + 1 : end + 1;
        ++line_no;
        if (line.empty() || line[0] == '#') continue;

        const std::string context = "line " + std::to_string(line_no);
        std::vector<std::string_view> fields;
        std::size_t fstart = 0;
        while (true) {
            const std::size_t tab = line.find('\t', fstart);
            if (tab == std::string_view::npos) {
                fields.push_back(line.substr(fstart));
                break;
            }
            fields.push_back(line.substr(fstart, tab - fstart));
            fstart = tab + 1;
        }
        require(fields.size() == 8, ErrorCode::parse_error,
                context + ": expected 8 tab-separated fields, got " + std::to_string(fields.size()));

        GradingExample ex;
        ex.id = std::string(fields[0]);
        require(!ex.id.empty(), ErrorCode::parse_error, context + ": empty id");
        require(seen_ids.insert(ex.id).second, ErrorCode::duplicate_id,
                context + ": id '" + ex.id + "' appears twice");
        ex.question = std::string(fields[2]);
        ex.reference_answer = std::string(fields[3]);
        ex.provided_answer = std::string(fields[4]);
        ex.raw_score = parse_double(fields[5], context);
        const GradeScale scale = detail::scale_by_name(fields[6], context);
        if (expected_scale) {
            require(scale.kind == expected_scale->kind, ErrorCode::parse_error,
                    context + ": record scale differs from the expected scale");
        }
        ex.score = normalize_score(ex.raw_score, scale);
        ex.feedback = std::string(fields[7]);

        if (fields[1] == "train") {
            splits.train.push_back(std::move(ex));
        } else if (fields[1] == "val") {
            splits.validation.push_back(std::move(ex));
        } else if (fields[1] == "test_ua") {
            splits.test_unseen_answers.push_back(std::move(ex));
        } else if (fields[1] == "test_uq") {
            splits.test_unseen_questions.push_back(std::move(ex));
        } else {
            fail(ErrorCode::parse_error, context + ": unknown split '" + std::string(fields[1]) + "'");
        }
    }
    return splits;
}

inline DatasetSplits load_dataset(const std::string& path,
                                  std::optional<GradeScale> expected_scale = std::nullopt) {
    return parse_dataset(read_file(path), expected_scale);
}

// ---------------------------------------------------------------------------
// class-balancing upsampler
// ---------------------------------------------------------------------------

/// Bucket scores into n_bins equal-width bins over [0,1] and duplicate
/// minority-bin examples (seeded, with replacement) until every nonempty bin
/// matches the largest; the result is shuffled.
inline std::vector<GradingExample> upsample_balance(const std::vector<GradingExample>& examples,
                                                    int n_bins, std::uint64_t seed) {
    require(!examples.empty(), ErrorCode::empty_dataset, "cannot upsample an empty dataset");
    require(n_bins >= 2, ErrorCode::invalid_spec, "n_bins must be >= 2");

    std::vector<std::vector<std::size_t>> bins(static_cast<std::size_t>(n_bins));
    for (std::size_t i = 0; i < examples.size(); ++i) {
        auto b = static_cast<std::size_t>(examples[i].score * n_bins);
        b = std::min(b, static_cast<std::size_t>(n_bins - 1));
        bins[b].push_back(i);
    }
    std::size_t largest = 0;
    for (const auto& b : bins) largest = std::max(largest, b.size());

    Rng rng(seed);
    std::vector<GradingExample> out(examples);
    for (const auto& b : bins) {
        if (b.empty()) continue;
        for (std::size_t add = b.size(); add < largest; ++add) {
            const auto pick = static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<std::int64_t>(b.size()) - 1));
            out.push_back(examples[b[pick]]);
        }
    }
    rng.shuffle(out);
    return out;
}

// ---------------------------------------------------------------------------
// synthetic grading corpus
// ---------------------------------------------------------------------------

struct SyntheticSpec {
    int n_questions = 24;
    int n_examples = 2000;
    int vocab_theme_size = 150;
    std::uint64_t seed = 7;
};

namespace detail {

// deterministic pool of pronounceable nonsense words
inline std::vector<std::string> theme_words(std::size_t count) {
    static constexpr std::array<const char*, 20> pre = {
        "bal", "cor", "dex", "fen", "gor", "hul", "jin", "kal", "lom", "mer",
        "nop", "pax", "quil", "ros", "sef", "tam", "urn", "vex", "wim", "zor"};
    static constexpr std::array<const char*, 20> suf = {
        "ak", "ben", "cil", "dor", "eth", "fi", "gan", "hob", "iv", "jor",
        "ka", "len", "mus", "nek", "ol", "pin", "ra", "sul", "tev", "um"};
    require(count <= pre.size() * suf.size(), ErrorCode::invalid_spec,
            "theme word pool exhausted");
    std::vector<std::string> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        out.push_back(std::string(pre[i % pre.size()]) + suf[i / pre.size()]);
    }
    return out;
}

inline std::string band_phrase(double score) {
    if (score >= 1.0) return "excellent work . all key points are covered .";
    if (score >= 2.0 / 3.0) return "good answer . please also mention";
    if (score >= 1.0 / 3.0) return "partially correct . missing points include";
    return "weak answer . review";
}

} // namespace detail

inline constexpr int kConceptsPerQuestion = 6;

/// Templated corpus: each question owns a bag of key-concept words; a student
/// answer contains a fraction f of them plus distractors; the raw score is f
/// and the feedback is a score-band phrase plus up to two missing concepts.
/// Splits are 70 / 15 / 7.5 / 7.5 and the unseen-question split uses
/// questions that appear nowhere else.
inline DatasetSplits gen_synthetic(const SyntheticSpec& spec) {
    require(spec.n_examples >= 40, ErrorCode::invalid_spec, "need at least 40 examples");
    require(spec.n_questions >= 2, ErrorCode::invalid_spec, "need at least 2 questions");
    require(spec.vocab_theme_size >= 30, ErrorCode::invalid_spec, "theme vocabulary too small");

    Rng rng(derive_seed(spec.seed, 0x53594eULL));
    const auto n_questions = static_cast<std::size_t>(spec.n_questions);
    const std::size_t concept_pool = static_cast<std::size_t>(spec.vocab_theme_size) * 2 / 3;
    const std::size_t distractor_pool = static_cast<std::size_t>(spec.vocab_theme_size) - concept_pool;
    // topics, concepts and distractors come from disjoint pools so concept
    // coverage can be recomputed exactly from the answer text
    std::vector<std::string> words =
        detail::theme_words(n_questions + concept_pool + distractor_pool);
    std::vector<std::string> topics(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(n_questions));
    std::vector<std::string> concepts(
        words.begin() + static_cast<std::ptrdiff_t>(n_questions),
        words.begin() + static_cast<std::ptrdiff_t>(n_questions + concept_pool));
    std::vector<std::string> distractors(
        words.begin() + static_cast<std::ptrdiff_t>(n_questions + concept_pool), words.end());

    struct Question {
        std::string text;
        std::vector<std::string> concepts; // canonical order
        std::string reference;
    };
    std::vector<Question> questions;
    for (std::size_t qi = 0; qi < n_questions; ++qi) {
        Question q;
        q.text = "describe " + topics[qi] + " and name its key parts";
        std::vector<std::size_t> order(concepts.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        q.reference = "the key points are";
        for (int k = 0; k < kConceptsPerQuestion; ++k) {
            q.concepts.push_back(concepts[order[static_cast<std::size_t>(k)]]);
            q.reference += " " + q.concepts.back();
        }
        q.reference += " .";
        questions.push_back(std::move(q));
    }

    // reserve questions for the unseen-question split
    const std::size_t uq_questions = std::max<std::size_t>(1, n_questions / 8);
    const std::size_t seen_questions = n_questions - uq_questions;

    const auto n = static_cast<std::size_t>(spec.n_examples);
    const auto n_train = static_cast<std::size_t>(std::llround(0.70 * static_cast<double>(n)));
    const auto n_val = static_cast<std::size_t>(std::llround(0.15 * static_cast<double>(n)));
    const auto n_ua = static_cast<std::size_t>(std::llround(0.075 * static_cast<double>(n)));
    const std::size_t n_uq = n - n_train - n_val - n_ua;

    DatasetSplits splits;
    std::size_t serial = 0;
    auto make_example = [&](std::size_t question_index) {
        const Question& q = questions[question_index];
        GradingExample ex;
        ex.id = "ex" + std::to_string(serial++);
        ex.question = q.text;
        ex.reference_answer = q.reference;

        const int covered =
            static_cast<int>(rng.uniform_int(0, kConceptsPerQuestion));
        std::vector<std::size_t> order(static_cast<std::size_t>(kConceptsPerQuestion));
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        std::vector<bool> present(static_cast<std::size_t>(kConceptsPerQuestion), false);
        for (int k = 0; k < covered; ++k) present[order[static_cast<std::size_t>(k)]] = true;

        ex.raw_score = static_cast<double>(covered) / static_cast<double>(kConceptsPerQuestion);
        ex.score = ex.raw_score;

        if (covered == 0 && rng.uniform() < 0.3) {
            ex.provided_answer.clear(); // a legitimately empty response
        } else {
            std::vector<std::string> answer_words;
            for (std::size_t k = 0; k < present.size(); ++k) {
                if (present[k]) answer_words.push_back(q.concepts[k]);
            }
            const int extra = static_cast<int>(rng.uniform_int(1, 3));
            for (int k = 0; k < extra; ++k) {
                answer_words.push_back(distractors[static_cast<std::size_t>(
                    rng.uniform_int(0, static_cast<std::int64_t>(distractors.size()) - 1))]);
            }
            rng.shuffle(answer_words);
            ex.provided_answer = "it involves";
            for (const std::string& w : answer_words) ex.provided_answer += " " + w;
        }

        ex.feedback = detail::band_phrase(ex.score);
        if (covered < kConceptsPerQuestion) {
            int listed = 0;
            for (std::size_t k = 0; k < present.size() && listed < 2; ++k) {
                if (!present[k]) {
                    ex.feedback += " " + q.concepts[k];
                    ++listed;
                }
            }
            ex.feedback += " .";
        }
        return ex;
    };

    for (std::size_t i = 0; i < n_train; ++i) {
        splits.train.push_back(make_example(static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(seen_questions) - 1))));
    }
    for (std::size_t i = 0; i < n_val; ++i) {
        splits.validation.push_back(make_example(static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(seen_questions) - 1))));
    }
    for (std::size_t i = 0; i < n_ua; ++i) {
        splits.test_unseen_answers.push_back(make_example(static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(seen_questions) - 1))));
    }
    for (std::size_t i = 0; i < n_uq; ++i) {
        splits.test_unseen_questions.push_back(make_example(
            seen_questions + static_cast<std::size_t>(rng.uniform_int(
                                 0, static_cast<std::int64_t>(uq_questions) - 1))));
    }
    return splits;
}

/// Fraction of the question's key concepts present in an answer; recomputes
/// the stored raw score of synthetic examples exactly.
inline double concept_coverage(const GradingExample& ex) {
    const std::vector<std::string> ref = tokenize_words(ex.reference_answer);
    // reference format: "the key points are <c1> ... <cK> ."
    std::vector<std::string> concepts;
    for (const std::string& w : ref) {
        if (w == "the" || w == "key" || w == "points" || w == "are" || w == ".") continue;
        concepts.push_back(w);
    }
    if (concepts.empty()) return 0.0;
    std::unordered_set<std::string> answer_tokens;
    for (std::string& w : tokenize_words(ex.provided_answer)) answer_tokens.insert(std::move(w));
    std::size_t covered = 0;
    for (const std::string& c : concepts) covered += answer_tokens.count(c);
    return static_cast<double>(covered) / static_cast<double>(concepts.size());
}

} // namespace qgrade
