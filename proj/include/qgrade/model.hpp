// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "qgrade/error.hpp"
#include "qgrade/lora.hpp"
#include "qgrade/quant.hpp"
#include "qgrade/rng.hpp"
#include "qgrade/tensor.hpp"

namespace qgrade {

inline constexpr double kLayerNormEps = 1e-5;
inline constexpr double kInitStd = 0.02;

enum class HeadKind : std::uint8_t { lm, regression, classification };
enum class TuneMode : std::uint8_t { lora, heads, full };

struct ModelConfig {
    int vocab_size = 512;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int max_seq_len = 512;
    HeadKind head_kind = HeadKind::regression;
    int n_classes = 11;
    bool quantize_base = false;
    TuneMode tune = TuneMode::full;
    int lora_rank = 8;
    double lora_alpha = 16.0;
    int quant_bits = 4;
    int quant_block_size = 64;

    void validate() const {
        require(vocab_size >= 6, ErrorCode::invalid_config, "vocab_size must cover reserved ids");
        require(d_model >= 1 && n_heads >= 1 && n_layers >= 1, ErrorCode::invalid_config,
                "model dims must be positive");
        require(d_model % n_heads == 0, ErrorCode::invalid_config, "d_model not divisible by n_heads");
        require(max_seq_len >= 1, ErrorCode::invalid_config, "max_seq_len must be >= 1");
        if (head_kind == HeadKind::classification) {
            require(n_classes >= 2, ErrorCode::invalid_config, "classification needs >= 2 classes");
        }
        require(quant_bits == 4 || quant_bits == 8, ErrorCode::invalid_config, "quant bits must be 4 or 8");
        require(quant_block_size >= 1, ErrorCode::invalid_config, "quant block size must be positive");
        require(lora_rank >= 1 && lora_alpha > 0.0, ErrorCode::invalid_config, "bad lora settings");
        require(!(quantize_base && tune == TuneMode::full), ErrorCode::invalid_config,
                "full tuning cannot update a quantized base");
    }
};

/// Weight matrix [d_out, d_in] applied to row-major activations, with an
/// optional frozen quantized base and optional low-rank adapter.
struct Linear {
    Tensor weight;                      // full-precision path
    std::optional<QLoraLinear> quantized;
    std::optional<LoraAdapter> adapter; // adapter over a full-precision frozen base

    Tensor forward(Graph& g, const Tensor& x) const {
        if (quantized) return qlora_forward(g, *quantized, x);
        Tensor y = matmul_nt(g, x, weight);
        if (adapter) y = add(g, y, lora_delta(g, *adapter, x));
        return y;
    }

    const LoraAdapter* adapter_ptr() const {
        if (quantized && quantized->adapter) return &*quantized->adapter;
        if (adapter) return &*adapter;
        return nullptr;
    }
    LoraAdapter* adapter_ptr() {
        return const_cast<LoraAdapter*>(static_cast<const Linear*>(this)->adapter_ptr());
    }
};

struct Block {
    Tensor ln1_gain, ln1_bias;
    Linear wq, wk, wv, wo;
    Tensor ln2_gain, ln2_bias;
    Linear w1, w2; // MLP up [4d, d] and down [d, 4d]
};

/// Pre-norm decoder-only transformer with learned positional embeddings and
/// one task head (next-token, regression, or grade-bin classification).
struct Model {
    ModelConfig config;
    std::uint64_t seed = 0;
    Tensor tok_emb;  // [vocab, d]
    Tensor pos_emb;  // [max_seq_len, d]
    std::vector<Block> blocks;
    Tensor final_gain, final_bias;
    Tensor head_weight; // lm [vocab, d]; regression [1, d]; classification [n_classes, d]
    Tensor head_bias;   // regression [1]; classification [n_classes]; undefined for lm
};

namespace detail {

inline void visit_linears(Model& m, const std::function<void(const std::string&, Linear&)>& fn) {
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        Block& b = m.blocks[i];
        fn(p + "wq", b.wq);
        fn(p + "wk", b.wk);
        fn(p + "wv", b.wv);
        fn(p + "wo", b.wo);
        fn(p + "w1", b.w1);
        fn(p + "w2", b.w2);
    }
}

} // namespace detail

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

/// All full-precision parameter tensors in declaration order (adapters
/// included, quantized bases excluded; those live in the qbase section).
inline std::vector<NamedTensor> named_parameters(Model& m) {
    std::vector<NamedTensor> out;
    out.push_back({"tok_emb", m.tok_emb});
    out.push_back({"pos_emb", m.pos_emb});
    for (std::size_t i = 0; i < m.blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + ".";
        Block& b = m.blocks[i];
        out.push_back({p + "ln1_gain", b.ln1_gain});
        out.push_back({p + "ln1_bias", b.ln1_bias});
        out.push_back({p + "ln2_gain", b.ln2_gain});
        out.push_back({p + "ln2_bias", b.ln2_bias});
        for (auto [name, lin] : {std::pair<std::string, Linear*>{p + "wq", &b.wq},
                                 {p + "wk", &b.wk},
                                 {p + "wv", &b.wv},
                                 {p + "wo", &b.wo},
                                 {p + "w1", &b.w1},
                                 {p + "w2", &b.w2}}) {
            if (!lin->quantized) out.push_back({name + ".weight", lin->weight});
            if (LoraAdapter* ad = lin->adapter_ptr()) {
                out.push_back({name + ".lora_a", ad->a});
                out.push_back({name + ".lora_b", ad->b});
            }
        }
    }
    out.push_back({"final_gain", m.final_gain});
    out.push_back({"final_bias", m.final_bias});
    out.push_back({"head_weight", m.head_weight});
    if (m.head_bias.defined()) out.push_back({"head_bias", m.head_bias});
    return out;
}

inline std::vector<Tensor> trainable_parameters(Model& m) {
    std::vector<Tensor> out;
    for (auto& np : named_parameters(m)) {
        if (np.tensor.requires_grad()) out.push_back(np.tensor);
    }
    return out;
}

inline std::size_t total_parameter_count(Model& m) {
    std::size_t total = 0;
    for (auto& np : named_parameters(m)) total += np.tensor.size();
    detail::visit_linears(m, [&](const std::string&, Linear& lin) {
        if (lin.quantized) total += lin.quantized->base.size();
    });
    return total;
}

inline std::size_t trainable_parameter_count(Model& m) {
    std::size_t count = 0;
    for (auto& t : trainable_parameters(m)) count += t.size();
    return count;
}

inline double trainable_fraction(Model& m) {
    return trainable_fraction(trainable_parameter_count(m), total_parameter_count(m));
}

inline void zero_grads(Model& m) {
    for (auto& t : trainable_parameters(m)) t.zero_grad();
}

inline Model build_model(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    Model m;
    m.config = config;
    m.seed = seed;
    Rng rng(derive_seed(seed, 0x6d6f64ULL));
    const auto d = static_cast<std::size_t>(config.d_model);
    const auto v = static_cast<std::size_t>(config.vocab_size);

    auto gauss = [&rng](std::vector<std::size_t> shape) {
        Tensor t = Tensor::zeros(std::move(shape));
        for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = kInitStd * rng.gaussian();
        return t;
    };
    auto ones = [](std::size_t n) {
        Tensor t = Tensor::zeros({n});
        for (std::size_t i = 0; i < n; ++i) t.data()[i] = 1.0;
        return t;
    };

    m.tok_emb = gauss({v, d});
    m.pos_emb = gauss({static_cast<std::size_t>(config.max_seq_len), d});

    int adapter_index = 0;
    auto make_linear = [&](std::size_t d_out, std::size_t d_in, bool adapted) {
        Tensor w = gauss({d_out, d_in});
        std::optional<LoraAdapter> ad;
        if (adapted && config.tune == TuneMode::lora) {
            ad = lora_init(d_in, d_out, config.lora_rank, config.lora_alpha,
                           derive_seed(seed, 0x10000ULL + static_cast<std::uint64_t>(adapter_index++)));
        }
        Linear lin;
        if (config.quantize_base) {
            lin.quantized = QLoraLinear::wrap(w, config.quant_bits,
                                              static_cast<std::size_t>(config.quant_block_size),
                                              std::move(ad));
        } else {
            lin.weight = w;
            lin.adapter = std::move(ad);
        }
        return lin;
    };

    for (int i = 0; i < config.n_layers; ++i) {
        Block b;
        b.ln1_gain = ones(d);
        b.ln1_bias = Tensor::zeros({d});
        // adapters attach to the attention query/value projections and the
        // MLP down projection
        b.wq = make_linear(d, d, true);
        b.wk = make_linear(d, d, false);
        b.wv = make_linear(d, d, true);
        b.wo = make_linear(d, d, false);
        b.ln2_gain = ones(d);
        b.ln2_bias = Tensor::zeros({d});
        b.w1 = make_linear(4 * d, d, false);
        b.w2 = make_linear(d, 4 * d, true);
        m.blocks.push_back(std::move(b));
    }
    m.final_gain = ones(d);
    m.final_bias = Tensor::zeros({d});

    // task heads start at zero: the fresh regression head outputs 0.5 and
    // the fresh LM head yields exactly uniform logits
    switch (config.head_kind) {
        case HeadKind::lm:
            m.head_weight = Tensor::zeros({v, d});
            break;
        case HeadKind::regression:
            m.head_weight = Tensor::zeros({1, d});
            m.head_bias = Tensor::zeros({1});
            break;
        case HeadKind::classification:
            m.head_weight = Tensor::zeros({static_cast<std::size_t>(config.n_classes), d});
            m.head_bias = Tensor::zeros({static_cast<std::size_t>(config.n_classes)});
            break;
    }

    // freeze/unfreeze per tune mode (adapters are always trainable)
    const bool train_weights = config.tune == TuneMode::full;
    const bool train_embeddings = config.tune != TuneMode::lora;
    m.tok_emb.set_requires_grad(train_embeddings);
    m.pos_emb.set_requires_grad(train_embeddings);
    for (auto& b : m.blocks) {
        for (Tensor* t : {&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias}) {
            t->set_requires_grad(true);
        }
        for (Linear* lin : {&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2}) {
            if (!lin->quantized) lin->weight.set_requires_grad(train_weights);
        }
    }
    m.final_gain.set_requires_grad(true);
    m.final_bias.set_requires_grad(true);
    m.head_weight.set_requires_grad(true);
    if (m.head_bias.defined()) m.head_bias.set_requires_grad(true);
    return m;
}

namespace detail {

inline void check_token_ids(const Model& m, std::span<const int> ids) {
    require(!ids.empty(), ErrorCode::empty_input, "token sequence is empty");
    require(ids.size() <= static_cast<std::size_t>(m.config.max_seq_len), ErrorCode::sequence_too_long,
            "sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len");
    for (int id : ids) {
        require(id >= 0 && id < m.config.vocab_size, ErrorCode::token_out_of_range,
                "token id " + std::to_string(id) + " outside vocab");
    }
}

} // namespace detail

/// Final-norm hidden states [T, d_model] for a token sequence.
inline Tensor hidden_states(Graph& g, const Model& m, std::span<const int> ids) {
    detail::check_token_ids(m, ids);
    const int n_heads = m.config.n_heads;
    const double inv_sqrt_hd =
        1.0 / std::sqrt(static_cast<double>(m.config.d_model / m.config.n_heads));

    std::vector<int> tok(ids.begin(), ids.end());
    std::vector<int> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);

    Tensor x = add(g, gather_rows(g, m.tok_emb, tok), gather_rows(g, m.pos_emb, pos));
    for (const Block& b : m.blocks) {
        Tensor xn = layer_norm(g, x, b.ln1_gain, b.ln1_bias, kLayerNormEps);
        Tensor qh = split_heads(g, b.wq.forward(g, xn), n_heads);
        Tensor kh = split_heads(g, b.wk.forward(g, xn), n_heads);
        Tensor vh = split_heads(g, b.wv.forward(g, xn), n_heads);
        Tensor scores = scale(g, bmm_nt(g, qh, kh), inv_sqrt_hd);
        Tensor probs = softmax_causal(g, scores);
        Tensor ctx = merge_heads(g, bmm(g, probs, vh));
        x = add(g, x, b.wo.forward(g, ctx));

        Tensor xn2 = layer_norm(g, x, b.ln2_gain, b.ln2_bias, kLayerNormEps);
        Tensor h = b.w2.forward(g, gelu(g, b.w1.forward(g, xn2)));
        x = add(g, x, h);
    }
    return layer_norm(g, x, m.final_gain, m.final_bias, kLayerNormEps);
}

/// Per-position next-token logits [T, vocab].
inline Tensor forward_lm(Graph& g, const Model& m, std::span<const int> ids) {
    require(m.config.head_kind == HeadKind::lm, ErrorCode::wrong_head, "model has no LM head");
    Tensor h = hidden_states(g, m, ids);
    return matmul_nt(g, h, m.head_weight);
}

namespace detail {

inline int last_non_pad_index(std::span<const int> ids, int pad_id) {
    for (std::size_t i = ids.size(); i-- > 0;) {
        if (ids[i] != pad_id) return static_cast<int>(i);
    }
    fail(ErrorCode::empty_input, "sequence contains only padding");
}

} // namespace detail

/// Regression score as a graph tensor [1]; pools the final non-pad position.
inline Tensor forward_score_graph(Graph& g, const Model& m, std::span<const int> ids, int pad_id = 0) {
    require(m.config.head_kind == HeadKind::regression, ErrorCode::wrong_head,
            "model has no regression head");
    Tensor h = hidden_states(g, m, ids);
    Tensor pooled = gather_rows(g, h, {detail::last_non_pad_index(ids, pad_id)});
    Tensor z = reshape(g, matmul_nt(g, pooled, m.head_weight), {1});
    return sigmoid(g, add(g, z, m.head_bias));
}

inline double forward_score(const Model& m, std::span<const int> ids, int pad_id = 0) {
    Graph g(false);
    return forward_score_graph(g, m, ids, pad_id).item();
}

/// Grade-bin logits [n_classes] pooled from the final non-pad position.
inline Tensor forward_class(Graph& g, const Model& m, std::span<const int> ids, int pad_id = 0) {
    require(m.config.head_kind == HeadKind::classification, ErrorCode::wrong_head,
            "model has no classification head");
    Tensor h = hidden_states(g, m, ids);
    Tensor pooled = gather_rows(g, h, {detail::last_non_pad_index(ids, pad_id)});
    Tensor z = matmul_nt(g, pooled, m.head_weight); // [1, C]
    z = add_row_vector(g, z, m.head_bias);
    return reshape(g, z, {static_cast<std::size_t>(m.config.n_classes)});
}

inline double mse_loss(std::span<const double> preds, std::span<const double> targets) {
    require(preds.size() == targets.size(), ErrorCode::length_mismatch,
            "prediction/target lengths differ");
    require(!preds.empty(), ErrorCode::empty_input, "mse on empty input");
    double sum = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) {
        const double d = preds[i] - targets[i];
        sum += d * d;
    }
    return sum / static_cast<double>(preds.size());
}

struct DecodeConfig {
    enum class Mode : std::uint8_t { greedy, sample };
    Mode mode = Mode::greedy;
    double temperature = 1.0;
    int max_new_tokens = 32;
    int stop_id = -1; // -1 disables the stop check
    std::uint64_t seed = 0;
};

/// Autoregressive decoding. Greedy mode is deterministic (ties break toward
/// the lowest id); the stop token is not included in the returned sequence.
inline std::vector<int> generate(const Model& m, std::span<const int> prompt, const DecodeConfig& cfg) {
    require(m.config.head_kind == HeadKind::lm, ErrorCode::wrong_head, "generation needs an LM head");
    detail::check_token_ids(m, prompt);
    if (cfg.mode == DecodeConfig::Mode::sample) {
        require(cfg.temperature > 0.0, ErrorCode::invalid_config, "sampling temperature must be > 0");
    }

    std::vector<int> ids(prompt.begin(), prompt.end());
    Rng rng(cfg.seed);
    const int budget =
        std::min(cfg.max_new_tokens, m.config.max_seq_len - static_cast<int>(prompt.size()));
    for (int step = 0; step < budget; ++step) {
        Graph g(false);
        Tensor logits = forward_lm(g, m, ids);
        const std::size_t vocab = logits.dim(1);
        const double* row = logits.data() + (logits.dim(0) - 1) * vocab;

        int next = 0;
        if (cfg.mode == DecodeConfig::Mode::greedy) {
            for (std::size_t j = 1; j < vocab; ++j) {
                if (row[j] > row[next]) next = static_cast<int>(j);
            }
        } else {
            double mx = row[0];
            for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
            std::vector<double> probs(vocab);
            double sum = 0.0;
            for (std::size_t j = 0; j < vocab; ++j) {
                probs[j] = std::exp((row[j] - mx) / cfg.temperature);
                sum += probs[j];
            }
            double r = rng.uniform() * sum;
            double acc = 0.0;
            next = static_cast<int>(vocab) - 1;
            for (std::size_t j = 0; j < vocab; ++j) {
                acc += probs[j];
                if (r < acc) {
                    next = static_cast<int>(j);
                    break;
                }
            }
        }
        if (next == cfg.stop_id) break;
        ids.push_back(next);
    }
    return ids;
}

} // namespace qgrade
