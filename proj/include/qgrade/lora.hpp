// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "qgrade/error.hpp"
#include "qgrade/quant.hpp"
#include "qgrade/rng.hpp"
#include "qgrade/tensor.hpp"

namespace qgrade {

inline constexpr double kLoraInitStd = 0.02;

/// Low-rank adapter: effective update (alpha/rank) * B * A over a frozen
/// base weight [d_out, d_in]. B starts at zero so the adapted layer equals
/// the base layer exactly at creation.
struct LoraAdapter {
    Tensor a;      // [rank, d_in], Gaussian init
    Tensor b;      // [d_out, rank], zero init
    int rank = 0;
    double alpha = 0.0;
    std::uint64_t seed = 0;

    std::size_t d_in() const { return a.dim(1); }
    std::size_t d_out() const { return b.dim(0); }
    double scaling() const { return alpha / static_cast<double>(rank); }
};

inline LoraAdapter lora_init(std::size_t d_in, std::size_t d_out, int rank, double alpha,
                             std::uint64_t seed) {
    require(rank >= 1 && static_cast<std::size_t>(rank) <= std::min(d_in, d_out),
            ErrorCode::invalid_rank,
            "rank must be in [1, min(d_in, d_out)], got " + std::to_string(rank));
    require(alpha > 0.0, ErrorCode::invalid_alpha, "alpha must be > 0");

    LoraAdapter adapter;
    adapter.rank = rank;
    adapter.alpha = alpha;
    adapter.seed = seed;
    adapter.a = Tensor::zeros({static_cast<std::size_t>(rank), d_in}, true);
    adapter.b = Tensor::zeros({d_out, static_cast<std::size_t>(rank)}, true);
    Rng rng(seed);
    for (std::size_t i = 0; i < adapter.a.size(); ++i) adapter.a.data()[i] = kLoraInitStd * rng.gaussian();
    return adapter;
}

/// W0 + (alpha/rank) * B * A; inputs are untouched.
inline Tensor lora_merge(const Tensor& w0, const LoraAdapter& adapter) {
    require(w0.rank() == 2, ErrorCode::shape_mismatch, "base weight must be rank-2");
    require(w0.dim(0) == adapter.d_out() && w0.dim(1) == adapter.d_in(), ErrorCode::shape_mismatch,
            "base weight shape does not match adapter");
    Tensor merged = w0.clone(false);
    // merged += scaling * B * A
    Tensor delta = Tensor::zeros(w0.shape());
    detail::mm_nn(adapter.b.data(), adapter.a.data(), delta.data(), adapter.d_out(),
                  static_cast<std::size_t>(adapter.rank), adapter.d_in());
    const double s = adapter.scaling();
    for (std::size_t i = 0; i < merged.size(); ++i) merged.data()[i] += s * delta.data()[i];
    return merged;
}

/// Adapter contribution for row-major activations x [batch, d_in]:
/// scaling * (x A^T) B^T. Gradients flow into A and B (and x).
inline Tensor lora_delta(Graph& g, const LoraAdapter& adapter, const Tensor& x) {
    Tensor xa = matmul_nt(g, x, adapter.a);       // [batch, rank]
    Tensor xab = matmul_nt(g, xa, adapter.b);     // [batch, d_out]
    return scale(g, xab, adapter.scaling());
}

/// Linear layer with a frozen absmax-quantized base, an optional low-rank
/// adapter, and an optional frozen bias. The dequantized base is cached at
/// construction; training never touches codes or scales.
struct QLoraLinear {
    QuantizedTensor base;     // frozen [d_out, d_in]
    Tensor base_dequantized;  // cache of dequantize(base), frozen
    std::optional<LoraAdapter> adapter;
    std::optional<Tensor> bias; // [d_out], frozen

    static QLoraLinear wrap(const Tensor& weight, int bits, std::size_t block_size,
                            std::optional<LoraAdapter> adapter = std::nullopt,
                            std::optional<Tensor> bias = std::nullopt) {
        QLoraLinear layer;
        layer.base = quantize_absmax(weight, bits, block_size);
        layer.base_dequantized = dequantize(layer.base);
        layer.adapter = std::move(adapter);
        layer.bias = std::move(bias);
        if (layer.bias) layer.bias->set_requires_grad(false);
        return layer;
    }

    std::size_t d_in() const { return base.shape[1]; }
    std::size_t d_out() const { return base.shape[0]; }
};

/// x [d_in] -> [d_out], or x [batch, d_in] -> [batch, d_out], computing
/// dequantize(base) . x + scaling * B (A x) + bias per row.
inline Tensor qlora_forward(Graph& g, const QLoraLinear& layer, const Tensor& x) {
    const bool vector_input = x.rank() == 1;
    Tensor rows = x;
    if (vector_input) {
        require(x.dim(0) == layer.d_in(), ErrorCode::shape_mismatch, "input length != d_in");
        rows = reshape(g, x, {1, x.dim(0)});
    } else {
        require(x.rank() == 2 && x.dim(1) == layer.d_in(), ErrorCode::shape_mismatch,
                "input columns != d_in");
    }
    Tensor y = matmul_nt(g, rows, layer.base_dequantized);
    if (layer.adapter) y = add(g, y, lora_delta(g, *layer.adapter, rows));
    if (layer.bias) y = add_row_vector(g, y, *layer.bias);
    if (vector_input) return reshape(g, y, {layer.d_out()});
    return y;
}

/// count(trainable) / count(total); quantized base elements count as
/// parameters in the denominator.
inline double trainable_fraction(std::size_t trainable_count, std::size_t total_count) {
    if (total_count == 0) return 0.0;
    return static_cast<double>(trainable_count) / static_cast<double>(total_count);
}

} // namespace qgrade
