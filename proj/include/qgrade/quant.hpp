// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <vector>

#include "qgrade/error.hpp"
#include "qgrade/tensor.hpp"

namespace qgrade {

/// Absmax-quantized tensor: one integer code per element plus one scale per
/// block of consecutive elements (row-major order, last block may be short).
/// A scale of exactly 0 marks an all-zero block.
struct QuantizedTensor {
    std::vector<std::int8_t> codes;
    std::vector<double> scales;
    int bits = 4; // 4 or 8
    std::size_t block_size = 64;
    std::vector<std::size_t> shape;

    int qmax() const { return bits == 4 ? 7 : 127; }
    std::size_t size() const { return codes.size(); }
    std::size_t block_count() const { return scales.size(); }

    bool operator==(const QuantizedTensor& other) const = default;
};

namespace detail {

inline double round_half_away(double v) {
    // std::round rounds halfway cases away from zero
    return std::round(v);
}

} // namespace detail

/// Per block: scale = absmax, code_i = round(qmax * x_i / scale) clamped to
/// [-qmax, qmax], rounding half away from zero.
inline QuantizedTensor quantize_absmax(const Tensor& x, int bits, std::size_t block_size) {
    require(bits == 4 || bits == 8, ErrorCode::invalid_block_size, "bits must be 4 or 8");
    require(block_size >= 1, ErrorCode::invalid_block_size, "block_size must be positive");
    require(x.all_finite(), ErrorCode::non_finite_input, "cannot quantize non-finite values");

    QuantizedTensor q;
    q.bits = bits;
    q.block_size = block_size;
    q.shape = x.shape();
    const std::size_t n = x.size();
    q.codes.resize(n);
    q.scales.resize((n + block_size - 1) / block_size);

    const double qmax = static_cast<double>(q.qmax());
    for (std::size_t b = 0; b < q.scales.size(); ++b) {
        const std::size_t lo = b * block_size;
        const std::size_t hi = std::min(lo + block_size, n);
        double absmax = 0.0;
        for (std::size_t i = lo; i < hi; ++i) absmax = std::max(absmax, std::abs(x.data()[i]));
        q.scales[b] = absmax;
        if (absmax == 0.0) {
            for (std::size_t i = lo; i < hi; ++i) q.codes[i] = 0;
            continue;
        }
        for (std::size_t i = lo; i < hi; ++i) {
            double c = detail::round_half_away(qmax * (x.data()[i] / absmax));
            c = std::min(qmax, std::max(-qmax, c));
            q.codes[i] = static_cast<std::int8_t>(c);
        }
    }
    return q;
}

inline Tensor dequantize(const QuantizedTensor& q) {
    Tensor out = Tensor::zeros(q.shape);
    const double qmax = static_cast<double>(q.qmax());
    const std::size_t n = q.codes.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double s = q.scales[i / q.block_size];
        // (code/qmax)*s so the +-qmax endpoints reproduce the scale exactly,
        // which keeps re-quantization idempotent
        out.data()[i] = s == 0.0 ? 0.0 : static_cast<double>(q.codes[i]) / qmax * s;
    }
    return out;
}

struct RoundtripError {
    double max_abs = 0.0;
    double mean_abs = 0.0;
    double bound = 0.0; // max over blocks of scale / (2 * qmax)
};

inline RoundtripError roundtrip_error(const Tensor& x, int bits, std::size_t block_size) {
    const QuantizedTensor q = quantize_absmax(x, bits, block_size);
    const Tensor back = dequantize(q);
    RoundtripError e;
    for (double s : q.scales) e.bound = std::max(e.bound, s / (2.0 * static_cast<double>(q.qmax())));
    double sum = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = std::abs(x.data()[i] - back.data()[i]);
        e.max_abs = std::max(e.max_abs, d);
        sum += d;
    }
    e.mean_abs = sum / static_cast<double>(x.size());
    return e;
}

// ---------------------------------------------------------------------------
// checkpoint byte layout: int4 packed two codes per byte (low nibble first,
// two's complement in 4 bits), int8 one code per byte
// ---------------------------------------------------------------------------

inline std::vector<std::uint8_t> pack_codes(const QuantizedTensor& q) {
    std::vector<std::uint8_t> bytes;
    if (q.bits == 8) {
        bytes.reserve(q.codes.size());
        for (std::int8_t c : q.codes) bytes.push_back(static_cast<std::uint8_t>(c));
        return bytes;
    }
    bytes.assign((q.codes.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < q.codes.size(); ++i) {
        const std::uint8_t nibble = static_cast<std::uint8_t>(q.codes[i]) & 0x0F;
        if (i % 2 == 0) {
            bytes[i / 2] = nibble;
        } else {
            bytes[i / 2] |= static_cast<std::uint8_t>(nibble << 4);
        }
    }
    return bytes;
}

inline std::vector<std::int8_t> unpack_codes(const std::vector<std::uint8_t>& bytes, int bits,
                                             std::size_t count) {
    std::vector<std::int8_t> codes(count);
    if (bits == 8) {
        require(bytes.size() == count, ErrorCode::parse_error, "int8 code byte count mismatch");
        for (std::size_t i = 0; i < count; ++i) codes[i] = static_cast<std::int8_t>(bytes[i]);
        return codes;
    }
    require(bytes.size() == (count + 1) / 2, ErrorCode::parse_error, "int4 code byte count mismatch");
    for (std::size_t i = 0; i < count; ++i) {
        std::uint8_t nibble = i % 2 == 0 ? (bytes[i / 2] & 0x0F) : (bytes[i / 2] >> 4);
        // sign-extend 4-bit two's complement
        codes[i] = static_cast<std::int8_t>(nibble >= 8 ? static_cast<int>(nibble) - 16
                                                        : static_cast<int>(nibble));
    }
    return codes;
}

} // namespace qgrade
