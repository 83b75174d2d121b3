// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "qgrade/data.hpp"
#include "qgrade/error.hpp"
#include "qgrade/io.hpp"
#include "qgrade/model.hpp"
#include "qgrade/pipeline.hpp"

namespace qgrade {

inline constexpr std::string_view kCheckpointMagic = "QGRD1";
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
    std::uint64_t seed = 0;
    std::uint32_t best_epoch = 0;
    std::uint64_t config_hash = 0;
    GenMode generator_mode = GenMode::without_grade; // feedback checkpoints only
};

struct Checkpoint {
    Model model;
    Vocab vocab;
    CheckpointMeta meta;
};

/// FNV-1a over a canonical configuration string.
inline std::uint64_t fnv1a_hash(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : text) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

namespace detail {

inline void write_dims(ByteWriter& w, const Tensor& t) {
    w.u8(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
}

inline std::vector<std::size_t> read_dims(ByteReader& r) {
    const std::uint8_t rank = r.u8();
    require(rank >= 1 && rank <= 3, ErrorCode::parse_error, "bad tensor rank in checkpoint");
    std::vector<std::size_t> dims(rank);
    for (auto& d : dims) d = r.u64();
    return dims;
}

inline void write_tensor_payload(ByteWriter& w, const Tensor& t) {
    write_dims(w, t);
    for (std::size_t i = 0; i < t.size(); ++i) w.f64(t.data()[i]);
}

inline void read_tensor_payload(ByteReader& r, Tensor& t) {
    const auto dims = read_dims(r);
    require(dims == t.shape(), ErrorCode::incompatible_checkpoint,
            "stored tensor shape does not match the model config");
    for (std::size_t i = 0; i < t.size(); ++i) t.data()[i] = r.f64();
}

inline void write_config(ByteWriter& w, const ModelConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.vocab_size));
    w.u32(static_cast<std::uint32_t>(c.d_model));
    w.u32(static_cast<std::uint32_t>(c.n_heads));
    w.u32(static_cast<std::uint32_t>(c.n_layers));
    w.u32(static_cast<std::uint32_t>(c.max_seq_len));
    w.u8(static_cast<std::uint8_t>(c.head_kind));
    w.u32(static_cast<std::uint32_t>(c.n_classes));
    w.u8(c.quantize_base ? 1 : 0);
    w.u8(static_cast<std::uint8_t>(c.tune));
    w.u32(static_cast<std::uint32_t>(c.lora_rank));
    w.f64(c.lora_alpha);
    w.u32(static_cast<std::uint32_t>(c.quant_bits));
    w.u32(static_cast<std::uint32_t>(c.quant_block_size));
}

inline ModelConfig read_config(ByteReader& r) {
    ModelConfig c;
    c.vocab_size = static_cast<int>(r.u32());
    c.d_model = static_cast<int>(r.u32());
    c.n_heads = static_cast<int>(r.u32());
    c.n_layers = static_cast<int>(r.u32());
    c.max_seq_len = static_cast<int>(r.u32());
    c.head_kind = static_cast<HeadKind>(r.u8());
    c.n_classes = static_cast<int>(r.u32());
    c.quantize_base = r.u8() != 0;
    c.tune = static_cast<TuneMode>(r.u8());
    c.lora_rank = static_cast<int>(r.u32());
    c.lora_alpha = r.f64();
    c.quant_bits = static_cast<int>(r.u32());
    c.quant_block_size = static_cast<int>(r.u32());
    c.validate();
    return c;
}

inline bool is_adapter_param(std::string_view name) {
    return name.ends_with(".lora_a") || name.ends_with(".lora_b");
}

} // namespace detail

/// Sectioned little-endian binary: magic, version, section table (name,
/// offset, size), payloads. Sections: meta, config, vocab, params, qbase,
/// adapters. Saving the result of a load is byte-identical.
inline std::string serialize_checkpoint(Model& model, const Vocab& vocab,
                                        const CheckpointMeta& meta) {
    std::vector<std::pair<std::string, std::string>> sections;

    {
        ByteWriter w;
        w.u64(meta.seed);
        w.u32(meta.best_epoch);
        w.u64(meta.config_hash);
        w.u8(static_cast<std::uint8_t>(meta.generator_mode));
        sections.emplace_back("meta", w.data());
    }
    {
        ByteWriter w;
        detail::write_config(w, model.config);
        sections.emplace_back("config", w.data());
    }
    {
        ByteWriter w;
        w.u32(static_cast<std::uint32_t>(vocab.tokens.size()));
        for (const std::string& tok : vocab.tokens) w.str(tok);
        sections.emplace_back("vocab", w.data());
    }
    {
        ByteWriter w;
        std::uint32_t count = 0;
        for (const NamedTensor& np : named_parameters(model)) {
            if (!detail::is_adapter_param(np.name)) ++count;
        }
        w.u32(count);
        for (NamedTensor& np : named_parameters(model)) {
            if (detail::is_adapter_param(np.name)) continue;
            w.str(np.name);
            w.u8(np.tensor.requires_grad() ? 1 : 0);
            detail::write_tensor_payload(w, np.tensor);
        }
        sections.emplace_back("params", w.data());
    }
    if (model.config.quantize_base) {
        ByteWriter w;
        std::uint32_t count = 0;
        detail::visit_linears(model, [&](const std::string&, Linear& lin) {
            if (lin.quantized) ++count;
        });
        w.u32(count);
        detail::visit_linears(model, [&](const std::string& name, Linear& lin) {
            if (!lin.quantized) return;
            const QuantizedTensor& q = lin.quantized->base;
            w.str(name);
            w.u8(static_cast<std::uint8_t>(q.bits));
            w.u64(q.block_size);
            w.u8(static_cast<std::uint8_t>(q.shape.size()));
            for (std::size_t d : q.shape) w.u64(d);
            w.u64(q.codes.size());
            const std::vector<std::uint8_t> packed = pack_codes(q);
            w.u64(packed.size());
            w.bytes(packed.data(), packed.size());
            w.u64(q.scales.size());
            for (double s : q.scales) w.f64(s);
        });
        sections.emplace_back("qbase", w.data());
    }
    if (model.config.tune == TuneMode::lora) {
        ByteWriter w;
        std::uint32_t count = 0;
        detail::visit_linears(model, [&](const std::string&, Linear& lin) {
            if (lin.adapter_ptr() != nullptr) ++count;
        });
        w.u32(count);
        detail::visit_linears(model, [&](const std::string& name, Linear& lin) {
            const LoraAdapter* ad = lin.adapter_ptr();
            if (ad == nullptr) return;
            w.str(name);
            w.u32(static_cast<std::uint32_t>(ad->rank));
            w.f64(ad->alpha);
            w.u64(ad->seed);
            detail::write_tensor_payload(w, ad->a);
            detail::write_tensor_payload(w, ad->b);
        });
        sections.emplace_back("adapters", w.data());
    }

    // header: magic, version, section count, then the table with payload
    // offsets measured from the start of the file
    ByteWriter header;
    header.raw(kCheckpointMagic);
    header.u32(kCheckpointVersion);
    header.u32(static_cast<std::uint32_t>(sections.size()));
    std::size_t table_size = 0;
    for (const auto& [name, payload] : sections) table_size += 4 + name.size() + 16;
    std::size_t offset = kCheckpointMagic.size() + 8 + table_size;
    for (const auto& [name, payload] : sections) {
        header.str(name);
        header.u64(offset);
        header.u64(payload.size());
        offset += payload.size();
    }
    std::string out = header.data();
    for (const auto& [name, payload] : sections) out += payload;
    return out;
}

inline void save_checkpoint(const std::string& path, Model& model, const Vocab& vocab,
                            const CheckpointMeta& meta) {
    write_file_atomic(path, serialize_checkpoint(model, vocab, meta));
}

struct CheckpointSections {
    std::uint32_t version = 0;
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> table;
};

inline CheckpointSections read_checkpoint_header(ByteReader& r) {
    const auto magic = r.bytes(kCheckpointMagic.size());
    require(std::string_view(reinterpret_cast<const char*>(magic.data()), magic.size()) ==
                kCheckpointMagic,
            ErrorCode::parse_error, "not a checkpoint file (bad magic)");
    CheckpointSections s;
    s.version = r.u32();
    require(s.version == kCheckpointVersion, ErrorCode::parse_error,
            "unsupported checkpoint version " + std::to_string(s.version));
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        const std::size_t off = r.u64();
        const std::size_t size = r.u64();
        s.table.emplace_back(std::move(name), std::make_pair(off, size));
    }
    return s;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
    ByteReader r(bytes);
    const CheckpointSections sections = read_checkpoint_header(r);
    auto section = [&](std::string_view name, bool required) -> std::optional<ByteReader> {
        for (const auto& [n, range] : sections.table) {
            if (n == name) {
                require(range.first + range.second <= bytes.size(), ErrorCode::parse_error,
                        "section extends past end of file");
                return ByteReader(bytes.substr(range.first, range.second));
            }
        }
        require(!required, ErrorCode::parse_error,
                "checkpoint is missing section '" + std::string(name) + "'");
        return std::nullopt;
    };

    Checkpoint ckpt;
    {
        ByteReader s = *section("meta", true);
        ckpt.meta.seed = s.u64();
        ckpt.meta.best_epoch = s.u32();
        ckpt.meta.config_hash = s.u64();
        ckpt.meta.generator_mode = static_cast<GenMode>(s.u8());
    }
    ModelConfig config;
    {
        ByteReader s = *section("config", true);
        config = detail::read_config(s);
    }
    {
        ByteReader s = *section("vocab", true);
        const std::uint32_t count = s.u32();
        for (std::uint32_t i = 0; i < count; ++i) {
            std::string tok = s.str();
            ckpt.vocab.to_id.emplace(tok, static_cast<int>(i));
            ckpt.vocab.tokens.push_back(std::move(tok));
        }
        require(ckpt.vocab.tokens.size() >= 5, ErrorCode::parse_error, "vocab missing reserved ids");
    }

    // rebuild the structure, then overwrite every stored value
    ckpt.model = build_model(config, ckpt.meta.seed);
    {
        ByteReader s = *section("params", true);
        const std::uint32_t count = s.u32();
        std::map<std::string, Tensor> by_name;
        for (NamedTensor& np : named_parameters(ckpt.model)) by_name.emplace(np.name, np.tensor);
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::string name = s.str();
            const bool trainable = s.u8() != 0;
            auto it = by_name.find(name);
            require(it != by_name.end(), ErrorCode::incompatible_checkpoint,
                    "unknown parameter '" + name + "' in checkpoint");
            detail::read_tensor_payload(s, it->second);
            it->second.set_requires_grad(trainable);
        }
    }
    if (config.quantize_base) {
        ByteReader s = *section("qbase", true);
        const std::uint32_t count = s.u32();
        std::map<std::string, Linear*> by_name;
        detail::visit_linears(ckpt.model, [&](const std::string& name, Linear& lin) {
            by_name.emplace(name, &lin);
        });
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::string name = s.str();
            auto it = by_name.find(name);
            require(it != by_name.end() && it->second->quantized, ErrorCode::incompatible_checkpoint,
                    "unknown quantized layer '" + name + "'");
            QuantizedTensor q;
            q.bits = s.u8();
            q.block_size = s.u64();
            const std::uint8_t rank = s.u8();
            q.shape.resize(rank);
            for (auto& d : q.shape) d = s.u64();
            const std::size_t code_count = s.u64();
            const std::size_t byte_count = s.u64();
            q.codes = unpack_codes(s.bytes(byte_count), q.bits, code_count);
            const std::size_t scale_count = s.u64();
            q.scales.resize(scale_count);
            for (auto& v : q.scales) v = s.f64();
            require(q.codes.size() == Tensor::product(q.shape), ErrorCode::parse_error,
                    "quantized code count does not match shape");
            it->second->quantized->base = std::move(q);
            it->second->quantized->base_dequantized = dequantize(it->second->quantized->base);
        }
    }
    if (config.tune == TuneMode::lora) {
        ByteReader s = *section("adapters", true);
        const std::uint32_t count = s.u32();
        std::map<std::string, Linear*> by_name;
        detail::visit_linears(ckpt.model, [&](const std::string& name, Linear& lin) {
            by_name.emplace(name, &lin);
        });
        for (std::uint32_t i = 0; i < count; ++i) {
            const std::string name = s.str();
            auto it = by_name.find(name);
            require(it != by_name.end() && it->second->adapter_ptr() != nullptr,
                    ErrorCode::incompatible_checkpoint, "unknown adapter '" + name + "'");
            LoraAdapter* ad = it->second->adapter_ptr();
            ad->rank = static_cast<int>(s.u32());
            ad->alpha = s.f64();
            ad->seed = s.u64();
            detail::read_tensor_payload(s, ad->a);
            detail::read_tensor_payload(s, ad->b);
        }
    }
    return ckpt;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return parse_checkpoint(read_file(path));
}

} // namespace qgrade
