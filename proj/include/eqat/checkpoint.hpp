#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "eqat/data.hpp"
#include "eqat/error.hpp"
#include "eqat/model.hpp"
#include "eqat/pack.hpp"
#include "eqat/qlinear.hpp"

namespace eqat {

// Container layout:
//   "EQAT" | u32 version | u64 header length | UTF-8 JSON header | sections
// Every binary section starts on a 64-byte boundary. Tensor offsets in the
// header are relative to the start of the first section, which is the first
// 64-byte boundary after the JSON header.
inline constexpr char kCheckpointMagic[4] = {'E', 'Q', 'A', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::size_t kSectionAlign = 64;

enum class DenseStorage { automatic, f32, f16 };

struct Checkpoint {
    Model model;
    nlohmann::json meta = nlohmann::json::object();
};

namespace detail {

inline std::size_t align_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

inline nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"d_model", c.d_model},       {"n_heads", c.n_heads},
            {"d_ff", c.d_ff},         {"vocab_size", c.vocab_size}, {"max_context", c.max_context},
            {"norm_eps", c.norm_eps}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_layers = j.at("n_layers").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.n_heads = j.at("n_heads").get<std::size_t>();
    c.d_ff = j.at("d_ff").get<std::size_t>();
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.max_context = j.at("max_context").get<std::size_t>();
    c.norm_eps = j.at("norm_eps").get<float>();
    c.validate();
    return c;
}

struct Section {
    nlohmann::json record;
    std::string bytes;
};

inline std::string float_bytes(const Tensor& t, bool half) {
    std::string out;
    out.reserve(t.size() * (half ? 2 : 4));
    for (float v : t.vec()) {
        if (half) {
            put_le<std::uint16_t>(out, float_to_half(v));
        } else {
            put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
        }
    }
    return out;
}

inline std::string u16_bytes(const std::vector<std::uint16_t>& v) {
    std::string out;
    out.reserve(v.size() * 2);
    for (auto x : v) put_le<std::uint16_t>(out, x);
    return out;
}

inline bool has_quantized(Model& m) {
    bool any = false;
    m.for_each_projection([&](const std::string&, Projection& p) { any = any || is_quantized(p); });
    return any;
}

[[noreturn]] inline void format_fail(std::size_t offset, const std::string& what) {
    fail(ErrorKind::format, "offset " + std::to_string(offset) + ": " + what);
}

}  // namespace detail

inline std::string encode_checkpoint(Model& model, const nlohmann::json& meta = nlohmann::json::object(),
                                     DenseStorage dense = DenseStorage::automatic) {
    const bool quantized = detail::has_quantized(model);
    const bool half = dense == DenseStorage::f16 || (dense == DenseStorage::automatic && quantized);
    const std::string dense_dtype = half ? "f16" : "f32";

    std::vector<detail::Section> sections;
    auto add_dense = [&](const std::string& name, const Tensor& t) {
        sections.push_back({{{"name", name}, {"role", "dense"}, {"dtype", dense_dtype}, {"shape", t.shape()}},
                            detail::float_bytes(t, half)});
    };
    std::optional<QuantSpec> spec;
    model.for_each_dense([&](const std::string& name, Parameter& p) { add_dense(name, p.value); });
    model.for_each_projection([&](const std::string& name, Projection& proj) {
        if (auto* d = std::get_if<DenseLinear>(&proj)) {
            add_dense(name + ".weight", d->weight.value);
            return;
        }
        const auto& q = std::get<QuantLinear>(proj);
        require(q.mode() == QuantMode::frozen, ErrorKind::state,
                name + ": latent layers must be frozen before export");
        if (!spec) spec = q.spec();
        const PackedTensor pt = pack_layer(q);
        const std::string ubits = "u" + std::to_string(pt.bits);
        const nlohmann::json shape = {pt.out, pt.in};
        const nlohmann::json gshape = {pt.out, pt.groups_per_row()};
        sections.push_back({{{"name", name + ".weight"},
                             {"role", "qweight"},
                             {"dtype", ubits},
                             {"bits", pt.bits},
                             {"group_size", pt.group_size},
                             {"shape", shape}},
                            std::string(pt.payload.begin(), pt.payload.end())});
        if (pt.zero_storage == ZeroStorage::packed) {
            sections.push_back({{{"name", name + ".zeros"},
                                 {"role", "zeros"},
                                 {"dtype", ubits},
                                 {"bits", pt.bits},
                                 {"group_size", pt.group_size},
                                 {"shape", gshape}},
                                std::string(pt.zeros.begin(), pt.zeros.end())});
        } else {
            sections.push_back({{{"name", name + ".zeros"},
                                 {"role", "zeros"},
                                 {"dtype", "f16"},
                                 {"bits", pt.bits},
                                 {"group_size", pt.group_size},
                                 {"shape", gshape}},
                                detail::u16_bytes(pt.zeros_f16)});
        }
        sections.push_back({{{"name", name + ".scales"},
                             {"role", "scales"},
                             {"dtype", "f16"},
                             {"bits", pt.bits},
                             {"group_size", pt.group_size},
                             {"shape", gshape}},
                            detail::u16_bytes(pt.scales)});
    });

    nlohmann::json records = nlohmann::json::array();
    std::size_t cursor = 0;
    for (auto& s : sections) {
        cursor = detail::align_up(cursor, kSectionAlign);
        s.record["offset"] = cursor;
        s.record["length"] = s.bytes.size();
        records.push_back(s.record);
        cursor += s.bytes.size();
    }
    nlohmann::json header = {{"format", "eqat-checkpoint"},
                             {"version", kCheckpointVersion},
                             {"config", detail::config_to_json(model.config)},
                             {"dense_dtype", dense_dtype},
                             {"tensors", records},
                             {"meta", meta}};
    if (spec) {
        header["quant"] = {{"bits", spec->bits}, {"group_size", spec->group_size}};
    }
    const std::string text = header.dump();

    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    detail::put_le<std::uint64_t>(out, text.size());
    out += text;
    const std::size_t base = detail::align_up(out.size(), kSectionAlign);
    out.resize(base, '\0');
    for (const auto& s : sections) {
        out.resize(base + s.record["offset"].get<std::size_t>(), '\0');
        out += s.bytes;
    }
    return out;
}

struct ContainerHeader {
    std::uint32_t version = 0;
    std::size_t header_length = 0;
    std::size_t data_offset = 0;
    std::size_t file_size = 0;
    nlohmann::json json;
};

inline ContainerHeader parse_container_header(std::string_view bytes) {
    if (bytes.size() < 16) detail::format_fail(0, "file shorter than the fixed header");
    if (std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) detail::format_fail(0, "bad magic (expected EQAT)");
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    ContainerHeader h;
    h.version = detail::get_le<std::uint32_t>(p + 4);
    if (h.version != kCheckpointVersion) {
        detail::format_fail(4, "unsupported format version " + std::to_string(h.version));
    }
    const auto hlen = detail::get_le<std::uint64_t>(p + 8);
    if (hlen > bytes.size() - 16) detail::format_fail(8, "header length runs past end of file");
    h.header_length = static_cast<std::size_t>(hlen);
    h.data_offset = detail::align_up(16 + h.header_length, kSectionAlign);
    h.file_size = bytes.size();
    try {
        h.json = nlohmann::json::parse(bytes.substr(16, h.header_length));
    } catch (const nlohmann::json::exception& e) {
        detail::format_fail(16, std::string("malformed JSON header: ") + e.what());
    }
    if (!h.json.is_object() || !h.json.contains("tensors") || !h.json.contains("config")) {
        detail::format_fail(16, "header missing required fields");
    }
    // Sections must lie inside the file and must not overlap.
    std::vector<std::pair<std::size_t, std::size_t>> spans;
    for (const auto& r : h.json.at("tensors")) {
        const auto off = r.at("offset").get<std::size_t>();
        const auto len = r.at("length").get<std::size_t>();
        const std::size_t abs = h.data_offset + off;
        if (abs > bytes.size() || len > bytes.size() - abs) {
            detail::format_fail(abs, "section '" + r.at("name").get<std::string>() + "' truncated");
        }
        if (abs % kSectionAlign != 0) detail::format_fail(abs, "section not 64-byte aligned");
        spans.emplace_back(abs, len);
    }
    std::sort(spans.begin(), spans.end());
    for (std::size_t i = 1; i < spans.size(); ++i) {
        if (spans[i - 1].first + spans[i - 1].second > spans[i].first) {
            detail::format_fail(spans[i].first, "overlapping sections");
        }
    }
    return h;
}

inline Checkpoint decode_checkpoint(std::string_view bytes) {
    const ContainerHeader h = parse_container_header(bytes);
    Checkpoint ck;
    try {
        ck.model.config = detail::config_from_json(h.json.at("config"));
    } catch (const nlohmann::json::exception& e) {
        detail::format_fail(16, std::string("bad model config: ") + e.what());
    }
    if (h.json.contains("meta")) ck.meta = h.json.at("meta");

    struct Loaded {
        nlohmann::json record;
        std::string_view bytes;
        std::size_t abs;
    };
    std::map<std::string, Loaded> by_name;
    for (const auto& r : h.json.at("tensors")) {
        const std::size_t abs = h.data_offset + r.at("offset").get<std::size_t>();
        by_name[r.at("name").get<std::string>()] = {r, bytes.substr(abs, r.at("length").get<std::size_t>()), abs};
    }
    auto take = [&](const std::string& name) -> Loaded& {
        auto it = by_name.find(name);
        if (it == by_name.end()) detail::format_fail(16, "missing tensor '" + name + "'");
        return it->second;
    };
    auto read_floats = [&](const Loaded& l, const Shape& expect) {
        const auto shape = l.record.at("shape").get<Shape>();
        if (shape != expect) detail::format_fail(l.abs, "unexpected shape for " + l.record.at("name").get<std::string>());
        const std::string dtype = l.record.at("dtype").get<std::string>();
        const std::size_t width = dtype == "f16" ? 2 : dtype == "f32" ? 4 : 0;
        if (!width) detail::format_fail(l.abs, "unsupported dtype " + dtype);
        const std::size_t n = shape_size(shape);
        if (l.bytes.size() != n * width) detail::format_fail(l.abs, "section length does not match shape");
        Tensor t(shape);
        const auto* p = reinterpret_cast<const unsigned char*>(l.bytes.data());
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = width == 2 ? half_to_float(detail::get_le<std::uint16_t>(p + 2 * i))
                              : std::bit_cast<float>(detail::get_le<std::uint32_t>(p + 4 * i));
        }
        return t;
    };
    auto read_u16 = [](const Loaded& l) {
        std::vector<std::uint16_t> v(l.bytes.size() / 2);
        const auto* p = reinterpret_cast<const unsigned char*>(l.bytes.data());
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = detail::get_le<std::uint16_t>(p + 2 * i);
        return v;
    };

    const ModelConfig& c = ck.model.config;
    Model& m = ck.model;
    m.blocks.resize(c.n_layers);
    const std::size_t d = c.d_model;
    const std::array<Shape, kProjectionCount> proj_shapes = {
        Shape{d, d}, Shape{d, d}, Shape{d, d}, Shape{d, d}, Shape{c.d_ff, d}, Shape{c.d_ff, d}, Shape{d, c.d_ff}};
    auto dense_shape = [&](const std::string& name) -> Shape {
        if (name == "tok_embed" || name == "head") return {c.vocab_size, d};
        if (name == "pos_embed") return {c.max_context, d};
        return {d};
    };
    m.tok_embed = m.pos_embed = m.final_norm = m.head = Parameter{};
    m.for_each_dense([&](const std::string& name, Parameter& p) {
        p = Parameter(read_floats(take(name), dense_shape(name)));
    });
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        for (std::size_t s = 0; s < kProjectionCount; ++s) {
            const std::string name = "blocks." + std::to_string(i) + "." + kProjectionNames[s];
            Loaded& w = take(name + ".weight");
            const std::string role = w.record.at("role").get<std::string>();
            if (role == "dense") {
                m.blocks[i].proj[s] = DenseLinear{Parameter(read_floats(w, proj_shapes[s]))};
                continue;
            }
            if (role != "qweight") detail::format_fail(w.abs, "unknown tensor role " + role);
            PackedTensor pt;
            pt.bits = w.record.at("bits").get<int>();
            pt.group_size = w.record.at("group_size").get<int>();
            const auto shape = w.record.at("shape").get<Shape>();
            if (shape != proj_shapes[s]) detail::format_fail(w.abs, "unexpected shape for " + name);
            pt.out = shape[0];
            pt.in = shape[1];
            pt.payload.assign(w.bytes.begin(), w.bytes.end());
            const Loaded& z = take(name + ".zeros");
            if (z.record.at("dtype").get<std::string>() == "f16") {
                pt.zero_storage = ZeroStorage::float16;
                pt.zeros_f16 = read_u16(z);
            } else {
                pt.zeros.assign(z.bytes.begin(), z.bytes.end());
            }
            pt.scales = read_u16(take(name + ".scales"));
            try {
                m.blocks[i].proj[s] = unpack_layer(pt);
            } catch (const Error& e) {
                detail::format_fail(w.abs, name + ": " + e.what());
            }
        }
    }
    return ck;
}

inline void export_checkpoint(Model& model, const std::string& path, const nlohmann::json& meta = nlohmann::json::object(),
                              DenseStorage dense = DenseStorage::automatic) {
    detail::write_file(path, encode_checkpoint(model, meta, dense));
}

inline Checkpoint import_checkpoint(const std::string& path) {
    std::string bytes;
    try {
        bytes = detail::read_file(path);
    } catch (const Error& e) {
        fail(ErrorKind::format, e.what());
    }
    return decode_checkpoint(bytes);
}

struct SizeRow {
    std::string name;
    std::string role;
    std::uint64_t params = 0;
    std::uint64_t bytes = 0;       // stored bytes (dense counted at 2 bytes/param)
    double bits_per_param = 0.0;
};

struct SizeReport {
    std::vector<SizeRow> rows;  // one per projection / dense tensor
    std::uint64_t total_params = 0;
    std::uint64_t quantized_params = 0;
    std::uint64_t total_bytes = 0;
    double quantized_bits_per_param = 0.0;  // over quantized projections only
    double total_gib = 0.0;
    double compression_ratio = 0.0;  // 1 - total_bytes / (2 * total_params)
};

inline SizeReport report_size(std::string_view file_bytes) {
    const ContainerHeader h = parse_container_header(file_bytes);
    SizeReport rep;
    std::map<std::string, SizeRow> layers;
    std::vector<std::string> order;
    std::uint64_t qbits = 0;
    for (const auto& r : h.json.at("tensors")) {
        const std::string name = r.at("name").get<std::string>();
        const std::string role = r.at("role").get<std::string>();
        const auto shape = r.at("shape").get<Shape>();
        const auto length = r.at("length").get<std::uint64_t>();
        if (role == "dense") {
            SizeRow row{name, role, shape_size(shape), 2 * shape_size(shape), 16.0};
            rep.total_params += row.params;
            rep.total_bytes += row.bytes;
            rep.rows.push_back(row);
            continue;
        }
        const std::string layer = name.substr(0, name.rfind('.'));
        if (!layers.count(layer)) order.push_back(layer);
        SizeRow& row = layers[layer];
        row.name = layer;
        row.role = "quantized";
        row.bytes += length;
        if (role == "qweight") row.params = shape_size(shape);
    }
    for (const auto& name : order) {
        SizeRow row = layers[name];
        row.bits_per_param = 8.0 * static_cast<double>(row.bytes) / static_cast<double>(row.params);
        rep.total_params += row.params;
        rep.quantized_params += row.params;
        rep.total_bytes += row.bytes;
        qbits += 8 * row.bytes;
        rep.rows.push_back(row);
    }
    if (rep.quantized_params) {
        rep.quantized_bits_per_param = static_cast<double>(qbits) / static_cast<double>(rep.quantized_params);
    }
    rep.total_gib = static_cast<double>(rep.total_bytes) / (1024.0 * 1024.0 * 1024.0);
    rep.compression_ratio =
        rep.total_params ? 1.0 - static_cast<double>(rep.total_bytes) / (2.0 * static_cast<double>(rep.total_params)) : 0.0;
    return rep;
}

inline SizeReport report_size_file(const std::string& path) { return report_size(detail::read_file(path)); }

// Human-readable dump of the container header and size table.
inline std::string inspect(std::string_view file_bytes) {
    const ContainerHeader h = parse_container_header(file_bytes);
    const SizeReport rep = report_size(file_bytes);
    std::ostringstream os;
    os << "format: EQAT v" << h.version << "  header: " << h.header_length << " bytes  data offset: " << h.data_offset
       << "  file: " << h.file_size << " bytes\n";
    os << "config: " << h.json.at("config").dump() << '\n';
    if (h.json.contains("quant")) os << "quant: " << h.json.at("quant").dump() << '\n';
    os << "dense dtype: " << h.json.value("dense_dtype", std::string("?")) << '\n';
    if (h.json.contains("meta") && !h.json.at("meta").empty()) os << "meta: " << h.json.at("meta").dump() << '\n';
    os << '\n';
    char line[256];
    std::snprintf(line, sizeof line, "%-28s %-10s %10s %10s %10s\n", "tensor", "role", "params", "bytes", "bits/param");
    os << line;
    for (const auto& r : rep.rows) {
        std::snprintf(line, sizeof line, "%-28s %-10s %10llu %10llu %10s\n", r.name.c_str(), r.role.c_str(),
                      static_cast<unsigned long long>(r.params), static_cast<unsigned long long>(r.bytes),
                      format_2dp(r.bits_per_param).c_str());
        os << line;
    }
    os << '\n';
    if (rep.quantized_params) os << "avg bits (quantized layers): " << format_2dp(rep.quantized_bits_per_param) << '\n';
    std::snprintf(line, sizeof line, "total: %llu params, %llu bytes (%.6f GiB), compression ratio %.2f%%\n",
                  static_cast<unsigned long long>(rep.total_params), static_cast<unsigned long long>(rep.total_bytes),
                  rep.total_gib, 100.0 * rep.compression_ratio);
    os << line;
    return os.str();
}

}  // namespace eqat
