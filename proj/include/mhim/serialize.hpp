// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mhim/io.hpp"
#include "mhim/tape.hpp"

namespace mhim {

// Parameter file layout (all integers u32 little-endian):
//
//   "MHIP" | version = 1 | count
//   count x { name_len | name bytes | rows | cols }     shape manifest
//   sum(rows * cols) float64 little-endian              values, manifest order

struct NamedMatrix {
    std::string name;
    Matrix value;
};

inline std::string encode_parameters(std::span<const NamedMatrix> params) {
    std::string out("MHIP", 4);
    io::put_le<std::uint32_t>(out, 1);
    io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
    for (const NamedMatrix& p : params) {
        io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.name.size()));
        out += p.name;
        io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.rows()));
        io::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p.value.cols()));
    }
    for (const NamedMatrix& p : params)
        for (double v : p.value.values()) io::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline std::vector<NamedMatrix> decode_parameters(std::string_view bytes) {
    std::size_t off = 0;
    auto need = [&](std::size_t n) {
        if (off + n > bytes.size())
            throw LoadError("parameter file truncated at byte offset " + std::to_string(off));
    };
    auto u32 = [&] {
        need(4);
        const auto v = io::get_le<std::uint32_t>(bytes, off);
        off += 4;
        return v;
    };
    need(4);
    if (bytes.substr(0, 4) != "MHIP") throw LoadError("parameter file: bad magic at byte offset 0");
    off = 4;
    if (u32() != 1) throw LoadError("parameter file: unsupported version at byte offset 4");
    const std::uint32_t count = u32();
    std::vector<NamedMatrix> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = u32();
        need(len);
        std::string name(bytes.substr(off, len));
        off += len;
        const std::uint32_t rows = u32();
        const std::uint32_t cols = u32();
        out.push_back({std::move(name), Matrix(rows, cols)});
    }
    for (NamedMatrix& p : out) {
        for (double& v : p.value.values()) {
            need(8);
            v = std::bit_cast<double>(io::get_le<std::uint64_t>(bytes, off));
            off += 8;
        }
    }
    if (off != bytes.size())
        throw LoadError("parameter file: trailing bytes at byte offset " + std::to_string(off));
    return out;
}

inline std::vector<NamedMatrix> snapshot(std::span<Parameter* const> params) {
    std::vector<NamedMatrix> out;
    for (const Parameter* p : params) out.push_back({p->name, p->value});
    return out;
}

/// Copies stored values into `params`; names and shapes must match exactly.
inline void restore(std::span<Parameter* const> params, std::span<const NamedMatrix> stored) {
    if (params.size() != stored.size())
        throw LoadError("parameter count mismatch: expected " + std::to_string(params.size()) +
                        ", file has " + std::to_string(stored.size()));
    for (std::size_t k = 0; k < params.size(); ++k) {
        if (params[k]->name != stored[k].name || !params[k]->value.same_shape(stored[k].value))
            throw LoadError("parameter " + std::to_string(k) + " mismatch: expected " +
                            params[k]->name + " " + shape_str(params[k]->value) + ", file has " +
                            stored[k].name + " " + shape_str(stored[k].value));
    }
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = stored[k].value;
}

inline void save_parameters(const std::filesystem::path& path, std::span<const NamedMatrix> params) {
    io::write_file_atomic(path, encode_parameters(params));
}

inline std::vector<NamedMatrix> load_parameters(const std::filesystem::path& path) {
    return decode_parameters(io::read_file(path));
}

}  // namespace mhim
