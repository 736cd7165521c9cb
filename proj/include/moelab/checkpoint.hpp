#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "moelab/transformer.hpp"

namespace moelab {

// MOELAB01 checkpoint layout:
//   bytes 0..7   magic "MOELAB01"
//   bytes 8..11  header length H, little-endian uint32
//   H bytes      text header, one line per tensor:
//                "<name> <dtype> <dims joined by 'x'> <offset>\n"
//                offsets count from the start of the payload section
//   payload      raw little-endian scalars, in header order
static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[9] = "MOELAB01";

template <class S>
const char* dtype_token() {
    if constexpr (sizeof(S) == 8)
        return "f64";
    else
        return "f32";
}

template <class S>
void save_checkpoint(const Model<S>& m, const std::string& path) {
    auto named = m.named_params();
    std::ostringstream header;
    std::int64_t offset = 0;
    for (auto& [name, t] : named) {
        header << name << ' ' << dtype_token<S>() << ' ';
        const Shape& sh = t.shape();
        for (std::size_t i = 0; i < sh.size(); ++i)
            header << (i ? "x" : "") << sh[i];
        header << ' ' << offset << '\n';
        offset += t.size() * static_cast<std::int64_t>(sizeof(S));
    }
    const std::string h = header.str();
    if (h.size() > 0xffffffffull)
        throw FormatError("checkpoint header too large");
    const std::uint32_t hlen = static_cast<std::uint32_t>(h.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path);
    out.write(kCheckpointMagic, 8);
    out.write(reinterpret_cast<const char*>(&hlen), 4);
    out.write(h.data(), static_cast<std::streamsize>(h.size()));
    for (auto& [name, t] : named)
        out.write(reinterpret_cast<const char*>(t.values().data()),
                  t.size() * static_cast<std::streamsize>(sizeof(S)));
    if (!out) throw IoError("write failed: " + path);
}

// Fills an already-built model (shapes fixed by its ModelConfig) from the
// file, validating magic, dtype, completeness in both directions, and shape
// agreement.
template <class S>
void load_checkpoint(const Model<S>& m, const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for reading: " + path);

    char magic[8];
    if (!in.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw FormatError("bad checkpoint magic in " + path);
    std::uint32_t hlen = 0;
    if (!in.read(reinterpret_cast<char*>(&hlen), 4))
        throw FormatError("truncated checkpoint header length");
    std::string h(hlen, '\0');
    if (!in.read(h.data(), hlen))
        throw FormatError("truncated checkpoint header");

    struct Entry {
        std::string dtype;
        Shape shape;
        std::int64_t offset = 0;
    };
    std::map<std::string, Entry> entries;
    std::istringstream lines(h);
    std::string line;
    while (std::getline(lines, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string name, dtype, dims;
        std::int64_t offset;
        if (!(ls >> name >> dtype >> dims >> offset))
            throw FormatError("malformed checkpoint header line: " + line);
        Entry e;
        e.dtype = dtype;
        e.offset = offset;
        std::istringstream ds(dims);
        std::string dim;
        while (std::getline(ds, dim, 'x')) e.shape.push_back(std::stoi(dim));
        if (!entries.emplace(name, std::move(e)).second)
            throw FormatError("duplicate tensor in checkpoint: " + name);
    }

    const std::streampos payload_start = in.tellg();
    auto named = m.named_params();
    for (auto& [name, t] : named) {
        auto it = entries.find(name);
        if (it == entries.end())
            throw FormatError("checkpoint is missing tensor: " + name);
        const Entry& e = it->second;
        if (e.dtype != dtype_token<S>())
            throw FormatError("tensor " + name + " has dtype " + e.dtype +
                              ", model expects " + dtype_token<S>());
        if (e.shape != t.shape())
            throw FormatError("tensor " + name + " has shape " +
                              shape_str(e.shape) + ", model expects " +
                              shape_str(t.shape()));
        in.seekg(payload_start + std::streampos(e.offset));
        if (!in.read(reinterpret_cast<char*>(t.values().data()),
                     t.size() * static_cast<std::streamsize>(sizeof(S))))
            throw FormatError("truncated payload for tensor " + name);
        entries.erase(it);
    }
    if (!entries.empty())
        throw FormatError("checkpoint has " + std::to_string(entries.size()) +
                          " tensors not present in the model, first: " +
                          entries.begin()->first);
}

}  // namespace moelab
