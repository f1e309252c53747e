#pragma once

// Single-file container for named f64 tensors: a JSON header (format
// version, caller metadata, tensor directory with shapes and byte offsets)
// followed by raw little-endian float64 payloads. Checkpoints and
// precomputed feature maps share this format. Writes go through a temporary
// file and a rename, so no partial archives are ever visible.

#include <json.hpp>

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bonegraph/tensor.hpp"

namespace bonegraph {

inline constexpr char kArchiveMagic[4] = {'B', 'G', 'T', 'A'};
inline constexpr int kArchiveVersion = 1;

struct ArchiveTensor {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

inline void write_tensor_archive(const std::string& path, const nlohmann::json& meta,
                                 const std::vector<ArchiveTensor>& tensors) {
    nlohmann::json header;
    header["format_version"] = kArchiveVersion;
    header["meta"] = meta;
    header["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& t : tensors) {
        if (static_cast<std::int64_t>(t.values.size()) != shape_numel(t.shape))
            throw std::invalid_argument("tensor archive: '" + t.name + "' values do not match shape");
        nlohmann::json entry;
        entry["name"] = t.name;
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        header["tensors"].push_back(entry);
        offset += t.values.size() * sizeof(double);
    }
    const std::string header_str = header.dump();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("tensor archive: cannot write '" + tmp + "'");
        out.write(kArchiveMagic, 4);
        const std::uint64_t hlen = header_str.size();
        out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
        for (const auto& t : tensors)
            out.write(reinterpret_cast<const char*>(t.values.data()),
                      static_cast<std::streamsize>(t.values.size() * sizeof(double)));
        if (!out) throw std::runtime_error("tensor archive: write failed for '" + tmp + "'");
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        throw std::runtime_error("tensor archive: cannot move '" + tmp + "' to '" + path + "'");
    }
}

struct TensorArchive {
    nlohmann::json meta;
    std::vector<ArchiveTensor> tensors;

    const ArchiveTensor* find(const std::string& name) const {
        for (const auto& t : tensors)
            if (t.name == name) return &t;
        return nullptr;
    }
    const ArchiveTensor& at(const std::string& name) const {
        const ArchiveTensor* t = find(name);
        if (!t) throw std::runtime_error("tensor archive: missing tensor '" + name + "'");
        return *t;
    }
};

inline TensorArchive read_tensor_archive(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("tensor archive: cannot open '" + path + "'");
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kArchiveMagic, 4) != 0)
        throw std::runtime_error("tensor archive: '" + path + "' is not a tensor archive");
    std::uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen > (1ull << 30)) throw std::runtime_error("tensor archive: corrupt header in '" + path + "'");
    std::string header_str(hlen, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw std::runtime_error("tensor archive: truncated header in '" + path + "'");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_str);
    } catch (const std::exception& e) {
        throw std::runtime_error("tensor archive: bad header in '" + path + "': " + e.what());
    }
    if (header.value("format_version", -1) != kArchiveVersion)
        throw std::runtime_error("tensor archive: unsupported format version in '" + path + "'");
    TensorArchive ar;
    ar.meta = header.value("meta", nlohmann::json::object());
    const std::streampos payload_start = in.tellg();
    for (const auto& entry : header["tensors"]) {
        ArchiveTensor t;
        t.name = entry["name"].get<std::string>();
        t.shape = entry["shape"].get<Shape>();
        const std::uint64_t offset = entry["offset"].get<std::uint64_t>();
        const std::int64_t count = shape_numel(t.shape);
        t.values.resize(static_cast<std::size_t>(count));
        in.seekg(payload_start + static_cast<std::streamoff>(offset));
        in.read(reinterpret_cast<char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(double)));
        if (!in) throw std::runtime_error("tensor archive: truncated payload for '" + t.name + "' in '" + path + "'");
        ar.tensors.push_back(std::move(t));
    }
    return ar;
}

}  // namespace bonegraph
