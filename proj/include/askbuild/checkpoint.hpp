#pragma once

// Checkpoint container:
//
//   8 bytes   magic "ASKBCKPT"
//   8 bytes   header length N, little-endian u64
//   N bytes   JSON header {format_version, hyperparameters, metadata,
//             tensors: [{name, shape, dtype, offset}]}
//   payload   little-endian f64 scalars, tensors in manifest order;
//             offsets count bytes from the start of the payload

#include <bit>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "askbuild/error.hpp"
#include "askbuild/tensor.hpp"

namespace askbuild {

inline constexpr char kCheckpointMagic[8] = {'A', 'S', 'K', 'B', 'C', 'K', 'P', 'T'};
inline constexpr int kCheckpointFormatVersion = 1;

struct Checkpoint {
    nlohmann::json hyperparameters = nlohmann::json::object();
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<std::pair<std::string, Tensor>> tensors;

    const Tensor& tensor(const std::string& name) const {
        for (const auto& [n, t] : tensors) {
            if (n == name) return t;
        }
        throw DataError("checkpoint has no tensor named " + name);
    }
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
    nlohmann::json manifest = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, t] : ckpt.tensors) {
        manifest.push_back({{"name", name}, {"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}});
        offset += 8 * t.size();
    }
    nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                             {"hyperparameters", ckpt.hyperparameters},
                             {"metadata", ckpt.metadata},
                             {"tensors", manifest}};
    std::string head = header.dump();
    std::string out(kCheckpointMagic, 8);
    detail::put_u64(out, head.size());
    out += head;
    out.reserve(out.size() + offset);
    for (const auto& [_, t] : ckpt.tensors)
        for (double v : t.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
    auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
    if (bytes.size() < 16 || bytes.compare(0, 8, std::string(kCheckpointMagic, 8)) != 0) {
        throw DataError("not a checkpoint: bad magic");
    }
    std::uint64_t head_len = detail::get_u64(raw + 8);
    if (head_len > bytes.size() - 16) throw DataError("checkpoint header truncated");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(bytes.substr(16, head_len));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("checkpoint header is not valid JSON: ") + e.what());
    }
    if (header.value("format_version", -1) != kCheckpointFormatVersion) {
        throw DataError("unsupported checkpoint format_version " + header.value("format_version", nlohmann::json()).dump());
    }
    Checkpoint ckpt;
    ckpt.hyperparameters = header.value("hyperparameters", nlohmann::json::object());
    ckpt.metadata = header.value("metadata", nlohmann::json::object());
    const std::size_t payload = 16 + head_len;
    for (const auto& entry : header.at("tensors")) {
        if (entry.at("dtype") != "f64") throw DataError("unsupported dtype " + entry.at("dtype").dump());
        Shape shape = entry.at("shape").get<Shape>();
        std::uint64_t off = entry.at("offset").get<std::uint64_t>();
        std::size_t n = shape_size(shape);
        if (payload + off + 8 * n > bytes.size()) {
            throw DataError("checkpoint payload truncated at tensor " + entry.at("name").get<std::string>());
        }
        std::vector<double> data(n);
        for (std::size_t i = 0; i < n; ++i) data[i] = std::bit_cast<double>(detail::get_u64(raw + payload + off + 8 * i));
        ckpt.tensors.emplace_back(entry.at("name").get<std::string>(), Tensor(std::move(shape), std::move(data)));
    }
    return ckpt;
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot open " + path + " for writing");
    std::string bytes = serialize_checkpoint(ckpt);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

}  // namespace askbuild
