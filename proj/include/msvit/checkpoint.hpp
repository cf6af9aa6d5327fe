#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "msvit/params.hpp"
#include "msvit/tensor.hpp"

namespace msvit {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CheckpointError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Checkpoint layout: magic "MSVIT1\n", then one record per tensor in name
// order: u32 name length, name bytes, u32 dim count, u32 dims, payload as
// little-endian 64-bit floats. Params and state buffers share the namespace.
namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
}

inline void put_f64(std::ostream& os, double v) {
    const std::uint64_t u = std::bit_cast<std::uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
    unsigned char b[8];
    is.read(reinterpret_cast<char*>(b), 8);
    std::uint64_t u = 0;
    for (int i = 0; i < 8; ++i) u |= std::uint64_t(b[i]) << (8 * i);
    return std::bit_cast<double>(u);
}

}  // namespace detail

inline constexpr char kCheckpointMagic[] = "MSVIT1\n";

struct CheckpointRecord {
    Shape shape;
    std::vector<double> data;
};

using Checkpoint = std::map<std::string, CheckpointRecord>;

template <class T>
Checkpoint checkpoint_from_store(const ParamStore<T>& store) {
    Checkpoint ck;
    const auto add = [&](const std::string& name, const Tensor<T>& t) {
        CheckpointRecord rec;
        rec.shape = t.shape();
        rec.data.assign(t.data().begin(), t.data().end());
        ck.emplace(name, std::move(rec));
    };
    for (const auto& [name, t] : store.params) add(name, t);
    for (const auto& [name, t] : store.buffers) add(name, t);
    return ck;
}

inline void save_checkpoint(std::ostream& os, const Checkpoint& ck) {
    os.write(kCheckpointMagic, 7);
    for (const auto& [name, rec] : ck) {
        detail::put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        detail::put_u32(os, static_cast<std::uint32_t>(rec.shape.size()));
        for (const std::size_t d : rec.shape) detail::put_u32(os, static_cast<std::uint32_t>(d));
        for (const double v : rec.data) detail::put_f64(os, v);
    }
}

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open checkpoint for writing: " + path);
    save_checkpoint(os, ck);
    if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint(std::istream& is) {
    char magic[7];
    is.read(magic, 7);
    if (!is || std::string(magic, 7) != kCheckpointMagic)
        throw CheckpointError("not a checkpoint file (bad magic)");
    Checkpoint ck;
    while (true) {
        const std::uint32_t name_len = detail::get_u32(is);
        if (is.eof() || !is) break;
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t dims = detail::get_u32(is);
        CheckpointRecord rec;
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < dims; ++i) {
            rec.shape.push_back(detail::get_u32(is));
            numel *= rec.shape.back();
        }
        rec.data.resize(numel);
        for (std::size_t i = 0; i < numel; ++i) rec.data[i] = detail::get_f64(is);
        if (!is) throw CheckpointError("truncated checkpoint record: " + name);
        ck.emplace(std::move(name), std::move(rec));
    }
    return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open checkpoint: " + path);
    return load_checkpoint(is);
}

template <class T>
void apply_checkpoint(const Checkpoint& ck, ParamStore<T>& store) {
    const auto apply = [&](const std::string& name, Tensor<T>& t) {
        const auto it = ck.find(name);
        if (it == ck.end()) throw CheckpointError("checkpoint is missing tensor: " + name);
        if (it->second.shape != t.shape())
            throw CheckpointError("checkpoint shape mismatch for " + name + ": file " +
                                  shape_str(it->second.shape) + " vs model " + shape_str(t.shape()));
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(it->second.data[i]);
    };
    std::size_t expected = store.params.size() + store.buffers.size();
    if (ck.size() != expected)
        throw CheckpointError("checkpoint tensor count " + std::to_string(ck.size()) +
                              " does not match model (" + std::to_string(expected) + ")");
    for (auto& [name, t] : store.params) apply(name, t);
    for (auto& [name, t] : store.buffers) apply(name, t);
}

}  // namespace msvit
