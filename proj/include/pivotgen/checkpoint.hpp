#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "pivotgen/params.hpp"

namespace pivotgen {

// Checkpoint layout (all integers little-endian):
//   magic "PGCKPT01", u32 version, u64 step, u32 meta_len, meta bytes,
//   u32 record_count, then records of
//   (u32 name_len, name, u32 rank, u32 dims[rank], f32 payload).
// Trainable tensors are stored under their plain name followed by their
// AdamW moments under "opt.m1/" and "opt.m2/"; buffers under "buf/".
inline constexpr char kCheckpointMagic[8] = {'P', 'G', 'C', 'K', 'P', 'T', '0', '1'};

namespace detail {

template <typename V>
void write_pod(std::string& out, V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out.append(buf, sizeof(V));
}

template <typename V>
V read_pod(const std::string& in, std::size_t& pos) {
    if (pos + sizeof(V) > in.size()) throw Error("checkpoint: truncated file");
    V v;
    std::memcpy(&v, in.data() + pos, sizeof(V));
    pos += sizeof(V);
    return v;
}

template <typename T>
void write_record(std::string& out, const std::string& name, const TensorT<T>& t) {
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.shape.size()));
    for (int d : t.shape) write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (T v : t.data) write_pod<float>(out, static_cast<float>(v));
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ParameterStoreT<T>& store, const std::string& path, const std::string& meta) {
    std::string out;
    out.append(kCheckpointMagic, 8);
    detail::write_pod<std::uint32_t>(out, 1u);
    detail::write_pod<std::uint64_t>(out, store.step());
    detail::write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    out += meta;
    std::uint32_t records = 0;
    for (int i = 0; i < store.count(); ++i) records += store.entry(i).trainable ? 3 : 1;
    detail::write_pod<std::uint32_t>(out, records);
    for (int i = 0; i < store.count(); ++i) {
        const auto& e = store.entry(i);
        if (e.trainable) {
            detail::write_record(out, e.name, e.value);
            detail::write_record(out, "opt.m1/" + e.name, e.m1);
            detail::write_record(out, "opt.m2/" + e.name, e.m2);
        } else {
            detail::write_record(out, "buf/" + e.name, e.value);
        }
    }

    // Write-then-rename keeps a torn run from ever exposing a partial file.
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("checkpoint: cannot open " + tmp);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw Error("checkpoint: write failed for " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
struct LoadedCheckpoint {
    ParameterStoreT<T> store;
    std::string meta;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("checkpoint: cannot open " + path);
    std::string in((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    if (in.size() < 8 || std::memcmp(in.data(), kCheckpointMagic, 8) != 0)
        throw Error("checkpoint: bad magic in " + path);
    pos = 8;
    std::uint32_t version = detail::read_pod<std::uint32_t>(in, pos);
    if (version != 1) throw Error("checkpoint: unsupported version");
    std::uint64_t step = detail::read_pod<std::uint64_t>(in, pos);
    std::uint32_t meta_len = detail::read_pod<std::uint32_t>(in, pos);
    if (pos + meta_len > in.size()) throw Error("checkpoint: truncated meta");
    LoadedCheckpoint<T> out;
    out.meta = in.substr(pos, meta_len);
    pos += meta_len;
    std::uint32_t records = detail::read_pod<std::uint32_t>(in, pos);
    for (std::uint32_t rec = 0; rec < records; ++rec) {
        std::uint32_t name_len = detail::read_pod<std::uint32_t>(in, pos);
        if (pos + name_len > in.size()) throw Error("checkpoint: truncated name");
        std::string name = in.substr(pos, name_len);
        pos += name_len;
        std::uint32_t rank = detail::read_pod<std::uint32_t>(in, pos);
        std::vector<int> shape(rank);
        for (auto& d : shape) d = static_cast<int>(detail::read_pod<std::uint32_t>(in, pos));
        std::size_t n = TensorT<T>::count(shape);
        std::vector<T> data(n);
        for (auto& v : data) v = static_cast<T>(detail::read_pod<float>(in, pos));

        if (name.rfind("opt.m1/", 0) == 0) {
            auto& e = out.store.entry(out.store.index_of(name.substr(7)));
            e.m1.shape = shape;
            e.m1.data = std::move(data);
        } else if (name.rfind("opt.m2/", 0) == 0) {
            auto& e = out.store.entry(out.store.index_of(name.substr(7)));
            e.m2.shape = shape;
            e.m2.data = std::move(data);
        } else if (name.rfind("buf/", 0) == 0) {
            TensorT<T>& t = out.store.add(name.substr(4), shape, false);
            t.data = std::move(data);
        } else {
            TensorT<T>& t = out.store.add(name, shape, true);
            t.data = std::move(data);
        }
    }
    out.store.set_step(step);
    return out;
}

}  // namespace pivotgen
