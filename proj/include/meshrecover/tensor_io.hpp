// Binary tensor file format.
//
// Single tensor:  "MRTENS01" | u32 rank | u32 dims[rank] | u32 dtype | payload
// Archive:        "MRTENS01" | u32 0xFFFFFFFF | u32 count |
//                 count * { u32 name_len | name bytes | u32 rank | dims | dtype | payload }
//
// All integers little-endian; payload is row-major. Dtype tags: 0=f32, 1=f64,
// 2=u8. Readers reject wrong magic and truncation with a byte-offset
// diagnostic.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <variant>
#include <vector>

#include "tensor.hpp"

namespace meshrecover {

static_assert(std::endian::native == std::endian::little,
              "tensor file I/O assumes a little-endian host");

inline constexpr char kTensorMagic[8] = {'M', 'R', 'T', 'E', 'N', 'S', '0', '1'};
inline constexpr std::uint32_t kArchiveRankSentinel = 0xFFFFFFFFu;

using AnyTensor = std::variant<Tensor<float>, Tensor<double>, Tensor<std::uint8_t>>;

struct NamedTensor {
    std::string name;
    AnyTensor tensor;
};

inline Dtype any_dtype(const AnyTensor& t) {
    return std::visit([](const auto& x) {
        return dtype_of<typename std::decay_t<decltype(x)>::value_type>::value;
    }, t);
}

template <class T>
struct Tensor_value_type_helper;

namespace detail {

struct ByteWriter {
    std::vector<std::uint8_t> bytes;
    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u32(std::uint32_t v) { raw(&v, 4); }
};

struct ByteReader {
    const std::uint8_t* p = nullptr;
    std::size_t n = 0;
    std::size_t off = 0;
    std::string origin;

    void need(std::size_t k, const char* what) const {
        if (off + k > n)
            throw FormatError(origin + ": truncated file, needed " + std::to_string(k) +
                              " bytes for " + what + " at byte offset " + std::to_string(off) +
                              " (file size " + std::to_string(n) + ")");
    }
    void raw(void* out, std::size_t k, const char* what) {
        need(k, what);
        std::memcpy(out, p + off, k);
        off += k;
    }
    std::uint32_t u32(const char* what) {
        std::uint32_t v;
        raw(&v, 4, what);
        return v;
    }
};

template <class T>
void write_tensor_body(ByteWriter& w, const Tensor<T>& t) {
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) {
        if (d > 0xFFFFFFFFull) throw FormatError("tensor dimension exceeds u32 range");
        w.u32(static_cast<std::uint32_t>(d));
    }
    w.u32(static_cast<std::uint32_t>(dtype_of<T>::value));
    w.raw(t.data(), t.size() * sizeof(T));
}

inline AnyTensor read_tensor_body(ByteReader& r, std::uint32_t rank) {
    std::vector<std::size_t> shape(rank);
    for (std::uint32_t i = 0; i < rank; ++i) shape[i] = r.u32("dimension");
    const std::uint32_t tag = r.u32("dtype tag");
    if (tag > 2)
        throw FormatError(r.origin + ": unknown dtype tag " + std::to_string(tag) +
                          " at byte offset " + std::to_string(r.off - 4));
    const Dtype dt = static_cast<Dtype>(tag);
    const std::size_t count = shape_count(shape);
    const std::size_t bytes = count * dtype_size(dt);
    r.need(bytes, "payload");
    auto make = [&](auto type_tag) -> AnyTensor {
        using T = decltype(type_tag);
        std::vector<T> data(count);
        if (bytes) std::memcpy(data.data(), r.p + r.off, bytes);
        r.off += bytes;
        return Tensor<T>::from(std::move(shape), std::move(data));
    };
    switch (dt) {
        case Dtype::F32: return make(float{});
        case Dtype::F64: return make(double{});
        case Dtype::U8: return make(std::uint8_t{});
    }
    throw FormatError("unreachable dtype");
}

inline void check_magic(ByteReader& r) {
    char magic[8];
    r.raw(magic, 8, "magic");
    if (std::memcmp(magic, kTensorMagic, 8) != 0)
        throw FormatError(r.origin + ": bad magic at byte offset 0, expected \"MRTENS01\"");
}

inline std::vector<std::uint8_t> slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(path + ": cannot open file");
    f.seekg(0, std::ios::end);
    const std::streamoff len = f.tellg();
    f.seekg(0, std::ios::beg);
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(len));
    if (len) f.read(reinterpret_cast<char*>(bytes.data()), len);
    if (!f) throw FormatError(path + ": short read");
    return bytes;
}

inline void spew(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError(path + ": cannot open file for writing");
    if (!bytes.empty()) f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError(path + ": short write");
}

}  // namespace detail

template <class T>
std::vector<std::uint8_t> tensor_to_bytes(const Tensor<T>& t) {
    detail::ByteWriter w;
    w.raw(kTensorMagic, 8);
    detail::write_tensor_body(w, t);
    return std::move(w.bytes);
}

inline AnyTensor tensor_from_bytes(const std::vector<std::uint8_t>& bytes,
                                   const std::string& origin = "<memory>") {
    detail::ByteReader r{bytes.data(), bytes.size(), 0, origin};
    detail::check_magic(r);
    const std::uint32_t rank = r.u32("rank");
    if (rank == kArchiveRankSentinel)
        throw FormatError(origin + ": expected a single tensor, found an archive");
    AnyTensor t = detail::read_tensor_body(r, rank);
    if (r.off != r.n)
        throw FormatError(origin + ": " + std::to_string(r.n - r.off) +
                          " trailing bytes at byte offset " + std::to_string(r.off));
    return t;
}

inline std::vector<std::uint8_t> archive_to_bytes(const std::vector<NamedTensor>& entries) {
    detail::ByteWriter w;
    w.raw(kTensorMagic, 8);
    w.u32(kArchiveRankSentinel);
    w.u32(static_cast<std::uint32_t>(entries.size()));
    for (const auto& e : entries) {
        w.u32(static_cast<std::uint32_t>(e.name.size()));
        w.raw(e.name.data(), e.name.size());
        std::visit([&](const auto& t) { detail::write_tensor_body(w, t); }, e.tensor);
    }
    return std::move(w.bytes);
}

inline std::vector<NamedTensor> archive_from_bytes(const std::vector<std::uint8_t>& bytes,
                                                   const std::string& origin = "<memory>") {
    detail::ByteReader r{bytes.data(), bytes.size(), 0, origin};
    detail::check_magic(r);
    const std::uint32_t sentinel = r.u32("rank");
    if (sentinel != kArchiveRankSentinel)
        throw FormatError(origin + ": expected an archive, found a single tensor");
    const std::uint32_t count = r.u32("entry count");
    std::vector<NamedTensor> entries;
    entries.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32("name length");
        r.need(name_len, "entry name");
        std::string name(reinterpret_cast<const char*>(r.p + r.off), name_len);
        r.off += name_len;
        const std::uint32_t rank = r.u32("rank");
        entries.push_back({std::move(name), detail::read_tensor_body(r, rank)});
    }
    if (r.off != r.n)
        throw FormatError(origin + ": " + std::to_string(r.n - r.off) +
                          " trailing bytes at byte offset " + std::to_string(r.off));
    return entries;
}

template <class T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    detail::spew(path, tensor_to_bytes(t));
}

inline AnyTensor load_tensor(const std::string& path) {
    return tensor_from_bytes(detail::slurp(path), path);
}

template <class T>
Tensor<T> load_tensor_as(const std::string& path) {
    AnyTensor t = load_tensor(path);
    if (auto* p = std::get_if<Tensor<T>>(&t)) return std::move(*p);
    throw FormatError(path + ": dtype mismatch, expected " +
                      dtype_name(dtype_of<T>::value) + ", found " + dtype_name(any_dtype(t)));
}

inline void save_archive(const std::string& path, const std::vector<NamedTensor>& entries) {
    detail::spew(path, archive_to_bytes(entries));
}

inline std::vector<NamedTensor> load_archive(const std::string& path) {
    return archive_from_bytes(detail::slurp(path), path);
}

inline const AnyTensor* archive_find(const std::vector<NamedTensor>& entries,
                                     const std::string& name) {
    for (const auto& e : entries)
        if (e.name == name) return &e.tensor;
    return nullptr;
}

template <class T>
const Tensor<T>& archive_get(const std::vector<NamedTensor>& entries, const std::string& name,
                             const std::string& origin) {
    const AnyTensor* t = archive_find(entries, name);
    if (!t) throw FormatError(origin + ": archive is missing tensor \"" + name + "\"");
    const auto* p = std::get_if<Tensor<T>>(t);
    if (!p)
        throw FormatError(origin + ": tensor \"" + name + "\" has dtype " +
                          dtype_name(any_dtype(*t)) + ", expected " +
                          dtype_name(dtype_of<T>::value));
    return *p;
}

}  // namespace meshrecover
