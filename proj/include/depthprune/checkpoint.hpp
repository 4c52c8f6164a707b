#pragma once
// Binary checkpoint container.
//
// Layout (all integers little-endian):
//   "TFCK"                     4 bytes magic
//   version                    u32
//   metadata length            u64, followed by that many bytes of UTF-8 JSON
//   blob count                 u32
//   per blob:
//     name length              u32, then the name bytes
//     rank                     u32, then rank x u64 dimensions
//     value count              u64, then count x f64 (IEEE-754 little-endian)

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "depthprune/errors.hpp"
#include "depthprune/tensor.hpp"

namespace depthprune {

inline constexpr char kCheckpointMagic[4] = {'T', 'F', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Blob {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct CheckpointFile {
    nlohmann::json meta = nlohmann::json::object();
    std::vector<Blob> blobs;

    const Blob* find(const std::string& name) const {
        for (const auto& b : blobs)
            if (b.name == name) return &b;
        return nullptr;
    }
    const Blob& at(const std::string& name) const {
        if (const Blob* b = find(name)) return *b;
        throw ConfigError("checkpoint has no blob named '" + name + "'");
    }
};

class CheckpointFormatError : public std::runtime_error {
public:
    explicit CheckpointFormatError(const std::string& what) : std::runtime_error(what) {}
};

namespace detail {

template <class T>
void put_le(std::string& out, T v) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

class Reader {
public:
    explicit Reader(std::string buf) : buf_(std::move(buf)) {}

    template <class T>
    T get() {
        need(sizeof(T));
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += sizeof(T);
        return static_cast<T>(v);
    }
    double get_f64() { return std::bit_cast<double>(get<std::uint64_t>()); }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > buf_.size()) throw CheckpointFormatError("truncated checkpoint");
    }
    std::string buf_;
    std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string encode_checkpoint(const CheckpointFile& ck) {
    std::string out(kCheckpointMagic, 4);
    detail::put_le<std::uint32_t>(out, kCheckpointVersion);
    const std::string meta = ck.meta.dump();
    detail::put_le<std::uint64_t>(out, meta.size());
    out += meta;
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(ck.blobs.size()));
    for (const auto& b : ck.blobs) {
        if (shape_numel(b.shape) != b.values.size())
            throw DimensionError("blob '" + b.name + "' shape does not match its value count");
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.name.size()));
        out += b.name;
        detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(b.shape.size()));
        for (auto d : b.shape) detail::put_le<std::uint64_t>(out, d);
        detail::put_le<std::uint64_t>(out, b.values.size());
        for (double v : b.values) detail::put_f64(out, v);
    }
    return out;
}

inline CheckpointFile decode_checkpoint(std::string bytes) {
    detail::Reader r(std::move(bytes));
    if (r.bytes(4) != std::string(kCheckpointMagic, 4)) throw CheckpointFormatError("bad magic, not a TFCK checkpoint");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw CheckpointFormatError("unsupported checkpoint version " + std::to_string(version));
    CheckpointFile ck;
    const auto meta_len = r.get<std::uint64_t>();
    ck.meta = nlohmann::json::parse(r.bytes(meta_len));
    const auto count = r.get<std::uint32_t>();
    ck.blobs.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        Blob b;
        b.name = r.bytes(r.get<std::uint32_t>());
        const auto rank = r.get<std::uint32_t>();
        for (std::uint32_t k = 0; k < rank; ++k) b.shape.push_back(r.get<std::uint64_t>());
        const auto n = r.get<std::uint64_t>();
        if (n != shape_numel(b.shape)) throw CheckpointFormatError("blob '" + b.name + "' has inconsistent length");
        b.values.resize(n);
        for (auto& v : b.values) v = r.get_f64();
        ck.blobs.push_back(std::move(b));
    }
    if (!r.done()) throw CheckpointFormatError("trailing bytes after last blob");
    return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const CheckpointFile& ck) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + path.string() + " for writing");
    const std::string bytes = encode_checkpoint(ck);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw std::runtime_error("failed writing " + path.string());
}

inline CheckpointFile load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path.string());
    std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_checkpoint(std::move(bytes));
}

}  // namespace depthprune
