#pragma once

// Binary container shared by bank ("NVBK"), score-net ("NVSN") and dataset
// ("NVDS") files: 4-byte magic, u16 version, a format-specific body of
// little-endian fields, then a CRC-32 of everything before it.

#include <zlib.h>

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "nanovoice/errors.hpp"
#include "nanovoice/tensor.hpp"

namespace nanovoice {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

inline constexpr std::uint16_t kContainerVersion = 1;

class ByteWriter {
public:
    explicit ByteWriter(std::string_view magic) {
        bytes_.insert(bytes_.end(), magic.begin(), magic.end());
        u16(kContainerVersion);
    }

    template <class T>
    void raw(const T& v) {
        const auto* p = reinterpret_cast<const unsigned char*>(&v);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }

    void u8(std::uint8_t v) { raw(v); }
    void u16(std::uint16_t v) { raw(v); }
    void u32(std::uint32_t v) { raw(v); }
    void u64(std::uint64_t v) { raw(v); }
    void f64(double v) { raw(v); }

    void f64s(std::span<const double> v) {
        const auto* p = reinterpret_cast<const unsigned char*>(v.data());
        bytes_.insert(bytes_.end(), p, p + v.size_bytes());
    }

    /// Shape-prefixed tensor: rank u32, dims u64..., then data.
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u64(d);
        f64s(t.values());
    }

    /// Appends the CRC trailer and returns the finished image.
    std::vector<unsigned char> finish() {
        const uLong crc = crc32(0L, bytes_.data(), static_cast<uInt>(bytes_.size()));
        u32(static_cast<std::uint32_t>(crc));
        return std::move(bytes_);
    }

private:
    std::vector<unsigned char> bytes_;
};

class ByteReader {
public:
    /// Validates magic, version and the CRC trailer before any field is read.
    ByteReader(std::vector<unsigned char> bytes, std::string_view magic) : bytes_(std::move(bytes)) {
        if (bytes_.size() < magic.size() + 2 + 4) throw FormatError("file truncated before header end", bytes_.size());
        if (std::memcmp(bytes_.data(), magic.data(), magic.size()) != 0)
            throw FormatError("bad magic, expected \"" + std::string(magic) + "\"", 0);
        pos_ = magic.size();
        end_ = bytes_.size() - 4;
        const auto version = u16();
        if (version != kContainerVersion)
            throw FormatError("unsupported version " + std::to_string(version), magic.size());
        std::uint32_t stored = 0;
        std::memcpy(&stored, bytes_.data() + end_, 4);
        const uLong crc = crc32(0L, bytes_.data(), static_cast<uInt>(end_));
        if (stored != static_cast<std::uint32_t>(crc)) throw FormatError("checksum mismatch", end_);
    }

    template <class T>
    T raw() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::uint8_t u8() { return raw<std::uint8_t>(); }
    std::uint16_t u16() { return raw<std::uint16_t>(); }
    std::uint32_t u32() { return raw<std::uint32_t>(); }
    std::uint64_t u64() { return raw<std::uint64_t>(); }
    double f64() { return raw<double>(); }

    void f64s(std::span<double> out) {
        need(out.size_bytes());
        std::memcpy(out.data(), bytes_.data() + pos_, out.size_bytes());
        pos_ += out.size_bytes();
    }

    Tensor tensor() {
        const std::size_t at = pos_;
        const auto rank = u32();
        if (rank == 0 || rank > 4) throw FormatError("bad tensor rank " + std::to_string(rank), at);
        Shape shape(rank);
        for (auto& d : shape) {
            d = static_cast<std::size_t>(u64());
            if (d == 0 || d > (std::size_t{1} << 28)) throw FormatError("bad tensor dimension", pos_ - 8);
        }
        Tensor t(shape);
        f64s(t.values());
        return t;
    }

    /// Tensor whose shape must equal `expected`.
    Tensor tensor(const Shape& expected) {
        const std::size_t at = pos_;
        Tensor t = tensor();
        if (t.shape() != expected)
            throw FormatError("tensor shape " + shape_str(t.shape()) + " differs from declared " +
                                  shape_str(expected),
                              at);
        return t;
    }

    std::size_t offset() const noexcept { return pos_; }

    void expect_end() const {
        if (pos_ != end_) throw FormatError("trailing bytes after payload", pos_);
    }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw FormatError("unexpected end of payload", pos_);
    }

    std::vector<unsigned char> bytes_;
    std::size_t pos_ = 0;
    std::size_t end_ = 0;
};

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FileError("cannot open " + path.string());
    return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

/// Write-then-rename so readers never observe a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const unsigned char> bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw FileError("cannot write " + tmp.string());
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) throw FileError("short write to " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    write_file_atomic(path, std::span(reinterpret_cast<const unsigned char*>(text.data()), text.size()));
}

}  // namespace nanovoice
