#pragma once

#include <zlib.h>

#include <bit>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "errors.hpp"

namespace bsentinel::container {

static_assert(std::endian::native == std::endian::little, "file formats assume a little-endian host");

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
    uLong crc = ::crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed in chunks for very large payloads.
    std::size_t offset = 0;
    while (offset < bytes.size()) {
        const std::size_t chunk = std::min<std::size_t>(bytes.size() - offset, 1u << 30);
        crc = ::crc32(crc, bytes.data() + offset, static_cast<uInt>(chunk));
        offset += chunk;
    }
    return static_cast<std::uint32_t>(crc);
}

class Writer {
public:
    void bytes(const void* src, std::size_t n) {
        const auto* p = static_cast<const std::uint8_t*>(src);
        buf_.insert(buf_.end(), p, p + n);
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f32(float v) { bytes(&v, sizeof v); }
    void f32s(std::span<const float> v) { bytes(v.data(), v.size() * sizeof(float)); }

    /// Appends the CRC32 of everything written so far.
    void seal() { u32(crc32_of(buf_)); }

    const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw IoError("failed writing '" + path.string() + "'");
    }

private:
    std::vector<std::uint8_t> buf_;
};

inline std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

    void need(std::size_t n) const {
        if (bytes_.size() - pos_ < n) throw DataError(what_ + ": truncated file");
    }
    void bytes(void* dst, std::size_t n) {
        need(n);
        std::memcpy(dst, bytes_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() {
        need(1);
        return bytes_[pos_++];
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, sizeof v);
        return v;
    }
    void f32s(std::span<float> dst) { bytes(dst.data(), dst.size() * sizeof(float)); }

    void expect_magic(std::string_view magic) {
        need(magic.size());
        if (std::memcmp(bytes_.data() + pos_, magic.data(), magic.size()) != 0) {
            throw DataError(what_ + ": bad magic, expected '" + std::string(magic) + "'");
        }
        pos_ += magic.size();
    }

    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    std::size_t position() const noexcept { return pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::string what_;
    std::size_t pos_ = 0;
};

/// Checks the trailing CRC32 and returns the payload without it.
inline std::span<const std::uint8_t> verify_crc(std::span<const std::uint8_t> bytes, const std::string& what) {
    if (bytes.size() < 4) throw DataError(what + ": truncated file");
    const auto body = bytes.first(bytes.size() - 4);
    std::uint32_t stored;
    std::memcpy(&stored, bytes.data() + body.size(), 4);
    if (stored != crc32_of(body)) throw DataError(what + ": CRC mismatch (file corrupt or truncated)");
    return body;
}

}  // namespace bsentinel::container
