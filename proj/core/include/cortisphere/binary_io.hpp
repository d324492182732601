#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "cortisphere/error.hpp"

namespace cortisphere::io {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian and written by memcpy");

std::uint32_t crc32(const void* data, std::size_t size, std::uint32_t seed = 0);

// Append-only little-endian byte buffer.
class ByteWriter {
public:
    template <typename T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        const auto* p = reinterpret_cast<const unsigned char*>(&value);
        bytes_.insert(bytes_.end(), p, p + sizeof(T));
    }
    void put_bytes(const void* data, std::size_t size) {
        const auto* p = static_cast<const unsigned char*>(data);
        bytes_.insert(bytes_.end(), p, p + size);
    }
    void put_string(std::string_view s) {
        put(static_cast<std::uint32_t>(s.size()));
        put_bytes(s.data(), s.size());
    }
    std::size_t size() const noexcept { return bytes_.size(); }
    const std::vector<unsigned char>& bytes() const noexcept { return bytes_; }

private:
    std::vector<unsigned char> bytes_;
};

// Bounds-checked cursor; running off the end raises TruncationError.
class ByteReader {
public:
    ByteReader(const std::vector<unsigned char>& bytes, std::string source)
        : bytes_(bytes), source_(std::move(source)) {}

    template <typename T>
    T get() {
        T value;
        std::memcpy(&value, take(sizeof(T)), sizeof(T));
        return value;
    }
    const unsigned char* take(std::size_t size) {
        if (size > bytes_.size() - pos_)
            throw TruncationError(source_ + ": truncated at byte " + std::to_string(pos_) + " (needed " +
                                  std::to_string(size) + " more)");
        const unsigned char* p = bytes_.data() + pos_;
        pos_ += size;
        return p;
    }
    std::string get_string() {
        const auto n = get<std::uint32_t>();
        const auto* p = take(n);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    std::size_t position() const noexcept { return pos_; }
    std::size_t remaining() const noexcept { return bytes_.size() - pos_; }
    const unsigned char* data() const noexcept { return bytes_.data(); }
    const std::string& source() const noexcept { return source_; }

private:
    const std::vector<unsigned char>& bytes_;
    std::string source_;
    std::size_t pos_ = 0;
};

std::vector<unsigned char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<unsigned char>& bytes);

} // namespace cortisphere::io
