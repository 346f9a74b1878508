#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace ulact {

// Explicit little-endian encoding shared by all binary file formats.

class io_error : public std::runtime_error {
public:
    io_error(const std::string& msg, std::size_t offset)
        : std::runtime_error(msg + " (byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}

    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

std::uint32_t crc32(const std::uint8_t* data, std::size_t len, std::uint32_t seed = 0);

class BinWriter {
public:
    void u8(std::uint8_t v) { buf_.push_back(v); }
    void u16(std::uint16_t v) {
        for (int i = 0; i < 2; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u32(std::uint32_t v) {
        for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void u64(std::uint64_t v) {
        for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
    void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
    void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
    void f32_array(const float* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) f32(p[i]);
    }
    void bytes(const void* p, std::size_t n) {
        const auto* b = static_cast<const std::uint8_t*>(p);
        buf_.insert(buf_.end(), b, b + n);
    }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }

    std::size_t size() const { return buf_.size(); }
    const std::vector<std::uint8_t>& data() const { return buf_; }

    std::uint32_t crc_from(std::size_t start) const {
        return crc32(buf_.data() + start, buf_.size() - start);
    }

private:
    std::vector<std::uint8_t> buf_;
};

class BinReader {
public:
    BinReader(const std::uint8_t* data, std::size_t len, std::string context)
        : data_(data), len_(len), context_(std::move(context)) {}

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return len_ - pos_; }

    void need(std::size_t n, const char* what) const {
        if (pos_ + n > len_)
            throw io_error(context_ + ": truncated while reading " + what, pos_);
    }

    std::uint8_t u8(const char* what) {
        need(1, what);
        return data_[pos_++];
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        std::uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<std::uint16_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(data_[pos_++]) << (8 * i);
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
    void f32_array(float* out, std::size_t n, const char* what) {
        need(4 * n, what);
        for (std::size_t i = 0; i < n; ++i) out[i] = f32(what);
    }
    std::string str(const char* what) {
        const std::uint32_t n = u32(what);
        need(n, what);
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }

    std::uint32_t crc_between(std::size_t start, std::size_t end) const {
        return crc32(data_ + start, end - start);
    }

    [[noreturn]] void fail(const std::string& msg) const { throw io_error(context_ + ": " + msg, pos_); }

private:
    const std::uint8_t* data_;
    std::size_t len_;
    std::size_t pos_ = 0;
    std::string context_;
};

std::vector<std::uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<std::uint8_t>& bytes);
bool file_exists(const std::string& path);

// FNV-1a over file contents; used for run manifests.
std::uint64_t hash_file(const std::string& path);
std::uint64_t hash_bytes(const void* data, std::size_t len);

}  // namespace ulact
