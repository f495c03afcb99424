#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "zal3d/errors.hpp"

namespace zal3d::io {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class Writer {
public:
    void bytes(const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        buf_.insert(buf_.end(), p, p + n);
    }
    void magic(std::string_view m) { bytes(m.data(), m.size()); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { bytes(&v, 2); }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void f32(float v) { bytes(&v, 4); }
    void f32s(std::span<const float> v) { bytes(v.data(), v.size() * 4); }

    const std::vector<unsigned char>& buffer() const { return buf_; }

    void write_file(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot open for writing: " + path.string());
        out.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw IoError("write failed: " + path.string());
    }

private:
    std::vector<unsigned char> buf_;
};

class Reader {
public:
    explicit Reader(const std::filesystem::path& path) : name_(path.string()) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open: " + name_);
        buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }

    std::size_t remaining() const { return buf_.size() - pos_; }
    bool at_end() const { return pos_ == buf_.size(); }

    void expect_magic(std::string_view m) {
        if (remaining() < m.size() || std::memcmp(buf_.data() + pos_, m.data(), m.size()) != 0)
            throw FormatError(name_ + ": bad magic, expected \"" + std::string(m) + "\"");
        pos_ += m.size();
    }
    void bytes(void* out, std::size_t n) {
        if (remaining() < n) throw IoError(name_ + ": truncated payload");
        std::memcpy(out, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::uint8_t u8() { std::uint8_t v; bytes(&v, 1); return v; }
    std::uint16_t u16() { std::uint16_t v; bytes(&v, 2); return v; }
    std::uint32_t u32() { std::uint32_t v; bytes(&v, 4); return v; }
    float f32() { float v; bytes(&v, 4); return v; }
    std::vector<float> f32s(std::size_t n) {
        std::vector<float> v(n);
        bytes(v.data(), n * 4);
        return v;
    }
    std::string str(std::size_t n) {
        std::string s(n, '\0');
        bytes(s.data(), n);
        return s;
    }
    const std::string& name() const { return name_; }

private:
    std::string name_;
    std::vector<char> buf_;
    std::size_t pos_ = 0;
};

}  // namespace zal3d::io
