#pragma once

// Little-endian binary readers/writers shared by the cube container and the
// checkpoint format. Readers track the byte offset so format errors can name
// the exact position.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "karma/error.hpp"

namespace karma::binio {

class Writer {
  public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw FormatError("cannot open for writing: " + path);
        path_ = path;
    }

    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void u16(std::uint16_t v) { put_int(v); }
    void u32(std::uint32_t v) { put_int(v); }
    void u64(std::uint64_t v) { put_int(v); }
    void f32(float v) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        u32(bits);
    }
    void f64(double v) {
        std::uint64_t bits;
        std::memcpy(&bits, &v, 8);
        u64(bits);
    }
    void magic(const char tag[4]) { bytes(tag, 4); }

    void close() {
        out_.close();
        if (!out_) throw FormatError("write failed: " + path_);
    }

  private:
    template <class T>
    void put_int(T v) {
        unsigned char buf[sizeof(T)];
        for (std::size_t i = 0; i < sizeof(T); ++i)
            buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
        bytes(buf, sizeof(T));
    }

    std::ofstream out_;
    std::string path_;
};

class Reader {
  public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary), path_(path) {
        if (!in_) throw FormatError("cannot open: " + path);
    }

    std::size_t offset() const { return offset_; }

    void bytes(void* p, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError(path_ + ": truncated " + what + " at byte " +
                              std::to_string(offset_));
        offset_ += n;
    }
    std::uint8_t u8(const char* what) {
        std::uint8_t v;
        bytes(&v, 1, what);
        return v;
    }
    std::uint16_t u16(const char* what) { return get_int<std::uint16_t>(what); }
    std::uint32_t u32(const char* what) { return get_int<std::uint32_t>(what); }
    std::uint64_t u64(const char* what) { return get_int<std::uint64_t>(what); }
    float f32(const char* what) {
        std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
    double f64(const char* what) {
        std::uint64_t bits = u64(what);
        double v;
        std::memcpy(&v, &bits, 8);
        return v;
    }
    void expect_magic(const char tag[4]) {
        char got[5] = {0, 0, 0, 0, 0};
        std::size_t at = offset_;
        bytes(got, 4, "magic");
        if (std::memcmp(got, tag, 4) != 0)
            throw FormatError(path_ + ": bad magic at byte " + std::to_string(at) +
                              ": expected '" + std::string(tag, 4) + "'");
    }
    bool at_eof() {
        in_.peek();
        return in_.eof();
    }
    const std::string& path() const { return path_; }

  private:
    template <class T>
    T get_int(const char* what) {
        unsigned char buf[sizeof(T)];
        bytes(buf, sizeof(T), what);
        T v = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(buf[i]) << (8 * i);
        return v;
    }

    std::ifstream in_;
    std::string path_;
    std::size_t offset_ = 0;
};

}  // namespace karma::binio
