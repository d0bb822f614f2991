#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "ovformer/errors.hpp"

namespace ovf {

// Little-endian binary IO for the on-disk formats. The host is assumed
// little-endian (x86/aarch64); values are memcpy'd through fixed-width types.

class BinaryWriter {
public:
    explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open for writing: " + path);
    }

    void magic(const char tag[4]) { out_.write(tag, 4); }
    void u32(uint32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }

    void f32s(const double* v, size_t n) {
        std::vector<float> buf(n);
        for (size_t i = 0; i < n; ++i) buf[i] = static_cast<float>(v[i]);
        raw(buf.data(), n * sizeof(float));
    }

    void str(const std::string& s) {
        u32(static_cast<uint32_t>(s.size()));
        raw(s.data(), s.size());
    }

    void close() {
        out_.close();
        if (!out_) throw DataError("write failed: " + path_);
    }

private:
    void raw(const void* p, size_t n) { out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n)); }

    std::string path_;
    std::ofstream out_;
};

class BinaryReader {
public:
    explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
        if (!in_) throw DataError("cannot open: " + path);
    }

    const std::string& path() const { return path_; }

    void expect_magic(const char tag[4]) {
        char buf[4] = {};
        raw(buf, 4);
        if (std::memcmp(buf, tag, 4) != 0)
            throw FormatError("bad magic in " + path_ + " (expected " + std::string(tag, 4) + ")");
    }

    uint32_t u32() {
        uint32_t v;
        raw(&v, sizeof v);
        return v;
    }

    float f32() {
        float v;
        raw(&v, sizeof v);
        return v;
    }

    void f32s(double* v, size_t n) {
        std::vector<float> buf(n);
        raw(buf.data(), n * sizeof(float));
        for (size_t i = 0; i < n; ++i) v[i] = static_cast<double>(buf[i]);
    }

    std::string str() {
        uint32_t n = u32();
        if (n > (1u << 20)) throw FormatError("implausible string length in " + path_);
        std::string s(n, '\0');
        raw(s.data(), n);
        return s;
    }

    void expect_eof() {
        char c;
        in_.read(&c, 1);
        if (!in_.eof()) throw FormatError("trailing bytes in " + path_);
    }

private:
    void raw(void* p, size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<size_t>(in_.gcount()) != n) throw FormatError("truncated file: " + path_);
    }

    std::string path_;
    std::ifstream in_;
};

}  // namespace ovf
