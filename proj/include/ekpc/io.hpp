#ifndef EKPC_IO_HPP
#define EKPC_IO_HPP

// Little-endian binary encoding shared by every on-disk format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "ekpc/error.hpp"

namespace ekpc::io {

static_assert(std::endian::native == std::endian::little, "on-disk formats assume a little-endian host");

class Writer {
public:
    void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
    void u32(std::uint32_t v) { raw(&v, sizeof v); }
    void f32(float v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void f64s(std::span<const double> v) { raw(v.data(), v.size() * sizeof(double)); }

    [[nodiscard]] const std::vector<char>& buffer() const noexcept { return buf_; }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + path + " for writing");
        out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
        if (!out) throw Error("write failed: " + path);
    }

private:
    void raw(const void* p, std::size_t n) {
        const char* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    std::vector<char> buf_;
};

class Reader {
public:
    explicit Reader(std::vector<char> data) : data_(std::move(data)) {}

    static Reader from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw Error("cannot open " + path);
        return Reader(std::vector<char>(std::istreambuf_iterator<char>(in), {}));
    }

    [[nodiscard]] std::size_t offset() const noexcept { return pos_; }
    [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }

    void expect_magic(std::string_view magic, const char* format) {
        need(magic.size(), "magic");
        if (std::memcmp(data_.data() + pos_, magic.data(), magic.size()) != 0) {
            throw ParseError(std::string("bad magic, not a ") + format + " file", pos_);
        }
        pos_ += magic.size();
    }

    std::uint32_t u32(const char* field) { return scalar<std::uint32_t>(field); }
    float f32(const char* field) { return scalar<float>(field); }
    double f64(const char* field) { return scalar<double>(field); }

    void f64s(std::span<double> out, const char* field) {
        need(out.size() * sizeof(double), field);
        std::memcpy(out.data(), data_.data() + pos_, out.size() * sizeof(double));
        pos_ += out.size() * sizeof(double);
    }

    void expect_end(const char* format) const {
        if (remaining() != 0) throw ParseError(std::string("trailing bytes after ") + format + " payload", pos_);
    }

private:
    template <class T>
    T scalar(const char* field) {
        need(sizeof(T), field);
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void need(std::size_t n, const char* field) const {
        if (remaining() < n) throw ParseError(std::string("truncated file reading ") + field, pos_);
    }

    std::vector<char> data_;
    std::size_t pos_ = 0;
};

}  // namespace ekpc::io

#endif  // EKPC_IO_HPP
