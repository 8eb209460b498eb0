#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace p4d::util {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

// Filesystem failures: missing, unreadable or unwritable files.
class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed file contents, located by file name and byte offset.
class FormatError : public IoError {
public:
    FormatError(std::string file, std::size_t offset, const std::string& what)
        : IoError(file + " (offset " + std::to_string(offset) + "): " + what),
          file_(std::move(file)),
          offset_(offset) {}
    const std::string& file() const { return file_; }
    std::size_t offset() const { return offset_; }

private:
    std::string file_;
    std::size_t offset_;
};

std::vector<char> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

class ByteWriter {
public:
    template <class T>
    void put(T v) {
        const auto o = buf_.size();
        buf_.resize(o + sizeof(T));
        std::memcpy(buf_.data() + o, &v, sizeof(T));
    }
    void put_bytes(std::string_view s) { buf_.append(s); }
    const std::string& bytes() const { return buf_; }

private:
    std::string buf_;
};

// Bounds-checked cursor over a file's bytes; errors carry the file name and
// the byte offset where reading failed.
class ByteReader {
public:
    ByteReader(std::string name, std::vector<char> bytes) : name_(std::move(name)), bytes_(std::move(bytes)) {}

    template <class T>
    T get() {
        need(sizeof(T), "truncated");
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    void expect_magic(std::string_view magic) {
        need(magic.size(), "truncated header");
        if (std::string_view(bytes_.data() + pos_, magic.size()) != magic)
            throw FormatError(name_, pos_, "bad magic, expected '" + std::string(magic) + "'");
        pos_ += magic.size();
    }
    void expect_end() const {
        if (pos_ != bytes_.size()) throw FormatError(name_, pos_, "trailing bytes");
    }
    std::size_t offset() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }
    const std::string& name() const { return name_; }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) throw FormatError(name_, pos_, what);
    }
    std::string name_;
    std::vector<char> bytes_;
    std::size_t pos_ = 0;
};

}  // namespace p4d::util
