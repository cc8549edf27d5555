#pragma once

// Little-endian binary helpers shared by the feature, codebook and
// checkpoint formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "melhubert/common.hpp"

namespace melhubert::detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class BinaryWriter {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) { bytes(&v, 4); }
  void u64(std::uint64_t v) { bytes(&v, 8); }
  void f32(float v) { bytes(&v, 4); }
  void f64(double v) { bytes(&v, 8); }
  void f32_array(const float* p, std::size_t n) { bytes(p, n * sizeof(float)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  const std::string& buffer() const { return buf_; }

  // Write to a temp file and rename over the target.
  void save_atomic(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error("cannot write " + tmp.string());
      out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
      if (!out) throw Error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(const std::filesystem::path& path) : name_(path.string()) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + name_);
    buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  BinaryReader(std::string bytes, std::string name) : name_(std::move(name)), buf_(std::move(bytes)) {}

  void bytes(void* p, std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError(name_ + ": truncated file");
    std::memcpy(p, buf_.data() + pos_, n);
    pos_ += n;
  }
  std::uint32_t u32() {
    std::uint32_t v;
    bytes(&v, 4);
    return v;
  }
  std::uint64_t u64() {
    std::uint64_t v;
    bytes(&v, 8);
    return v;
  }
  float f32() {
    float v;
    bytes(&v, 4);
    return v;
  }
  double f64() {
    double v;
    bytes(&v, 8);
    return v;
  }
  void f32_array(float* p, std::size_t n) { bytes(p, n * sizeof(float)); }
  std::string str() {
    const std::uint32_t n = u32();
    if (pos_ + n > buf_.size()) throw FormatError(name_ + ": truncated string");
    std::string s(buf_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  void expect_magic(const char* magic) {
    char m[4];
    bytes(m, 4);
    if (std::memcmp(m, magic, 4) != 0) throw FormatError(name_ + ": bad magic, expected " + std::string(magic, 4));
  }
  void expect_end() const {
    if (pos_ != buf_.size()) throw FormatError(name_ + ": trailing bytes");
  }

 private:
  std::string name_;
  std::string buf_;
  std::size_t pos_ = 0;
};

}  // namespace melhubert::detail
