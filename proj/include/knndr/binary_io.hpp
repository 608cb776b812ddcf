#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "knndr/error.hpp"

namespace knndr::io {

static_assert(std::endian::native == std::endian::little,
              "binary formats are little-endian; big-endian hosts need byte swapping");

/// Little-endian binary writer over a file.
class BinaryWriter {
 public:
  explicit BinaryWriter(const std::string& path) : path_(path), out_(path, std::ios::binary | std::ios::trunc) {
    if (!out_) throw IoError("cannot open for writing: " + path);
  }

  void magic(const char (&tag)[5]) { bytes(tag, 4); }
  void u32(std::uint32_t v) { bytes(&v, sizeof v); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
  void f32(float v) { bytes(&v, sizeof v); }
  void f64(double v) { bytes(&v, sizeof v); }

  void f32s(std::span<const float> v) { bytes(v.data(), v.size_bytes()); }
  void f64s(std::span<const double> v) { bytes(v.data(), v.size_bytes()); }
  void u32s(std::span<const std::uint32_t> v) { bytes(v.data(), v.size_bytes()); }

  void bytes(const void* p, std::size_t n) {
    out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    if (!out_) throw IoError("write failed: " + path_);
  }

  void close() {
    out_.close();
    if (!out_) throw IoError("close failed: " + path_);
  }

 private:
  std::string path_;
  std::ofstream out_;
};

/// Little-endian binary reader that reports the byte offset of truncation.
class BinaryReader {
 public:
  explicit BinaryReader(const std::string& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open for reading: " + path);
  }

  void expect_magic(const char (&tag)[5]) {
    char got[4];
    bytes(got, 4);
    if (std::memcmp(got, tag, 4) != 0) {
      throw FormatError(path_ + ": bad magic, expected '" + std::string(tag, 4) + "'");
    }
  }

  std::uint32_t u32() { return scalar<std::uint32_t>(); }
  std::uint64_t u64() { return scalar<std::uint64_t>(); }
  float f32() { return scalar<float>(); }
  double f64() { return scalar<double>(); }

  void f32s(std::span<float> v) { bytes(v.data(), v.size_bytes()); }
  void f64s(std::span<double> v) { bytes(v.data(), v.size_bytes()); }
  void u32s(std::span<std::uint32_t> v) { bytes(v.data(), v.size_bytes()); }

  void bytes(void* p, std::size_t n) {
    in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) {
      throw FormatError(path_ + ": truncated at byte offset " + std::to_string(offset_ + got) + " (needed " +
                        std::to_string(n) + " bytes at offset " + std::to_string(offset_) + ")");
    }
    offset_ += n;
  }

  /// Fails if unread bytes remain.
  void expect_end() {
    if (in_.peek() != std::char_traits<char>::eof()) {
      throw FormatError(path_ + ": trailing bytes after offset " + std::to_string(offset_));
    }
  }

  std::uint64_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

 private:
  template <class T>
  T scalar() {
    T v;
    bytes(&v, sizeof v);
    return v;
  }

  std::string path_;
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

}  // namespace knndr::io
