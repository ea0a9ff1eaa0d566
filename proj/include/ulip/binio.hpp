#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ulip::binio {

// Little-endian byte buffer builder used by every on-disk format.
class Writer {
 public:
  void bytes(std::span<const std::uint8_t> b);
  void magic(std::string_view m);
  void u8(std::uint8_t v);
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void f32s(std::span<const float> v);
  void str(std::string_view s);  // u32 length prefix

  const std::vector<std::uint8_t>& buffer() const { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

// Bounds-checked reader; throws TruncatedError naming `what` on overrun.
class Reader {
 public:
  Reader(std::span<const std::uint8_t> data, std::string what)
      : data_(data), what_(std::move(what)) {}

  void expect_magic(std::string_view m);
  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::vector<float> f32s(std::size_t n);
  std::string str();
  std::span<const std::uint8_t> bytes(std::size_t n);

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  const std::string& what() const { return what_; }

 private:
  void need(std::size_t n);
  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string what_;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Writes via a sibling temp file and rename so readers never see partial files.
void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> data);

}  // namespace ulip::binio
