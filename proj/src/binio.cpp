#include "ulip/binio.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "ulip/errors.hpp"

namespace ulip::binio {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

void Writer::bytes(std::span<const std::uint8_t> b) {
  buf_.insert(buf_.end(), b.begin(), b.end());
}

void Writer::magic(std::string_view m) {
  buf_.insert(buf_.end(), m.begin(), m.end());
}

void Writer::u8(std::uint8_t v) { buf_.push_back(v); }

void Writer::u32(std::uint32_t v) {
  std::uint8_t b[4];
  std::memcpy(b, &v, 4);
  buf_.insert(buf_.end(), b, b + 4);
}

void Writer::u64(std::uint64_t v) {
  std::uint8_t b[8];
  std::memcpy(b, &v, 8);
  buf_.insert(buf_.end(), b, b + 8);
}

void Writer::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void Writer::f32s(std::span<const float> v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(v.data());
  buf_.insert(buf_.end(), p, p + v.size_bytes());
}

void Writer::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  buf_.insert(buf_.end(), s.begin(), s.end());
}

void Reader::need(std::size_t n) {
  if (n > remaining()) {
    throw TruncatedError(what_ + ": truncated at byte " + std::to_string(pos_) +
                         " (need " + std::to_string(n) + ", have " +
                         std::to_string(remaining()) + ")");
  }
}

void Reader::expect_magic(std::string_view m) {
  const std::size_t avail = std::min(remaining(), m.size());
  const bool prefix_ok = std::memcmp(data_.data() + pos_, m.data(), avail) == 0;
  if (prefix_ok && avail < m.size()) {
    throw TruncatedError(what_ + ": truncated inside magic '" + std::string(m) + "'");
  }
  if (!prefix_ok) {
    throw BadMagicError(what_ + ": bad magic, expected '" + std::string(m) + "'");
  }
  pos_ += m.size();
}

std::uint8_t Reader::u8() {
  need(1);
  return data_[pos_++];
}

std::uint32_t Reader::u32() {
  need(4);
  std::uint32_t v;
  std::memcpy(&v, data_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::uint64_t Reader::u64() {
  need(8);
  std::uint64_t v;
  std::memcpy(&v, data_.data() + pos_, 8);
  pos_ += 8;
  return v;
}

float Reader::f32() { return std::bit_cast<float>(u32()); }

std::vector<float> Reader::f32s(std::size_t n) {
  if (n > remaining() / 4) need(n * 4);
  std::vector<float> out(n);
  std::memcpy(out.data(), data_.data() + pos_, n * 4);
  pos_ += n * 4;
  return out;
}

std::string Reader::str() {
  const auto n = u32();
  need(n);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::span<const std::uint8_t> Reader::bytes(std::size_t n) {
  need(n);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file: " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_atomic(const std::filesystem::path& path,
                       std::span<const std::uint8_t> data) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write file: " + path.string());
    out.write(reinterpret_cast<const char*>(data.data()),
              static_cast<std::streamsize>(data.size()));
    if (!out) throw DataError("short write: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace ulip::binio
