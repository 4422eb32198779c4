#pragma once

// Minimal POSIX ustar reader/writer for snapshot archives. Regular files only;
// mtime, uid and gid are written as zero so archives are reproducible.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <string>
#include <string_view>
#include <vector>

#include "smstrack/error.hpp"

namespace smstrack::tar {

struct Entry {
  std::string name;
  std::string data;
};

namespace detail {

inline constexpr std::size_t kBlock = 512;

inline void put_octal(char* dst, std::size_t width, std::uint64_t value) {
  // width includes the trailing NUL
  std::snprintf(dst, width, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(value));
}

inline std::uint64_t get_octal(const char* src, std::size_t width) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < width && src[i] != '\0' && src[i] != ' '; ++i) {
    if (src[i] < '0' || src[i] > '7') throw Error(Errc::CorruptStore, "bad octal field in archive header");
    v = v * 8 + static_cast<std::uint64_t>(src[i] - '0');
  }
  return v;
}

inline unsigned header_checksum(const std::array<char, kBlock>& h) {
  unsigned sum = 0;
  for (std::size_t i = 0; i < kBlock; ++i) {
    const bool in_chksum = i >= 148 && i < 156;
    sum += in_chksum ? static_cast<unsigned>(' ') : static_cast<unsigned char>(h[i]);
  }
  return sum;
}

}  // namespace detail

inline std::string write(const std::vector<Entry>& entries) {
  using detail::kBlock;
  std::string out;
  for (const auto& e : entries) {
    if (e.name.empty() || e.name.size() >= 100) throw Error(Errc::Validation, "archive member name must be 1..99 bytes");
    std::array<char, kBlock> h{};
    std::memcpy(h.data(), e.name.data(), e.name.size());
    detail::put_octal(h.data() + 100, 8, 0644);
    detail::put_octal(h.data() + 108, 8, 0);
    detail::put_octal(h.data() + 116, 8, 0);
    detail::put_octal(h.data() + 124, 12, e.data.size());
    detail::put_octal(h.data() + 136, 12, 0);
    h[156] = '0';
    std::memcpy(h.data() + 257, "ustar", 6);
    std::memcpy(h.data() + 263, "00", 2);
    const unsigned sum = detail::header_checksum(h);
    std::snprintf(h.data() + 148, 8, "%06o", sum);
    h[155] = ' ';
    out.append(h.data(), kBlock);
    out += e.data;
    const std::size_t pad = (kBlock - e.data.size() % kBlock) % kBlock;
    out.append(pad, '\0');
  }
  out.append(2 * kBlock, '\0');
  return out;
}

inline std::vector<Entry> read(std::string_view archive) {
  using detail::kBlock;
  std::vector<Entry> entries;
  std::size_t pos = 0;
  while (true) {
    if (pos + kBlock > archive.size()) throw Error(Errc::CorruptStore, "archive truncated");
    std::array<char, kBlock> h{};
    std::memcpy(h.data(), archive.data() + pos, kBlock);
    if (std::all_of(h.begin(), h.end(), [](char c) { return c == '\0'; })) break;
    if (std::memcmp(h.data() + 257, "ustar", 5) != 0) throw Error(Errc::CorruptStore, "not a ustar archive");
    if (detail::get_octal(h.data() + 148, 8) != detail::header_checksum(h)) {
      throw Error(Errc::CorruptStore, "archive header checksum mismatch");
    }
    const std::size_t size = detail::get_octal(h.data() + 124, 12);
    pos += kBlock;
    if (pos + size > archive.size()) throw Error(Errc::CorruptStore, "archive member truncated");
    Entry e;
    e.name = std::string(h.data(), strnlen(h.data(), 100));
    e.data = std::string(archive.substr(pos, size));
    if (h[156] == '0' || h[156] == '\0') entries.push_back(std::move(e));
    pos += size + (kBlock - size % kBlock) % kBlock;
  }
  return entries;
}

}  // namespace smstrack::tar
