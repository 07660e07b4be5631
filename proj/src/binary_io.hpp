#pragma once

// Little-endian encoding helpers shared by the on-disk formats.

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace tgcrn::io {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

inline void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

inline void put_f64s(std::string& out, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    const auto* bytes = reinterpret_cast<const char*>(values.data());
    out.append(bytes, values.size() * sizeof(double));
  } else {
    for (double v : values) put_f64(out, v);
  }
}

/// Cursor over an in-memory byte buffer. `ok()` turns false on overrun.
class Reader {
 public:
  explicit Reader(std::span<const char> bytes) : bytes_(bytes) {}

  bool ok() const { return ok_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  std::uint64_t u64() {
    if (!take(8)) return 0;
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ - 8 + i])) << (8 * i);
    }
    return v;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  std::string str(std::size_t n) {
    if (!take(n)) return {};
    return std::string(bytes_.data() + pos_ - n, n);
  }

  void f64s(std::span<double> out) {
    if (!take(out.size() * sizeof(double))) return;
    const char* src = bytes_.data() + pos_ - out.size() * sizeof(double);
    if constexpr (std::endian::native == std::endian::little) {
      std::memcpy(out.data(), src, out.size() * sizeof(double));
    } else {
      Reader sub(std::span<const char>(src, out.size() * sizeof(double)));
      for (auto& v : out) v = sub.f64();
    }
  }

 private:
  bool take(std::size_t n) {
    if (!ok_ || remaining() < n) {
      ok_ = false;
      return false;
    }
    pos_ += n;
    return true;
  }

  std::span<const char> bytes_;
  std::size_t pos_ = 0;
  bool ok_ = true;
};

}  // namespace tgcrn::io
