#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "wmcap/rng.hpp"

namespace wmcap {

// Length-L bit string carrying the owner identity.
struct IdentityMessage {
  std::vector<std::uint8_t> bits;  // each 0 or 1

  std::size_t length() const { return bits.size(); }
  bool operator==(const IdentityMessage&) const = default;
};

inline IdentityMessage make_message(std::vector<std::uint8_t> bits) {
  if (bits.empty()) throw std::invalid_argument("message length must be >= 1");
  for (auto b : bits)
    if (b > 1) throw std::invalid_argument("message bits must be 0 or 1");
  return IdentityMessage{std::move(bits)};
}

inline IdentityMessage uniform_message(std::size_t length, Rng& rng) {
  if (length == 0) throw std::invalid_argument("message length must be >= 1");
  IdentityMessage m;
  m.bits.resize(length);
  for (auto& b : m.bits) b = static_cast<std::uint8_t>(rng.next_u64() & 1u);
  return m;
}

// Hex encoding, MSB-first nibbles; trailing bits of the last nibble are
// zero padding and are dropped again by message_from_hex.
inline std::string to_hex(const IdentityMessage& m) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve((m.length() + 3) / 4);
  unsigned acc = 0;
  int used = 0;
  for (auto b : m.bits) {
    acc = (acc << 1) | b;
    if (++used == 4) {
      out.push_back(digits[acc]);
      acc = 0;
      used = 0;
    }
  }
  if (used > 0) out.push_back(digits[acc << (4 - used)]);
  return out;
}

inline IdentityMessage message_from_hex(std::string_view hex, std::size_t length) {
  if (length == 0) throw std::invalid_argument("message length must be >= 1");
  if (hex.size() * 4 < length)
    throw std::invalid_argument("hex string too short for message length");
  IdentityMessage m;
  m.bits.reserve(length);
  for (char c : hex) {
    int v;
    if (c >= '0' && c <= '9')
      v = c - '0';
    else if (c >= 'a' && c <= 'f')
      v = c - 'a' + 10;
    else if (c >= 'A' && c <= 'F')
      v = c - 'A' + 10;
    else
      throw std::invalid_argument("invalid hex digit in message");
    for (int k = 3; k >= 0; --k) {
      if (m.bits.size() < length)
        m.bits.push_back(static_cast<std::uint8_t>((v >> k) & 1));
    }
  }
  return m;
}

}  // namespace wmcap
