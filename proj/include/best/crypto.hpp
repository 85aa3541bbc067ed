#pragma once

// Identity, signing and digest primitives. Ed25519 signatures and SHA-256
// digests come from libsodium; everything above that works on the strong
// types declared here, so the backing scheme can be swapped in one place.

#include <sodium.h>

#include <array>
#include <bit>
#include <compare>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "best/errors.hpp"

namespace best {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

namespace detail {

inline void ensure_sodium() {
  static const int rc = sodium_init();
  if (rc < 0) throw std::runtime_error("libsodium initialisation failed");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Hex

inline std::string to_hex(ByteView bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(kDigits[b >> 4]);
    out.push_back(kDigits[b & 0x0F]);
  }
  return out;
}

// Strict: lowercase only, even length. Uppercase input is rejected so that
// every byte sequence has exactly one textual form.
inline Bytes from_hex(std::string_view text) {
  if (text.size() % 2 != 0) throw DecodeError("hex string has odd length");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    return -1;
  };
  Bytes out(text.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = nibble(text[2 * i]);
    int lo = nibble(text[2 * i + 1]);
    if (hi < 0 || lo < 0) throw DecodeError("invalid hex digit");
    out[i] = static_cast<std::uint8_t>((hi << 4) | lo);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Fixed-size byte values

template <std::size_t N, typename Tag>
struct FixedBytes {
  static constexpr std::size_t kSize = N;
  std::array<std::uint8_t, N> bytes{};

  ByteView view() const { return {bytes.data(), bytes.size()}; }
  std::string hex() const { return to_hex(view()); }
  bool is_zero() const {
    for (auto b : bytes)
      if (b != 0) return false;
    return true;
  }

  static FixedBytes from_view(ByteView v) {
    if (v.size() != N) throw DecodeError("wrong byte length");
    FixedBytes out;
    std::memcpy(out.bytes.data(), v.data(), N);
    return out;
  }
  static FixedBytes from_hex(std::string_view text) {
    Bytes raw = best::from_hex(text);
    return from_view(raw);
  }

  friend auto operator<=>(const FixedBytes&, const FixedBytes&) = default;
};

struct DigestTag {};
struct PublicKeyTag {};
struct SignatureTag {};

using Digest = FixedBytes<32, DigestTag>;
using PublicKey = FixedBytes<crypto_sign_PUBLICKEYBYTES, PublicKeyTag>;
using Signature = FixedBytes<crypto_sign_BYTES, SignatureTag>;

static_assert(PublicKey::kSize == 32);
static_assert(Signature::kSize == 64);

struct FixedBytesHash {
  template <std::size_t N, typename Tag>
  std::size_t operator()(const FixedBytes<N, Tag>& v) const noexcept {
    std::size_t h;
    std::memcpy(&h, v.bytes.data(), sizeof h);
    return h;
  }
};

// ---------------------------------------------------------------------------
// Canonical serialization: fixed field order, big-endian fixed-width
// integers, doubles as their IEEE-754 bit pattern, length-prefixed byte
// sequences.

class ByteWriter {
 public:
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void u64(std::uint64_t v) {
    for (int s = 56; s >= 0; s -= 8) out_.push_back(static_cast<std::uint8_t>(v >> s));
  }
  void i64(std::int64_t v) { u64(static_cast<std::uint64_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(ByteView v) { out_.insert(out_.end(), v.begin(), v.end()); }
  void bytes(ByteView v) {
    u32(static_cast<std::uint32_t>(v.size()));
    raw(v);
  }
  template <std::size_t N, typename Tag>
  void fixed(const FixedBytes<N, Tag>& v) {
    bytes(v.view());
  }

  const Bytes& data() const& { return out_; }
  Bytes take() && { return std::move(out_); }

 private:
  Bytes out_;
};

class ByteReader {
 public:
  explicit ByteReader(ByteView in) : in_(in) {}

  std::uint8_t u8() { return need(1)[0]; }
  std::uint32_t u32() {
    auto p = need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | p[i];
    return v;
  }
  std::uint64_t u64() {
    auto p = need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v = (v << 8) | p[i];
    return v;
  }
  std::int64_t i64() { return static_cast<std::int64_t>(u64()); }
  double f64() { return std::bit_cast<double>(u64()); }
  ByteView raw(std::size_t n) { return need(n); }
  Bytes bytes() {
    std::uint32_t n = u32();
    auto p = need(n);
    return Bytes(p.begin(), p.end());
  }
  template <typename Fixed>
  Fixed fixed() {
    std::uint32_t n = u32();
    return Fixed::from_view(need(n));
  }

  bool done() const { return pos_ == in_.size(); }
  std::size_t position() const { return pos_; }

 private:
  ByteView need(std::size_t n) {
    if (in_.size() - pos_ < n) throw DecodeError("unexpected end of input");
    ByteView out = in_.subspan(pos_, n);
    pos_ += n;
    return out;
  }

  ByteView in_;
  std::size_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Digest / sign / verify

inline Digest digest(ByteView message) {
  detail::ensure_sodium();
  Digest out;
  crypto_hash_sha256(out.bytes.data(), message.data(), message.size());
  return out;
}

inline Digest digest(std::string_view text) {
  return digest(ByteView(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

// Holds the expanded Ed25519 secret key; wiped on destruction.
class PrivateKey {
 public:
  PrivateKey() = default;
  PrivateKey(const PrivateKey&) = default;
  PrivateKey& operator=(const PrivateKey&) = default;
  ~PrivateKey() { sodium_memzero(sk_.data(), sk_.size()); }

  static PrivateKey from_seed(const std::array<std::uint8_t, 32>& seed, PublicKey& pub) {
    detail::ensure_sodium();
    PrivateKey key;
    crypto_sign_seed_keypair(pub.bytes.data(), key.sk_.data(), seed.data());
    return key;
  }

  PublicKey public_key() const {
    PublicKey pub;
    crypto_sign_ed25519_sk_to_pk(pub.bytes.data(), sk_.data());
    return pub;
  }

  Signature sign(ByteView message) const {
    detail::ensure_sodium();
    Signature sig;
    crypto_sign_detached(sig.bytes.data(), nullptr, message.data(), message.size(), sk_.data());
    return sig;
  }

 private:
  std::array<std::uint8_t, crypto_sign_SECRETKEYBYTES> sk_{};
};

inline Signature sign(ByteView message, const PrivateKey& key) { return key.sign(message); }

inline bool verify(ByteView message, const Signature& sig, const PublicKey& key) {
  detail::ensure_sodium();
  return crypto_sign_verify_detached(sig.bytes.data(), message.data(), message.size(),
                                     key.bytes.data()) == 0;
}

// ---------------------------------------------------------------------------
// Identities

enum class IdentityKind : std::uint8_t { Vehicle = 0, Rsu = 1, Central = 2 };

struct Identity {
  Digest id;
  PublicKey public_key;
  IdentityKind kind = IdentityKind::Vehicle;

  friend bool operator==(const Identity&, const Identity&) = default;
};

struct KeyPair {
  Identity identity;
  PrivateKey private_key;
};

// Deterministic: the Ed25519 seed is SHA-256 over a domain tag, the kind and
// the 64-bit seed, so equal (seed, kind) pairs always give the same key.
inline KeyPair generate_identity(std::uint64_t seed, IdentityKind kind) {
  ByteWriter w;
  static constexpr std::string_view kDomain = "best/identity/v1";
  w.raw(ByteView(reinterpret_cast<const std::uint8_t*>(kDomain.data()), kDomain.size()));
  w.u8(static_cast<std::uint8_t>(kind));
  w.u64(seed);
  Digest material = digest(w.data());

  KeyPair kp;
  kp.private_key = PrivateKey::from_seed(material.bytes, kp.identity.public_key);
  kp.identity.kind = kind;
  kp.identity.id = digest(kp.identity.public_key.view());
  return kp;
}

}  // namespace best
