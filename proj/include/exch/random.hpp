#pragma once

#include <sodium.h>

#include <array>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "exch/error.hpp"

namespace exch {

// Stateless keyed generator: every output is a function of (seed, key) only.
// The PRF is SipHash-2-4 (libsodium crypto_shorthash), whose output is
// specified byte-for-byte, so draws agree across runs and platforms.
class RandomnessSource {
 public:
  explicit RandomnessSource(std::uint64_t seed) : seed_(seed) {
    static_assert(crypto_shorthash_KEYBYTES == 16);
    // Key bytes: the seed little-endian, then its complement.
    for (int i = 0; i < 8; ++i) {
      key_[i] = static_cast<unsigned char>(seed >> (8 * i));
      key_[8 + i] = static_cast<unsigned char>(~seed >> (8 * i));
    }
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t hash(std::string_view msg) const {
    unsigned char out[crypto_shorthash_BYTES];
    crypto_shorthash(out, reinterpret_cast<const unsigned char*>(msg.data()), msg.size(), key_.data());
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(out[i]) << (8 * i);
    return v;
  }

  // The 53-bit integer behind variate(key); the variate is bits * 2^-53.
  std::uint64_t variate_bits(std::string_view key) const { return hash(with_tag('U', key)) >> 11; }

  double variate(std::string_view key) const { return static_cast<double>(variate_bits(key)) * 0x1p-53; }

  // Uniform integer in [0, bound) by rejection on 64-bit draws.
  std::uint64_t below(std::string_view key, std::uint64_t bound) const {
    if (bound == 0) throw Error("below: empty range");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    for (std::uint32_t attempt = 0;; ++attempt) {
      std::string m = with_tag('I', key);
      append_u32(m, attempt);
      const std::uint64_t h = hash(m);
      if (h < limit) return h % bound;
    }
  }

  // Uniform permutation of 0..n-1 (Fisher-Yates).
  std::vector<std::size_t> ordering(std::string_view key, std::size_t n) const {
    std::vector<std::size_t> p(n);
    std::iota(p.begin(), p.end(), 0);
    for (std::size_t i = n; i > 1; --i) {
      std::string k = with_tag('O', key);
      append_u32(k, static_cast<std::uint32_t>(i));
      std::swap(p[i - 1], p[below(k, i)]);
    }
    return p;
  }

  // Uniform injective map from 0..m-1 into 1..c.
  std::vector<int> injection(std::string_view key, std::size_t m, std::size_t c) const {
    if (m > c) throw Error("injection: " + std::to_string(m) + " points into " + std::to_string(c) + " labels");
    std::vector<int> pool(c);
    std::iota(pool.begin(), pool.end(), 1);
    for (std::size_t i = 0; i < m; ++i) {
      std::string k = with_tag('J', key);
      append_u32(k, static_cast<std::uint32_t>(i));
      std::swap(pool[i], pool[i + below(k, c - i)]);
    }
    pool.resize(m);
    return pool;
  }

  // A child source for independent streams (e.g. one per Monte Carlo draw).
  RandomnessSource derive(std::string_view tag, std::uint64_t index) const {
    std::string m = with_tag('D', tag);
    append_u32(m, static_cast<std::uint32_t>(index >> 32));
    append_u32(m, static_cast<std::uint32_t>(index));
    return RandomnessSource(hash(m));
  }

  static void append_u32(std::string& out, std::uint32_t v) {
    for (int sh = 24; sh >= 0; sh -= 8) out.push_back(static_cast<char>((v >> sh) & 0xff));
  }

 private:
  static std::string with_tag(char tag, std::string_view key) {
    std::string m(1, tag);
    m.append(key);
    return m;
  }

  std::uint64_t seed_;
  std::array<unsigned char, 16> key_{};
};

}  // namespace exch
