#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kda {

/// 256-bit secret. Every random decision in the library is derived from one.
class SecretKey {
 public:
  using Bytes = std::array<std::uint8_t, 32>;

  SecretKey() = default;
  explicit SecretKey(const Bytes& bytes) : bytes_(bytes) {}

  /// Expands a small integer seed into a key (for experiments and tests).
  static SecretKey from_seed(std::uint64_t seed);
  /// Fresh key from the OS entropy source.
  static SecretKey generate();

  static SecretKey load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// PRF(key, label || indices), used for every sub-key in the system.
  SecretKey derive(std::string_view label, std::span<const std::uint64_t> indices = {}) const;

  /// One-way hex digest, safe to store next to models.
  std::string fingerprint() const;

  const Bytes& bytes() const noexcept { return bytes_; }
  friend bool operator==(const SecretKey&, const SecretKey&) = default;

 private:
  Bytes bytes_{};
};

/// ChaCha20 keystream addressed by bit position. Same (seed, counter) gives
/// the same output on every platform.
class KeyedStream {
 public:
  explicit KeyedStream(const SecretKey& seed, std::uint64_t counter = 0);

  std::uint64_t counter() const noexcept { return counter_; }
  const SecretKey& seed() const noexcept { return seed_; }

  /// n bits (each 0 or 1); advances the counter by n.
  std::vector<std::uint8_t> bits(std::size_t n);
  std::uint64_t next_u64();
  /// Uniform double in [0,1) with 53 bits of resolution.
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  /// Unbiased integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);
  double normal();

 private:
  bool next_bit();
  void refill(std::uint64_t block);

  SecretKey seed_;
  std::uint64_t counter_ = 0;
  std::uint64_t cached_block_ = ~std::uint64_t{0};
  std::array<std::uint8_t, 64> block_{};
};

/// Fisher-Yates shuffle of [0, n) driven by the stream.
std::vector<std::size_t> keyed_permutation(KeyedStream& stream, std::size_t n);

}  // namespace kda
