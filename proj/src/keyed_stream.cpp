#include "kda/keyed_stream.hpp"

#include <sodium.h>

#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <stdexcept>

namespace kda {
namespace {

void ensure_sodium() {
  static const bool ok = sodium_init() >= 0;
  if (!ok) throw std::runtime_error("libsodium initialisation failed");
}

void put_le64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

}  // namespace

SecretKey SecretKey::from_seed(std::uint64_t seed) {
  ensure_sodium();
  std::vector<std::uint8_t> msg{'k', 'd', 'a', '-', 's', 'e', 'e', 'd'};
  put_le64(msg, seed);
  Bytes out{};
  crypto_generichash(out.data(), out.size(), msg.data(), msg.size(), nullptr, 0);
  return SecretKey(out);
}

SecretKey SecretKey::generate() {
  ensure_sodium();
  Bytes out{};
  randombytes_buf(out.data(), out.size());
  return SecretKey(out);
}

SecretKey SecretKey::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open key file " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (raw.size() != 32) {
    throw std::runtime_error("key file " + path.string() + " must hold exactly 32 bytes, found " +
                             std::to_string(raw.size()));
  }
  Bytes b{};
  for (std::size_t i = 0; i < 32; ++i) b[i] = static_cast<std::uint8_t>(raw[i]);
  return SecretKey(b);
}

void SecretKey::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write key file " + path.string());
  out.write(reinterpret_cast<const char*>(bytes_.data()), static_cast<std::streamsize>(bytes_.size()));
}

SecretKey SecretKey::derive(std::string_view label, std::span<const std::uint64_t> indices) const {
  ensure_sodium();
  std::vector<std::uint8_t> msg(label.begin(), label.end());
  msg.push_back(0);
  for (auto idx : indices) put_le64(msg, idx);
  Bytes out{};
  crypto_generichash(out.data(), out.size(), msg.data(), msg.size(), bytes_.data(), bytes_.size());
  return SecretKey(out);
}

std::string SecretKey::fingerprint() const {
  ensure_sodium();
  static constexpr std::string_view kDomain = "kda-fingerprint";
  std::vector<std::uint8_t> msg(kDomain.begin(), kDomain.end());
  msg.insert(msg.end(), bytes_.begin(), bytes_.end());
  std::array<std::uint8_t, 32> digest{};
  crypto_generichash(digest.data(), digest.size(), msg.data(), msg.size(), nullptr, 0);
  std::string hex(digest.size() * 2 + 1, '\0');
  sodium_bin2hex(hex.data(), hex.size(), digest.data(), digest.size());
  hex.pop_back();
  return hex;
}

KeyedStream::KeyedStream(const SecretKey& seed, std::uint64_t counter) : seed_(seed), counter_(counter) {
  ensure_sodium();
}

void KeyedStream::refill(std::uint64_t block) {
  static constexpr std::array<std::uint8_t, 64> kZero{};
  static constexpr std::array<std::uint8_t, crypto_stream_chacha20_NONCEBYTES> kNonce{};
  crypto_stream_chacha20_xor_ic(block_.data(), kZero.data(), kZero.size(), kNonce.data(), block,
                                seed_.bytes().data());
  cached_block_ = block;
}

bool KeyedStream::next_bit() {
  const std::uint64_t block = counter_ / 512;
  if (block != cached_block_) refill(block);
  const std::uint64_t within = counter_ % 512;
  ++counter_;
  return (block_[within / 8] >> (within % 8)) & 1u;
}

std::vector<std::uint8_t> KeyedStream::bits(std::size_t n) {
  std::vector<std::uint8_t> out(n);
  for (auto& b : out) b = next_bit() ? 1 : 0;
  return out;
}

std::uint64_t KeyedStream::next_u64() {
  // Byte-aligned fast path; falls back to bitwise reads otherwise.
  if (counter_ % 8 == 0 && (counter_ % 512) <= 512 - 64) {
    const std::uint64_t block = counter_ / 512;
    if (block != cached_block_) refill(block);
    const std::size_t byte = (counter_ % 512) / 8;
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{block_[byte + i]} << (8 * i);
    counter_ += 64;
    return v;
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 64; ++i) v |= std::uint64_t{next_bit()} << i;
  return v;
}

double KeyedStream::uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

std::uint64_t KeyedStream::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("below(0)");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % bound);
  for (;;) {
    const std::uint64_t v = next_u64();
    if (v < limit) return v % bound;
  }
}

double KeyedStream::normal() {
  // Box-Muller; the second variate is discarded so the stream position stays simple.
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

std::vector<std::size_t> keyed_permutation(KeyedStream& stream, std::size_t n) {
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = stream.below(i);
    std::swap(perm[i - 1], perm[j]);
  }
  return perm;
}

}  // namespace kda
