#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kda/transform.hpp"

using namespace kda;

namespace {

Tensor random_plane(std::size_t h, std::size_t w, std::uint64_t seed) {
  KeyedStream s(SecretKey::from_seed(seed).derive("plane"));
  Tensor t({h, w});
  for (double& v : t.values()) v = s.uniform();
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) { return sub(a, b).max_abs(); }

ChannelKey key(std::uint64_t seed, std::size_t j = 1, std::size_t i = 1) {
  return ChannelKey(SecretKey::from_seed(seed), j, i);
}

}  // namespace

TEST_CASE("DC-only signal") {
  const Tensor c = dct2(Tensor({8, 8}, 0.3));
  CHECK(c[0] == doctest::Approx(0.3 * 8));
  for (std::size_t i = 1; i < c.size(); ++i) CHECK(std::abs(c[i]) < 1e-12);
  const Tensor back = idct2(c);
  for (double v : back.values()) CHECK(v == doctest::Approx(0.3));
}

TEST_CASE("dct2 is orthonormal and invertible") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const std::size_t h = 2 + 2 * (s % 5), w = 32 - 2 * (s % 3);
    const Tensor x = random_plane(h, w, s);
    const Tensor c = dct2(x);
    CHECK(std::abs(c.l2_norm() - x.l2_norm()) < 1e-9);
    CHECK(max_abs_diff(idct2(c), x) < 1e-9);
  }
}

TEST_CASE("dct2 matches the textbook sum") {
  const std::size_t n = 6, m = 4;
  const Tensor x = random_plane(n, m, 99);
  const Tensor c = dct2(x);
  const double pi = std::acos(-1.0);
  for (std::size_t u = 0; u < n; ++u) {
    for (std::size_t v = 0; v < m; ++v) {
      double acc = 0.0;
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t q = 0; q < m; ++q) {
          acc += x[r * m + q] * std::cos(pi * (2 * r + 1) * u / (2.0 * n)) * std::cos(pi * (2 * q + 1) * v / (2.0 * m));
        }
      }
      const double au = u == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
      const double av = v == 0 ? std::sqrt(1.0 / m) : std::sqrt(2.0 / m);
      CHECK(c[u * m + v] == doctest::Approx(au * av * acc).epsilon(1e-12));
    }
  }
}

TEST_CASE("idct2 is linear") {
  const Tensor a = random_plane(16, 16, 1), b = random_plane(16, 16, 2);
  CHECK(max_abs_diff(idct2(add(a, b)), add(idct2(a), idct2(b))) < 1e-9);
}

TEST_CASE("quadrants partition the grid") {
  for (auto [h, w] : {std::pair<std::size_t, std::size_t>{32, 32}, {4, 8}, {10, 2}}) {
    std::vector<int> hits(h * w, 0);
    for (Subband s : {Subband::kL, Subband::kV, Subband::kH, Subband::kD}) {
      const Region r = subband_region(s, h, w);
      CHECK(r.area() == h * w / 4);
      for (std::size_t i = 0; i < h; ++i) {
        for (std::size_t j = 0; j < w; ++j) {
          if (r.contains(i, j)) {
            ++hits[i * w + j];
            CHECK(subband_of(i, j, h, w) == s);
          }
        }
      }
    }
    CHECK(std::all_of(hits.begin(), hits.end(), [](int c) { return c == 1; }));
  }
  CHECK(subband_region(Subband::kV, 32, 32).col0 == 16);
  CHECK(subband_region(Subband::kV, 32, 32).row0 == 0);
  CHECK(subband_region(Subband::kH, 32, 32).row0 == 16);
  CHECK(subband_region(Subband::kH, 32, 32).col0 == 0);
  CHECK(parse_subband(subband_tag(Subband::kD)) == Subband::kD);
}

TEST_CASE("sign flip mask structure") {
  const SignFlipMask m = make_sign_flip(key(1), Subband::kH, 32, 32);
  const Region r = subband_region(Subband::kH, 32, 32);
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      const int s = m.signs[i * 32 + j];
      if (r.contains(i, j)) {
        CHECK((s == 1 || s == -1));
      } else {
        CHECK(s == 1);
      }
    }
  }
  CHECK(make_sign_flip(key(1), Subband::kH, 32, 32) == m);
  CHECK_THROWS_AS(make_sign_flip(key(1), Subband::kL, 32, 32), std::invalid_argument);
  CHECK(SignFlipMask::identity(Subband::kV, 8, 8).flipped_count() == 0);
}

TEST_CASE("mask statistics over 50 keys") {
  // Each in-region sign is a fair coin, so a single 16x16 mask has standard
  // deviation 1/32 in its flipped fraction. The averages are held to the
  // tight bounds; each key only to four standard deviations.
  const Region r = subband_region(Subband::kV, 32, 32);
  double frac_sum = 0.0, diff_sum = 0.0;
  for (std::uint64_t s = 0; s < 50; ++s) {
    const SignFlipMask a = make_sign_flip(key(s), Subband::kV, 32, 32);
    const SignFlipMask b = make_sign_flip(key(s + 1000), Subband::kV, 32, 32);
    const double frac = static_cast<double>(a.flipped_count()) / r.area();
    CHECK(std::abs(frac - 0.5) < 0.125);
    std::size_t differ = 0;
    for (std::size_t i = 0; i < a.signs.size(); ++i) differ += a.signs[i] != b.signs[i];
    const double d = static_cast<double>(differ) / r.area();
    CHECK(d >= 0.40);
    frac_sum += frac;
    diff_sum += d;
  }
  CHECK(frac_sum / 50 >= 0.45);
  CHECK(frac_sum / 50 <= 0.55);
  CHECK(diff_sum / 50 >= 0.40);
}

TEST_CASE("flip fraction") {
  const SignFlipMask none = make_sign_flip(key(3), Subband::kD, 32, 32, 0.0);
  CHECK(none.flipped_count() == 0);
  const SignFlipMask quarter = make_sign_flip(key(3), Subband::kD, 32, 32, 0.25);
  CHECK(quarter.flipped_count() < make_sign_flip(key(3), Subband::kD, 32, 32).flipped_count());
  CHECK_THROWS(make_sign_flip(key(3), Subband::kD, 32, 32, 1.5));
}

TEST_CASE("distinct channels give distinct keys") {
  const SecretKey m = SecretKey::from_seed(5);
  CHECK_FALSE(ChannelKey(m, 1, 2).derived() == ChannelKey(m, 2, 1).derived());
  CHECK(ChannelKey(m, 3, 3).derived() == ChannelKey(m, 3, 3).derived());
}

TEST_CASE("masking touches only its sub-band") {
  const Tensor c = random_plane(32, 32, 7);
  const SignFlipMask m = make_sign_flip(key(2), Subband::kD, 32, 32);
  const Tensor out = apply_mask(c, m);
  const Region r = subband_region(Subband::kD, 32, 32);
  for (std::size_t i = 0; i < 32; ++i) {
    for (std::size_t j = 0; j < 32; ++j) {
      if (!r.contains(i, j)) CHECK(out[i * 32 + j] == c[i * 32 + j]);
    }
  }
  CHECK_THROWS_AS(apply_mask(random_plane(16, 16, 1), m), ShapeError);
}

TEST_CASE("pipeline: identity, energy, involution") {
  KeyedStream s(SecretKey::from_seed(8));
  Tensor chw({3, 32, 32});
  for (double& v : chw.values()) v = s.uniform();
  const ImageTensor img(chw);

  CHECK(max_abs_diff(apply_pipeline(img, SignFlipMask::identity(Subband::kV, 32, 32)), chw) < 1e-9);
  for (Subband b : {Subband::kV, Subband::kH, Subband::kD}) {
    const SignFlipMask m = make_sign_flip(key(9), b, 32, 32);
    const Tensor y = apply_pipeline(img, m);
    CHECK(std::abs(y.l2_norm() - chw.l2_norm()) < 1e-9);
    CHECK(max_abs_diff(apply_pipeline(y, m), chw) < 1e-9);
    CHECK(max_abs_diff(y, chw) > 1e-3);
  }
  CHECK_THROWS_AS(apply_pipeline(Tensor({3, 16, 16}), make_sign_flip(key(9), Subband::kV, 32, 32)), ShapeError);
}

TEST_CASE("pipeline is its own adjoint") {
  const SignFlipMask m = make_sign_flip(key(10), Subband::kV, 8, 8);
  Tensor a({1, 8, 8}), b({1, 8, 8});
  KeyedStream s(SecretKey::from_seed(10));
  for (double& v : a.values()) v = s.normal();
  for (double& v : b.values()) v = s.normal();
  const Tensor pa = apply_pipeline(a, m), pb = apply_pipeline(b, m);
  double lhs = 0, rhs = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    lhs += pa[i] * b[i];
    rhs += a[i] * pb[i];
  }
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("coefficient permutation") {
  const auto p = make_permutation(key(4), Subband::kV, 16, 16);
  const Tensor c = random_plane(16, 16, 4);
  const Tensor y = p.apply(c);
  CHECK(max_abs_diff(p.apply_inverse(y), c) == 0.0);
  CHECK(make_permutation(key(4), Subband::kV, 16, 16).order() == p.order());
  std::vector<double> a(c.values().begin(), c.values().end()), b(y.values().begin(), y.values().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  CHECK(a == b);
  const Region r = subband_region(Subband::kV, 16, 16);
  for (std::size_t i = 0; i < 16; ++i) {
    for (std::size_t j = 0; j < 16; ++j) {
      if (!r.contains(i, j)) CHECK(y[i * 16 + j] == c[i * 16 + j]);
    }
  }
}
