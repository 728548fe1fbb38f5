#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "kda/keyed_stream.hpp"
#include "kda/tensor.hpp"

using namespace kda;

TEST_CASE("elementwise ops") {
  const Tensor a = Tensor::from({1, 2});
  const Tensor b = Tensor::from({3, 4});
  CHECK(add(a, b) == Tensor::from({4, 6}));
  CHECK(scale(a, 0.0) == Tensor::from({0, 0}));
  CHECK(sub(a, a) == Tensor::from({0, 0}));
  CHECK(elementwise(ElementwiseOp::kSub, b, a) == Tensor::from({2, 2}));
  CHECK_THROWS_AS(add(a, Tensor({3})), ShapeError);
}

TEST_CASE("tensor shape bookkeeping") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  const Tensor r = t.reshaped({3, 2});
  CHECK(r.dim(0) == 3);
  CHECK_THROWS_AS(t.reshaped({4}), ShapeError);
  CHECK(t.all_finite());
  t[2] = std::nan("");
  CHECK_FALSE(t.all_finite());
  CHECK(Tensor::from({3, 4}).l2_norm() == doctest::Approx(5.0));
}

TEST_CASE("image tensor invariants") {
  CHECK_THROWS(ImageTensor(Tensor({3, 3, 4})));   // odd height
  CHECK_THROWS(ImageTensor(Tensor({2, 4, 4})));   // two channels
  CHECK_THROWS(ImageTensor(Tensor({1, 2, 2}, 1.5)));
  ImageTensor img(3, 4, 4, 0.5);
  img.set(1, 2, 3, 7.0);
  CHECK(img.at(1, 2, 3) == 1.0);
  img.set(0, 0, 0, -1.0);
  CHECK(img.at(0, 0, 0) == 0.0);
  CHECK(img.plane(1)[2 * 4 + 3] == 1.0);

  const std::vector<ImageTensor> imgs{img, ImageTensor(3, 4, 4)};
  const Tensor batch = stack(imgs);
  CHECK(batch.shape() == Tensor::Shape{2, 3, 4, 4});
  CHECK(clamp_to_image(Tensor({1, 2, 2}, 2.0)).at(0, 1, 1) == 1.0);
}

TEST_CASE("keyed bits: empty and deterministic") {
  const SecretKey k = SecretKey::from_seed(7);
  KeyedStream s(k);
  CHECK(s.bits(0).empty());
  CHECK(s.counter() == 0);
  KeyedStream a(k), b(k);
  const auto x = a.bits(128);
  CHECK(x == b.bits(128));
  CHECK(a.counter() == 128);
  for (auto bit : x) CHECK(bit <= 1);
}

TEST_CASE("keyed bits: counter addressing") {
  const SecretKey k = SecretKey::from_seed(11);
  KeyedStream whole(k);
  const auto all = whole.bits(1000);
  KeyedStream tail(k, 333);
  const auto part = tail.bits(667);
  CHECK(std::equal(part.begin(), part.end(), all.begin() + 333));
}

TEST_CASE("keyed bits: distinct seeds are far apart") {
  constexpr std::size_t n = 10000;
  for (std::uint64_t p = 0; p < 20; ++p) {
    KeyedStream a(SecretKey::from_seed(2 * p)), b(SecretKey::from_seed(2 * p + 1));
    const auto x = a.bits(n), y = b.bits(n);
    std::size_t diff = 0;
    for (std::size_t i = 0; i < n; ++i) diff += x[i] != y[i];
    const double rate = static_cast<double>(diff) / n;
    CHECK(rate >= 0.45);
    CHECK(rate <= 0.55);
  }
}

TEST_CASE("keyed stream uniformity: chi-square over 16 bins") {
  // 15 degrees of freedom; 37.70 is the 0.999 quantile.
  for (std::uint64_t seed : {1, 2, 3, 4, 5}) {
    KeyedStream s(SecretKey::from_seed(seed));
    std::array<double, 16> counts{};
    constexpr int n = 10000;
    for (int i = 0; i < n; ++i) counts[s.below(16)] += 1;
    double chi2 = 0.0;
    for (double c : counts) chi2 += (c - n / 16.0) * (c - n / 16.0) / (n / 16.0);
    CHECK(chi2 < 37.70);
  }
}

TEST_CASE("keyed stream draws") {
  KeyedStream s(SecretKey::from_seed(3));
  double sum = 0, sq = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = s.uniform();
    CHECK((u >= 0.0 && u < 1.0));
    const double z = s.normal();
    sum += z;
    sq += z * z;
  }
  CHECK(std::abs(sum / 20000) < 0.05);
  CHECK(std::abs(sq / 20000 - 1.0) < 0.05);

  KeyedStream p(SecretKey::from_seed(4));
  auto perm = keyed_permutation(p, 100);
  std::sort(perm.begin(), perm.end());
  for (std::size_t i = 0; i < 100; ++i) CHECK(perm[i] == i);
}

TEST_CASE("secret key derivation and files") {
  const SecretKey m = SecretKey::from_seed(1);
  const std::uint64_t i1[2] = {1, 2}, i2[2] = {2, 1};
  CHECK(m.derive("x", i1) == m.derive("x", i1));
  CHECK_FALSE(m.derive("x", i1) == m.derive("x", i2));
  CHECK_FALSE(m.derive("x") == m.derive("y"));
  CHECK(m.fingerprint().size() == 64);
  CHECK(m.fingerprint() != SecretKey::from_seed(2).fingerprint());

  const auto path = std::filesystem::temp_directory_path() / "kda_test_key.bin";
  m.save(path);
  CHECK(std::filesystem::file_size(path) == 32);
  CHECK(SecretKey::load(path) == m);
  {
    std::ofstream out(path, std::ios::binary);
    out << "short";
  }
  CHECK_THROWS(SecretKey::load(path));
  std::filesystem::remove(path);
}
