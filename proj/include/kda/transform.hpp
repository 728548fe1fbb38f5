#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kda/keyed_stream.hpp"
#include "kda/tensor.hpp"

namespace kda {

/// Quadrants of the whole-image DCT grid: L top-left (low frequencies),
/// V top-right, H bottom-left, D bottom-right.
enum class Subband : std::uint8_t { kL = 0, kV = 1, kH = 2, kD = 3 };

char subband_tag(Subband s);
Subband parse_subband(char tag);

struct Region {
  std::size_t row0 = 0, col0 = 0, rows = 0, cols = 0;

  bool contains(std::size_t r, std::size_t c) const noexcept {
    return r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols;
  }
  std::size_t area() const noexcept { return rows * cols; }
};

/// Quadrant geometry for an even-sided height x width grid.
Region subband_region(Subband s, std::size_t height, std::size_t width);
Subband subband_of(std::size_t row, std::size_t col, std::size_t height, std::size_t width);

/// Orthonormal 2D DCT-II of an H x W plane (rows and columns separably).
Tensor dct2(const Tensor& plane);
Tensor idct2(const Tensor& coeffs);

/// Key of classifier i in channel j, derived from the master secret.
class ChannelKey {
 public:
  ChannelKey() = default;
  ChannelKey(const SecretKey& master, std::size_t channel, std::size_t classifier);

  std::size_t channel() const noexcept { return channel_; }
  std::size_t classifier() const noexcept { return classifier_; }
  const SecretKey& derived() const noexcept { return derived_; }

  friend bool operator==(const ChannelKey&, const ChannelKey&) = default;

 private:
  std::size_t channel_ = 0;
  std::size_t classifier_ = 0;
  SecretKey derived_;
};

/// Diagonal +-1 operator over the coefficient grid: keyed signs inside the
/// sub-band, +1 everywhere else.
struct SignFlipMask {
  Subband subband = Subband::kV;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int8_t> signs;  // height * width, row-major

  static SignFlipMask identity(Subband s, std::size_t height, std::size_t width);
  std::size_t flipped_count() const;
  friend bool operator==(const SignFlipMask&, const SignFlipMask&) = default;
};

/// Draws the in-region signs from the key's stream. `flip_fraction` is the
/// share of in-region coefficients that receive a random sign (default: all).
/// Throws std::invalid_argument for the L sub-band.
SignFlipMask make_sign_flip(const ChannelKey& key, Subband subband, std::size_t height, std::size_t width,
                            double flip_fraction = 1.0);

/// mask (x) coeffs for one H x W plane.
Tensor apply_mask(const Tensor& coeffs, const SignFlipMask& mask);

/// Per colour plane: idct2(mask (x) dct2(plane)). Input is C x H x W; the
/// result is not clipped back into [0,1]. The operator is symmetric and
/// orthogonal, so it is also its own adjoint and inverse.
Tensor apply_pipeline(const Tensor& chw, const SignFlipMask& mask);
Tensor apply_pipeline(const ImageTensor& x, const SignFlipMask& mask);

/// Mean absolute pixel change the pipeline makes to x (report-only metric of
/// how visible a sub-band flip is).
double mean_abs_change(const ImageTensor& x, const SignFlipMask& mask);

/// Keyed bijection of the coefficients inside one sub-band.
class CoefficientPermutation {
 public:
  CoefficientPermutation(Region region, std::size_t height, std::size_t width, std::vector<std::size_t> order);

  Tensor apply(const Tensor& coeffs) const;
  Tensor apply_inverse(const Tensor& coeffs) const;
  const std::vector<std::size_t>& order() const noexcept { return order_; }

 private:
  Region region_;
  std::size_t height_, width_;
  std::vector<std::size_t> order_;
};

CoefficientPermutation make_permutation(const ChannelKey& key, Subband subband, std::size_t height,
                                        std::size_t width);

}  // namespace kda
