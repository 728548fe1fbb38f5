#include "kda/transform.hpp"

#include <Eigen/Core>

#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>

namespace kda {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// Orthonormal DCT-II matrix: C[k][n] = a_k cos(pi (2n+1) k / 2N).
const RowMat& dct_matrix(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<RowMat>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) {
    auto m = std::make_unique<RowMat>(n, n);
    const double N = static_cast<double>(n);
    for (std::size_t k = 0; k < n; ++k) {
      const double a = k == 0 ? std::sqrt(1.0 / N) : std::sqrt(2.0 / N);
      for (std::size_t i = 0; i < n; ++i) {
        (*m)(k, i) = a * std::cos(M_PI * (2.0 * i + 1.0) * static_cast<double>(k) / (2.0 * N));
      }
    }
    slot = std::move(m);
  }
  return *slot;
}

void check_plane(const Tensor& t) {
  if (t.rank() != 2 || t.dim(0) < 2 || t.dim(1) < 2) {
    throw ShapeError("expected an H x W plane with both sides >= 2, got " + shape_string(t.shape()));
  }
}

Tensor separable(const Tensor& plane, bool inverse) {
  check_plane(plane);
  const auto h = static_cast<long>(plane.dim(0));
  const auto w = static_cast<long>(plane.dim(1));
  const RowMat& ch = dct_matrix(plane.dim(0));
  const RowMat& cw = dct_matrix(plane.dim(1));
  Eigen::Map<const RowMat> x(plane.data(), h, w);
  Tensor out(plane.shape());
  Eigen::Map<RowMat> y(out.data(), h, w);
  if (inverse) {
    y.noalias() = ch.transpose() * x * cw;
  } else {
    y.noalias() = ch * x * cw.transpose();
  }
  return out;
}

}  // namespace

char subband_tag(Subband s) {
  switch (s) {
    case Subband::kL: return 'L';
    case Subband::kV: return 'V';
    case Subband::kH: return 'H';
    case Subband::kD: return 'D';
  }
  return '?';
}

Subband parse_subband(char tag) {
  switch (tag) {
    case 'L': return Subband::kL;
    case 'V': return Subband::kV;
    case 'H': return Subband::kH;
    case 'D': return Subband::kD;
    default: throw std::invalid_argument(std::string("unknown sub-band tag '") + tag + "'");
  }
}

Region subband_region(Subband s, std::size_t height, std::size_t width) {
  if (height % 2 || width % 2) throw ShapeError("sub-band split needs even sides");
  const std::size_t hh = height / 2, hw = width / 2;
  switch (s) {
    case Subband::kL: return {0, 0, hh, hw};
    case Subband::kV: return {0, hw, hh, hw};
    case Subband::kH: return {hh, 0, hh, hw};
    case Subband::kD: return {hh, hw, hh, hw};
  }
  throw std::logic_error("bad sub-band");
}

Subband subband_of(std::size_t row, std::size_t col, std::size_t height, std::size_t width) {
  const bool bottom = row >= height / 2;
  const bool right = col >= width / 2;
  if (!bottom) return right ? Subband::kV : Subband::kL;
  return right ? Subband::kD : Subband::kH;
}

Tensor dct2(const Tensor& plane) { return separable(plane, false); }
Tensor idct2(const Tensor& coeffs) { return separable(coeffs, true); }

ChannelKey::ChannelKey(const SecretKey& master, std::size_t channel, std::size_t classifier)
    : channel_(channel), classifier_(classifier) {
  const std::uint64_t idx[2] = {channel, classifier};
  derived_ = master.derive("kda-channel", idx);
}

SignFlipMask SignFlipMask::identity(Subband s, std::size_t height, std::size_t width) {
  return {s, height, width, std::vector<std::int8_t>(height * width, 1)};
}

std::size_t SignFlipMask::flipped_count() const {
  std::size_t n = 0;
  for (auto s : signs) n += s < 0;
  return n;
}

SignFlipMask make_sign_flip(const ChannelKey& key, Subband subband, std::size_t height, std::size_t width,
                            double flip_fraction) {
  if (subband == Subband::kL) throw std::invalid_argument("the low-frequency sub-band L is never sign-flipped");
  if (!(flip_fraction >= 0.0 && flip_fraction <= 1.0)) throw std::invalid_argument("flip_fraction must be in [0,1]");
  const Region reg = subband_region(subband, height, width);
  SignFlipMask mask = SignFlipMask::identity(subband, height, width);
  const std::uint64_t tag = static_cast<std::uint64_t>(subband);
  KeyedStream stream(key.derived().derive("sign-flip", std::span(&tag, 1)));
  for (std::size_t r = reg.row0; r < reg.row0 + reg.rows; ++r) {
    for (std::size_t c = reg.col0; c < reg.col0 + reg.cols; ++c) {
      if (flip_fraction < 1.0 && !(stream.uniform() < flip_fraction)) continue;
      mask.signs[r * width + c] = stream.bits(1)[0] ? -1 : 1;
    }
  }
  return mask;
}

Tensor apply_mask(const Tensor& coeffs, const SignFlipMask& mask) {
  check_plane(coeffs);
  if (coeffs.dim(0) != mask.height || coeffs.dim(1) != mask.width) {
    throw ShapeError("mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                     " does not match plane " + shape_string(coeffs.shape()));
  }
  Tensor out = coeffs;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (mask.signs[i] < 0) out[i] = -out[i];
  }
  return out;
}

Tensor apply_pipeline(const Tensor& chw, const SignFlipMask& mask) {
  if (chw.rank() != 3 || chw.dim(1) != mask.height || chw.dim(2) != mask.width) {
    throw ShapeError("image " + shape_string(chw.shape()) + " does not match mask " + std::to_string(mask.height) +
                     "x" + std::to_string(mask.width));
  }
  const std::size_t plane = mask.height * mask.width;
  Tensor out(chw.shape());
  for (std::size_t c = 0; c < chw.dim(0); ++c) {
    Tensor p({mask.height, mask.width},
             std::vector<double>(chw.data() + c * plane, chw.data() + (c + 1) * plane));
    const Tensor back = idct2(apply_mask(dct2(p), mask));
    std::copy_n(back.data(), plane, out.data() + c * plane);
  }
  return out;
}

Tensor apply_pipeline(const ImageTensor& x, const SignFlipMask& mask) { return apply_pipeline(x.tensor(), mask); }

double mean_abs_change(const ImageTensor& x, const SignFlipMask& mask) {
  const Tensor y = apply_pipeline(x, mask);
  double acc = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) acc += std::abs(y[i] - x.tensor()[i]);
  return acc / static_cast<double>(y.size());
}

CoefficientPermutation::CoefficientPermutation(Region region, std::size_t height, std::size_t width,
                                               std::vector<std::size_t> order)
    : region_(region), height_(height), width_(width), order_(std::move(order)) {
  if (order_.size() != region_.area()) throw std::invalid_argument("permutation size does not match region");
  std::vector<bool> seen(order_.size());
  for (auto o : order_) {
    if (o >= order_.size() || seen[o]) throw std::invalid_argument("order is not a permutation");
    seen[o] = true;
  }
}

namespace {
std::size_t region_index(const Region& reg, std::size_t width, std::size_t k) {
  return (reg.row0 + k / reg.cols) * width + reg.col0 + k % reg.cols;
}
}  // namespace

Tensor CoefficientPermutation::apply(const Tensor& coeffs) const {
  check_plane(coeffs);
  if (coeffs.dim(0) != height_ || coeffs.dim(1) != width_) throw ShapeError("permutation shape mismatch");
  Tensor out = coeffs;
  for (std::size_t k = 0; k < order_.size(); ++k) {
    out[region_index(region_, width_, k)] = coeffs[region_index(region_, width_, order_[k])];
  }
  return out;
}

Tensor CoefficientPermutation::apply_inverse(const Tensor& coeffs) const {
  check_plane(coeffs);
  if (coeffs.dim(0) != height_ || coeffs.dim(1) != width_) throw ShapeError("permutation shape mismatch");
  Tensor out = coeffs;
  for (std::size_t k = 0; k < order_.size(); ++k) {
    out[region_index(region_, width_, order_[k])] = coeffs[region_index(region_, width_, k)];
  }
  return out;
}

CoefficientPermutation make_permutation(const ChannelKey& key, Subband subband, std::size_t height,
                                        std::size_t width) {
  const Region reg = subband_region(subband, height, width);
  const std::uint64_t tag = static_cast<std::uint64_t>(subband);
  KeyedStream stream(key.derived().derive("permutation", std::span(&tag, 1)));
  return CoefficientPermutation(reg, height, width, keyed_permutation(stream, reg.area()));
}

}  // namespace kda
