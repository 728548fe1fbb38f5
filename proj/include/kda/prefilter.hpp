#pragma once

#include "kda/tensor.hpp"

namespace kda {

/// 3x3 median-difference outlier filter settings.
struct PrefilterConfig {
  bool enabled = true;
  double threshold = 0.25;  // tau, in pixel units

  void validate() const;
  friend bool operator==(const PrefilterConfig&, const PrefilterConfig&) = default;
};

/// For every pixel (per plane, mirror-padded borders): when
/// |x - median3x3| > threshold the pixel is replaced by the 3x3 mean of the
/// original image, otherwise it is copied through untouched.
ImageTensor median_outlier_filter(const ImageTensor& x, const PrefilterConfig& cfg);

/// Fraction of pixels the filter would leave untouched.
double prefilter_pass_rate(const ImageTensor& x, const PrefilterConfig& cfg);

}  // namespace kda
