#include "kda/prefilter.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace kda {
namespace {

// Mirror (reflect without repeating the edge): -1 -> 1, n -> n-2.
std::size_t mirror(long i, std::size_t n) {
  if (i < 0) return static_cast<std::size_t>(-i);
  if (i >= static_cast<long>(n)) return 2 * n - 2 - static_cast<std::size_t>(i);
  return static_cast<std::size_t>(i);
}

template <typename Visit>
void for_each_flagged(const ImageTensor& x, double threshold, Visit visit) {
  const auto h = x.height(), w = x.width();
  std::array<double, 9> win{};
  for (std::size_t c = 0; c < x.channels(); ++c) {
    for (std::size_t r = 0; r < h; ++r) {
      for (std::size_t col = 0; col < w; ++col) {
        std::size_t k = 0;
        double sum = 0.0;
        for (long dr = -1; dr <= 1; ++dr) {
          for (long dc = -1; dc <= 1; ++dc) {
            const double v = x.at(c, mirror(static_cast<long>(r) + dr, h), mirror(static_cast<long>(col) + dc, w));
            win[k++] = v;
            sum += v;
          }
        }
        std::nth_element(win.begin(), win.begin() + 4, win.end());
        const double center = x.at(c, r, col);
        if (std::abs(center - win[4]) > threshold) visit(c, r, col, sum / 9.0);
      }
    }
  }
}

}  // namespace

void PrefilterConfig::validate() const {
  if (!(threshold >= 0.0)) throw std::invalid_argument("prefilter threshold must be >= 0");
}

ImageTensor median_outlier_filter(const ImageTensor& x, const PrefilterConfig& cfg) {
  cfg.validate();
  if (!cfg.enabled) return x;
  ImageTensor out = x;
  for_each_flagged(x, cfg.threshold,
                   [&](std::size_t c, std::size_t r, std::size_t col, double mean) { out.set(c, r, col, mean); });
  return out;
}

double prefilter_pass_rate(const ImageTensor& x, const PrefilterConfig& cfg) {
  cfg.validate();
  if (!cfg.enabled) return 1.0;
  std::size_t flagged = 0;
  for_each_flagged(x, cfg.threshold, [&](std::size_t, std::size_t, std::size_t, double) { ++flagged; });
  return 1.0 - static_cast<double>(flagged) / static_cast<double>(x.tensor().size());
}

}  // namespace kda
