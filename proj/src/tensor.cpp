#include "kda/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace kda {

std::size_t element_count(const Tensor::Shape& shape) noexcept {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Tensor::Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (element_count(shape_) != data_.size()) {
    throw ShapeError("tensor shape " + shape_string(shape_) + " does not match " +
                     std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

double Tensor::l2_norm() const noexcept {
  double s = 0.0;
  for (double v : data_) s += v * v;
  return std::sqrt(s);
}

double Tensor::max_abs() const noexcept {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("shape mismatch: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out[i] = op == ElementwiseOp::kAdd ? a[i] + b[i] : a[i] - b[i];
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::kSub, a, b); }

Tensor scale(const Tensor& a, double s) {
  Tensor out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

ImageTensor::ImageTensor(std::size_t channels, std::size_t height, std::size_t width, double fill)
    : ImageTensor(Tensor({channels, height, width}, fill)) {}

ImageTensor::ImageTensor(Tensor pixels) : pixels_(std::move(pixels)) {
  if (pixels_.rank() != 3) throw ShapeError("image must be C x H x W, got " + shape_string(pixels_.shape()));
  channels_ = pixels_.dim(0);
  height_ = pixels_.dim(1);
  width_ = pixels_.dim(2);
  if (channels_ != 1 && channels_ != 3) throw ShapeError("image must have 1 or 3 channels");
  if (height_ == 0 || width_ == 0 || height_ % 2 || width_ % 2) {
    throw ShapeError("image sides must be even and nonzero, got " + shape_string(pixels_.shape()));
  }
  for (double v : pixels_.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("pixel value outside [0,1]");
  }
}

void ImageTensor::set(std::size_t c, std::size_t r, std::size_t col, double v) noexcept {
  pixels_[(c * height_ + r) * width_ + col] = std::clamp(v, 0.0, 1.0);
}

Tensor stack(std::span<const ImageTensor> images) {
  if (images.empty()) return Tensor({0});
  const auto& first = images.front();
  Tensor out({images.size(), first.channels(), first.height(), first.width()});
  const std::size_t per = first.tensor().size();
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].tensor().shape() != first.tensor().shape()) throw ShapeError("images differ in shape");
    std::copy_n(images[n].tensor().data(), per, out.data() + n * per);
  }
  return out;
}

ImageTensor clamp_to_image(const Tensor& chw) {
  Tensor t = chw;
  for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
  return ImageTensor(std::move(t));
}

}  // namespace kda
