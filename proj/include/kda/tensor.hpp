#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace kda {

/// Dense row-major array of doubles.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor from(std::initializer_list<double> values);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  /// Same data, new shape. Element count must match.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const noexcept;
  double l2_norm() const noexcept;
  double max_abs() const noexcept;

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::size_t element_count(const Tensor::Shape& shape) noexcept;
std::string shape_string(const Tensor::Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ElementwiseOp { kAdd, kSub };

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

/// C x H x W image with every value in [0,1] and even spatial sides.
class ImageTensor {
 public:
  ImageTensor() = default;
  ImageTensor(std::size_t channels, std::size_t height, std::size_t width, double fill = 0.0);
  /// Validates range and geometry; throws std::invalid_argument otherwise.
  explicit ImageTensor(Tensor pixels);

  std::size_t channels() const noexcept { return channels_; }
  std::size_t height() const noexcept { return height_; }
  std::size_t width() const noexcept { return width_; }
  std::size_t plane_size() const noexcept { return height_ * width_; }

  const Tensor& tensor() const noexcept { return pixels_; }

  double at(std::size_t c, std::size_t r, std::size_t col) const noexcept {
    return pixels_[(c * height_ + r) * width_ + col];
  }
  /// Writes a value, clamped into [0,1].
  void set(std::size_t c, std::size_t r, std::size_t col, double v) noexcept;

  std::span<const double> plane(std::size_t c) const noexcept {
    return pixels_.values().subspan(c * plane_size(), plane_size());
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;

 private:
  std::size_t channels_ = 0;
  std::size_t height_ = 0;
  std::size_t width_ = 0;
  Tensor pixels_;
};

/// Stacks images into an N x C x H x W batch. Images must share geometry.
Tensor stack(std::span<const ImageTensor> images);
/// Clamps values into [0,1] and wraps them as an image.
ImageTensor clamp_to_image(const Tensor& chw);

}  // namespace kda
