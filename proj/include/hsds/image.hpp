#pragma once

#include "hsds/tensor.hpp"

#include <Eigen/Core>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace hsds {

enum class ColorSpace { rgb, grayscale };

/// Planar (CHW) image with intensities in [0,1].
class Image {
 public:
  static constexpr Index kMinSide = 8;

  Image() = default;
  /// Validates extent, channel count and value range.
  Image(Index height, Index width, Index channels, Eigen::ArrayXd pixels);
  Image(Index height, Index width, Index channels, double fill);

  Index height() const { return height_; }
  Index width() const { return width_; }
  Index channels() const { return channels_; }
  ColorSpace color_space() const { return channels_ == 3 ? ColorSpace::rgb : ColorSpace::grayscale; }
  const Eigen::ArrayXd& pixels() const { return pixels_; }

  double at(Index c, Index y, Index x) const { return pixels_[(c * height_ + y) * width_ + x]; }

  bool same_extent(const Image& o) const {
    return height_ == o.height_ && width_ == o.width_ && channels_ == o.channels_;
  }

  /// Rows [y, y+h) and columns [x, x+w).
  Image crop(Index y, Index x, Index h, Index w) const;
  /// Grayscale images are replicated into three channels; RGB is returned as-is.
  Image to_rgb() const;
  /// BT.601 luma, still in [0,1].
  Eigen::ArrayXXd luminance() const;

  template <typename Scalar>
  Tensor<Scalar> to_tensor() const {
    return Tensor<Scalar>(Shape{1, channels_, height_, width_}, pixels_.cast<Scalar>());
  }

 private:
  Index height_ = 0;
  Index width_ = 0;
  Index channels_ = 0;
  Eigen::ArrayXd pixels_;
};

/// Clamps sample n of an NCHW tensor into [0,1] and wraps it as an Image.
template <typename Scalar>
Image image_from_tensor(const Tensor<Scalar>& t, Index n = 0) {
  const Shape& s = t.shape();
  Eigen::ArrayXd px = t.array().segment(n * s.sample(), s.sample()).template cast<double>().cwiseMax(0.0).cwiseMin(1.0);
  return Image(s.h, s.w, s.c, std::move(px));
}

class ImageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};
class DecodeError : public ImageError {
 public:
  using ImageError::ImageError;
};
class ImageTooSmall : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Decodes 8/16-bit PNG or baseline JPEG (by extension) into [0,1].
Image read_image(const std::filesystem::path& path);
/// Writes an 8-bit PNG; values are rounded to the nearest level.
void write_png(const std::filesystem::path& path, const Image& img);

/// [0,1] -> nearest 8-bit level.
inline unsigned char quantize8(double v) {
  const double s = v * 255.0 + 0.5;
  return static_cast<unsigned char>(s < 0.0 ? 0.0 : (s > 255.0 ? 255.0 : s));
}

}  // namespace hsds
