#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cfkd/error.hpp"

namespace cfkd {

struct ImageShape {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t size() const {
    return static_cast<std::size_t>(height) * width * channels;
  }
  bool operator==(const ImageShape&) const = default;
  std::string str() const {
    return std::to_string(height) + "x" + std::to_string(width) + "x" +
           std::to_string(channels);
  }
};

// H x W x C image, row-major with interleaved channels (HWC). Values live in
// [0,1] for dataset images; counterfactual iterates may leave that range and
// are only clipped for presentation.
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(ImageShape shape, double fill = 0.0)
      : shape_(shape), data_(shape.size(), fill) {}
  ImageTensor(ImageShape shape, std::vector<double> data)
      : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw InputError("image data has " + std::to_string(data_.size()) +
                       " values, shape " + shape_.str() + " needs " +
                       std::to_string(shape_.size()));
    }
  }

  const ImageShape& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  std::size_t size() const { return data_.size(); }

  double& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return data_[index(y, x, c)]; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  const std::vector<double>& vector() const { return data_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }
  bool in_unit_range() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return v >= 0.0 && v <= 1.0; });
  }

  // Throws InputError unless finite and within [0,1].
  void validate() const {
    if (!all_finite()) throw InputError("image contains non-finite values");
    if (!in_unit_range()) throw InputError("image values outside [0,1]");
  }

  ImageTensor clipped() const {
    ImageTensor out = *this;
    for (double& v : out.data_) v = std::clamp(v, 0.0, 1.0);
    return out;
  }

  bool operator==(const ImageTensor&) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * shape_.width + x) * shape_.channels +
           c;
  }

  ImageShape shape_;
  std::vector<double> data_;
};

// HWC <-> CHW, the layout the convolution layers work in.
inline std::vector<double> hwc_to_chw(std::span<const double> hwc,
                                      ImageShape s) {
  std::vector<double> chw(s.size());
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      for (int c = 0; c < s.channels; ++c)
        chw[(static_cast<std::size_t>(c) * s.height + y) * s.width + x] =
            hwc[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c];
  return chw;
}

inline std::vector<double> chw_to_hwc(std::span<const double> chw,
                                      ImageShape s) {
  std::vector<double> hwc(s.size());
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      for (int c = 0; c < s.channels; ++c)
        hwc[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] =
            chw[(static_cast<std::size_t>(c) * s.height + y) * s.width + x];
  return hwc;
}

// 8-bit quantisation used for storage: floor(v * 255 + 0.5) after clipping.
inline unsigned char quantize_channel(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<unsigned char>(std::floor(c * 255.0 + 0.5));
}

inline std::vector<unsigned char> to_bytes(const ImageTensor& img) {
  std::vector<unsigned char> out(img.size());
  auto v = img.values();
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = quantize_channel(v[i]);
  return out;
}

inline ImageTensor from_bytes(ImageShape shape,
                              std::span<const unsigned char> bytes) {
  if (bytes.size() != shape.size())
    throw InputError("byte buffer does not match shape " + shape.str());
  std::vector<double> data(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) data[i] = bytes[i] / 255.0;
  return ImageTensor(shape, std::move(data));
}

// Snap every value onto the 1/255 grid (what a PNG round trip produces).
inline ImageTensor quantized(const ImageTensor& img) {
  auto b = to_bytes(img);
  return from_bytes(img.shape(), b);
}

}  // namespace cfkd
