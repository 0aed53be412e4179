#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/tensor.hpp"

namespace latent_inpaint {

class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Planar (C, H, W) image with values in [-1, 1].
struct Image {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;

  Image() = default;
  Image(std::size_t c, std::size_t h, std::size_t w, double fill = 0.0)
      : channels(c), height(h), width(w), values(c * h * w, fill) {}

  double& at(std::size_t c, std::size_t i, std::size_t j) { return values[(c * height + i) * width + j]; }
  double at(std::size_t c, std::size_t i, std::size_t j) const {
    return values[(c * height + i) * width + j];
  }
  std::size_t pixels() const { return height * width; }
  bool same_shape(const Image& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
  bool operator==(const Image&) const = default;
};

/// Binary map over pixels: 1 = known, 0 = hole.
struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> known;

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 1) : height(h), width(w), known(h * w, fill) {}

  std::uint8_t at(std::size_t i, std::size_t j) const { return known[i * width + j]; }
  std::uint8_t& at(std::size_t i, std::size_t j) { return known[i * width + j]; }

  std::size_t known_count() const {
    return static_cast<std::size_t>(std::count(known.begin(), known.end(), std::uint8_t{1}));
  }
  std::size_t hole_count() const { return known.size() - known_count(); }

  Mask complement() const {
    Mask m(height, width);
    for (std::size_t k = 0; k < known.size(); ++k) m.known[k] = known[k] ? 0 : 1;
    return m;
  }
  bool operator==(const Mask&) const = default;
};

inline Tensor image_to_tensor(const Image& img, bool requires_grad = false) {
  return Tensor({1, img.channels, img.height, img.width}, img.values, requires_grad);
}

/// Sample `index` of an [N, C, H, W] tensor.
inline Image tensor_to_image(const Tensor& t, std::size_t index = 0) {
  if (t.rank() != 4 || index >= t.dim(0)) throw ShapeError("expected [N,C,H,W] tensor");
  Image img(t.dim(1), t.dim(2), t.dim(3));
  auto src = t.data().subspan(index * img.values.size(), img.values.size());
  std::copy(src.begin(), src.end(), img.values.begin());
  return img;
}

// ---------------------------------------------------------------------------
// 8-bit conversion
// ---------------------------------------------------------------------------

inline std::uint8_t to_byte(double v) {
  const double scaled = std::round(127.5 * (v + 1.0));
  return static_cast<std::uint8_t>(std::clamp(scaled, 0.0, 255.0));
}

inline double from_byte(std::uint8_t b) { return static_cast<double>(b) / 127.5 - 1.0; }

/// Interleaved (H, W, C) 8-bit raster as stored in PNG files.
struct Raster8 {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bytes;
};

inline Image raster_to_image(const Raster8& r) {
  Image img(r.channels, r.height, r.width);
  for (std::size_t i = 0; i < r.height; ++i)
    for (std::size_t j = 0; j < r.width; ++j)
      for (std::size_t c = 0; c < r.channels; ++c)
        img.at(c, i, j) = from_byte(r.bytes[(i * r.width + j) * r.channels + c]);
  return img;
}

inline Raster8 image_to_raster(const Image& img) {
  Raster8 r{img.channels, img.height, img.width, std::vector<std::uint8_t>(img.values.size())};
  for (std::size_t i = 0; i < img.height; ++i)
    for (std::size_t j = 0; j < img.width; ++j)
      for (std::size_t c = 0; c < img.channels; ++c)
        r.bytes[(i * img.width + j) * img.channels + c] = to_byte(img.at(c, i, j));
  return r;
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Reads a PNG converted to `channels` (1 = gray, 3 = RGB) 8-bit samples.
inline Raster8 read_png(const std::filesystem::path& path, std::size_t channels) {
  if (channels != 1 && channels != 3) throw std::invalid_argument("read_png: channels must be 1 or 3");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw ImageIoError("cannot read PNG '" + path.string() + "': " + image.message);
  }
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Raster8 r{channels, image.height, image.width, std::vector<std::uint8_t>(PNG_IMAGE_SIZE(image))};
  if (!png_image_finish_read(&image, nullptr, r.bytes.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw ImageIoError("cannot decode PNG '" + path.string() + "': " + msg);
  }
  return r;
}

inline void write_png(const std::filesystem::path& path, const Raster8& r) {
  if (r.channels != 1 && r.channels != 3) throw std::invalid_argument("write_png: channels must be 1 or 3");
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(r.width);
  image.height = static_cast<png_uint_32>(r.height);
  image.format = r.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, r.bytes.data(), 0, nullptr)) {
    throw ImageIoError("cannot write PNG '" + path.string() + "': " + image.message);
  }
}

/// Writes an image in [-1, 1] as 8-bit PNG using round(255 * (v + 1) / 2).
inline void encode_image(const Image& img, const std::filesystem::path& path) {
  write_png(path, image_to_raster(img));
}

inline Image decode_image(const std::filesystem::path& path, std::size_t channels = 3) {
  const auto ext = path.extension().string();
  if (ext != ".png" && ext != ".PNG") throw ImageIoError("unsupported image format: " + path.string());
  return raster_to_image(read_png(path, channels));
}

// ---------------------------------------------------------------------------
// Geometry
// ---------------------------------------------------------------------------

/// Largest centered square.
inline Image center_crop_square(const Image& img) {
  const auto side = std::min(img.height, img.width);
  const auto top = (img.height - side) / 2, left = (img.width - side) / 2;
  Image out(img.channels, side, side);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < side; ++i)
      for (std::size_t j = 0; j < side; ++j) out.at(c, i, j) = img.at(c, top + i, left + j);
  return out;
}

/// Bilinear resampling with half-pixel centers; identity when sizes match.
inline Image resize_bilinear(const Image& img, std::size_t height, std::size_t width) {
  if (img.height == height && img.width == width) return img;
  Image out(img.channels, height, width);
  const double sy = static_cast<double>(img.height) / static_cast<double>(height);
  const double sx = static_cast<double>(img.width) / static_cast<double>(width);
  for (std::size_t i = 0; i < height; ++i) {
    const double y = std::clamp((static_cast<double>(i) + 0.5) * sy - 0.5, 0.0,
                                static_cast<double>(img.height - 1));
    const auto y0 = static_cast<std::size_t>(y);
    const auto y1 = std::min(y0 + 1, img.height - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < width; ++j) {
      const double x = std::clamp((static_cast<double>(j) + 0.5) * sx - 0.5, 0.0,
                                  static_cast<double>(img.width - 1));
      const auto x0 = static_cast<std::size_t>(x);
      const auto x1 = std::min(x0 + 1, img.width - 1);
      const double fx = x - static_cast<double>(x0);
      for (std::size_t c = 0; c < img.channels; ++c) {
        const double top = img.at(c, y0, x0) * (1 - fx) + img.at(c, y0, x1) * fx;
        const double bottom = img.at(c, y1, x0) * (1 - fx) + img.at(c, y1, x1) * fx;
        out.at(c, i, j) = top * (1 - fy) + bottom * fy;
      }
    }
  }
  return out;
}

inline Image flip_horizontal(const Image& img) {
  Image out(img.channels, img.height, img.width);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t i = 0; i < img.height; ++i)
      for (std::size_t j = 0; j < img.width; ++j) out.at(c, i, j) = img.at(c, i, img.width - 1 - j);
  return out;
}

/// Center crop to a square, then resize to size x size.
inline Image preprocess(const Image& img, std::size_t size) {
  return resize_bilinear(center_crop_square(img), size, size);
}

}  // namespace latent_inpaint
