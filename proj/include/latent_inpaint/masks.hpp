#pragma once

#include <algorithm>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/image.hpp"

namespace latent_inpaint {

enum class MaskKind { central, three_squares, file };

struct Rect {
  std::size_t top = 0;
  std::size_t left = 0;
  std::size_t height = 0;
  std::size_t width = 0;

  bool overlaps(const Rect& o) const {
    return top < o.top + o.height && o.top < top + height && left < o.left + o.width &&
           o.left < left + width;
  }
};

struct MaskParams {
  // central: hole side; 0 means size / 2.
  std::size_t central_side = 0;
  // three_squares: explicit rectangles; empty means the default layout.
  std::vector<Rect> rects;
  // file: 8-bit grayscale PNG, 255 = known, 0 = hole.
  std::filesystem::path path;
};

/// Default three-rectangle layout on a 64 x 64 grid: three 12 x 20 holes,
/// 720 pixels total. Other sizes scale the layout proportionally.
inline std::vector<Rect> default_three_rects(std::size_t size) {
  const std::vector<Rect> base{{8, 6, 12, 20}, {24, 38, 12, 20}, {42, 14, 12, 20}};
  std::vector<Rect> out;
  for (const auto& r : base) {
    auto s = [size](std::size_t v) { return std::max<std::size_t>(1, v * size / 64); };
    out.push_back({r.top * size / 64, r.left * size / 64, s(r.height), s(r.width)});
  }
  return out;
}

inline Mask holes_from_rects(std::size_t size, const std::vector<Rect>& rects) {
  for (std::size_t a = 0; a < rects.size(); ++a) {
    const auto& r = rects[a];
    if (r.height == 0 || r.width == 0 || r.top + r.height > size || r.left + r.width > size) {
      throw std::invalid_argument("mask rectangle " + std::to_string(a) + " is out of bounds");
    }
    for (std::size_t b = 0; b < a; ++b) {
      if (r.overlaps(rects[b])) {
        throw std::invalid_argument("mask rectangles " + std::to_string(b) + " and " +
                                    std::to_string(a) + " overlap");
      }
    }
  }
  Mask m(size, size, 1);
  for (const auto& r : rects)
    for (std::size_t i = r.top; i < r.top + r.height; ++i)
      for (std::size_t j = r.left; j < r.left + r.width; ++j) m.at(i, j) = 0;
  return m;
}

inline Mask load_mask(const std::filesystem::path& path) {
  auto raster = read_png(path, 1);
  Mask m(raster.height, raster.width);
  for (std::size_t k = 0; k < raster.bytes.size(); ++k) {
    const auto b = raster.bytes[k];
    if (b != 0 && b != 255) {
      throw ImageIoError("mask '" + path.string() + "' is not binary (value " + std::to_string(b) + ")");
    }
    m.known[k] = b == 255 ? 1 : 0;
  }
  return m;
}

inline void save_mask(const Mask& m, const std::filesystem::path& path) {
  Raster8 r{1, m.height, m.width, std::vector<std::uint8_t>(m.known.size())};
  for (std::size_t k = 0; k < m.known.size(); ++k) r.bytes[k] = m.known[k] ? 255 : 0;
  write_png(path, r);
}

inline Mask make_mask(MaskKind kind, std::size_t size = 64, const MaskParams& params = {}) {
  if (kind == MaskKind::file) return load_mask(params.path);
  if (size < 8) throw std::invalid_argument("mask size must be at least 8");
  if (kind == MaskKind::central) {
    const auto side = params.central_side ? params.central_side : size / 2;
    if (side > size) throw std::invalid_argument("central hole larger than the image");
    const auto off = (size - side) / 2;
    return holes_from_rects(size, {{off, off, side, side}});
  }
  return holes_from_rects(size, params.rects.empty() ? default_three_rects(size) : params.rects);
}

inline MaskKind parse_mask_kind(const std::string& name) {
  if (name == "central") return MaskKind::central;
  if (name == "three_squares") return MaskKind::three_squares;
  if (name == "file") return MaskKind::file;
  throw std::invalid_argument("unknown mask kind '" + name + "'");
}

}  // namespace latent_inpaint
