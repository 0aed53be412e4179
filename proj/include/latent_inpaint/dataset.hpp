#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/image.hpp"
#include "latent_inpaint/tensor.hpp"

namespace latent_inpaint {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Immutable set of equally sized images in [-1, 1].
struct Dataset {
  std::size_t channels = 0;
  std::size_t size = 0;
  std::vector<Image> images;
  // Horizontal flips are drawn per sample at batch time, never materialized.
  bool augment_hflip = false;
  std::vector<std::filesystem::path> sources;
  std::size_t skipped = 0;

  static Dataset from_images(std::vector<Image> images, bool augment_hflip = false) {
    if (images.empty()) throw DataError("dataset is empty");
    Dataset d;
    d.channels = images.front().channels;
    d.size = images.front().height;
    for (const auto& img : images) {
      if (img.channels != d.channels || img.height != d.size || img.width != d.size) {
        throw DataError("dataset images must share one square shape");
      }
      for (double v : img.values) {
        if (!(v >= -1.0 && v <= 1.0)) throw DataError("dataset values must lie in [-1, 1]");
      }
    }
    d.images = std::move(images);
    d.augment_hflip = augment_hflip;
    return d;
  }

  std::vector<std::string> manifest() const {
    std::vector<std::string> lines;
    lines.push_back("images: " + std::to_string(images.size()));
    lines.push_back("skipped_unreadable: " + std::to_string(skipped));
    lines.push_back("shape: " + std::to_string(channels) + "x" + std::to_string(size) + "x" +
                    std::to_string(size));
    lines.push_back("preprocess: center crop to square; bilinear resize to " + std::to_string(size) +
                    "x" + std::to_string(size) + "; bytes mapped to [-1,1] by v/127.5-1");
    lines.push_back(std::string("augment: ") +
                    (augment_hflip ? "random horizontal flip per sample at batch time" : "none"));
    for (const auto& s : sources) lines.push_back("source: " + s.string());
    return lines;
  }

  void write_manifest(const std::filesystem::path& path) const {
    std::ofstream out(path);
    for (const auto& line : manifest()) out << line << '\n';
    if (!out) throw DataError("cannot write manifest " + path.string());
  }
};

/// Loads every PNG under `dir` (sorted by path). Unreadable files are
/// skipped and counted.
inline Dataset load_dataset(const std::filesystem::path& dir, std::size_t size = 64,
                            bool augment_hflip = true, std::size_t channels = 3) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw DataError("dataset directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto ext = entry.path().extension().string();
    if (entry.is_regular_file() && (ext == ".png" || ext == ".PNG")) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  Dataset d;
  d.channels = channels;
  d.size = size;
  d.augment_hflip = augment_hflip;
  for (const auto& f : files) {
    try {
      d.images.push_back(preprocess(decode_image(f, channels), size));
      d.sources.push_back(f);
    } catch (const ImageIoError&) {
      ++d.skipped;
    }
  }
  if (d.images.empty()) throw DataError("no decodable images in " + dir.string());
  return d;
}

/// Batch [B, C, S, S] drawn uniformly with replacement; flips per sample
/// when the dataset enables augmentation.
inline Tensor sample_batch(const Dataset& data, std::size_t batch, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, data.images.size() - 1);
  std::bernoulli_distribution flip(0.5);
  const auto per = data.channels * data.size * data.size;
  std::vector<double> values(batch * per);
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& img = data.images[pick(rng)];
    const bool mirrored = data.augment_hflip && flip(rng);
    double* dst = values.data() + b * per;
    for (std::size_t c = 0; c < data.channels; ++c)
      for (std::size_t i = 0; i < data.size; ++i)
        for (std::size_t j = 0; j < data.size; ++j)
          dst[(c * data.size + i) * data.size + j] = img.at(c, i, mirrored ? data.size - 1 - j : j);
  }
  return Tensor({batch, data.channels, data.size, data.size}, std::move(values));
}

}  // namespace latent_inpaint
