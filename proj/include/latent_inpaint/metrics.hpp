#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "latent_inpaint/dataset.hpp"
#include "latent_inpaint/image.hpp"

namespace latent_inpaint {

inline constexpr double kPeakIntensity = 255.0;

struct MetricReport {
  double mse = 0.0;   // 8-bit intensity units squared
  double psnr = 0.0;  // dB
  double ssim = 0.0;
};

/// Image values quantized to the 8-bit scale, channel-planar.
inline std::vector<double> intensities(const Image& img) {
  std::vector<double> out(img.values.size());
  std::transform(img.values.begin(), img.values.end(), out.begin(),
                 [](double v) { return static_cast<double>(to_byte(v)); });
  return out;
}

inline double mse(const Image& x, const Image& y) {
  if (!x.same_shape(y)) throw ShapeError("mse: image shapes differ");
  const auto a = intensities(x), b = intensities(y);
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) acc += (a[k] - b[k]) * (a[k] - b[k]);
  return acc / static_cast<double>(a.size());
}

/// 10 log10(255^2 / mse); +infinity for mse == 0.
inline double psnr(double mse_value) {
  if (mse_value < 0.0 || std::isnan(mse_value)) throw std::invalid_argument("psnr: mse must be >= 0");
  if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(kPeakIntensity * kPeakIntensity / mse_value);
}

struct SsimOptions {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;

  double c1() const { return (k1 * kPeakIntensity) * (k1 * kPeakIntensity); }
  double c2() const { return (k2 * kPeakIntensity) * (k2 * kPeakIntensity); }
  double c3() const { return c2() / 2.0; }
};

/// Channel mean of the 8-bit intensities, one value per pixel.
inline std::vector<double> luminance(const Image& img) {
  const auto q = intensities(img);
  std::vector<double> out(img.pixels(), 0.0);
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t k = 0; k < img.pixels(); ++k) out[k] += q[c * img.pixels() + k];
  for (auto& v : out) v /= static_cast<double>(img.channels);
  return out;
}

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double center = static_cast<double>(size - 1) / 2.0;
  double total = 0.0;
  for (std::size_t k = 0; k < size; ++k) {
    const double d = static_cast<double>(k) - center;
    g[k] = std::exp(-d * d / (2.0 * sigma * sigma));
    total += g[k];
  }
  for (auto& v : g) v /= total;
  return g;
}

struct SsimMap {
  std::size_t height = 0;  // number of window rows
  std::size_t width = 0;
  std::vector<double> values;
};

/// Local SSIM for every fully contained window position (stride 1). Uses
/// l * (c * s), where with C3 = C2 / 2 the product c * s reduces to
/// (2 sigma_xy + C2) / (sigma_x^2 + sigma_y^2 + C2).
inline SsimMap ssim_map(const Image& x, const Image& y, const SsimOptions& opt = {}) {
  if (!x.same_shape(y)) throw ShapeError("ssim: image shapes differ");
  if (x.height < opt.window || x.width < opt.window) throw ShapeError("ssim: image smaller than window");
  const auto a = luminance(x), b = luminance(y);
  const auto g = gaussian_window(opt.window, opt.sigma);
  const auto h = x.height, w = x.width, win = opt.window;
  const auto oh = h - win + 1, ow = w - win + 1;

  // Horizontal then vertical pass over the five moment images.
  auto filter = [&](auto&& value) {
    std::vector<double> rows(h * ow, 0.0);
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < win; ++k) s += g[k] * value(i * w + j + k);
        rows[i * ow + j] = s;
      }
    std::vector<double> out(oh * ow, 0.0);
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < win; ++k) s += g[k] * rows[(i + k) * ow + j];
        out[i * ow + j] = s;
      }
    return out;
  };
  const auto mx = filter([&](std::size_t k) { return a[k]; });
  const auto my = filter([&](std::size_t k) { return b[k]; });
  const auto mxx = filter([&](std::size_t k) { return a[k] * a[k]; });
  const auto myy = filter([&](std::size_t k) { return b[k] * b[k]; });
  const auto mxy = filter([&](std::size_t k) { return a[k] * b[k]; });

  const double c1 = opt.c1(), c2 = opt.c2();
  SsimMap map{oh, ow, std::vector<double>(oh * ow)};
  for (std::size_t k = 0; k < map.values.size(); ++k) {
    const double vx = mxx[k] - mx[k] * mx[k];
    const double vy = myy[k] - my[k] * my[k];
    const double cov = mxy[k] - mx[k] * my[k];
    const double l = (2.0 * mx[k] * my[k] + c1) / (mx[k] * mx[k] + my[k] * my[k] + c1);
    const double cs = (2.0 * cov + c2) / (vx + vy + c2);
    map.values[k] = l * cs;
  }
  return map;
}

inline double ssim(const Image& x, const Image& y, const SsimOptions& opt = {}) {
  const auto map = ssim_map(x, y, opt);
  double acc = 0.0;
  for (double v : map.values) acc += v;
  return acc / static_cast<double>(map.values.size());
}

inline MetricReport evaluate_pair(const Image& result, const Image& truth) {
  MetricReport r;
  r.mse = mse(result, truth);
  r.psnr = psnr(r.mse);
  r.ssim = ssim(result, truth);
  return r;
}

struct MetricRow {
  std::string filename;
  MetricReport metrics;
};

struct EvaluationReport {
  std::vector<MetricRow> rows;  // sorted by filename
  MetricReport mean;            // column means of rows
};

/// Compares every PNG in `result_dir` with the same-named PNG in
/// `truth_dir`; both directories must hold the same file names.
inline EvaluationReport evaluate_pair_set(const std::filesystem::path& result_dir,
                                          const std::filesystem::path& truth_dir) {
  namespace fs = std::filesystem;
  auto list = [](const fs::path& dir) {
    if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
    std::set<std::string> names;
    for (const auto& e : fs::directory_iterator(dir)) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".png" || ext == ".PNG")) names.insert(e.path().filename().string());
    }
    return names;
  };
  const auto results = list(result_dir), truths = list(truth_dir);
  for (const auto& n : results)
    if (!truths.count(n)) throw DataError("no ground truth for " + n);
  for (const auto& n : truths)
    if (!results.count(n)) throw DataError("no result for " + n);
  if (results.empty()) throw DataError("no PNG files to evaluate");

  EvaluationReport report;
  for (const auto& name : results) {
    report.rows.push_back({name, evaluate_pair(decode_image(result_dir / name), decode_image(truth_dir / name))});
  }
  const double n = static_cast<double>(report.rows.size());
  for (const auto& row : report.rows) {
    report.mean.mse += row.metrics.mse;
    report.mean.psnr += row.metrics.psnr;
    report.mean.ssim += row.metrics.ssim;
  }
  report.mean.mse /= n;
  report.mean.psnr /= n;
  report.mean.ssim /= n;
  return report;
}

inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// CSV with header filename,mse,psnr_db,ssim; one row per image and a final
/// row named "mean" holding the column means.
inline void write_metrics_csv(const EvaluationReport& report, const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "filename,mse,psnr_db,ssim\n";
  auto row = [&](const std::string& name, const MetricReport& m) {
    out << name << ',' << format_metric(m.mse) << ',' << format_metric(m.psnr) << ',' << format_metric(m.ssim)
        << '\n';
  };
  for (const auto& r : report.rows) row(r.filename, r.metrics);
  row("mean", report.mean);
  if (!out) throw DataError("cannot write " + path.string());
}

}  // namespace latent_inpaint
