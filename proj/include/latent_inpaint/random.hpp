#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

namespace latent_inpaint {

/// Generator seeded from a tuple of counters (seed, iteration, stream, ...).
/// Every random draw of training and inpainting goes through here, so any
/// draw is a pure function of its coordinates.
inline std::mt19937_64 derive_rng(std::initializer_list<std::uint64_t> coords) {
  std::vector<std::uint32_t> words;
  words.reserve(coords.size() * 2);
  for (auto c : coords) {
    words.push_back(static_cast<std::uint32_t>(c));
    words.push_back(static_cast<std::uint32_t>(c >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  return std::mt19937_64(seq);
}

inline std::vector<double> normal_samples(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

inline std::vector<double> uniform_samples(std::mt19937_64& rng, std::size_t n, double lo = 0.0,
                                           double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

}  // namespace latent_inpaint
