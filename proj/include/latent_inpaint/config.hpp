#pragma once

#include <fstream>
#include <stdexcept>
#include <string>

#include "json.hpp"
#include "latent_inpaint/inpaint.hpp"
#include "latent_inpaint/networks.hpp"
#include "latent_inpaint/wgan.hpp"

// JSON mirrors of the configuration structs. Reading merges onto the
// current values: absent keys keep their defaults, unknown keys are errors.

namespace latent_inpaint {

using Json = nlohmann::json;

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

template <class T>
void read_field(const Json& j, const char* key, T& field, std::size_t& used) {
  if (auto it = j.find(key); it != j.end()) {
    try {
      field = it->get<T>();
    } catch (const Json::exception& e) {
      throw ConfigError(std::string("config field '") + key + "': " + e.what());
    }
    ++used;
  }
}

inline void require_all_used(const Json& j, std::size_t used, const char* section) {
  if (!j.is_object()) throw ConfigError(std::string("config section '") + section + "' must be an object");
  if (used != j.size()) {
    throw ConfigError(std::string("unknown key in config section '") + section + "'");
  }
}

}  // namespace detail

inline Json to_json(const NetworkConfig& c) {
  return {{"latent_dim", c.latent_dim},   {"image_size", c.image_size},   {"image_channels", c.image_channels},
          {"base_size", c.base_size},     {"base_channels", c.base_channels}, {"norm_eps", c.norm_eps}};
}

inline void merge_json(const Json& j, NetworkConfig& c) {
  std::size_t used = 0;
  detail::read_field(j, "latent_dim", c.latent_dim, used);
  detail::read_field(j, "image_size", c.image_size, used);
  detail::read_field(j, "image_channels", c.image_channels, used);
  detail::read_field(j, "base_size", c.base_size, used);
  detail::read_field(j, "base_channels", c.base_channels, used);
  detail::read_field(j, "norm_eps", c.norm_eps, used);
  detail::require_all_used(j, used, "network");
}

inline Json to_json(const TrainConfig& c) {
  return {{"iterations", c.iterations},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"adam_beta1", c.adam_beta1},
          {"adam_beta2", c.adam_beta2},
          {"adam_eps", c.adam_eps},
          {"latent_dim", c.latent_dim},
          {"gp_lambda", c.gp_lambda},
          {"critic_steps_per_gen", c.critic_steps_per_gen},
          {"seed", c.seed},
          {"hflip_augment", c.hflip_augment},
          {"checkpoint_every", c.checkpoint_every}};
}

inline void merge_json(const Json& j, TrainConfig& c) {
  std::size_t used = 0;
  detail::read_field(j, "iterations", c.iterations, used);
  detail::read_field(j, "batch_size", c.batch_size, used);
  detail::read_field(j, "learning_rate", c.learning_rate, used);
  detail::read_field(j, "adam_beta1", c.adam_beta1, used);
  detail::read_field(j, "adam_beta2", c.adam_beta2, used);
  detail::read_field(j, "adam_eps", c.adam_eps, used);
  detail::read_field(j, "latent_dim", c.latent_dim, used);
  detail::read_field(j, "gp_lambda", c.gp_lambda, used);
  detail::read_field(j, "critic_steps_per_gen", c.critic_steps_per_gen, used);
  detail::read_field(j, "seed", c.seed, used);
  detail::read_field(j, "hflip_augment", c.hflip_augment, used);
  detail::read_field(j, "checkpoint_every", c.checkpoint_every, used);
  detail::require_all_used(j, used, "train");
}

inline Json to_json(const InpaintConfig& c) {
  return {{"alpha", c.alpha},           {"beta", c.beta},           {"eta", c.eta},
          {"window", c.window},         {"iterations", c.iterations}, {"adam_lr", c.adam_lr},
          {"adam_beta1", c.adam_beta1}, {"adam_beta2", c.adam_beta2}, {"adam_eps", c.adam_eps},
          {"z_clamp", {c.z_min, c.z_max}}, {"restarts", c.restarts},  {"seed", c.seed}};
}

/// `beta` defaults to 1 - alpha when the document sets alpha without beta.
inline void merge_json(const Json& j, InpaintConfig& c) {
  std::size_t used = 0;
  detail::read_field(j, "alpha", c.alpha, used);
  if (j.contains("alpha") && !j.contains("beta")) c.beta = 1.0 - c.alpha;
  detail::read_field(j, "beta", c.beta, used);
  detail::read_field(j, "eta", c.eta, used);
  detail::read_field(j, "window", c.window, used);
  detail::read_field(j, "iterations", c.iterations, used);
  detail::read_field(j, "adam_lr", c.adam_lr, used);
  detail::read_field(j, "adam_beta1", c.adam_beta1, used);
  detail::read_field(j, "adam_beta2", c.adam_beta2, used);
  detail::read_field(j, "adam_eps", c.adam_eps, used);
  if (auto it = j.find("z_clamp"); it != j.end()) {
    if (!it->is_array() || it->size() != 2) throw ConfigError("config field 'z_clamp' must be [min, max]");
    c.z_min = (*it)[0].get<double>();
    c.z_max = (*it)[1].get<double>();
    ++used;
  }
  detail::read_field(j, "restarts", c.restarts, used);
  detail::read_field(j, "seed", c.seed, used);
  detail::require_all_used(j, used, "inpaint");
}

/// Whole run configuration: {"network": ..., "train": ..., "inpaint": ...}.
struct RunConfig {
  NetworkConfig network;
  TrainConfig train;
  InpaintConfig inpaint;

  Json to_json() const {
    return {{"network", latent_inpaint::to_json(network)},
            {"train", latent_inpaint::to_json(train)},
            {"inpaint", latent_inpaint::to_json(inpaint)}};
  }

  void merge(const Json& j) {
    if (!j.is_object()) throw ConfigError("config document must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (key == "network") {
        merge_json(value, network);
      } else if (key == "train") {
        merge_json(value, train);
      } else if (key == "inpaint") {
        merge_json(value, inpaint);
      } else {
        throw ConfigError("unknown config section '" + key + "'");
      }
    }
  }
};

inline Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path + ": " + e.what());
  }
}

}  // namespace latent_inpaint
