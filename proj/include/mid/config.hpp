#pragma once

// Flat key=value run configuration with [section] headers and '#' comments.
// Unknown sections or keys are errors: a typo must not silently fall back to
// a default.

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "mid/backbone.hpp"
#include "mid/losses.hpp"

namespace mid {

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct RunConfig {
  // [data]
  std::string source = "synthetic";  // synthetic | directory
  std::string root;                  // dataset directory when source=directory
  int ids = 16;
  int imgs_per_id = 8;
  int height = 72;
  int width = 36;
  std::string difficulty = "easy";  // easy | hard
  int pad = 10;

  // [network]
  NetworkConfig net;

  // [loss]
  LossWeights loss;
  std::string triplet = "auto";  // auto | center | batchhard

  // [mixup]
  std::string scheme = "mam";  // mam | fix | beta | none
  float noise_sigma = 0.05f;

  // [optim]
  float lr = 0.05f;
  float momentum = 0.9f;
  std::vector<int> milestones = {20, 45};
  float lr_gamma = 0.1f;
  float agent_lr = 1e-3f;

  // [train]
  int epochs = 30;
  int p_ids = 8;
  int k_imgs = 4;
  uint64_t seed = 1;
  int iters_per_epoch = 0;  // 0 derives it from the train-split size
  int agent_cadence = 1;    // agent update every n batches
  float eval_fraction = 0.25f;
  std::string out_dir = "run_out";

  // batch-hard replaces the center loss only in the fully stripped baseline
  std::string effective_triplet() const {
    if (triplet != "auto") return triplet;
    return (scheme == "none" && net.n_d == 0) ? "batchhard" : "center";
  }
};

namespace detail {

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline int cfg_int(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  }
}

inline uint64_t cfg_u64(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const uint64_t r = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a non-negative integer");
  }
}

inline float cfg_float(const std::string& key, const std::string& v) {
  try {
    size_t pos = 0;
    const float r = std::stof(v, &pos);
    if (pos != v.size()) throw std::invalid_argument(v);
    return r;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  }
}

inline bool cfg_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + v + "' is not a boolean");
}

inline std::vector<int> cfg_int_list(const std::string& key, const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(cfg_int(key, item));
  }
  return out;
}

}  // namespace detail

inline void validate_config(const RunConfig& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError("config: " + msg);
  };
  require(c.source == "synthetic" || c.source == "directory",
          "data.source must be synthetic or directory, got '" + c.source + "'");
  require(c.source != "directory" || !c.root.empty(), "data.root required for directory source");
  require(c.difficulty == "easy" || c.difficulty == "hard",
          "data.difficulty must be easy or hard, got '" + c.difficulty + "'");
  require(c.ids >= 2, "data.ids must be at least 2");
  require(c.imgs_per_id >= 1, "data.imgs_per_id must be positive");
  require(c.height >= 24 && c.width >= 12, "data.height/width too small (min 24x12)");
  require(c.pad >= 0, "data.pad must be non-negative");
  require(c.scheme == "mam" || c.scheme == "fix" || c.scheme == "beta" || c.scheme == "none",
          "mixup.scheme must be one of mam, fix, beta, none, got '" + c.scheme + "'");
  require(c.triplet == "auto" || c.triplet == "center" || c.triplet == "batchhard",
          "loss.triplet must be auto, center, or batchhard, got '" + c.triplet + "'");
  require(c.noise_sigma >= 0.0f, "mixup.noise_sigma must be non-negative");
  require(c.lr > 0.0f && c.agent_lr > 0.0f, "learning rates must be positive");
  require(c.momentum >= 0.0f && c.momentum < 1.0f, "optim.momentum must be in [0,1)");
  require(c.lr_gamma > 0.0f && c.lr_gamma <= 1.0f, "optim.gamma must be in (0,1]");
  require(c.epochs >= 0, "train.epochs must be non-negative");
  require(c.p_ids >= 2, "train.p_ids must be at least 2 (losses need multiple identities)");
  require(c.k_imgs >= 1, "train.k_imgs must be positive");
  require(c.iters_per_epoch >= 0, "train.iters_per_epoch must be non-negative");
  require(c.agent_cadence >= 1, "train.agent_cadence must be positive");
  require(c.eval_fraction >= 0.0f && c.eval_fraction < 1.0f,
          "train.eval_fraction must be in [0,1)");
  require(!c.out_dir.empty(), "train.out_dir must not be empty");
  require(c.loss.rho >= 0.0f, "loss.rho must be non-negative");
  require(c.loss.xi >= 0.0f && c.loss.xi < 1.0f, "loss.xi must be in [0,1)");
  for (float l : {c.loss.lambda1, c.loss.lambda2, c.loss.lambda3, c.loss.lambda4, c.loss.lambda5,
                  c.loss.lambda6})
    require(l >= 0.0f, "loss weights must be non-negative");
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  RunConfig c;
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": malformed section header");
      section = detail::trim(line.substr(1, line.size() - 2));
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string val = detail::trim(line.substr(eq + 1));
    const std::string full = section + "." + key;

    if (full == "data.source") c.source = val;
    else if (full == "data.root") c.root = val;
    else if (full == "data.ids") c.ids = detail::cfg_int(full, val);
    else if (full == "data.imgs_per_id") c.imgs_per_id = detail::cfg_int(full, val);
    else if (full == "data.height") c.height = detail::cfg_int(full, val);
    else if (full == "data.width") c.width = detail::cfg_int(full, val);
    else if (full == "data.difficulty") c.difficulty = val;
    else if (full == "data.pad") c.pad = detail::cfg_int(full, val);
    else if (full == "network.n_blocks") c.net.n_blocks = detail::cfg_int(full, val);
    else if (full == "network.n_d") c.net.n_d = detail::cfg_int(full, val);
    else if (full == "network.channels") c.net.channels = detail::cfg_int_list(full, val);
    else if (full == "network.g_parts") c.net.G_parts = detail::cfg_int(full, val);
    else if (full == "network.feature_dim") c.net.feature_dim = detail::cfg_int(full, val);
    else if (full == "network.k_bases") c.net.K_bases = detail::cfg_int(full, val);
    else if (full == "network.last_stride") c.net.last_stride = detail::cfg_int(full, val);
    else if (full == "network.per_modality_bn") c.net.per_modality_bn = detail::cfg_bool(full, val);
    else if (full == "loss.lambda1") c.loss.lambda1 = detail::cfg_float(full, val);
    else if (full == "loss.lambda2") c.loss.lambda2 = detail::cfg_float(full, val);
    else if (full == "loss.lambda3") c.loss.lambda3 = detail::cfg_float(full, val);
    else if (full == "loss.lambda4") c.loss.lambda4 = detail::cfg_float(full, val);
    else if (full == "loss.lambda5") c.loss.lambda5 = detail::cfg_float(full, val);
    else if (full == "loss.lambda6") c.loss.lambda6 = detail::cfg_float(full, val);
    else if (full == "loss.rho") c.loss.rho = detail::cfg_float(full, val);
    else if (full == "loss.xi") c.loss.xi = detail::cfg_float(full, val);
    else if (full == "loss.triplet") c.triplet = val;
    else if (full == "mixup.scheme") c.scheme = val;
    else if (full == "mixup.noise_sigma") c.noise_sigma = detail::cfg_float(full, val);
    else if (full == "optim.lr") c.lr = detail::cfg_float(full, val);
    else if (full == "optim.momentum") c.momentum = detail::cfg_float(full, val);
    else if (full == "optim.milestones") c.milestones = detail::cfg_int_list(full, val);
    else if (full == "optim.gamma") c.lr_gamma = detail::cfg_float(full, val);
    else if (full == "optim.agent_lr") c.agent_lr = detail::cfg_float(full, val);
    else if (full == "train.epochs") c.epochs = detail::cfg_int(full, val);
    else if (full == "train.p_ids") c.p_ids = detail::cfg_int(full, val);
    else if (full == "train.k_imgs") c.k_imgs = detail::cfg_int(full, val);
    else if (full == "train.seed") c.seed = detail::cfg_u64(full, val);
    else if (full == "train.iters_per_epoch") c.iters_per_epoch = detail::cfg_int(full, val);
    else if (full == "train.agent_cadence") c.agent_cadence = detail::cfg_int(full, val);
    else if (full == "train.eval_fraction") c.eval_fraction = detail::cfg_float(full, val);
    else if (full == "train.out_dir") c.out_dir = val;
    else throw ConfigError("config line " + std::to_string(line_no) + ": unknown key '" + full + "'");
  }
  c.net.input_h = c.height;
  c.net.input_w = c.width;
  validate_config(c);
  return c;
}

}  // namespace mid
