// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "atd/data.hpp"
#include "atd/training.hpp"

namespace atd {

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& what, std::string key) : std::runtime_error(what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

/// Everything a CLI run needs. Every field has a default; see README for the
/// key table.
struct RunConfig {
  Task task = Task::Regression;
  std::string out_dir = "out";
  std::string data_dir = "out";
  double train_fraction = 0.8;
  std::string eval_split = "test";  // train | test | all

  SyntheticSpec synth;
  ModelConfig model;
  TrainConfig train;
  std::uint64_t model_seed = 42;
};

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

inline double to_real(const std::string& key, const std::string& v) {
  double out = 0.0;
  if (!parse_double(v, out) || !std::isfinite(out)) throw ConfigError("config: key '" + key + "' expects a number, got '" + v + "'", key);
  return out;
}

inline std::uint64_t to_uint(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config: key '" + key + "' expects a non-negative integer, got '" + v + "'", key);
  }
  return out;
}

inline std::size_t to_size(const std::string& key, const std::string& v, std::size_t min) {
  const auto n = to_uint(key, v);
  if (n < min) throw ConfigError("config: key '" + key + "' must be >= " + std::to_string(min), key);
  return static_cast<std::size_t>(n);
}

}  // namespace detail

/// Applies one key=value pair. Unknown keys and malformed values raise a
/// ConfigError naming the key.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  using namespace detail;
  using Setter = std::function<void(RunConfig&, const std::string&)>;
  static const std::map<std::string, Setter, std::less<>> setters = {
      {"task",
       [](RunConfig& c, const std::string& v) {
         if (v == "regression") c.task = Task::Regression;
         else if (v == "classification") c.task = Task::Classification;
         else throw ConfigError("config: key 'task' must be regression or classification, got '" + v + "'", "task");
       }},
      {"out.dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; }},
      {"data.dir", [](RunConfig& c, const std::string& v) { c.data_dir = v; }},
      {"data.train_fraction",
       [](RunConfig& c, const std::string& v) {
         c.train_fraction = to_real("data.train_fraction", v);
         if (!(c.train_fraction > 0 && c.train_fraction < 1)) {
           throw ConfigError("config: key 'data.train_fraction' must be in (0, 1)", "data.train_fraction");
         }
       }},
      {"eval.split",
       [](RunConfig& c, const std::string& v) {
         if (v != "train" && v != "test" && v != "all") {
           throw ConfigError("config: key 'eval.split' must be train, test or all", "eval.split");
         }
         c.eval_split = v;
       }},
      {"synth.seed", [](RunConfig& c, const std::string& v) { c.synth.seed = to_uint("synth.seed", v); }},
      {"synth.samples", [](RunConfig& c, const std::string& v) { c.synth.samples = to_size("synth.samples", v, 2); }},
      {"synth.window", [](RunConfig& c, const std::string& v) { c.synth.steps = to_size("synth.window", v, 1); }},
      {"synth.channels", [](RunConfig& c, const std::string& v) { c.synth.channels = to_size("synth.channels", v, 1); }},
      {"synth.height", [](RunConfig& c, const std::string& v) { c.synth.height = to_size("synth.height", v, 1); }},
      {"synth.width", [](RunConfig& c, const std::string& v) { c.synth.width = to_size("synth.width", v, 1); }},
      {"synth.a", [](RunConfig& c, const std::string& v) { c.synth.a = to_real("synth.a", v); }},
      {"synth.b", [](RunConfig& c, const std::string& v) { c.synth.b = to_real("synth.b", v); }},
      {"synth.noise_std",
       [](RunConfig& c, const std::string& v) {
         c.synth.noise_std = to_real("synth.noise_std", v);
         if (c.synth.noise_std < 0) throw ConfigError("config: key 'synth.noise_std' must be >= 0", "synth.noise_std");
       }},
      {"synth.observation_noise",
       [](RunConfig& c, const std::string& v) {
         c.synth.observation_noise = to_real("synth.observation_noise", v);
         if (c.synth.observation_noise < 0) {
           throw ConfigError("config: key 'synth.observation_noise' must be >= 0", "synth.observation_noise");
         }
       }},
      {"synth.classes",
       [](RunConfig& c, const std::string& v) {
         c.synth.classes = to_size("synth.classes", v, 2);
       }},
      {"model.variant",
       [](RunConfig& c, const std::string& v) {
         if (v == "fused") c.model.variant = Variant::Fused;
         else if (v == "series") c.model.variant = Variant::SeriesOnly;
         else if (v == "image") c.model.variant = Variant::ImageOnly;
         else throw ConfigError("config: key 'model.variant' must be fused, series or image", "model.variant");
       }},
      {"model.d", [](RunConfig& c, const std::string& v) { c.model.d = to_size("model.d", v, 2); }},
      {"model.d_h", [](RunConfig& c, const std::string& v) { c.model.d_h = to_size("model.d_h", v, 0); }},
      {"model.rounds", [](RunConfig& c, const std::string& v) { c.model.rounds = to_size("model.rounds", v, 1); }},
      {"model.epsilon",
       [](RunConfig& c, const std::string& v) {
         c.model.epsilon = to_real("model.epsilon", v);
         if (!(c.model.epsilon > 0)) throw ConfigError("config: key 'model.epsilon' must be > 0", "model.epsilon");
       }},
      {"model.hidden", [](RunConfig& c, const std::string& v) { c.model.hidden = to_size("model.hidden", v, 1); }},
      {"model.channels",
       [](RunConfig& c, const std::string& v) { c.model.conv_channels = to_size("model.channels", v, 1); }},
      {"model.kernel",
       [](RunConfig& c, const std::string& v) {
         c.model.kernel = to_size("model.kernel", v, 1);
         if (c.model.kernel % 2 == 0) throw ConfigError("config: key 'model.kernel' must be odd", "model.kernel");
       }},
      {"model.blocks", [](RunConfig& c, const std::string& v) { c.model.blocks = to_size("model.blocks", v, 0); }},
      {"model.seed", [](RunConfig& c, const std::string& v) { c.model_seed = to_uint("model.seed", v); }},
      {"train.lr",
       [](RunConfig& c, const std::string& v) {
         c.train.learning_rate = to_real("train.lr", v);
         if (c.train.learning_rate < 0) throw ConfigError("config: key 'train.lr' must be >= 0", "train.lr");
       }},
      {"train.momentum",
       [](RunConfig& c, const std::string& v) {
         c.train.momentum = to_real("train.momentum", v);
         if (!(c.train.momentum >= 0 && c.train.momentum < 1)) {
           throw ConfigError("config: key 'train.momentum' must be in [0, 1)", "train.momentum");
         }
       }},
      {"train.epochs", [](RunConfig& c, const std::string& v) { c.train.epochs = to_size("train.epochs", v, 0); }},
      {"train.batch_size",
       [](RunConfig& c, const std::string& v) { c.train.batch_size = to_size("train.batch_size", v, 1); }},
      {"train.seed", [](RunConfig& c, const std::string& v) { c.train.seed = to_uint("train.seed", v); }},
  };
  auto it = setters.find(key);
  if (it == setters.end()) throw ConfigError("config: unknown key '" + key + "'", key);
  it->second(cfg, value);
}

/// Flat key=value text, one key per line, '#' starts a comment.
inline RunConfig parse_run_config(std::istream& in) {
  RunConfig cfg;
  bool d_h_set = false;
  bool classes_set = false;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const std::string body = detail::trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + " is not key=value: '" + body + "'", body);
    }
    const std::string key = detail::trim(std::string_view(body).substr(0, eq));
    const std::string value = detail::trim(std::string_view(body).substr(eq + 1));
    apply_config_entry(cfg, key, value);
    d_h_set = d_h_set || (key == "model.d_h" && cfg.model.d_h != 0);
    classes_set = classes_set || key == "synth.classes";
  }
  if (!d_h_set) cfg.model.d_h = cfg.model.d;
  if (cfg.task == Task::Classification) {
    if (!classes_set) cfg.synth.classes = 3;
    cfg.model.outputs = cfg.synth.classes;
  } else {
    cfg.synth.classes = 0;
    cfg.model.outputs = 1;
  }
  cfg.model.input_dim = kSeriesColumns;
  cfg.model.image_channels = cfg.synth.channels;
  cfg.synth.input_dim = kSeriesColumns;
  cfg.train.task = cfg.task;
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  return parse_run_config(in);
}

}  // namespace atd
