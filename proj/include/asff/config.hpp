#pragma once

// Run configuration: one JSON document describes a training run or a
// comparison sweep. Parsing is strict; every key must exist in the default
// document, and errors carry the dotted field path.

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "asff/errors.hpp"
#include "asff/fusion.hpp"
#include "asff/loss.hpp"
#include "asff/model.hpp"
#include "asff/optimizer.hpp"
#include "asff/pyramid.hpp"
#include "asff/scene.hpp"
#include "asff/targets.hpp"

namespace asff {

using Json = nlohmann::ordered_json;

inline constexpr const char* kToolVersion = "0.1.0";

// "ignore" trains sum fusion with adjacent-level ignore regions.
enum class RunFusion { asff, sum, concat, ignore };

inline std::string to_string(RunFusion f) {
  switch (f) {
    case RunFusion::asff: return "asff";
    case RunFusion::sum: return "sum";
    case RunFusion::concat: return "concat";
    case RunFusion::ignore: return "ignore";
  }
  return "?";
}

inline std::string to_string(ResizeMode m) { return m == ResizeMode::real ? "real" : "identity"; }
inline std::string to_string(Interpolation m) { return m == Interpolation::bilinear ? "bilinear" : "nearest"; }
inline std::string to_string(IgnoreMode m) {
  switch (m) {
    case IgnoreMode::off: return "off";
    case IgnoreMode::center_only: return "center_only";
    case IgnoreMode::area: return "area";
  }
  return "?";
}

struct DataConfig {
  SceneConfig scene;
  std::size_t train_scenes = 256;
  std::size_t val_scenes = 128;
  std::size_t analysis_scenes = 8;
  std::uint64_t train_seed = 1;
  std::uint64_t val_seed = 2;
  std::uint64_t analysis_seed = 3;
};

struct RandomShapeConfig {
  bool enabled = false;
  std::vector<std::size_t> sizes{48, 64, 80};
};

struct ArmSpec {
  std::string name;
  Json overrides;  // top-level keys applied over the base config
};

struct RunConfig {
  RunFusion fusion = RunFusion::asff;
  double epsilon_ignore = 0.2;
  IgnoreMode ignore_mode = IgnoreMode::area;
  std::vector<std::uint64_t> seeds{1};
  bool deterministic = true;
  std::string output_dir = "runs/default";
  DataConfig data;
  ScheduleConfig schedule;
  SgdConfig sgd;
  std::size_t batch_size = 8;
  ModelConfig model;  // model.fusion is derived from `fusion`
  LossConfig loss;
  LevelThresholds thresholds;
  DecodeConfig decode;
  RandomShapeConfig random_shapes;
  std::vector<ArmSpec> arms;

  std::size_t epochs() const { return static_cast<std::size_t>(schedule.total_epochs); }

  ModelConfig model_config() const {
    ModelConfig m = model;
    switch (fusion) {
      case RunFusion::asff: m.fusion = FusionMode::asff; break;
      case RunFusion::concat: m.fusion = FusionMode::concat; break;
      case RunFusion::sum:
      case RunFusion::ignore: m.fusion = FusionMode::sum; break;
    }
    return m;
  }

  IgnoreConfig ignore_config() const {
    if (fusion != RunFusion::ignore) return {};
    return {epsilon_ignore, ignore_mode};
  }
};

namespace detail {

template <typename E, std::size_t N>
E parse_enum(const std::string& path, const std::string& value, const std::array<E, N>& options) {
  std::string allowed;
  for (E e : options) {
    if (to_string(e) == value) return e;
    allowed += (allowed.empty() ? "" : "|") + to_string(e);
  }
  throw ConfigurationError(path + ": expected one of " + allowed + ", got \"" + value + "\"");
}

template <typename V>
V read(const Json& j, const std::string& path) {
  try {
    if constexpr (std::is_same_v<V, bool>) {
      if (!j.is_boolean()) throw ConfigurationError(path + ": expected a boolean");
    } else if constexpr (std::is_unsigned_v<V>) {
      if (!j.is_number_unsigned()) throw ConfigurationError(path + ": expected a non-negative integer");
    } else if constexpr (std::is_arithmetic_v<V>) {
      if (!j.is_number()) throw ConfigurationError(path + ": expected a number");
    } else if constexpr (std::is_same_v<V, std::string>) {
      if (!j.is_string()) throw ConfigurationError(path + ": expected a string");
    }
    return j.get<V>();
  } catch (const Json::exception& e) {
    throw ConfigurationError(path + ": " + e.what());
  }
}

template <typename V, std::size_t N>
std::array<V, N> read_array(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != N) {
    throw ConfigurationError(path + ": expected an array of " + std::to_string(N) + " values");
  }
  std::array<V, N> out{};
  for (std::size_t i = 0; i < N; ++i) out[i] = read<V>(j[i], path + "[" + std::to_string(i) + "]");
  return out;
}

template <typename V>
std::vector<V> read_vector(const Json& j, const std::string& path) {
  if (!j.is_array()) throw ConfigurationError(path + ": expected an array");
  std::vector<V> out;
  for (std::size_t i = 0; i < j.size(); ++i) out.push_back(read<V>(j[i], path + "[" + std::to_string(i) + "]"));
  return out;
}

// Every key of `user` must exist in `reference`; objects are checked
// recursively. Arrays and scalars are leaves.
inline void check_known_keys(const Json& user, const Json& reference, const std::string& path) {
  if (!user.is_object()) throw ConfigurationError((path.empty() ? "config" : path) + ": expected an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!reference.contains(key)) throw ConfigurationError("unknown config key: " + here);
    if (reference[key].is_object()) check_known_keys(value, reference[key], here);
  }
}

// Recursive merge; arrays and scalars in `patch` replace those in `base`.
inline void merge_into(Json& base, const Json& patch) {
  for (const auto& [key, value] : patch.items()) {
    if (value.is_object() && base.contains(key) && base[key].is_object()) {
      merge_into(base[key], value);
    } else {
      base[key] = value;
    }
  }
}

}  // namespace detail

inline Json to_json(const RunConfig& c) {
  Json j;
  j["tool_version"] = kToolVersion;
  j["fusion_mode"] = to_string(c.fusion);
  j["epsilon_ignore"] = c.epsilon_ignore;
  j["ignore_mode"] = to_string(c.ignore_mode);
  j["seeds"] = c.seeds;
  j["deterministic"] = c.deterministic;
  j["output_dir"] = c.output_dir;

  const SceneConfig& s = c.data.scene;
  Json scene;
  scene["image_size"] = s.image_size;
  scene["max_objects"] = s.max_objects;
  scene["mixture"] = s.mixture;
  scene["side_ranges"] = s.side_range;
  scene["noise_std"] = s.noise_std;
  scene["max_retries"] = s.max_retries;
  scene["train_scenes"] = c.data.train_scenes;
  scene["val_scenes"] = c.data.val_scenes;
  scene["analysis_scenes"] = c.data.analysis_scenes;
  scene["train_seed"] = c.data.train_seed;
  scene["val_seed"] = c.data.val_seed;
  scene["analysis_seed"] = c.data.analysis_seed;
  j["scene"] = scene;

  j["schedule"] = {{"lr_max", c.schedule.lr_max},
                   {"lr_min", c.schedule.lr_min},
                   {"warmup_epochs", c.schedule.warmup_epochs},
                   {"total_epochs", c.schedule.total_epochs}};
  j["optimizer"] = {{"momentum", c.sgd.momentum}, {"weight_decay", c.sgd.weight_decay}, {"batch_size", c.batch_size}};
  j["model"] = {{"in_channels", c.model.in_channels},
                {"stem_channels", c.model.stem_channels},
                {"channels", c.model.channels},
                {"resize", to_string(c.model.resize)},
                {"interpolation", to_string(c.model.interpolation)},
                {"detach_weights", c.model.detach_weights},
                {"objectness_prior", c.model.objectness_prior}};
  j["loss"] = {{"box_weight", c.loss.box_weight}};
  j["assign"] = {{"thresholds", std::array<double, 2>{c.thresholds.first, c.thresholds.second}}};
  j["eval"] = {{"score_threshold", c.decode.score_threshold},
               {"max_detections", c.decode.max_detections},
               {"nms_threshold", c.decode.nms_threshold}};
  j["random_shapes"] = {{"enabled", c.random_shapes.enabled}, {"sizes", c.random_shapes.sizes}};
  Json arms = Json::array();
  for (const ArmSpec& a : c.arms) {
    Json arm = a.overrides;
    arm["name"] = a.name;
    arms.push_back(arm);
  }
  j["arms"] = arms;
  return j;
}

inline void validate(const RunConfig& c) {
  validate(c.data.scene);
  validate(c.model_config());
  validate(c.ignore_config());
  if (!(c.epsilon_ignore >= 0.0 && c.epsilon_ignore <= 1.0)) {
    throw ConfigurationError("epsilon_ignore: must lie in [0, 1], got " + std::to_string(c.epsilon_ignore));
  }
  if (c.seeds.empty()) throw ConfigurationError("seeds: at least one seed is required");
  if (c.batch_size == 0) throw ConfigurationError("optimizer.batch_size: must be positive");
  if (c.data.train_scenes == 0) throw ConfigurationError("scene.train_scenes: must be positive");
  if (c.data.val_scenes == 0) throw ConfigurationError("scene.val_scenes: must be positive");
  if (c.data.analysis_scenes == 0) throw ConfigurationError("scene.analysis_scenes: must be positive");
  if (c.data.scene.image_size % 16 != 0) throw ConfigurationError("scene.image_size: must be a multiple of 16");
  const double epochs = c.schedule.total_epochs;
  if (!(epochs >= 0.0) || epochs != std::floor(epochs)) {
    throw ConfigurationError("schedule.total_epochs: must be a non-negative integer");
  }
  if (epochs > 0) validate(c.schedule);
  if (!(c.thresholds.first < c.thresholds.second)) {
    throw ConfigurationError("assign.thresholds: must be strictly increasing");
  }
  if (!(c.decode.nms_threshold >= 0.0 && c.decode.nms_threshold <= 1.0)) {
    throw ConfigurationError("eval.nms_threshold: must lie in [0, 1]");
  }
  for (std::size_t size : c.random_shapes.sizes) {
    if (size == 0 || size % 16 != 0) throw ConfigurationError("random_shapes.sizes: entries must be multiples of 16");
  }
  if (c.random_shapes.enabled && c.random_shapes.sizes.empty()) {
    throw ConfigurationError("random_shapes.sizes: must not be empty when enabled");
  }
}

// Reads a complete (already merged) document.
inline RunConfig from_resolved_json(const Json& j) {
  using detail::read;
  RunConfig c;
  // tool_version is informational; any recorded value is accepted.
  if (j.contains("tool_version")) detail::read<std::string>(j["tool_version"], "tool_version");
  c.fusion = detail::parse_enum("fusion_mode", read<std::string>(j.at("fusion_mode"), "fusion_mode"),
                                std::array{RunFusion::asff, RunFusion::sum, RunFusion::concat, RunFusion::ignore});
  c.epsilon_ignore = read<double>(j.at("epsilon_ignore"), "epsilon_ignore");
  c.ignore_mode = detail::parse_enum("ignore_mode", read<std::string>(j.at("ignore_mode"), "ignore_mode"),
                                     std::array{IgnoreMode::off, IgnoreMode::center_only, IgnoreMode::area});
  c.seeds = detail::read_vector<std::uint64_t>(j.at("seeds"), "seeds");
  c.deterministic = read<bool>(j.at("deterministic"), "deterministic");
  c.output_dir = read<std::string>(j.at("output_dir"), "output_dir");

  const Json& s = j.at("scene");
  SceneConfig& sc = c.data.scene;
  sc.image_size = read<std::size_t>(s.at("image_size"), "scene.image_size");
  sc.max_objects = read<std::size_t>(s.at("max_objects"), "scene.max_objects");
  sc.mixture = detail::read_array<double, 3>(s.at("mixture"), "scene.mixture");
  const Json& ranges = s.at("side_ranges");
  if (!ranges.is_array() || ranges.size() != 3) throw ConfigurationError("scene.side_ranges: expected 3 ranges");
  for (std::size_t k = 0; k < 3; ++k) {
    sc.side_range[k] = detail::read_array<std::size_t, 2>(ranges[k], "scene.side_ranges[" + std::to_string(k) + "]");
  }
  sc.noise_std = read<double>(s.at("noise_std"), "scene.noise_std");
  sc.max_retries = read<std::size_t>(s.at("max_retries"), "scene.max_retries");
  c.data.train_scenes = read<std::size_t>(s.at("train_scenes"), "scene.train_scenes");
  c.data.val_scenes = read<std::size_t>(s.at("val_scenes"), "scene.val_scenes");
  c.data.analysis_scenes = read<std::size_t>(s.at("analysis_scenes"), "scene.analysis_scenes");
  c.data.train_seed = read<std::uint64_t>(s.at("train_seed"), "scene.train_seed");
  c.data.val_seed = read<std::uint64_t>(s.at("val_seed"), "scene.val_seed");
  c.data.analysis_seed = read<std::uint64_t>(s.at("analysis_seed"), "scene.analysis_seed");

  const Json& sch = j.at("schedule");
  c.schedule.lr_max = read<double>(sch.at("lr_max"), "schedule.lr_max");
  c.schedule.lr_min = read<double>(sch.at("lr_min"), "schedule.lr_min");
  c.schedule.warmup_epochs = read<double>(sch.at("warmup_epochs"), "schedule.warmup_epochs");
  c.schedule.total_epochs = read<double>(sch.at("total_epochs"), "schedule.total_epochs");

  const Json& opt = j.at("optimizer");
  c.sgd.momentum = read<double>(opt.at("momentum"), "optimizer.momentum");
  c.sgd.weight_decay = read<double>(opt.at("weight_decay"), "optimizer.weight_decay");
  c.batch_size = read<std::size_t>(opt.at("batch_size"), "optimizer.batch_size");

  const Json& m = j.at("model");
  c.model.in_channels = read<std::size_t>(m.at("in_channels"), "model.in_channels");
  c.model.stem_channels = read<std::size_t>(m.at("stem_channels"), "model.stem_channels");
  c.model.channels = detail::read_array<std::size_t, kLevels>(m.at("channels"), "model.channels");
  c.model.resize = detail::parse_enum("model.resize", read<std::string>(m.at("resize"), "model.resize"),
                                      std::array{ResizeMode::real, ResizeMode::identity});
  c.model.interpolation =
      detail::parse_enum("model.interpolation", read<std::string>(m.at("interpolation"), "model.interpolation"),
                         std::array{Interpolation::bilinear, Interpolation::nearest});
  c.model.detach_weights = read<bool>(m.at("detach_weights"), "model.detach_weights");
  c.model.objectness_prior = read<double>(m.at("objectness_prior"), "model.objectness_prior");

  c.loss.box_weight = read<double>(j.at("loss").at("box_weight"), "loss.box_weight");
  const auto th = detail::read_array<double, 2>(j.at("assign").at("thresholds"), "assign.thresholds");
  c.thresholds = {th[0], th[1]};

  const Json& ev = j.at("eval");
  c.decode.score_threshold = read<double>(ev.at("score_threshold"), "eval.score_threshold");
  c.decode.max_detections = read<std::size_t>(ev.at("max_detections"), "eval.max_detections");
  c.decode.nms_threshold = read<double>(ev.at("nms_threshold"), "eval.nms_threshold");

  c.random_shapes.enabled = read<bool>(j.at("random_shapes").at("enabled"), "random_shapes.enabled");
  c.random_shapes.sizes = detail::read_vector<std::size_t>(j.at("random_shapes").at("sizes"), "random_shapes.sizes");

  const Json& arms = j.at("arms");
  if (!arms.is_array()) throw ConfigurationError("arms: expected an array");
  for (std::size_t i = 0; i < arms.size(); ++i) {
    const std::string path = "arms[" + std::to_string(i) + "]";
    if (!arms[i].is_object()) throw ConfigurationError(path + ": expected an object");
    ArmSpec arm;
    arm.overrides = arms[i];
    if (arm.overrides.contains("name")) {
      arm.name = read<std::string>(arm.overrides["name"], path + ".name");
      arm.overrides.erase("name");
    }
    c.arms.push_back(std::move(arm));
  }
  validate(c);
  return c;
}

// Overlays a user document on the defaults; unknown keys are errors.
inline RunConfig parse_run_config(const Json& user) {
  Json base = to_json(RunConfig{});
  detail::check_known_keys(user, base, "");
  if (user.contains("arms")) {
    Json arm_reference = base;
    for (const char* key : {"arms", "seeds", "output_dir", "tool_version"}) arm_reference.erase(key);
    arm_reference["name"] = "";
    for (std::size_t i = 0; i < user["arms"].size(); ++i) {
      detail::check_known_keys(user["arms"][i], arm_reference, "arms[" + std::to_string(i) + "]");
    }
  }
  detail::merge_into(base, user);
  return from_resolved_json(base);
}

// "--a.b.c=value" style override. The value is read as JSON when it parses,
// otherwise as a string.
inline void apply_override(Json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigurationError("override \"" + assignment + "\": expected key.path=value");
  }
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  Json value = Json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  const Json reference = to_json(RunConfig{});
  const Json* ref = &reference;
  Json* node = &doc;
  std::stringstream parts(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(parts, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    if (!ref->is_object() || !ref->contains(keys[i])) throw ConfigurationError("unknown config key: " + path);
    ref = &(*ref)[keys[i]];
    if (i + 1 == keys.size()) {
      (*node)[keys[i]] = value;
    } else {
      if (!node->contains(keys[i]) || !(*node)[keys[i]].is_object()) (*node)[keys[i]] = Json::object();
      node = &(*node)[keys[i]];
    }
  }
}

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigurationError("cannot open config file: " + path.string());
  Json j = Json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigurationError("config file is not valid JSON: " + path.string());
  return j;
}

inline RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                                 const std::vector<std::string>& overrides = {}) {
  Json user = path ? read_json_file(*path) : Json::object();
  for (const std::string& o : overrides) apply_override(user, o);
  return parse_run_config(user);
}

// Config of one compare arm: the base with the arm's overrides on top.
inline RunConfig arm_config(const RunConfig& base, const ArmSpec& arm) {
  Json doc = to_json(base);
  doc["arms"] = Json::array();
  detail::merge_into(doc, arm.overrides);
  return from_resolved_json(doc);
}

inline std::string arm_label(const RunConfig& cfg, const ArmSpec& arm) {
  if (!arm.name.empty()) return arm.name;
  if (cfg.fusion == RunFusion::ignore) {
    std::ostringstream s;
    s << "ignore_eps" << cfg.epsilon_ignore;
    return s.str();
  }
  return to_string(cfg.fusion);
}

}  // namespace asff
